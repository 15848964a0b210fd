"""
The two networks
================

The generator turns a learnable seed tensor into a positive, unit-sum slice
profile. The discriminator scores each pixel of a 2D patch using only a
seven-column window of its own row.
"""
import numpy as np

from sliceprof import gan, metrics
from sliceprof.tensorcore import Tensor

rng = np.random.default_rng(0)

##############################################################################
# At initialization the profile is a narrow peak at the center tap.

g = gan.init_generator(rng)
k = gan.profile_of(g)
print("initial taps", np.round(k.taps[7:14], 3), "FWHM", round(metrics.fwhm(k), 3))

##############################################################################
# Degrading a patch: filter along columns, then keep every ``s``-th column
# starting from a chosen phase.

patch = rng.standard_normal((16, 16 * 2 + 20))
out = gan.degrade_to(patch[None], k, 2, np.array([1]), 16)
print("patch", patch.shape, "-> degraded", out.shape)

##############################################################################
# The discriminator's receptive field is exactly 7 columns. Bumping one input
# pixel changes only outputs within that window of the same row.

d = gan.init_discriminator(rng)
base = rng.standard_normal((3, 20))
before = gan.discriminate(d, base)[0].data
bumped = base.copy()
bumped[1, 10] += 1.0
after = gan.discriminate(d, bumped)[0].data
rows, cols = np.nonzero(np.abs(after - before) > 0)
print("affected row(s)", sorted(set(rows)), "columns", cols.min(), "to", cols.max())

##############################################################################
# Losses: a minimax and a non-saturating form for the generator, centroid and
# boundary penalties on the profile.

p = np.full((2, 4), 0.7)
q = np.full((2, 4), 0.4)
for name, fn in gan.GENERATOR_OBJECTIVES.items():
    print(name, fn(Tensor(p), Tensor(q)).item())
print("centroid", gan.centroid_loss(k).item(), "boundary", gan.boundary_loss(k).item())
