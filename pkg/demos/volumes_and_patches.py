"""
Volumes, masks and gradient-weighted patches
============================================

Training never sees a whole volume, only thin 2D patches cut through the
through-plane axis. Patch centers are drawn in proportion to the local image
gradient so flat background is rarely chosen.
"""
import tempfile
from pathlib import Path

import numpy as np

from sliceprof import simulate, volume

##############################################################################
# A procedural isotropic phantom stands in for a high-resolution scan.

hr = simulate.make_phantom(seed=0, extents=64)
print("extents", hr.extents, "spacing", hr.spacing)

##############################################################################
# Round trip through both on-disk formats: raw float32 plus a JSON sidecar,
# and a single-file NIfTI-1 volume.

tmp = Path(tempfile.mkdtemp())
volume.save_volume(hr, tmp / "hr.raw")
volume.save_volume(hr, tmp / "hr.nii")
for name in ("hr.raw", "hr.nii"):
    back = volume.load_volume(tmp / name)
    print(name, "max abs diff", np.abs(back.data - hr.data).max())

##############################################################################
# The head mask thresholds at a fraction of the 99th percentile and closes
# small holes.

mask = volume.head_mask(hr, 0.1)
print("mask covers %.1f%% of voxels" % (100 * mask.mean()))

##############################################################################
# Sampling weights and a batch of 16 x 52 patches (16 rows along z).

w = volume.gradient_weights(hr, rows=16, cols=52)
rng = np.random.default_rng(1)
patch, plane, center = volume.sample_patch(hr, w, rng)
print("one patch", patch.shape, "from plane", plane, "centered at", center)
batch = volume.sample_batch(hr, w, rng, 8)
print("batch", batch.shape)
