"""
Simulating thick-slice acquisitions
===================================

A low-resolution volume is the high-resolution one filtered along z with a
slice profile and then kept at every ``s``-th slice. Gaussian and rectangular
profiles are available.
"""
import numpy as np

from sliceprof import metrics, simulate
from sliceprof.simulate import TruthProfileSpec

hr = simulate.make_phantom(seed=0, extents=96)

##############################################################################
# Truth profiles live on the high-resolution grid with 21 taps.

for kind, width in [("gaussian", 2.0), ("gaussian", 4.0), ("rect", 3.0), ("rect", 5.0)]:
    p = simulate.make_profile(TruthProfileSpec(kind, width))
    print(f"{kind:8s} requested {width} mm, measured FWHM {metrics.fwhm(p):.3f} mm")

##############################################################################
# Degrade at scale 4. The z axis shrinks by the valid-filter margin and then
# by the stride.

p = simulate.make_profile(TruthProfileSpec("gaussian", 4.0))
lr = simulate.degrade_volume(hr, p, 4)
print("HR", hr.extents, "-> LR", lr.extents, "spacing", lr.spacing)

##############################################################################
# Filtering is linear, so scaling the input scales the output.

lr3 = simulate.degrade_volume(hr.with_data(3 * hr.data), p, 4)
print("linearity error", np.abs(lr3.data - 3 * lr.data).max())
