"""
Scoring an estimate
===================

Four numbers compare an estimated profile against the truth: the FWHM error,
the L1 profile error after centroid alignment, and PSNR and SSIM between the
high-resolution volume degraded by each profile, inside a head mask.
"""
import numpy as np

from sliceprof import metrics, simulate, volume
from sliceprof.simulate import TruthProfileSpec

truth = simulate.make_profile(TruthProfileSpec("gaussian", 4.0))
guess = simulate.make_profile(TruthProfileSpec("gaussian", 3.5))

##############################################################################
# Width and shape.

print("FWHM truth %.3f, guess %.3f" % (metrics.fwhm(truth), metrics.fwhm(guess)))
print("profile error", metrics.profile_error(truth, guess))

##############################################################################
# Profile error ignores a pure shift.

shifted = np.roll(truth.taps, 2)
print("shifted truth error", metrics.profile_error(truth, shifted))

##############################################################################
# Image-domain agreement.

hr = simulate.make_phantom(seed=3, extents=64)
a = simulate.degrade_volume(hr, truth, 2)
b = simulate.degrade_volume(hr, guess, 2)
mask = volume.head_mask(a, 0.1)
print("PSNR %.2f dB, SSIM %.5f" % (metrics.psnr(a.data, b.data, mask), metrics.ssim(a.data, b.data, mask)))
