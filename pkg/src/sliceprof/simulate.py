"""Ground-truth profiles, through-plane degradation and procedural phantoms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .gan import DEFAULT_TAPS, Profile, ProfileError
from .volume import Volume

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
KINDS = ("gaussian", "rect")


@dataclass(frozen=True)
class TruthProfileSpec:
    kind: str
    fwhm_mm: float
    spacing_mm: float = 1.0
    taps: int = DEFAULT_TAPS


def make_profile(spec):
    """Discretize a Gaussian (point-sampled) or rect (area-sampled) profile.

    >>> make_profile(TruthProfileSpec("rect", 3.0, 1.0, 7)).taps.round(4).tolist()
    [0.0, 0.0, 0.3333, 0.3333, 0.3333, 0.0, 0.0]
    """
    if spec.kind not in KINDS:
        raise ProfileError(f"unknown profile kind {spec.kind!r}; expected one of {KINDS}")
    if spec.taps % 2 == 0:
        raise ProfileError("support length must be odd")
    if not (spec.fwhm_mm > 0 and spec.spacing_mm > 0):
        raise ProfileError("fwhm and spacing must be positive")
    if spec.taps * spec.spacing_mm < 2 * spec.fwhm_mm:
        raise ProfileError(
            f"support of {spec.taps} taps at {spec.spacing_mm} mm does not cover "
            f"twice the FWHM {spec.fwhm_mm} mm")
    pos = (np.arange(spec.taps) - spec.taps // 2) * spec.spacing_mm
    if spec.kind == "gaussian":
        sigma = spec.fwhm_mm * FWHM_TO_SIGMA
        taps = np.exp(-pos**2 / (2.0 * sigma**2))
    else:
        half = spec.fwhm_mm / 2.0
        lo = np.maximum(pos - spec.spacing_mm / 2.0, -half)
        hi = np.minimum(pos + spec.spacing_mm / 2.0, half)
        taps = np.clip(hi - lo, 0.0, None)
    return Profile(taps / taps.sum(), spec.spacing_mm)


def degrade_volume(volume, profile, scale, axis=2):
    """Valid 1D correlation with ``profile`` along ``axis``, then keep every ``scale``-th sample."""
    taps = profile.taps if isinstance(profile, Profile) else np.asarray(profile, dtype=np.float64)
    if scale < 1:
        raise ValueError("scale must be >= 1")
    data = volume.data
    n = data.shape[axis]
    k = taps.size
    if n < k:
        raise ValueError(f"axis {axis} has {n} samples, fewer than the {k}-tap profile")
    moved = np.moveaxis(data, axis, -1)
    out = np.zeros(moved.shape[:-1] + (n - k + 1,))
    for j, t in enumerate(taps):
        out += t * moved[..., j:j + n - k + 1]
    out = np.moveaxis(out[..., ::scale], -1, axis)
    spacing = list(volume.spacing)
    spacing[axis] *= scale
    return Volume(out, spacing)


def make_phantom(seed, extents=(96, 96, 96), correlation_length=2.0,
                 levels=(0.0, 0.5, 1.0), final_sigma=0.5):
    """Isotropic piecewise-constant random texture with three intensity levels.

    White noise is smoothed with an isotropic Gaussian (periodic boundary),
    split at its terciles into ``levels`` and lightly smoothed. No axis is
    special, so patch statistics are exchangeable between axes.
    """
    if isinstance(extents, int):
        extents = (extents,) * 3
    extents = tuple(int(e) for e in extents)
    if min(extents) < 32:
        raise ValueError(f"phantom extents must be at least 32, got {extents}")
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal(extents), correlation_length, mode="wrap")
    cuts = np.quantile(field, [1 / 3, 2 / 3])
    labels = np.digitize(field, cuts)
    data = np.asarray(levels, dtype=np.float64)[labels]
    if final_sigma > 0:
        data = ndimage.gaussian_filter(data, final_sigma, mode="wrap")
    return Volume(data, (1.0, 1.0, 1.0))
