"""Volumes, file I/O, head masks and gradient-weighted patch sampling.

Arrays are indexed ``data[x, y, z]``; ``z`` is the through-plane (low
resolution) axis. On disk, voxel data is stored x-fastest.

Two formats are read:

* raw little-endian float32 data with a JSON sidecar
  ``{"extents": [nx, ny, nz], "spacing_mm": [sx, sy, sz]}`` stored next to it
  with a ``.json`` suffix;
* uncompressed single-file NIfTI-1 (348-byte header, ``n+1`` magic) with
  int16 or float32 voxels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class VolumeError(Exception):
    """Base class for volume input problems."""


class VolumeFormatError(VolumeError):
    pass


class UnsupportedFeatureError(VolumeFormatError):
    pass


class VolumeCorruptError(VolumeError):
    pass


class PatchSizeError(VolumeError):
    pass


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with nonempty extents, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def extents(self):
        return self.data.shape

    def with_data(self, data, spacing=None):
        return Volume(data, self.spacing if spacing is None else spacing)

    def scale_factor(self, tol=1e-3):
        """Integer through-plane to in-plane spacing ratio.

        Raises ``ValueError`` when in-plane spacings differ, the through-plane
        spacing is finer than in-plane, or the ratio is not an integer.
        """
        sx, sy, sz = self.spacing
        if abs(sx - sy) > 1e-6:
            raise ValueError(f"in-plane spacings differ: {sx} vs {sy}")
        if sz < sx - 1e-6:
            raise ValueError(f"through-plane spacing {sz} is finer than in-plane {sx}")
        ratio = sz / sx
        s = int(round(ratio))
        if abs(ratio - s) > tol:
            raise ValueError(f"spacing ratio {ratio:.6f} is not an integer")
        return s

    def normalized(self, percentile=99.0, target=1.0):
        """Copy rescaled so the given intensity percentile maps to ``target``."""
        ref = float(np.percentile(self.data, percentile))
        if ref <= 0:
            ref = float(np.max(np.abs(self.data))) or 1.0
        return self.with_data(self.data * (target / ref))


# --- I/O -------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


def _sidecar_for(path):
    return path.with_suffix(".json")


def load_volume(path):
    path = Path(path)
    if path.suffix == ".json":
        return _load_raw(path.with_suffix(".raw"), path)
    # a .nii next to a raw volume's sidecar is still NIfTI
    if path.suffix != ".nii" and _sidecar_for(path).exists():
        return _load_raw(path, _sidecar_for(path))
    with open(path, "rb") as fh:
        head = fh.read(NIFTI_HEADER_SIZE)
    if head[:2] == b"\x1f\x8b":
        raise UnsupportedFeatureError(f"{path}: compressed volumes are not supported")
    if len(head) >= 4:
        (size_le,) = struct.unpack("<i", head[:4])
        (size_be,) = struct.unpack(">i", head[:4])
        if size_le == NIFTI_HEADER_SIZE:
            return _load_nifti(path)
        if size_be == NIFTI_HEADER_SIZE:
            raise UnsupportedFeatureError(f"{path}: big-endian NIfTI is not supported")
        if size_le == 540:
            raise UnsupportedFeatureError(f"{path}: NIfTI-2 is not supported")
    raise VolumeFormatError(f"{path}: unknown magic bytes {head[:4]!r} and no JSON sidecar")


def _load_raw(data_path, sidecar_path):
    meta = json.loads(Path(sidecar_path).read_text())
    try:
        extents = tuple(int(n) for n in meta["extents"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
    except (KeyError, TypeError, ValueError) as err:
        raise VolumeFormatError(f"{sidecar_path}: malformed sidecar ({err})") from None
    if len(extents) != 3:
        raise VolumeFormatError(f"{sidecar_path}: extents must have 3 entries")
    raw = Path(data_path).read_bytes()
    need = int(np.prod(extents)) * 4
    if len(raw) != need:
        raise VolumeCorruptError(
            f"{data_path}: expected {need} bytes for extents {extents}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(extents, order="F")
    return Volume(data.astype(np.float64), spacing)


def _load_nifti(path):
    blob = Path(path).read_bytes()
    if len(blob) < NIFTI_HEADER_SIZE:
        raise VolumeCorruptError(f"{path}: truncated header")
    magic = blob[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFeatureError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack("<8h", blob[40:56])
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise UnsupportedFeatureError(f"{path}: only 3D volumes are supported (dim={dim})")
    (datatype,) = struct.unpack("<h", blob[70:72])
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFeatureError(f"{path}: NIfTI datatype {datatype} is not supported")
    pixdim = struct.unpack("<8f", blob[76:108])
    (vox_offset,) = struct.unpack("<f", blob[108:112])
    slope, inter = struct.unpack("<2f", blob[112:120])
    extents = tuple(int(d) for d in dim[1:4])
    dtype = _NIFTI_DTYPES[datatype]
    offset = int(vox_offset)
    end = offset + int(np.prod(extents)) * dtype.itemsize
    if offset < NIFTI_HEADER_SIZE or end > len(blob):
        raise VolumeCorruptError(
            f"{path}: data section needs bytes {offset}..{end}, file has {len(blob)}")
    data = np.frombuffer(blob[offset:end], dtype=dtype).reshape(extents, order="F")
    data = data.astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    return Volume(data, spacing)


def save_volume(volume, path):
    """Write ``volume``; ``.nii`` paths get NIfTI-1, anything else raw + sidecar.

    Voxels are stored as float32, so values that came from a file round-trip
    exactly.
    """
    path = Path(path)
    if path.suffix == ".nii":
        _save_nifti(volume, path)
        return
    data_path = path.with_suffix(".raw") if path.suffix == ".json" else path
    data_path.write_bytes(np.asarray(volume.data, dtype="<f4").tobytes(order="F"))
    meta = {"extents": list(volume.extents), "spacing_mm": list(volume.spacing)}
    _sidecar_for(data_path).write_text(json.dumps(meta))


def _save_nifti(volume, path):
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *volume.extents, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # mm
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + body)


# --- masks and sampling ----------------------------------------------------

def head_mask(volume, fraction=0.1):
    """Foreground: voxels at least ``fraction`` of the 99th percentile, then one 6-connected closing."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    ref = float(np.percentile(data, 99))
    if ref <= 0:
        return np.zeros(data.shape, dtype=bool)
    mask = data >= fraction * ref
    # edge padding keeps the closing from eroding the volume border
    padded = np.pad(mask, 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=ndimage.generate_binary_structure(3, 1))
    return closed[1:-1, 1:-1, 1:-1]


PLANES = ("xz", "yz")


@dataclass(frozen=True)
class SampleWeights:
    """Per-plane patch-center weights and their cumulative distributions.

    ``weights[plane]`` has the volume's shape and is zero outside the centers
    whose ``rows x cols`` footprint fits in that plane.
    """

    weights: dict
    cdf: dict
    rows: int
    cols: int


def _valid_center_mask(shape, plane, rows, cols):
    mask = np.zeros(shape, dtype=bool)
    hr_axis = 0 if plane == "xz" else 1
    lo_c, lo_r = cols // 2, rows // 2
    hi_c = shape[hr_axis] - (cols - cols // 2)
    hi_r = shape[2] - (rows - rows // 2)
    if hi_c < lo_c or hi_r < lo_r:
        return mask
    sl = [slice(None)] * 3
    sl[hr_axis] = slice(lo_c, hi_c + 1)
    sl[2] = slice(lo_r, hi_r + 1)
    mask[tuple(sl)] = True
    return mask


def gradient_weights(volume, rows=16, cols=16, sigma=1.0):
    """Sampling weights proportional to the smoothed gradient magnitude at each patch center."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    grads = np.gradient(data)
    mag = np.sqrt(sum(g * g for g in grads))
    mag = ndimage.gaussian_filter(mag, sigma)
    weights, cdf = {}, {}
    for plane in PLANES:
        valid = _valid_center_mask(data.shape, plane, rows, cols)
        if not valid.any():
            hr = "x" if plane == "xz" else "y"
            raise PatchSizeError(
                f"volume {data.shape} too small for {rows}x{cols} patches: need "
                f"{hr} >= {cols} and z >= {rows}")
        w = np.where(valid, mag, 0.0)
        total = w.sum()
        if not total > 0:
            w = valid.astype(np.float64)
            total = w.sum()
        w = w / total
        weights[plane] = w
        c = np.cumsum(w.ravel())
        cdf[plane] = c / c[-1]
    return SampleWeights(weights, cdf, rows, cols)


def patch_origin(shape, plane, center, rows, cols):
    hr_axis = 0 if plane == "xz" else 1
    return center[hr_axis] - cols // 2, center[2] - rows // 2


def extract_patch(data, plane, center, rows, cols):
    """Slab with rows along z and columns along x (``xz``) or y (``yz``)."""
    c0, r0 = patch_origin(data.shape, plane, center, rows, cols)
    x, y, _ = center
    if plane == "xz":
        slab = data[c0:c0 + cols, y, r0:r0 + rows]
    else:
        slab = data[x, c0:c0 + cols, r0:r0 + rows]
    return slab.T


def draw_center(weights, plane, rng):
    cdf = weights.cdf[plane]
    flat = int(np.searchsorted(cdf, rng.random(), side="right"))
    flat = min(flat, cdf.size - 1)
    return np.unravel_index(flat, weights.weights[plane].shape)


def sample_patch(volume, weights, rng, plane=None, rows=None, cols=None):
    """Draw one patch; ``plane=None`` flips a fair coin between ``xz`` and ``yz``.

    Returns ``(patch, plane, center)`` with ``patch`` of shape ``[rows, cols]``.
    """
    rows = weights.rows if rows is None else rows
    cols = weights.cols if cols is None else cols
    if (rows, cols) != (weights.rows, weights.cols):
        raise PatchSizeError("patch size differs from the footprint the weights were built for")
    if plane is None:
        plane = PLANES[int(rng.integers(2))]
    center = draw_center(weights, plane, rng)
    data = volume.data if isinstance(volume, Volume) else volume
    return extract_patch(data, plane, center, rows, cols), plane, center


def sample_batch(volume, weights, rng, n):
    """``n`` patches stacked to ``[n, rows, cols]``."""
    return np.stack([sample_patch(volume, weights, rng)[0] for _ in range(n)])
