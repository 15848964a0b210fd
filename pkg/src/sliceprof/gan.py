"""Profile generator, 1D discriminator and the loss terms that couple them.

The generator never sees image data. It maps a learnable seed tensor through
a linear convolution stack and a softmax to a nonnegative unit-sum kernel
(the relative slice profile), which is then applied to the high-resolution
axis of each patch by :func:`degrade`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

DEFAULT_TAPS = 21
PROB_EPS = 1e-7
LEAKY_SLOPE = 0.1
DISC_WIDTHS = (3, 3, 3, 1, 1)
DISC_CHANNELS = (1, 64, 64, 64, 32, 1)
GEN_CHANNELS = (64, 64, 64, 64, 1)
IMPULSE_LOGIT = 6.0
BIAS_SLOPE = 1.0
BIAS_CURVATURE = 0.1
FINAL_LAYER_SCALE = 0.01


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    """Discrete 1D kernel sampled at ``spacing_mm``; taps are in array order."""

    taps: np.ndarray
    spacing_mm: float = 1.0

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64).reshape(-1)
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "spacing_mm", float(self.spacing_mm))
        if taps.size % 2 == 0:
            raise ProfileError(f"profile length must be odd, got {taps.size}")
        if np.any(taps < 0) or not np.all(np.isfinite(taps)):
            raise ProfileError("profile taps must be finite and nonnegative")
        if abs(taps.sum() - 1.0) > 1e-9:
            raise ProfileError(f"profile taps must sum to 1, got {taps.sum()!r}")
        if not self.spacing_mm > 0:
            raise ProfileError("spacing_mm must be positive")

    def __len__(self):
        return self.taps.size

    @property
    def center(self):
        return self.taps.size // 2

    def offsets_mm(self):
        return (np.arange(self.taps.size) - self.center) * self.spacing_mm

    def to_json(self, **extra):
        doc = {"spacing_mm": self.spacing_mm, "taps": [float(t) for t in self.taps]}
        doc.update(extra)
        return json.dumps(doc, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["offset_mm", "weight"])
        for off, w in zip(self.offsets_mm(), self.taps):
            writer.writerow([repr(float(off)), repr(float(w))])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(np.array(doc["taps"], dtype=np.float64), doc["spacing_mm"])

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if rows and rows[0] == ["offset_mm", "weight"]:
            rows = rows[1:]
        offsets = np.array([float(r[0]) for r in rows])
        taps = np.array([float(r[1]) for r in rows])
        spacing = float(offsets[1] - offsets[0]) if offsets.size > 1 else 1.0
        return cls(taps, spacing)


def save_profile(profile, path, **extra):
    """Write ``path`` (JSON) and a sibling ``.csv``; extra keys go into the JSON only."""
    path = Path(path)
    path.write_text(profile.to_json(**extra))
    path.with_suffix(".csv").write_text(profile.to_csv())


def load_profile(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        return Profile.from_csv(text)
    return Profile.from_json(text)


def load_profile_meta(path):
    """Profile plus any extra JSON keys written alongside it."""
    doc = json.loads(Path(path).read_text())
    prof = Profile(np.array(doc.pop("taps"), dtype=np.float64), doc.pop("spacing_mm"))
    return prof, doc


# --- generator -------------------------------------------------------------

@dataclass
class GeneratorParams:
    seed: Tensor
    weights: list
    biases: list
    impulse_bias: np.ndarray

    @property
    def taps(self):
        return self.seed.shape[-1]

    def named(self):
        out = {"seed": self.seed}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def replace(self, named):
        n = len(self.weights)
        return GeneratorParams(
            named["seed"],
            [named[f"w{i}"] for i in range(n)],
            [named[f"b{i}"] for i in range(n)],
            self.impulse_bias,
        )


def init_generator(rng, taps=DEFAULT_TAPS, channels=GEN_CHANNELS, width=3,
                   slope=BIAS_SLOPE, curvature=BIAS_CURVATURE, impulse_logit=IMPULSE_LOGIT,
                   final_scale=FINAL_LAYER_SCALE):
    """Random generator whose initial output is a narrow centered peak.

    Conv weights use the uniform ``1/sqrt(fan_in)`` rule; the final layer is
    shrunk by ``final_scale`` so the fixed logit bias dominates at start.

    Parameters
    ----------
    slope, curvature : float
        The fixed bias is ``-slope * |j| - curvature * j**2`` for tap offset
        ``j``. The defaults put about half the mass on the center tap, keep
        the neighbours within a few e-folds of each other so the peak can
        widen, and leave the outer taps below 1e-7 so the boundary penalty
        and weight decay do not pull against each other.
    impulse_logit : float
        Used only when ``slope`` and ``curvature`` are both None: a one-hot
        bias of this height at the center tap.
    """
    if taps % 2 == 0:
        raise ProfileError("number of taps must be odd")
    seed = Tensor(rng.standard_normal((1, channels[0], taps)), requires_grad=True)
    weights, biases = [], []
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        bound = 1.0 / np.sqrt(cin * width)
        w = rng.uniform(-bound, bound, (cout, cin, width))
        b = rng.uniform(-bound, bound, cout)
        if i == len(channels) - 2:
            w, b = w * final_scale, b * final_scale
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    if slope is None and curvature is None:
        impulse = np.zeros(taps)
        impulse[taps // 2] = impulse_logit
    else:
        j = np.abs(np.arange(taps) - taps // 2).astype(np.float64)
        impulse = -float(slope or 0.0) * j - float(curvature or 0.0) * j**2
    return GeneratorParams(seed, weights, biases, impulse)


def generator_logits(params):
    x = params.seed
    for w, b in zip(params.weights, params.biases):
        pad = w.shape[-1] // 2
        x = tc.conv1d_valid(tc.pad1d(x, pad, w.shape[-1] - 1 - pad), w)
        x = tc.add(x, tc.reshape(b, (1, -1, 1)))
    x = tc.reshape(x, (x.shape[-1],))
    return tc.add(x, params.impulse_bias)


def generator_profile(params):
    """Differentiable kernel: softmax of conv-stack output plus the fixed logit bias."""
    return tc.softmax(generator_logits(params))


def profile_of(params, spacing_mm=1.0):
    """Non-differentiable :class:`Profile` snapshot of the generator output."""
    taps = generator_profile(params).data.copy()
    # softmax leaves ~1e-16 drift; keep the Profile invariant exact
    return Profile(taps / taps.sum(), spacing_mm)


def _taps_tensor(profile):
    if isinstance(profile, Tensor):
        return profile
    if isinstance(profile, Profile):
        return Tensor(profile.taps)
    return Tensor(np.asarray(profile, dtype=np.float64))


def degrade(patch, profile, scale, phase=0):
    """Blur each row with ``profile`` (valid) and keep every ``scale``-th column.

    Parameters
    ----------
    patch : Tensor or ndarray
        ``[..., cols]``; leading axes are rows / batch.
    profile : Tensor, Profile or array_like
        Kernel taps, length ``K``.
    scale : int
    phase : int or array_like of int
        Downsampling offset; an array gives one phase per entry of the first axis.
    """
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    k = _taps_tensor(profile)
    ntaps = k.shape[-1]
    cols = x.shape[-1]
    phase_arr = np.asarray(phase, dtype=np.intp)
    if np.any(phase_arr < 0) or np.any(phase_arr >= scale):
        raise ValueError(f"phase must lie in [0, {scale})")
    conv_len = cols - ntaps + 1
    target = (conv_len - int(phase_arr.max()) + scale - 1) // scale if conv_len > 0 else 0
    if conv_len < 1 or target < 1:
        raise ValueError(f"patch has {cols} columns; need at least {ntaps} for a {ntaps}-tap profile")
    lead = x.shape[:-1]
    flat = tc.reshape(x, (-1, 1, cols))
    y = tc.conv1d_valid(flat, tc.reshape(k, (1, 1, ntaps)))
    y = tc.reshape(y, lead + (conv_len,))
    if phase_arr.ndim == 0:
        return tc.downsample(y, scale, int(phase_arr))
    # per-item phases must give equal widths
    width = (conv_len - int(phase_arr.max()) + scale - 1) // scale
    idx = phase_arr[:, None] + scale * np.arange(width)[None, :]
    idx = idx.reshape((lead[0],) + (1,) * (len(lead) - 1) + (width,))
    return tc.take_last(y, idx)


def expected_patch_width(target_cols, scale, taps):
    return target_cols * scale + taps - 1


def degrade_to(patch, profile, scale, phase, target_cols):
    """:func:`degrade` with a width check: columns must equal ``target_cols*scale + K - 1``."""
    ntaps = _taps_tensor(profile).shape[-1]
    need = expected_patch_width(target_cols, scale, ntaps)
    cols = np.shape(patch.data if isinstance(patch, Tensor) else patch)[-1]
    if cols != need:
        raise ValueError(f"patch has {cols} columns, expected {need} "
                         f"(= {target_cols}*{scale} + {ntaps} - 1)")
    out = degrade(patch, profile, scale, phase)
    if out.shape[-1] != target_cols:
        out = tc.getitem(out, (Ellipsis, slice(0, target_cols)))
    return out


# --- discriminator ---------------------------------------------------------

@dataclass
class DiscriminatorParams:
    weights: list
    biases: list
    us: list = field(default_factory=list)

    def named(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def replace(self, named, us=None):
        n = len(self.weights)
        return DiscriminatorParams(
            [named[f"w{i}"] for i in range(n)],
            [named[f"b{i}"] for i in range(n)],
            list(self.us if us is None else us),
        )

    @property
    def receptive_field(self):
        return 1 + sum(w.shape[-1] - 1 for w in self.weights)


def init_discriminator(rng, channels=DISC_CHANNELS, widths=DISC_WIDTHS):
    weights, biases, us = [], [], []
    for cin, cout, k in zip(channels[:-1], channels[1:], widths):
        bound = 1.0 / np.sqrt(cin * k)
        weights.append(Tensor(rng.uniform(-bound, bound, (cout, cin, k)), requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, cout), requires_grad=True))
        u = rng.standard_normal(cout)
        us.append(u / np.linalg.norm(u))
    return DiscriminatorParams(weights, biases, us)


def discriminate(params, patches, power_iters=1):
    """Per-pixel probability that each pixel's horizontal context is real LR.

    Parameters
    ----------
    params : DiscriminatorParams
    patches : Tensor or ndarray
        ``[..., rows, cols]`` with ``cols >= 7``.

    Returns
    -------
    probs : Tensor
        ``[..., rows, cols - 6]``.
    us : list of ndarray
        Updated spectral-norm vectors; persist them only on discriminator steps.
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    rf = params.receptive_field
    if x.ndim < 2 or x.shape[-1] < rf:
        raise ValueError(f"discriminator needs at least {rf} columns, got shape {x.shape}")
    lead, cols = x.shape[:-1], x.shape[-1]
    h = tc.reshape(x, (-1, 1, cols))
    new_us = []
    last = len(params.weights) - 1
    for i, (w, b, u) in enumerate(zip(params.weights, params.biases, params.us)):
        wn, u_new, _ = tc.spectral_normalize(w, u, power_iters)
        new_us.append(u_new)
        h = tc.add(tc.conv1d_valid(h, wn), tc.reshape(b, (1, -1, 1)))
        h = tc.leaky_relu(h, LEAKY_SLOPE) if i < last else tc.sigmoid(h)
    return tc.reshape(h, lead + (cols - rf + 1,)), new_us


def frozen(params):
    """Copy of discriminator params with gradients disabled (for generator steps)."""
    return DiscriminatorParams([w.detach() for w in params.weights],
                               [b.detach() for b in params.biases], list(params.us))


# --- losses ----------------------------------------------------------------

def _mean_log(p):
    return tc.mean(tc.log(tc.clamp(p, PROB_EPS, 1.0 - PROB_EPS)))


def _mean_log1m(p):
    return tc.mean(tc.log(tc.clamp(tc.sub(1.0, p), PROB_EPS, 1.0 - PROB_EPS)))


def adv_loss_generator(d_on_transposed, d_on_plain):
    """``mean log D(G(I1)^T) + mean log(1 - D(G(I2)))``; minimized by the generator."""
    return tc.add(_mean_log(d_on_transposed), _mean_log1m(d_on_plain))


def adv_loss_generator_nonsaturating(d_on_transposed, d_on_plain):
    """Same fixed point as :func:`adv_loss_generator` with the labels swapped.

    Minimizes ``-(mean log(1 - D(G(I1)^T)) + mean log D(G(I2)))``, which keeps
    gradients alive while the discriminator is still confident.
    """
    return tc.neg(tc.add(_mean_log1m(d_on_transposed), _mean_log(d_on_plain)))


GENERATOR_OBJECTIVES = {
    "minimax": adv_loss_generator,
    "nonsaturating": adv_loss_generator_nonsaturating,
}


def adv_loss_discriminator(d_on_transposed, d_on_plain):
    """Negated GAN value; minimized by the discriminator.

    Callers pass maps computed from detached generator outputs.
    """
    return tc.neg(adv_loss_generator(d_on_transposed, d_on_plain))


def centroid_loss(profile):
    k = _taps_tensor(profile)
    n = k.shape[-1]
    centroid = tc.sum(tc.mul(k, np.arange(n, dtype=np.float64)))
    d = tc.sub(centroid, float(n // 2))
    return tc.mul(d, d)


def boundary_loss(profile):
    k = _taps_tensor(profile)
    n = k.shape[-1]
    if n < 5:
        raise ProfileError(f"boundary loss needs at least 5 taps, got {n}")
    mask = np.zeros(n)
    mask[[0, 1, n - 2, n - 1]] = 1.0
    return tc.sum(tc.mul(k, mask))


def ema_update(kbar, k, beta):
    """``beta * kbar + (1 - beta) * k``, renormalized to unit sum."""
    if not 0 <= beta < 1:
        raise ValueError("beta must satisfy 0 <= beta < 1")
    if len(kbar) != len(k):
        raise ProfileError("EMA profiles must have the same length")
    taps = beta * kbar.taps + (1.0 - beta) * k.taps
    return Profile(taps / taps.sum(), k.spacing_mm)
