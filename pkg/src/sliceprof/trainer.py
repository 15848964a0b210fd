"""Alternating discriminator/generator optimization that estimates the profile."""

from __future__ import annotations

import io
import json
import logging
import struct
import warnings
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import gan
from . import tensorcore as tc
from .gan import Profile
from .metrics import MeasurementError, fwhm
from .volume import Volume, gradient_weights, sample_batch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SLPFCKPT"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("iteration", "g_adv", "d_loss", "centroid", "boundary", "fwhm_mm")


class TrainingAborted(RuntimeError):
    """A loss became non-finite."""

    def __init__(self, iteration, components):
        self.iteration = iteration
        self.components = components
        terms = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {terms}")


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 15000
    batch_size: int = 64
    patch_lr_size: int = 16
    scale: Optional[int] = None
    lambda_centroid: float = 1.0
    lambda_boundary: float = 10.0
    weight_decay: float = 0.05
    ema_beta: float = 0.99
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    taps: int = gan.DEFAULT_TAPS
    intensity_scale: float = 300.0
    generator_objective: str = "nonsaturating"
    seed: int = 0
    report_every: int = 100
    history_size: int = 100_000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scale is not None and self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.generator_objective not in gan.GENERATOR_OBJECTIVES:
            raise ValueError(f"unknown generator objective {self.generator_objective!r}")

    def patch_width(self, scale):
        return gan.expected_patch_width(self.patch_lr_size, scale, self.taps)


@dataclass
class TrainState:
    iteration: int
    generator: gan.GeneratorParams
    discriminator: gan.DiscriminatorParams
    gen_opt: dict
    disc_opt: dict
    ema: Profile
    rng: np.random.Generator
    history: deque = field(default_factory=deque)


def resolve_scale(volume, config):
    if config.scale is not None:
        return config.scale
    s = volume.scale_factor()
    if s == 1:
        warnings.warn("volume is isotropic (scale 1); the estimate is only a sanity check",
                      stacklevel=3)
    return s


def discriminator_inputs(i1, i2, profile, scale, phases1, phases2, target):
    """Stack ``G(I1)^T`` (real LR along rows) over ``G(I2)`` (degraded along rows)."""
    g1 = tc.transpose(gan.degrade_to(i1, profile, scale, phases1, target), (0, 2, 1))
    g2 = gan.degrade_to(i2, profile, scale, phases2, target)
    return tc.concat([g1, g2])


def init_state(config, spacing_mm=1.0):
    rng = np.random.default_rng(config.seed)
    g = gan.init_generator(rng, config.taps)
    d = gan.init_discriminator(rng)
    return TrainState(
        iteration=0,
        generator=g,
        discriminator=d,
        gen_opt={k: tc.AdamState.zeros_like(p) for k, p in g.named().items()},
        disc_opt={k: tc.AdamState.zeros_like(p) for k, p in d.named().items()},
        ema=gan.profile_of(g, spacing_mm),
        rng=rng,
        history=deque(maxlen=config.history_size),
    )


class Trainer:
    """Owns the prepared volume, sampling weights and a :class:`TrainState`."""

    def __init__(self, volume, config, state=None, progress: Optional[Callable] = None):
        self.config = config
        self.scale = resolve_scale(volume, config)
        self.spacing_mm = volume.spacing[0]
        self.volume = volume.normalized(target=config.intensity_scale)
        self.width = config.patch_width(self.scale)
        self.weights = gradient_weights(self.volume, config.patch_lr_size, self.width)
        self.state = state if state is not None else init_state(config, self.spacing_mm)
        self.progress = progress

    def _adam(self, params, grads, opt, weight_decay):
        c = self.config
        new_params, new_opt = {}, {}
        for (name, p), g in zip(params.items(), grads):
            new_params[name], new_opt[name] = tc.adam_step(
                p, g, opt[name], c.lr, c.beta1, c.beta2, c.adam_eps, weight_decay)
        return new_params, new_opt

    def step(self):
        c, st = self.config, self.state
        rng = st.rng
        b, s, n = c.batch_size, self.scale, c.patch_lr_size
        i1 = sample_batch(self.volume, self.weights, rng, b)
        i2 = sample_batch(self.volume, self.weights, rng, b)
        ph1 = rng.integers(0, s, b)
        ph2 = rng.integers(0, s, b)

        # discriminator step on detached generator output
        k_now = gan.generator_profile(st.generator).detach()
        d_in = discriminator_inputs(i1, i2, k_now, s, ph1, ph2, n)
        d_params = st.discriminator.named()
        with tc.Tape() as tape:
            probs, new_us = gan.discriminate(st.discriminator, d_in)
            d_loss = gan.adv_loss_discriminator(probs[:b], probs[b:])
        d_grads = tc.backward(tape, d_loss, list(d_params.values()))
        new_d, st.disc_opt = self._adam(d_params, d_grads, st.disc_opt, 0.0)
        st.discriminator = st.discriminator.replace(new_d, new_us)

        # generator step against the updated, frozen discriminator
        g_params = st.generator.named()
        d_frozen = gan.frozen(st.discriminator)
        with tc.Tape() as tape:
            k = gan.generator_profile(st.generator)
            probs, _ = gan.discriminate(d_frozen, discriminator_inputs(i1, i2, k, s, ph1, ph2, n))
            g_adv = gan.GENERATOR_OBJECTIVES[c.generator_objective](probs[:b], probs[b:])
            lc = gan.centroid_loss(k)
            lb = gan.boundary_loss(k)
            total = g_adv + c.lambda_centroid * lc + c.lambda_boundary * lb
        components = {"g_adv": g_adv.item(), "d_loss": d_loss.item(),
                      "centroid": lc.item(), "boundary": lb.item()}
        if not all(np.isfinite(v) for v in components.values()):
            raise TrainingAborted(st.iteration + 1, components)
        g_grads = tc.backward(tape, total, list(g_params.values()))
        g_grads = tc.clip_grad_norm(g_grads, c.clip_norm)
        new_g, st.gen_opt = self._adam(g_params, g_grads, st.gen_opt, c.weight_decay)
        st.generator = st.generator.replace(new_g)

        st.ema = gan.ema_update(st.ema, gan.profile_of(st.generator, self.spacing_mm), c.ema_beta)
        st.iteration += 1
        try:
            width = fwhm(st.ema)
        except MeasurementError:
            width = float("nan")
        record = (st.iteration, components["g_adv"], components["d_loss"],
                  components["centroid"], components["boundary"], width)
        st.history.append(record)
        if c.report_every and st.iteration % c.report_every == 0:
            self._report(record)
        return record

    def _report(self, record):
        entry = dict(zip(HISTORY_FIELDS, record))
        log.info("iter %(iteration)d  G_adv %(g_adv).4f  D %(d_loss).4f  "
                 "Lc %(centroid).4g  Lb %(boundary).4g  fwhm %(fwhm_mm).3f mm", entry)
        if self.progress is not None:
            self.progress(entry)

    def run(self, until=None):
        until = self.config.iterations if until is None else until
        while self.state.iteration < until:
            self.step()
        return self.state.ema


def train(volume, config, progress_sink=None):
    """Estimate the relative slice profile of ``volume``.

    Returns the EMA profile (spacing = in-plane spacing) and the loss history
    as a list of ``HISTORY_FIELDS`` tuples.
    """
    trainer = Trainer(volume, config, progress=progress_sink)
    profile = trainer.run()
    return profile, list(trainer.state.history)


def history_csv(history):
    buf = io.StringIO()
    buf.write(",".join(HISTORY_FIELDS) + "\n")
    for row in history:
        buf.write(f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")
    return buf.getvalue()


# --- checkpoints -----------------------------------------------------------

def _state_arrays(state, config):
    arrays = {}
    for prefix, params in (("g", state.generator.named()), ("d", state.discriminator.named())):
        for name, t in params.items():
            arrays[f"{prefix}.{name}"] = t.data
    arrays["g.impulse_bias"] = state.generator.impulse_bias
    for i, u in enumerate(state.discriminator.us):
        arrays[f"d.u{i}"] = u
    for prefix, opt in (("go", state.gen_opt), ("do", state.disc_opt)):
        for name, a in opt.items():
            arrays[f"{prefix}.{name}.m"] = a.m
            arrays[f"{prefix}.{name}.v"] = a.v
            arrays[f"{prefix}.{name}.t"] = np.array([a.t], dtype=np.int64)
    arrays["ema"] = state.ema.taps
    arrays["history"] = np.array(list(state.history), dtype=np.float64).reshape(-1, len(HISTORY_FIELDS))
    meta = {
        "iteration": state.iteration,
        "ema_spacing_mm": state.ema.spacing_mm,
        "n_gen_layers": len(state.generator.weights),
        "n_disc_layers": len(state.discriminator.weights),
        "rng": state.rng.bit_generator.state,
        "config": asdict(config),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    return {k: np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")) for k, v in arrays.items()}


def checkpoint_save(state, path, config):
    """Write a versioned, checksummed single-file snapshot of ``state``."""
    buf = io.BytesIO()
    np.savez(buf, **_state_arrays(state, config))
    payload = buf.getvalue()
    header = CHECKPOINT_MAGIC + struct.pack("<IIQ", CHECKPOINT_VERSION, zlib.crc32(payload), len(payload))
    Path(path).write_bytes(header + payload)


def checkpoint_load(path):
    """Return ``(state, config)`` from a file written by :func:`checkpoint_save`."""
    blob = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 16
    if len(blob) < head or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, crc, length = struct.unpack("<IIQ", blob[len(CHECKPOINT_MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is incompatible "
                              f"with version {CHECKPOINT_VERSION}")
    payload = blob[head:]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    with np.load(io.BytesIO(payload)) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    config = TrainConfig(**meta["config"])

    def t(key):
        return tc.Tensor(arrays[key], requires_grad=True)

    ng, nd = meta["n_gen_layers"], meta["n_disc_layers"]
    g = gan.GeneratorParams(t("g.seed"), [t(f"g.w{i}") for i in range(ng)],
                            [t(f"g.b{i}") for i in range(ng)], arrays["g.impulse_bias"])
    d = gan.DiscriminatorParams([t(f"d.w{i}") for i in range(nd)],
                                [t(f"d.b{i}") for i in range(nd)],
                                [arrays[f"d.u{i}"] for i in range(nd)])

    def opt(prefix, names):
        return {n: tc.AdamState(arrays[f"{prefix}.{n}.m"].copy(), arrays[f"{prefix}.{n}.v"].copy(),
                                int(arrays[f"{prefix}.{n}.t"][0])) for n in names}

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    history = deque((tuple(float(v) if j else int(v) for j, v in enumerate(row))
                     for row in arrays["history"]), maxlen=config.history_size)
    state = TrainState(
        iteration=meta["iteration"],
        generator=g,
        discriminator=d,
        gen_opt=opt("go", g.named()),
        disc_opt=opt("do", d.named()),
        ema=Profile(arrays["ema"], meta["ema_spacing_mm"]),
        rng=rng,
        history=history,
    )
    return state, config
