"""Two-branch training loop with a momentum-averaged target network.

Each step draws a batch, makes two independent augmented views per
image, runs the learned branch on the first view under a gradient tape,
and runs the averaged branch on the second view outside any tape so the
consistency target is a constant. Parameters update with decoupled
weight decay Adam under a polynomial learning-rate schedule, after
which the averaged branch takes one momentum step toward the learned
branch.

Checkpoints are a little-endian container: magic ``EXVT``, a u32 format
version, a length-prefixed UTF-8 ``key = value`` text block (config,
step, generator state), then named float64 tensor records until EOF.
Round trips are bit-exact, so an interrupted run resumed from its last
checkpoint reproduces the uninterrupted run byte for byte.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeConfig, AttributeFeatures
from .data import FormatError, SceneSample
from .encoder import ConfigError, EncoderConfig
from .evaluate import upsample_bilinear
from .losses import (
    LossBreakdown,
    LossConfig,
    combine_losses,
    discriminability_loss,
    diversity_loss,
    global_loss,
)
from .model import ModelParams, forward, init_model_params
from .tensor import ShapeError, Tape, Tensor

CHECKPOINT_MAGIC = b"EXVT"
CHECKPOINT_VERSION = 1

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
_PAD_VALUE = 0.5


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings plus the model and loss settings they act on.

    The encoder group and everything after it (attribute head,
    classifier) take separate learning rates. ``checkpoint_every = 0``
    means a checkpoint is written only at the end of the run.
    """

    steps: int = 2000
    batch_size: int = 16
    lr_encoder: float = 5e-5
    lr_rest: float = 5e-4
    weight_decay: float = 1e-4
    ema_momentum: float = 0.99
    poly_power: float = 0.9
    scale_min: float = 0.5
    scale_max: float = 2.0
    seed: int = 0
    num_classes: int = 3
    checkpoint_every: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attr: AttributeConfig = field(default_factory=AttributeConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr_encoder <= 0 or self.lr_rest <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must lie in [0, 1]")
        if self.poly_power < 0:
            raise ConfigError("poly_power must be non-negative")
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ConfigError("need 0 < scale_min <= scale_max")
        if self.num_classes <= 0:
            raise ConfigError("num_classes must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")


# Reference configuration at production scale, kept for orientation when
# scaling up from the desk defaults. Resolution and patch size follow the
# usual small-ViT convention; everything else is the benchmark recipe.
FULL_SCALE = TrainConfig(
    steps=40_000,
    batch_size=16,
    num_classes=20,
    encoder=EncoderConfig(image_size=448, patch_size=16, depth=12, heads=6, dim=384),
    attr=AttributeConfig(hidden_dim=256, attributes=8),
    loss=LossConfig(fuse_layers=3),
)


@dataclass
class TrainState:
    """Everything a checkpoint carries: both branches, optimizer
    moments, the step counter, and the sampling generator."""

    config: TrainConfig
    step: int
    theta: ModelParams
    ema: ModelParams
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    rng: np.random.Generator


def init_train_state(cfg: TrainConfig) -> TrainState:
    """Fresh state: the averaged branch starts as an exact copy of the
    learned branch and the moments start at zero. The generator that
    initializes parameters is the same one later used for sampling, so
    the whole run is a single reproducible stream."""
    rng = np.random.default_rng(cfg.seed)
    theta = init_model_params(cfg.encoder, cfg.attr, cfg.num_classes, rng)
    return TrainState(
        config=cfg,
        step=0,
        theta=theta,
        ema=theta.copy(),
        opt_m={name: np.zeros_like(t.data) for name, t in theta.items()},
        opt_v={name: np.zeros_like(t.data) for name, t in theta.items()},
        rng=rng,
    )


# --- augmentation ---------------------------------------------------------


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of [H, W, C]."""
    return np.moveaxis(upsample_bilinear(np.moveaxis(image, -1, 0), out_h, out_w), 0, -1)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def _fit_axis(n_in: int, n_out: int, rng: np.random.Generator) -> tuple[slice, slice]:
    # Crop at a random offset when too large, center when too small.
    if n_in > n_out:
        off = int(rng.integers(0, n_in - n_out + 1))
        return slice(off, off + n_out), slice(0, n_out)
    if n_in < n_out:
        off = (n_out - n_in) // 2
        return slice(0, n_in), slice(off, off + n_in)
    return slice(0, n_out), slice(0, n_out)


def random_view(
    image: np.ndarray,
    rng: np.random.Generator,
    scale_min: float = 0.5,
    scale_max: float = 2.0,
) -> np.ndarray:
    """One augmented view at the original resolution: coin-flip mirror,
    random rescale, then a random crop back (if grown) or centered
    mid-gray padding (if shrunk). Scale 1 with no flip returns the
    image unchanged."""
    h, w = image.shape[:2]
    scale = rng.uniform(scale_min, scale_max)
    if rng.random() < 0.5:
        image = hflip(image)
    new_h = max(1, round(h * scale))
    new_w = max(1, round(w * scale))
    if (new_h, new_w) != (h, w):
        image = resize_bilinear(image, new_h, new_w)
    if image.shape[:2] == (h, w):
        return image
    out = np.full((h, w) + image.shape[2:], _PAD_VALUE)
    src_y, dst_y = _fit_axis(new_h, h, rng)
    src_x, dst_x = _fit_axis(new_w, w, rng)
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    scale_min: float = 0.5,
    scale_max: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views of one image, consuming the generator in a
    fixed order."""
    first = random_view(image, rng, scale_min, scale_max)
    second = random_view(image, rng, scale_min, scale_max)
    return first, second


# --- one optimization step ------------------------------------------------


def ema_update(theta: ModelParams, ema: ModelParams, momentum: float) -> None:
    """In-place ema <- momentum * ema + (1 - momentum) * theta. The
    endpoints are handled as exact no-op / exact copy."""
    if set(theta) != set(ema):
        raise ShapeError("branch parameter names differ")
    if momentum == 1.0:
        return
    for name, p in theta.items():
        e = ema[name]
        if e.data.shape != p.data.shape:
            raise ShapeError(f"{name}: ema {e.data.shape} vs theta {p.data.shape}")
        if momentum == 0.0:
            e.data = p.data.copy()
        else:
            e.data *= momentum
            e.data += (1.0 - momentum) * p.data


def _objective(
    theta: ModelParams,
    view: np.ndarray,
    target: AttributeFeatures,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Tensor, LossBreakdown]:
    out = forward(theta, view, cfg.encoder, cfg.attr, cfg.loss.fuse_layers)
    g = global_loss(out.logits, labels)
    dis = discriminability_loss(out.attributes, target, cfg.loss)
    # A single attribute has no pair to compare, so its spread term is 0.
    div = diversity_loss(out.attributes) if cfg.attr.attributes > 1 else Tensor(0.0)
    return combine_losses(g, dis, div, cfg.loss)


def evaluate_objective(
    theta: ModelParams,
    ema: ModelParams,
    view: np.ndarray,
    view_other: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Objective for given views without recording gradients; the
    averaged branch sees the second view."""
    target = forward(ema, view_other, cfg.encoder, cfg.attr, cfg.loss.fuse_layers)
    return _objective(theta, view, target.attributes, labels, cfg)


def _adamw_step(state: TrainState) -> None:
    cfg = state.config
    decay = max(1.0 - state.step / cfg.steps, 0.0) ** cfg.poly_power
    t = state.step + 1
    bias1 = 1.0 - _ADAM_BETA1**t
    bias2 = 1.0 - _ADAM_BETA2**t
    for name, p in state.theta.items():
        g = p.grad
        if g is None:
            continue
        lr = (cfg.lr_encoder if state.theta.is_encoder(name) else cfg.lr_rest) * decay
        m = state.opt_m[name]
        v = state.opt_v[name]
        m *= _ADAM_BETA1
        m += (1.0 - _ADAM_BETA1) * g
        v *= _ADAM_BETA2
        v += (1.0 - _ADAM_BETA2) * (g * g)
        step_dir = (m / bias1) / (np.sqrt(v / bias2) + _ADAM_EPS)
        p.data -= lr * (step_dir + cfg.weight_decay * p.data)


def train_step(batch: list[SceneSample], state: TrainState) -> tuple[LossBreakdown, TrainState]:
    """One optimization step on a batch: augment, forward both branches,
    backward through the learned branch only, parameter update, then the
    momentum update of the averaged branch."""
    cfg = state.config
    views, views_other = [], []
    for sample in batch:
        a, b = augment(sample.image, state.rng, cfg.scale_min, cfg.scale_max)
        views.append(a)
        views_other.append(b)
    x = np.stack(views)
    x_other = np.stack(views_other)
    labels = np.stack([sample.labels for sample in batch]).astype(np.float64)

    # The target branch runs before the tape opens: no entry it produces
    # is recorded, so no gradient can ever flow into it.
    target = forward(state.ema, x_other, cfg.encoder, cfg.attr, cfg.loss.fuse_layers)
    with Tape() as tape:
        state.theta.watch(tape)
        total, breakdown = _objective(state.theta, x, target.attributes, labels, cfg)
        tape.backward(total)
    _adamw_step(state)
    state.theta.clear_grads()
    ema_update(state.theta, state.ema, cfg.ema_momentum)
    state.step += 1
    return breakdown, state


# --- checkpoint container --------------------------------------------------


def _rng_state_lines(rng: np.random.Generator) -> list[str]:
    raw = rng.bit_generator.state
    if raw["bit_generator"] != "PCG64":
        raise FormatError(f"unsupported generator {raw['bit_generator']!r}")
    return [
        f"checkpoint.rng.state = {raw['state']['state']}",
        f"checkpoint.rng.inc = {raw['state']['inc']}",
        f"checkpoint.rng.has_uint32 = {raw['has_uint32']}",
        f"checkpoint.rng.uinteger = {raw['uinteger']}",
    ]


def _rng_from_values(values: dict[str, str]) -> np.random.Generator:
    bits = np.random.PCG64()
    bits.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int(values["checkpoint.rng.state"]),
            "inc": int(values["checkpoint.rng.inc"]),
        },
        "has_uint32": int(values["checkpoint.rng.has_uint32"]),
        "uinteger": int(values["checkpoint.rng.uinteger"]),
    }
    return np.random.Generator(bits)


def _tensor_records(state: TrainState) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    for name, t in state.theta.items():
        records[f"theta.{name}"] = t.data
    for name, t in state.ema.items():
        records[f"ema.{name}"] = t.data
    for name, arr in state.opt_m.items():
        records[f"opt.m.{name}"] = arr
    for name, arr in state.opt_v.items():
        records[f"opt.v.{name}"] = arr
    return records


def save_checkpoint(state: TrainState, path) -> None:
    """Atomically write the state. Tensor records are sorted by name so
    identical states always produce identical bytes."""
    from .config import train_config_text

    lines = [train_config_text(state.config).rstrip("\n")]
    lines.append(f"checkpoint.step = {state.step}")
    lines.extend(_rng_state_lines(state.rng))
    text = "\n".join(lines) + "\n"

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    raw = text.encode("utf-8")
    blob += struct.pack("<I", len(raw))
    blob += raw
    for name, arr in sorted(_tensor_records(state).items()):
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError(f"checkpoint truncated at byte {len(self.blob)}")
        piece = self.blob[self.pos : self.pos + count]
        self.pos += count
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> TrainState:
    """Rebuild a state from disk; raises on wrong magic, unknown
    version, truncation, or mismatched branch shapes."""
    from .config import train_config_from_text

    with open(path, "rb") as f:
        blob = f.read()
    reader = _Reader(blob)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic bytes")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    text = reader.take(reader.u32()).decode("utf-8")

    records: dict[str, np.ndarray] = {}
    while reader.pos < len(blob):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape)
        records[name] = data.astype(np.float64)

    values: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if line and "=" in line:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()

    cfg = train_config_from_text(text)
    theta = ModelParams()
    ema = ModelParams()
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for name in sorted(records):
        if name.startswith("theta."):
            theta[name[len("theta.") :]] = Tensor(records[name].copy())
        elif name.startswith("ema."):
            ema[name[len("ema.") :]] = Tensor(records[name].copy())
        elif name.startswith("opt.m."):
            opt_m[name[len("opt.m.") :]] = records[name].copy()
        elif name.startswith("opt.v."):
            opt_v[name[len("opt.v.") :]] = records[name].copy()
        else:
            raise FormatError(f"unknown tensor record {name!r}")
    if set(theta) != set(ema):
        raise FormatError("checkpoint branches carry different parameters")
    for name in theta:
        if theta[name].data.shape != ema[name].data.shape:
            raise FormatError(f"branch shape mismatch for {name!r}")
    if set(opt_m) != set(theta) or set(opt_v) != set(theta):
        raise FormatError("optimizer moments do not cover the parameters")

    return TrainState(
        config=cfg,
        step=int(values["checkpoint.step"]),
        theta=theta,
        ema=ema,
        opt_m=opt_m,
        opt_v=opt_v,
        rng=_rng_from_values(values),
    )


# --- the loop ---------------------------------------------------------------


def train(
    samples: list[SceneSample],
    cfg: TrainConfig | None = None,
    *,
    state: TrainState | None = None,
    metrics_path=None,
    checkpoint_path=None,
    until: int | None = None,
) -> tuple[TrainState, list[LossBreakdown]]:
    """Run from the state's current step to ``cfg.steps``.

    Pass a loaded state to resume: the sampling generator was saved
    after the last completed step, so the remaining steps replay exactly
    as the uninterrupted run would have. Metrics append one CSV line per
    step; the header is written only when the file starts empty.
    ``until`` stops early after that many total steps (an interrupted
    run); the schedule still follows ``cfg.steps``.
    """
    if state is None:
        state = init_train_state(cfg if cfg is not None else TrainConfig())
    cfg = state.config
    if not samples:
        raise ConfigError("training needs at least one sample")
    last = cfg.steps if until is None else min(until, cfg.steps)

    metrics = None
    if metrics_path is not None:
        fresh = not os.path.exists(metrics_path) or os.path.getsize(metrics_path) == 0
        metrics = open(metrics_path, "a")
        if fresh:
            metrics.write(LossBreakdown.CSV_HEADER + "\n")

    history: list[LossBreakdown] = []
    try:
        for _ in range(state.step, last):
            idx = state.rng.integers(0, len(samples), size=cfg.batch_size)
            batch = [samples[int(i)] for i in idx]
            breakdown, state = train_step(batch, state)
            history.append(breakdown)
            if metrics is not None:
                metrics.write(breakdown.csv_row(state.step) + "\n")
                metrics.flush()
            if (
                checkpoint_path is not None
                and cfg.checkpoint_every
                and state.step % cfg.checkpoint_every == 0
            ):
                save_checkpoint(state, checkpoint_path)
    finally:
        if metrics is not None:
            metrics.close()
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state, history
