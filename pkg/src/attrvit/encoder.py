"""Patch transformer encoder with norm-bounded attention.

Images are cut into non-overlapping patches, projected to ``dim``
channels, and pushed through ``depth`` pre-norm residual blocks. The
default attention kind, ``emha``, replaces the usual row softmax with a
trainable additive bias followed by L2 normalization, so every exposed
attention row has norm at most 1 and the head output energy is bounded
by the value energy. The standard softmax kind is kept for ablations.

Functions accept a single sample or a leading batch axis; outputs match
the input's batching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor

ATTENTION_KINDS = ("emha", "softmax")


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and wiring of the encoder.

    ``dim`` must divide evenly into ``heads`` and ``image_size`` into
    ``patch_size``; the token count is fixed by the two sizes, which also
    fixes the extent of the trainable attention bias.
    """

    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    heads: int = 2
    dim: int = 64
    attention: str = "emha"
    positional_embedding: bool = True
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        for field in ("image_size", "patch_size", "depth", "heads", "dim", "mlp_ratio"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class LayerOutputs:
    """Features [.., T, dim] and attention weights [.., heads, T, T] of
    one encoder block."""

    features: Tensor
    attention: Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws redrawn until they land within two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh encoder parameters as a flat name-to-tensor map.

    Projections start truncated-normal, every bias (including the
    per-head attention bias) starts at zero, and layer norms start as
    the identity affine.
    """
    t, d, h = cfg.tokens, cfg.dim, cfg.heads
    params: dict[str, Tensor] = {
        "patch.w": Tensor(trunc_normal(rng, (cfg.patch_dim, d))),
        "patch.b": Tensor(np.zeros(d)),
        "patch.pos": Tensor(trunc_normal(rng, (t, d))),
    }
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        p = f"layer{i}."
        params[p + "ln1_g"] = Tensor(np.ones(d))
        params[p + "ln1_b"] = Tensor(np.zeros(d))
        params[p + "wq"] = Tensor(trunc_normal(rng, (d, d)))
        params[p + "wk"] = Tensor(trunc_normal(rng, (d, d)))
        params[p + "wv"] = Tensor(trunc_normal(rng, (d, d)))
        params[p + "b_attn"] = Tensor(np.zeros((h, t, t)))
        params[p + "wo"] = Tensor(trunc_normal(rng, (d, d)))
        params[p + "bo"] = Tensor(np.zeros(d))
        params[p + "ln2_g"] = Tensor(np.ones(d))
        params[p + "ln2_b"] = Tensor(np.zeros(d))
        params[p + "w1"] = Tensor(trunc_normal(rng, (d, hidden)))
        params[p + "b1"] = Tensor(np.zeros(hidden))
        params[p + "w2"] = Tensor(trunc_normal(rng, (hidden, d)))
        params[p + "b2"] = Tensor(np.zeros(d))
    return params


def _require_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{what} contains non-finite values")


def patchify(images: Tensor, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Cut into patches, flatten, project to ``dim``, add the positional
    embedding when enabled. Returns tokens [.., T, dim]."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    batched = images.ndim == 4
    if not batched and images.ndim != 3:
        raise ShapeError(f"expected [H, W, 3] or [B, H, W, 3] image, got {images.shape}")
    expect = (cfg.image_size, cfg.image_size, 3)
    if images.shape[-3:] != expect:
        raise ShapeError(f"image shape {images.shape} does not end with {expect}")
    x = images if batched else images.reshape((1,) + images.shape)
    b, g, p = x.shape[0], cfg.grid, cfg.patch_size
    x = x.reshape(b, g, p, g, p, 3)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = x.reshape(b, cfg.tokens, cfg.patch_dim)
    tokens = T.matmul(x, params["patch.w"]) + params["patch.b"]
    if cfg.positional_embedding:
        tokens = tokens + params["patch.pos"]
    return tokens if batched else tokens.reshape(tokens.shape[1:])


def _split_heads(x: Tensor, cfg: EncoderConfig) -> Tensor:
    b, t = x.shape[0], x.shape[1]
    return T.transpose(x.reshape(b, t, cfg.heads, cfg.head_dim), (0, 2, 1, 3))


def _merge_heads(x: Tensor, cfg: EncoderConfig) -> Tensor:
    b, t = x.shape[0], x.shape[2]
    return T.transpose(x, (0, 2, 1, 3)).reshape(b, t, cfg.dim)


def _attention(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig, prefix: str, kind: str) -> tuple[Tensor, Tensor]:
    """Shared multi-head plumbing; returns (merged output [B, T, dim],
    attention weights [B, heads, T, T])."""
    q = _split_heads(T.matmul(x, params[prefix + "wq"]), cfg)
    k = _split_heads(T.matmul(x, params[prefix + "wk"]), cfg)
    v = _split_heads(T.matmul(x, params[prefix + "wv"]), cfg)
    scores = T.matmul(q, T.swap_last_axes(k)) / math.sqrt(cfg.head_dim)
    scores = scores + params[prefix + "b_attn"]
    if kind == "emha":
        # Normalize columns of the biased score matrix by transposing
        # first: each row of the exposed weights then has unit norm and
        # the mixed output obeys ||S||_F <= sqrt(T) * ||V||_F.
        weights = T.l2_normalize(T.swap_last_axes(scores), axis=-1)
        mixed = T.matmul(T.swap_last_axes(weights), v)
    else:
        weights = T.softmax(scores, axis=-1)
        mixed = T.matmul(weights, v)
    out = T.matmul(_merge_heads(mixed, cfg), params[prefix + "wo"]) + params[prefix + "bo"]
    return out, weights


def normed_attention(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig, layer: int = 0) -> tuple[Tensor, Tensor]:
    """Multi-head attention with biased scores and L2-normalized rows."""
    _require_finite(x if isinstance(x, Tensor) else Tensor(x), "attention input")
    x, batched = _as_batch_tokens(x, cfg)
    out, weights = _attention(x, params, cfg, f"layer{layer}.", "emha")
    return _debatch_pair(out, weights, batched)


def softmax_attention(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig, layer: int = 0) -> tuple[Tensor, Tensor]:
    """Standard scaled dot-product attention with row softmax."""
    _require_finite(x if isinstance(x, Tensor) else Tensor(x), "attention input")
    x, batched = _as_batch_tokens(x, cfg)
    out, weights = _attention(x, params, cfg, f"layer{layer}.", "softmax")
    return _debatch_pair(out, weights, batched)


def _as_batch_tokens(x: Tensor, cfg: EncoderConfig) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        if x.shape != (cfg.tokens, cfg.dim):
            raise ShapeError(f"expected tokens of shape {(cfg.tokens, cfg.dim)}, got {x.shape}")
        return x.reshape((1,) + x.shape), False
    if x.ndim == 3:
        if x.shape[1:] != (cfg.tokens, cfg.dim):
            raise ShapeError(f"expected tokens [B, {cfg.tokens}, {cfg.dim}], got {x.shape}")
        return x, True
    raise ShapeError(f"expected rank 2 or 3 token tensor, got {x.shape}")


def _debatch_pair(a: Tensor, b: Tensor, batched: bool) -> tuple[Tensor, Tensor]:
    if batched:
        return a, b
    return a.reshape(a.shape[1:]), b.reshape(b.shape[1:])


def encoder_layer(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig, layer: int) -> LayerOutputs:
    """One pre-norm residual block: attention, then the token MLP."""
    x, batched = _as_batch_tokens(x, cfg)
    p = f"layer{layer}."
    normed = T.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
    mixed, weights = _attention(normed, params, cfg, p, cfg.attention)
    z = mixed + x
    h = T.layer_norm(z, params[p + "ln2_g"], params[p + "ln2_b"])
    h = T.gelu(T.matmul(h, params[p + "w1"]) + params[p + "b1"])
    h = T.matmul(h, params[p + "w2"]) + params[p + "b2"]
    f = h + z
    if not batched:
        f = f.reshape(f.shape[1:])
        weights = weights.reshape(weights.shape[1:])
    return LayerOutputs(features=f, attention=weights)


def encode(images: Tensor, params: dict[str, Tensor], cfg: EncoderConfig) -> list[LayerOutputs]:
    """Full encoder pass; one LayerOutputs per block, in depth order."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    _require_finite(images, "encoder input")
    x = patchify(images, params, cfg)
    outputs: list[LayerOutputs] = []
    for i in range(cfg.depth):
        block = encoder_layer(x, params, cfg, i)
        outputs.append(block)
        x = block.features
    return outputs


def tokens_to_grid(features: Tensor, cfg: EncoderConfig) -> Tensor:
    """Reshape token features [.., T, dim] to a spatial grid
    [.., grid, grid, dim]."""
    g = cfg.grid
    lead = features.shape[:-2]
    if features.shape[-2:] != (cfg.tokens, features.shape[-1]):
        raise ShapeError(f"expected {cfg.tokens} tokens, got shape {features.shape}")
    return features.reshape(lead + (g, g, features.shape[-1]))
