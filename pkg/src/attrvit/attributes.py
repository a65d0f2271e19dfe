"""Attribute head: gate the feature grid into complementary spatial groups.

A per-location two-layer MLP embeds each grid cell into ``hidden_dim``
attribute channels. After channel-wise L2 normalization the channels are
split into ``attributes`` equal groups; each group's mean response,
rescaled to unit variance and pushed through a softplus, becomes a
positive spatial gate that scales the backbone features. The result is
one gated copy of the feature grid per attribute, the raw material for
the discriminability and diversity objectives and for localization maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ConfigError
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttributeConfig:
    """``hidden_dim`` attribute channels shared across ``attributes``
    equal groups; the group width is ``hidden_dim // attributes``."""

    hidden_dim: int = 64
    attributes: int = 4

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.attributes < 1:
            raise ConfigError("hidden_dim and attributes must be positive")
        if self.hidden_dim % self.attributes != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by attributes {self.attributes}"
            )

    @property
    def group_width(self) -> int:
        return self.hidden_dim // self.attributes


@dataclass
class AttributeFeatures:
    """Gated features [.., S, H, W, dim] and their gates [.., S, H, W]."""

    features: Tensor
    gates: Tensor


def init_attribute_params(dim: int, cfg: AttributeConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Attribute head parameters: affine in, layer norm, affine out."""
    from .encoder import trunc_normal

    c = cfg.hidden_dim
    return {
        "attr.w1": Tensor(trunc_normal(rng, (dim, c))),
        "attr.b1": Tensor(np.zeros(c)),
        "attr.ln_g": Tensor(np.ones(c)),
        "attr.ln_b": Tensor(np.zeros(c)),
        "attr.w2": Tensor(trunc_normal(rng, (c, c))),
        "attr.b2": Tensor(np.zeros(c)),
    }


def _check_grid(features: Tensor) -> Tensor:
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.ndim < 3:
        raise ShapeError(f"expected a [.., H, W, dim] feature grid, got {features.shape}")
    return features


def attribute_embed(features: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-location MLP from the feature grid [.., H, W, dim] to
    channel-first attribute scores [.., hidden_dim, H, W]."""
    features = _check_grid(features)
    h = T.matmul(features, params["attr.w1"]) + params["attr.b1"]
    h = T.relu(T.layer_norm(h, params["attr.ln_g"], params["attr.ln_b"]))
    w = T.matmul(h, params["attr.w2"]) + params["attr.b2"]
    n = w.ndim
    return T.transpose(w, tuple(range(n - 3)) + (n - 1, n - 3, n - 2))


def channel_normalize(scores: Tensor) -> Tensor:
    """L2-normalize each spatial location's channel vector; layout stays
    channel-first [.., hidden_dim, H, W]."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if scores.ndim < 3:
        raise ShapeError(f"expected [.., hidden_dim, H, W] scores, got {scores.shape}")
    return T.l2_normalize(scores, axis=-3)


def attribute_gate(scores: Tensor, features: Tensor, cfg: AttributeConfig) -> AttributeFeatures:
    """Reduce each channel group of normalized ``scores`` to a positive
    spatial gate and scale ``features`` by it, one copy per attribute.

    The gate is softplus(k * group mean) with k = hidden_dim / sqrt(S):
    unit channel vectors make each group mean O(1/k), so k restores a
    unit-variance gate input and the field keeps real spatial contrast.
    The soft rectifier keeps the gated features inside the domain of the
    power-mean pooling used downstream and makes the diversity objective
    bottom out at (near-)disjoint gate supports instead of at sign
    cancellation; unlike a hard rectifier it leaves every gate a live
    gradient path, so a suppressed attribute can recover."""
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    features = _check_grid(features)
    c, hh, ww = scores.shape[-3:]
    if c != cfg.hidden_dim:
        raise ShapeError(f"scores carry {c} channels, config expects {cfg.hidden_dim}")
    if features.shape[-3:-1] != (hh, ww):
        raise ShapeError(f"grids disagree: scores {scores.shape} vs features {features.shape}")
    lead = scores.shape[:-3]
    s, g = cfg.attributes, cfg.group_width
    k = cfg.hidden_dim / np.sqrt(cfg.attributes)
    gates = T.softplus(k * scores.reshape(lead + (s, g, hh, ww)).mean(axis=-3))
    gated = gates.reshape(lead + (s, hh, ww, 1)) * features.reshape(lead + (1, hh, ww, features.shape[-1]))
    return AttributeFeatures(features=gated, gates=gates)


def attribute_features(features: Tensor, params: dict[str, Tensor], cfg: AttributeConfig) -> AttributeFeatures:
    """Embed, normalize, and gate in one call."""
    scores = attribute_embed(features, params)
    return attribute_gate(channel_normalize(scores), features, cfg)
