"""Training objective: classification plus two attribute regularizers.

The classification term reads image-level multi-hot labels through a
soft-margin on sigmoid logits. The discriminability term compares
generalized-mean summaries of the gated features across the two siamese
branches, penalizing the gap between the pooled-together distance and
the sum of per-attribute distances. The diversity term penalizes cosine
similarity between attribute maps so the gates cannot collapse onto one
region. The total is a weighted sum with weights ``alpha`` and ``beta``.

All loss functions accept one sample or a leading batch axis and reduce
to a scalar by averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attributes import AttributeFeatures
from .encoder import ConfigError, EncoderConfig, LayerOutputs, tokens_to_grid
from .tensor import NumericError, ShapeError, Tensor

DIS_FORMS = ("gap", "sum")

_GEM_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Weights and knobs of the objective.

    ``fuse_layers`` is how many trailing encoder blocks are averaged
    into the fused feature map. ``dis_form`` selects the
    discriminability shape: ``gap`` penalizes |joint - sum of parts|,
    ``sum`` penalizes joint + parts directly.
    """

    fuse_layers: int = 2
    alpha: float = 0.5
    beta: float = 1.0
    gem_power: float = 3.0
    dis_form: str = "gap"

    def __post_init__(self) -> None:
        if self.fuse_layers < 1:
            raise ConfigError("fuse_layers must be at least 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gem_power < 1:
            raise ConfigError("gem_power must be at least 1")
        if self.dis_form not in DIS_FORMS:
            raise ConfigError(f"dis_form must be one of {DIS_FORMS}, got {self.dis_form!r}")


@dataclass
class LossBreakdown:
    """Scalar values of the objective parts for one step."""

    global_: float
    dis: float
    div: float
    total: float

    CSV_HEADER = "step,global,dis,div,total"

    def csv_row(self, step: int) -> str:
        return f"{step},{self.global_:.10g},{self.dis:.10g},{self.div:.10g},{self.total:.10g}"


def fuse_attention(outputs: list[LayerOutputs], cfg: EncoderConfig, fuse_layers: int) -> Tensor:
    """Average the features of the last ``fuse_layers`` blocks and
    reshape to the spatial grid [.., grid, grid, dim]."""
    if not 1 <= fuse_layers <= len(outputs):
        raise ConfigError(
            f"fuse_layers must be in [1, {len(outputs)}], got {fuse_layers}"
        )
    tail = [o.features for o in outputs[-fuse_layers:]]
    fused = tail[0]
    for f in tail[1:]:
        fused = fused + f
    fused = fused / float(len(tail))
    return tokens_to_grid(fused, cfg)


def attribute_guided_map(fused: Tensor, attr: AttributeFeatures) -> Tensor:
    """Scale the fused grid by each attribute's gated features:
    [.., S, H, W, dim]."""
    g = attr.features
    lead = fused.shape[:-3]
    if g.shape[:-4] != lead or g.shape[-3:] != fused.shape[-3:]:
        raise ShapeError(f"fused grid {fused.shape} does not match attributes {g.shape}")
    expanded = fused.reshape(lead + (1,) + fused.shape[-3:])
    return expanded * g


def classify(maps: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pool the attribute-guided maps over attributes and space, then
    apply the affine classifier. Returns logits [.., classes]."""
    if maps.ndim < 4:
        raise ShapeError(f"expected [.., S, H, W, dim] maps, got {maps.shape}")
    pooled = maps.mean(axis=(-4, -3, -2))
    lead = pooled.shape[:-1]
    flat = pooled.reshape((-1, pooled.shape[-1]))
    logits = T.matmul(flat, weight) + bias
    return logits.reshape(lead + (weight.shape[-1],))


def global_loss(logits: Tensor, labels) -> Tensor:
    """Multi-label soft-margin loss, averaged over classes and samples.

    Written in softplus form, log(sigmoid(x)) = -softplus(-x), which is
    exact for all representable logits and never evaluates log near 0.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    pos = Tensor(y) * T.softplus(-logits)
    neg = Tensor(1.0 - y) * T.softplus(logits)
    return (pos + neg).mean()


def gem_pool(maps: Tensor, power: float = 3.0) -> Tensor:
    """Generalized-mean pool over the two spatial axes of
    [.., H, W, dim]; values are floored at 1e-6 so fractional powers
    stay real. Returns [.., dim]."""
    maps = maps if isinstance(maps, Tensor) else Tensor(maps)
    if maps.ndim < 3:
        raise ShapeError(f"expected [.., H, W, dim] maps, got {maps.shape}")
    p = float(power)
    lifted = T.power(T.clamp_min(maps, _GEM_FLOOR), p)
    return T.power(lifted.mean(axis=(-3, -2)), 1.0 / p)


def normalized_mse(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Squared distance between unit-normalized vectors along the last
    axis: 2 - 2 cos(a, b), in [0, 4]. Leading axes are preserved."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"normalized_mse operands differ: {a.shape} vs {b.shape}")
    an = T.l2_normalize(a, axis=-1, eps=eps)
    bn = T.l2_normalize(b, axis=-1, eps=eps)
    diff = an - bn
    return (diff * diff).sum(axis=-1)


def _gated(attr) -> Tensor:
    return attr.features if isinstance(attr, AttributeFeatures) else attr


def discriminability_loss(attr: AttributeFeatures, attr_other: AttributeFeatures, cfg: LossConfig) -> Tensor:
    """Cross-branch consistency of pooled attribute summaries.

    Per sample, d is the normalized MSE between the branches' pooled
    summaries taken jointly over all attributes and d_s the same taken
    per attribute. The ``gap`` form returns |d - sum_s d_s|, the ``sum``
    form d + sum_s d_s; both are averaged over any leading axes.
    """
    g, g_other = _gated(attr), _gated(attr_other)
    if g.shape != g_other.shape:
        raise ShapeError(f"branch shapes differ: {g.shape} vs {g_other.shape}")
    if g.ndim < 4:
        raise ShapeError(f"expected [.., S, H, W, dim] features, got {g.shape}")
    v = gem_pool(g, cfg.gem_power)
    v_other = gem_pool(g_other, cfg.gem_power)
    lead = v.shape[:-2]
    joint = normalized_mse(v.reshape(lead + (-1,)), v_other.reshape(lead + (-1,)))
    parts = normalized_mse(v, v_other).sum(axis=-1)
    if cfg.dis_form == "gap":
        return T.absolute(joint - parts).mean()
    return (joint + parts).mean()


def diversity_loss(attr: AttributeFeatures) -> Tensor:
    """Mean pairwise cosine similarity between flattened attribute maps;
    1 when all attributes coincide, 0 when mutually orthogonal."""
    g = _gated(attr)
    if g.ndim < 4:
        raise ShapeError(f"expected [.., S, H, W, dim] features, got {g.shape}")
    s = g.shape[-4]
    if s < 2:
        raise ConfigError("diversity needs at least 2 attributes")
    lead = g.shape[:-4]
    flat = g.reshape(lead + (s, -1))
    unit = T.l2_normalize(flat, axis=-1)
    gram = T.matmul(unit, T.swap_last_axes(unit))
    off = Tensor(1.0 - np.eye(s))
    return (gram * off).sum(axis=(-1, -2)).mean() / float(s * (s - 1))


def combine_losses(global_term: Tensor, dis: Tensor, div: Tensor, cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Weighted total and its per-component record.

    Components must be finite scalars; a zero weight drops that term
    from the total (and from the gradient) while its value is still
    reported.
    """
    for name, term in (("global", global_term), ("dis", dis), ("div", div)):
        if not np.isfinite(term.data).all():
            raise NumericError(f"loss component {name!r} is non-finite")
    total = global_term
    if cfg.alpha != 0.0:
        total = total + cfg.alpha * dis
    if cfg.beta != 0.0:
        total = total + cfg.beta * div
    breakdown = LossBreakdown(
        global_=global_term.item(), dis=dis.item(), div=div.item(), total=total.item()
    )
    return total, breakdown
