"""Localization maps, pseudo masks, and segmentation scoring.

A class activation map is the classifier weighting of the
attribute-guided feature maps, rectified, upsampled bilinearly to image
resolution, and min-max normalized per class. Thresholding against the
image-level labels yields a pseudo segmentation mask scored against the
ground truth with confusion-count IoU, plus binarized-foreground false
positive and false negative rates normalized by the foreground union.

Scoring accumulates global confusion counts over a dataset; classes
absent from both prediction and ground truth are skipped by the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeConfig
from .encoder import EncoderConfig
from .model import ModelParams, forward
from .tensor import ShapeError, Tensor


def class_activation_maps(maps, weight) -> np.ndarray:
    """Raw grid heatmaps from attribute-guided maps [S, H, W, dim] and
    classifier weight [dim, classes]: rectified class responses,
    min-max normalized per class. Returns [classes, H, W]."""
    m = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if m.ndim != 4:
        raise ShapeError(f"expected [S, H, W, dim] maps, got {m.shape}")
    if w.ndim != 2 or w.shape[0] != m.shape[-1]:
        raise ShapeError(f"classifier weight {w.shape} does not match maps {m.shape}")
    spatial = m.mean(axis=0)  # [H, W, dim]
    cams = np.maximum(np.tensordot(spatial, w, axes=([-1], [0])), 0.0)  # [H, W, C]
    return minmax_normalize(np.moveaxis(cams, -1, 0))


def minmax_normalize(heatmaps: np.ndarray) -> np.ndarray:
    """Per leading slice: map [min, max] to [0, 1]. A constant slice
    becomes all ones when positive, all zeros otherwise, which makes the
    operation idempotent."""
    out = np.empty_like(heatmaps, dtype=np.float64)
    flat = heatmaps.reshape(heatmaps.shape[0], -1)
    for i, row in enumerate(flat):
        lo, hi = row.min(), row.max()
        if hi > lo:
            out[i] = (heatmaps[i] - lo) / (hi - lo)
        else:
            out[i] = 1.0 if hi > 0 else 0.0
    return out


def upsample_bilinear(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [C, h, w] with corner alignment, so the four
    corner values are preserved exactly."""
    c, h, w = maps.shape
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    rows0 = maps[:, y0]
    rows1 = maps[:, y1]
    top = rows0[:, :, x0] * (1 - wx) + rows0[:, :, x1] * wx
    bottom = rows1[:, :, x0] * (1 - wx) + rows1[:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def localization_maps(maps, weight, out_size: int) -> np.ndarray:
    """Image-resolution heatmaps in [0, 1]: rectified class responses,
    bilinearly upsampled, then min-max normalized per class."""
    m = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    spatial = m.mean(axis=0)
    cams = np.maximum(np.tensordot(spatial, w, axes=([-1], [0])), 0.0)
    up = upsample_bilinear(np.moveaxis(cams, -1, 0), out_size, out_size)
    return minmax_normalize(up)


def pseudo_mask(heatmaps: np.ndarray, labels: np.ndarray, bg_threshold: float) -> np.ndarray:
    """Argmax over the classes present in ``labels``; pixels whose best
    response is below ``bg_threshold`` become background (0). Returns
    class ids shifted by one, matching the stored masks."""
    c, h, w = heatmaps.shape
    labels = np.asarray(labels)
    if labels.shape != (c,):
        raise ShapeError(f"labels {labels.shape} do not match {c} heatmap classes")
    present = np.flatnonzero(labels > 0)
    if present.size == 0:
        return np.zeros((h, w), dtype=np.uint8)
    stack = heatmaps[present]
    best = stack.argmax(axis=0)
    value = stack.max(axis=0)
    mask = (present[best] + 1).astype(np.uint8)
    mask[value < bg_threshold] = 0
    return mask


@dataclass
class EvalReport:
    """Aggregated localization scores; ``per_class_iou`` includes the
    background entry at index 0 and NaN for classes never seen."""

    samples: int
    miou: float
    per_class_iou: np.ndarray
    fp_rate: float
    fn_rate: float
    extras: dict[str, float] = field(default_factory=dict)

    def serialize(self) -> str:
        lines = [
            f"samples={self.samples}",
            f"miou={self.miou:.10g}",
            f"fp_rate={self.fp_rate:.10g}",
            f"fn_rate={self.fn_rate:.10g}",
        ]
        lines += [f"iou_{i}={v:.10g}" for i, v in enumerate(self.per_class_iou)]
        lines += [f"{k}={self.extras[k]:.10g}" for k in sorted(self.extras)]
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, float]:
    values: dict[str, float] = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            values[key.strip()] = float(value)
    return values


class SegmentationScorer:
    """Global confusion counts over (background + ``num_classes``) ids."""

    def __init__(self, num_classes: int) -> None:
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
        self.samples = 0
        self._fp = 0
        self._fn = 0
        self._union = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        n = self.num_classes + 1
        if pred.max(initial=0) >= n or gt.max(initial=0) >= n:
            raise ShapeError(f"mask ids exceed {n - 1}")
        idx = gt.astype(np.int64).reshape(-1) * n + pred.astype(np.int64).reshape(-1)
        self.confusion += np.bincount(idx, minlength=n * n).reshape(n, n)
        p, g = pred > 0, gt > 0
        self._fp += int((p & ~g).sum())
        self._fn += int((g & ~p).sum())
        self._union += int((p | g).sum())
        self.samples += 1

    def report(self, extras: dict[str, float] | None = None) -> EvalReport:
        gt_total = self.confusion.sum(axis=1)
        pred_total = self.confusion.sum(axis=0)
        agree = np.diag(self.confusion)
        union = gt_total + pred_total - agree
        iou = np.full(self.num_classes + 1, np.nan)
        seen = union > 0
        iou[seen] = agree[seen] / union[seen]
        miou = float(np.nanmean(iou)) if seen.any() else 0.0
        fp_rate = self._fp / self._union if self._union else 0.0
        fn_rate = self._fn / self._union if self._union else 0.0
        return EvalReport(
            samples=self.samples,
            miou=miou,
            per_class_iou=iou,
            fp_rate=float(fp_rate),
            fn_rate=float(fn_rate),
            extras=dict(extras or {}),
        )


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> EvalReport:
    """Single-pair convenience wrapper over :class:`SegmentationScorer`."""
    scorer = SegmentationScorer(num_classes)
    scorer.update(pred, gt)
    return scorer.report()


def fp_fn_rates(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Foreground false positive and false negative rates, both
    normalized by the foreground union; (0, 0) when both masks are
    empty."""
    p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
    union = int((p | g).sum())
    if union == 0:
        return 0.0, 0.0
    return float((p & ~g).sum() / union), float((g & ~p).sum() / union)


def classification_scores(logits: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Micro-averaged precision, recall, and F1 with the decision rule
    sigmoid(logit) > 0.5, i.e. logit > 0."""
    pred = np.asarray(logits) > 0
    truth = np.asarray(labels) > 0.5
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def render_heatmap(heatmap: np.ndarray, path) -> None:
    """Write a [H, W] heatmap in [0, 1] as an 8-bit grayscale P5 file;
    value v maps to round(255 * v)."""
    from .data import write_pgm

    write_pgm(path, np.round(np.clip(heatmap, 0.0, 1.0) * 255.0).astype(np.uint8))


def random_mask_baseline(samples, num_classes: int, rng: np.random.Generator) -> EvalReport:
    """Score uniformly random masks (ids 0..C) against the ground truth;
    the floor any learned localizer must clear."""
    scorer = SegmentationScorer(num_classes)
    for sample in samples:
        pred = rng.integers(0, num_classes + 1, size=sample.mask.shape).astype(np.uint8)
        scorer.update(pred, sample.mask)
    return scorer.report()


def evaluate_model(
    params: ModelParams,
    enc_cfg: EncoderConfig,
    attr_cfg: AttributeConfig,
    fuse_layers: int,
    samples,
    bg_threshold: float = 0.3,
    noise_sigma: float = 0.0,
    noise_seed: int = 0,
    batch_size: int = 16,
) -> EvalReport:
    """Run the localization pipeline over ``samples`` and score it.

    Images may be perturbed with clipped Gaussian pixel noise before the
    forward pass (robustness probes). The report's extras carry
    micro-averaged classification scores from the same forward passes.
    """
    if not samples:
        raise ShapeError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(noise_seed)
    num_classes = samples[0].labels.size
    scorer = SegmentationScorer(num_classes)
    logits_all = []
    labels_all = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        if noise_sigma > 0:
            images = np.clip(images + rng.normal(0.0, noise_sigma, size=images.shape), 0.0, 1.0)
        fwd = forward(params, Tensor(images), enc_cfg, attr_cfg, fuse_layers)
        logits_all.append(fwd.logits.data)
        for i, sample in enumerate(chunk):
            maps = localization_maps(fwd.maps.data[i], params["cls.w"], enc_cfg.image_size)
            pred = pseudo_mask(maps, sample.labels, bg_threshold)
            scorer.update(pred, sample.mask)
            labels_all.append(sample.labels)
    extras = classification_scores(np.concatenate(logits_all), np.stack(labels_all))
    return scorer.report(extras=extras)
