"""Parameter container and the full forward pass for one branch.

A model is a flat, insertion-ordered name-to-tensor map: patch embedding
and encoder blocks under ``patch.`` and ``layerN.``, the attribute head
under ``attr.``, and the affine classifier under ``cls.``. The encoder
group and the head group take different learning rates during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attributes import AttributeConfig, AttributeFeatures, attribute_features, init_attribute_params
from .encoder import (
    EncoderConfig,
    LayerOutputs,
    encode,
    init_encoder_params,
    tokens_to_grid,
    trunc_normal,
)
from .losses import attribute_guided_map, classify, fuse_attention
from .tensor import Tape, Tensor

HEAD_PREFIXES = ("attr.", "cls.")


class ModelParams(dict):
    """Flat ``name -> Tensor`` map with stable iteration order."""

    def copy(self) -> "ModelParams":
        """Deep copy: fresh tensors, fresh arrays, no tape attachments."""
        return ModelParams((name, Tensor(t.data.copy())) for name, t in self.items())

    def watch(self, tape: Tape) -> None:
        tape.watch(*self.values())

    def is_encoder(self, name: str) -> bool:
        return not name.startswith(HEAD_PREFIXES)

    def encoder_names(self) -> list[str]:
        return [n for n in self if self.is_encoder(n)]

    def head_names(self) -> list[str]:
        return [n for n in self if not self.is_encoder(n)]

    def clear_grads(self) -> None:
        for t in self.values():
            t.grad = None


def init_model_params(
    enc_cfg: EncoderConfig,
    attr_cfg: AttributeConfig,
    num_classes: int,
    rng: np.random.Generator,
) -> ModelParams:
    """Fresh parameters for every component of one branch."""
    params = ModelParams()
    params.update(init_encoder_params(enc_cfg, rng))
    params.update(init_attribute_params(enc_cfg.dim, attr_cfg, rng))
    params["cls.w"] = Tensor(trunc_normal(rng, (enc_cfg.dim, num_classes)))
    params["cls.b"] = Tensor(np.zeros(num_classes))
    return params


@dataclass
class ForwardPass:
    """Everything one branch computes for a batch of images."""

    layers: list[LayerOutputs]
    fused: Tensor
    attributes: AttributeFeatures
    maps: Tensor
    logits: Tensor


def forward(
    params: ModelParams,
    images,
    enc_cfg: EncoderConfig,
    attr_cfg: AttributeConfig,
    fuse_layers: int,
) -> ForwardPass:
    """Encode, gate, fuse, and classify. Accepts [H, W, 3] or
    [B, H, W, 3] images; outputs follow the input's batching."""
    layers = encode(images, params, enc_cfg)
    last_grid = tokens_to_grid(layers[-1].features, enc_cfg)
    attrs = attribute_features(last_grid, params, attr_cfg)
    fused = fuse_attention(layers, enc_cfg, fuse_layers)
    maps = attribute_guided_map(fused, attrs)
    logits = classify(maps, params["cls.w"], params["cls.b"])
    return ForwardPass(layers=layers, fused=fused, attributes=attrs, maps=maps, logits=logits)
