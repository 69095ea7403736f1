"""The learnable model: a small convolutional backbone with mid-layer tap
points, a bias-free cosine classifier head, and the residual-prediction heads
(per-layer direction/length transforms plus layer-weight gates).

All forward ops accept a batch dimension. Single vectors can be passed with
``unsqueeze(0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ShapeMismatch, ZeroVector
from .geometry import EPS_NORM


@dataclass(frozen=True)
class BackboneConfig:
    """Conv backbone layout.

    block_widths: output channels per stage (each stage downsamples 2x).
    input_shape: (height, width, channels) of the expected input.
    tap_layers: stage indices exposed as mid-layers; must exclude the first
        and last stage.
    """

    block_widths: tuple = (16, 32, 64, 128)
    input_shape: tuple = (32, 32, 1)
    tap_layers: tuple = (1, 2)

    def __post_init__(self):
        n = len(self.block_widths)
        if n < 3:
            raise ValueError("need at least 3 stages to have a mid-layer")
        taps = tuple(self.tap_layers)
        if len(taps) < 1:
            raise ValueError("at least one tap layer is required")
        if any(t <= 0 or t >= n - 1 for t in taps):
            raise ValueError(
                f"tap_layers {taps} must lie strictly between stage 0 and {n - 1}"
            )
        object.__setattr__(self, "block_widths", tuple(self.block_widths))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "tap_layers", taps)

    @property
    def feature_dim(self) -> int:
        return self.block_widths[-1]

    @property
    def mid_dims(self) -> tuple:
        return tuple(self.block_widths[t] for t in self.tap_layers)


def safe_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalize along dim with the zero-norm guard (degenerate rows come
    back near-zero instead of NaN)."""
    return x / x.norm(dim=dim, keepdim=True).clamp_min(EPS_NORM)


def abs_prototypes(weight: torch.Tensor) -> torch.Tensor:
    """Elementwise absolute value of the classifier weight rows.

    Applied before every use of the prototypes (logits and reconstruction) so
    they live in the same nonnegative space as the rectified features.
    """
    return weight.abs()


def _conv_stage(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class ConvBackbone(nn.Module):
    """Stack of conv stages; exposes pooled activations of the tap stages."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        in_ch = config.input_shape[2]
        stages = []
        for width in config.block_widths:
            stages.append(_conv_stage(in_ch, width))
            in_ch = width
        self.stages = nn.ModuleList(stages)

    def forward_with_taps(self, x: torch.Tensor):
        """Run the backbone; return (final feature, list of mid features).

        The final feature and each mid feature are the spatial global average
        of the corresponding stage output, so they stay nonnegative.
        """
        h, w, c = self.config.input_shape
        if x.dim() != 4 or x.shape[1] != c or x.shape[2] != h or x.shape[3] != w:
            raise ShapeMismatch(
                f"expected input (B, {c}, {h}, {w}), got {tuple(x.shape)}"
            )
        mids = []
        out = x
        for idx, stage in enumerate(self.stages):
            out = stage(out)
            if idx in self.config.tap_layers:
                mids.append(out.mean(dim=(2, 3)))
        feat = out.mean(dim=(2, 3))
        return feat, mids

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat, _ = self.forward_with_taps(x)
        return feat


class CosineClassifier(nn.Module):
    """Bias-free head whose logits are temperature-scaled cosine similarities
    between the normalized feature and normalized absolute-valued prototypes."""

    def __init__(self, num_classes: int, feature_dim: int, temperature: float = 10.0):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self.weight = nn.Parameter(torch.empty(num_classes, feature_dim))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return cosine_logits(feat, self.weight, self.temperature)


def cosine_logits(
    feat: torch.Tensor, weight: torch.Tensor, temperature: float
) -> torch.Tensor:
    """logit_i = tau * cos(abs(W_i), f) for a (B, d) feature batch."""
    squeeze = feat.dim() == 1
    if squeeze:
        feat = feat.unsqueeze(0)
    norms = feat.norm(dim=-1)
    if bool((norms <= EPS_NORM).any()):
        raise ZeroVector("cosine logits of a zero feature are undefined")
    f_c = feat / norms.unsqueeze(-1)
    w_c = safe_normalize(abs_prototypes(weight))
    logits = temperature * (f_c @ w_c.t())
    return logits.squeeze(0) if squeeze else logits


class ResidualHeads(nn.Module):
    """Per-mid-layer linear transforms predicting the residual's direction and
    length, plus two independent single-layer gates per layer whose softmaxed
    outputs weight the layer combination.

    The transforms are deliberately linear only; anything deeper would just
    relearn another high-level feature instead of using the mid-level one.
    """

    def __init__(self, mid_dims, feature_dim: int):
        super().__init__()
        self.mid_dims = tuple(mid_dims)
        self.feature_dim = feature_dim
        self.direction = nn.ModuleList(
            nn.Linear(d_l, feature_dim) for d_l in self.mid_dims
        )
        self.length = nn.ModuleList(nn.Linear(d_l, 1) for d_l in self.mid_dims)
        self.dir_gate = nn.ModuleList(nn.Linear(d_l, 1) for d_l in self.mid_dims)
        self.len_gate = nn.ModuleList(nn.Linear(d_l, 1) for d_l in self.mid_dims)
        # gates start at zero output -> uniform layer weights at init
        for gate in list(self.dir_gate) + list(self.len_gate):
            nn.init.zeros_(gate.weight)
            nn.init.zeros_(gate.bias)

    @property
    def num_layers(self) -> int:
        return len(self.mid_dims)

    def _check(self, mids):
        if len(mids) != self.num_layers:
            raise ShapeMismatch(
                f"expected {self.num_layers} mid features, got {len(mids)}"
            )

    def direction_weights(self, mids) -> torch.Tensor:
        """Softmax over the per-layer direction gate outputs; (B, L), rows
        strictly positive and summing to 1."""
        self._check(mids)
        gates = torch.cat([g(m) for g, m in zip(self.dir_gate, mids)], dim=-1)
        return F.softmax(gates, dim=-1)

    def length_weights(self, mids) -> torch.Tensor:
        self._check(mids)
        gates = torch.cat([g(m) for g, m in zip(self.len_gate, mids)], dim=-1)
        return F.softmax(gates, dim=-1)

    def predict_direction(self, mids):
        """Weighted combination of the per-layer normalized transforms.

        Returns (unit direction (B, d), layer weights (B, L)).
        """
        self._check(mids)
        weights = self.direction_weights(mids)
        per_layer = torch.stack(
            [safe_normalize(t(m)) for t, m in zip(self.direction, mids)], dim=1
        )  # (B, L, d)
        combo = (weights.unsqueeze(-1) * per_layer).sum(dim=1)
        norms = combo.norm(dim=-1)
        if bool((norms <= EPS_NORM).any()):
            raise ZeroVector("weighted direction combination vanished")
        return combo / norms.unsqueeze(-1), weights

    def predict_length(self, mids):
        """Weighted combination of the per-layer scalar length transforms.

        Returns (lengths (B,), layer weights (B, L)).
        """
        self._check(mids)
        weights = self.length_weights(mids)
        per_layer = torch.cat(
            [t(m) for t, m in zip(self.length, mids)], dim=-1
        )  # (B, L)
        return (weights * per_layer).sum(dim=-1), weights


class MidLevelNet(nn.Module):
    """Backbone + cosine classifier + residual-prediction heads."""

    def __init__(
        self,
        config: BackboneConfig,
        num_classes: int,
        temperature: float = 10.0,
    ):
        super().__init__()
        self.config = config
        self.backbone = ConvBackbone(config)
        self.classifier = CosineClassifier(
            num_classes, config.feature_dim, temperature
        )
        self.heads = ResidualHeads(config.mid_dims, config.feature_dim)

    def forward_with_taps(self, x: torch.Tensor):
        return self.backbone.forward_with_taps(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat, _ = self.forward_with_taps(x)
        return self.classifier(feat)
