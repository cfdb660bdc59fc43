"""Layer aggregation, auxiliary logit maps, and the refinement decoder.

Per-layer consistency maps are combined by learnable scalar weights into two
aggregated patch-score maps. Those two channels, concatenated with the
shallow skip tokens, feed a small two-conv refinement head that emits the
final logit map. A third weight vector turns the per-layer global scores
into the scene-ratio logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .consistency import ConsistencyMaps
from .errors import ConfigurationError, InputError


@dataclass
class PredictionBundle:
    """All logits produced for one image."""

    final_logits: torch.Tensor       # [H, W]
    patch_cls_logits: torch.Tensor   # [H, W] auxiliary map from patch/global scores
    patch_text_logits: torch.Tensor  # [H, W] auxiliary map from patch/text scores
    ratio_logit: torch.Tensor        # scalar


class FusionHead(nn.Module):
    """Learnable fusion weights plus the refinement convolution stack.

    Fusion weights start at 1/K (unbiased layer mixing); the conv stack is
    2 + D -> hidden -> 1 with 3x3 kernels and a ReLU in between, initialized
    uniformly in +-1/sqrt(fan_in) from the supplied generator.
    """

    def __init__(self, feature_dim: int, num_layers: int, hidden_width: int = 64,
                 generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if num_layers <= 0 or hidden_width <= 0:
            raise ConfigurationError("num_layers and hidden_width must be positive")
        self.feature_dim = feature_dim
        self.num_layers = num_layers
        even = torch.full((num_layers,), 1.0 / num_layers, dtype=dtype)
        self.patch_cls_weights = nn.Parameter(even.clone())
        self.patch_text_weights = nn.Parameter(even.clone())
        self.ratio_weights = nn.Parameter(even.clone())
        self.refine = nn.Sequential(
            nn.Conv2d(2 + feature_dim, hidden_width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden_width, 1, kernel_size=3, padding=1),
        )
        self.refine.to(dtype)
        for m in self.refine:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.weight, -bound, bound, generator=generator)
                nn.init.uniform_(m.bias, -bound, bound, generator=generator)


def _check_layer_count(maps: ConsistencyMaps, num_layers: int) -> None:
    if maps.num_layers != num_layers:
        raise ConfigurationError(
            f"consistency maps carry {maps.num_layers} layers, fusion expects {num_layers}"
        )


def aggregate_layers(maps: ConsistencyMaps,
                     head: FusionHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted sums of the per-layer patch score maps; linear in both factors."""
    _check_layer_count(maps, head.num_layers)
    patch_cls = torch.stack([l.patch_cls for l in maps.layers])    # [K, N]
    patch_text = torch.stack([l.patch_text for l in maps.layers])  # [K, N]
    fused_cls = head.patch_cls_weights @ patch_cls
    fused_text = head.patch_text_weights @ patch_text
    return fused_cls, fused_text


def _patch_grid(scores: torch.Tensor) -> torch.Tensor:
    n = scores.shape[-1]
    side = math.isqrt(n)
    if side * side != n:
        raise InputError(f"patch count {n} is not a perfect square")
    return scores.reshape(side, side)


def upsample_bilinear(grid: torch.Tensor, image_size: int) -> torch.Tensor:
    """Bilinear upsample of a 2D grid (half-pixel centers, corners not aligned)."""
    out = F.interpolate(grid[None, None], size=(image_size, image_size),
                        mode="bilinear", align_corners=False)
    return out[0, 0]


def to_aux_logits(scores: torch.Tensor, image_size: int) -> torch.Tensor:
    """Reshape an aggregated patch score vector to its grid and upsample to pixels."""
    return upsample_bilinear(_patch_grid(scores), image_size)


def patch_center_values(logit_map: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Sample a pixel logit map at patch-center pixels.

    Only odd patch sizes have an exact center pixel; even sizes fall between
    pixels and this returns the upper-left of the four central pixels.
    """
    h = logit_map.shape[0]
    if h % patch_size != 0:
        raise InputError(f"map size {h} not divisible by patch size {patch_size}")
    centers = torch.arange(0, h, patch_size) + (patch_size - 1) // 2
    return logit_map[centers][:, centers]


def decode_final(fused_patch_cls: torch.Tensor, fused_patch_text: torch.Tensor,
                 shallow_patches: torch.Tensor, head: FusionHead,
                 image_size: int) -> torch.Tensor:
    """Fuse score channels with shallow skip tokens through the refinement head.

    The two aggregated score maps and the D shallow channels are stacked on
    the patch grid, refined by the conv stack, then upsampled to pixels.
    """
    n, d = shallow_patches.shape
    if d != head.feature_dim:
        raise ConfigurationError(
            f"shallow feature dim {d} != fusion feature dim {head.feature_dim}"
        )
    if fused_patch_cls.shape != (n,) or fused_patch_text.shape != (n,):
        raise ConfigurationError("aggregated score maps do not match the patch grid")
    side = math.isqrt(n)
    if side * side != n:
        raise InputError(f"patch count {n} is not a perfect square")
    dtype = head.patch_cls_weights.dtype
    channels = torch.cat([
        fused_patch_cls.reshape(1, side, side),
        fused_patch_text.reshape(1, side, side),
        shallow_patches.to(dtype).T.reshape(d, side, side),
    ])
    refined = head.refine(channels[None])[0, 0]  # [side, side]
    return upsample_bilinear(refined, image_size)


def predict_ratio_logit(maps: ConsistencyMaps, head: FusionHead) -> torch.Tensor:
    """Scene-ratio logit: learnable-weighted sum of the per-layer global scores."""
    _check_layer_count(maps, head.num_layers)
    scores = torch.stack([l.cls_text for l in maps.layers])
    return head.ratio_weights @ scores
