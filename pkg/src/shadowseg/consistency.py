"""Cross-modal consistency scoring in a shared projected space.

Tokens and the text embedding pass through trainable linear projections,
are l2-normalized, and compared by scaled inner products. Three scores come
out per selected layer: a scalar global-token/text score, a per-patch
patch/global-token map, and a per-patch patch/text map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import TextReference, TokenPyramid
from .errors import ConfigurationError, DegenerateProjectionError

_NORM_FLOOR = 1e-12


class ProjectionSet(nn.Module):
    """Trainable projections and scale factors, shared across all layers.

    Square projections start at identity plus small noise so the frozen
    token geometry survives step 0; the rectangular text projection starts
    at a truncated identity plus the same noise. Scales start at 10.0,
    temperature-style.
    """

    def __init__(self, feature_dim: int, text_dim: int, scale_init: float = 10.0,
                 noise_std: float = 0.01, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if scale_init <= 0:
            raise ConfigurationError("scale_init must be positive")
        self.feature_dim = feature_dim
        self.text_dim = text_dim

        def near_identity(rows, cols):
            w = torch.zeros(rows, cols, dtype=dtype)
            w[: min(rows, cols), : min(rows, cols)] = torch.eye(min(rows, cols), dtype=dtype)
            noise = torch.randn(rows, cols, generator=generator, dtype=dtype)
            return w + noise_std * noise

        self.text_proj = nn.Parameter(near_identity(feature_dim, text_dim))
        self.cls_proj = nn.Parameter(near_identity(feature_dim, feature_dim))
        self.patch_proj = nn.Parameter(near_identity(feature_dim, feature_dim))
        scalar = lambda: nn.Parameter(torch.tensor(float(scale_init), dtype=dtype))
        self.patch_cls_scale = scalar()   # scales patch/global-token scores
        self.cls_text_scale = scalar()    # scales global-token/text scores
        self.patch_text_scale = scalar()  # scales patch/text scores


def project_unit(v: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Project ``v`` (one vector or a stack of vectors) and l2-normalize.

    Raises DegenerateProjectionError when any projected norm is ~zero;
    a collapsed projection signals a broken training run, not a value to
    clamp silently.
    """
    projected = v @ weight.T
    norms = projected.norm(dim=-1, keepdim=True)
    if (norms <= _NORM_FLOOR).any():
        raise DegenerateProjectionError(
            f"projected norm below {_NORM_FLOOR:g}; min={float(norms.min()):g}"
        )
    return projected / norms.clamp_min(_NORM_FLOOR)


def cls_text_score(cls_unit: torch.Tensor, text_unit: torch.Tensor,
                   scale: torch.Tensor | float) -> torch.Tensor:
    """Scaled inner product between unit global token and unit text embedding."""
    return scale * (cls_unit * text_unit).sum()


def patch_cls_scores(patch_units: torch.Tensor, cls_unit: torch.Tensor,
                     scale: torch.Tensor | float) -> torch.Tensor:
    """Scaled inner products between each unit patch token and the unit global token."""
    return scale * (patch_units @ cls_unit)


def patch_text_scores(patch_units: torch.Tensor, text_unit: torch.Tensor,
                      scale: torch.Tensor | float) -> torch.Tensor:
    """Scaled inner products between each unit patch token and the unit text embedding."""
    return scale * (patch_units @ text_unit)


@dataclass
class LayerConsistency:
    """Scores of one selected layer."""

    cls_text: torch.Tensor    # scalar
    patch_cls: torch.Tensor   # [N]
    patch_text: torch.Tensor  # [N]


@dataclass
class ConsistencyMaps:
    """Per-layer consistency scores for the whole pyramid."""

    layers: list[LayerConsistency]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def build_consistency_maps(pyramid: TokenPyramid, text: TextReference,
                           proj: ProjectionSet) -> ConsistencyMaps:
    """Compute all three consistency scores for every selected layer.

    Differentiable w.r.t. every ProjectionSet parameter; the pyramid and
    text embedding are treated as frozen inputs.
    """
    if pyramid.feature_dim != proj.feature_dim:
        raise ConfigurationError(
            f"pyramid feature dim {pyramid.feature_dim} != projection dim {proj.feature_dim}"
        )
    if text.embedding.shape != (proj.text_dim,):
        raise ConfigurationError(
            f"text embedding shape {tuple(text.embedding.shape)} != ({proj.text_dim},)"
        )
    dtype = proj.text_proj.dtype
    text_unit = project_unit(text.embedding.to(dtype), proj.text_proj)
    layers = []
    for level in pyramid.levels:
        cls_unit = project_unit(level.cls.to(dtype), proj.cls_proj)
        patch_units = project_unit(level.patches.to(dtype), proj.patch_proj)
        layers.append(LayerConsistency(
            cls_text=cls_text_score(cls_unit, text_unit, proj.cls_text_scale),
            patch_cls=patch_cls_scores(patch_units, cls_unit, proj.patch_cls_scale),
            patch_text=patch_text_scores(patch_units, text_unit, proj.patch_text_scale),
        ))
    return ConsistencyMaps(layers=layers)
