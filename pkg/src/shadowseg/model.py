"""End-to-end trainable head over a frozen token pyramid."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import BackboneConfig, TextReference, TokenPyramid
from .consistency import ProjectionSet, build_consistency_maps
from .fusion import (FusionHead, PredictionBundle, aggregate_layers,
                     decode_final, predict_ratio_logit, to_aux_logits)


class ShadowHead(nn.Module):
    """Projections, fusion weights, and refinement decoder in one module.

    Everything trainable lives here; the frozen encoders stay outside. The
    forward pass maps one token pyramid plus the text reference to the full
    prediction bundle.
    """

    def __init__(self, config: BackboneConfig, hidden_width: int = 64,
                 scale_init: float = 10.0, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        self.hidden_width = hidden_width
        gen = torch.Generator().manual_seed(seed)
        self.projections = ProjectionSet(config.feature_dim, config.text_dim,
                                         scale_init=scale_init, generator=gen, dtype=dtype)
        self.fusion = FusionHead(config.feature_dim, config.num_levels,
                                 hidden_width=hidden_width, generator=gen, dtype=dtype)

    def forward(self, pyramid: TokenPyramid, text: TextReference) -> PredictionBundle:
        maps = build_consistency_maps(pyramid, text, self.projections)
        fused_cls, fused_text = aggregate_layers(maps, self.fusion)
        size = self.config.image_size
        return PredictionBundle(
            final_logits=decode_final(fused_cls, fused_text, pyramid.shallow_patches,
                                      self.fusion, size),
            patch_cls_logits=to_aux_logits(fused_cls, size),
            patch_text_logits=to_aux_logits(fused_text, size),
            ratio_logit=predict_ratio_logit(maps, self.fusion),
        )

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(decayed, undecayed) parameters.

        Scale factors and fusion weights are kept out of weight decay:
        shrinking a temperature-style scalar toward zero collapses every
        score it multiplies.
        """
        no_decay_names = {
            "projections.patch_cls_scale", "projections.cls_text_scale",
            "projections.patch_text_scale", "fusion.patch_cls_weights",
            "fusion.patch_text_weights", "fusion.ratio_weights",
        }
        decay, no_decay = [], []
        for name, param in self.named_parameters():
            (no_decay if name in no_decay_names else decay).append(param)
        return decay, no_decay

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
