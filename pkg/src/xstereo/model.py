"""Two-stream patch matcher: independent RGB/LWIR extractors plus fusion heads."""
from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .extractor import ExtractorConfig, build_extractor
from .heads import FUSION_MODES, Head, HeadConfig, concatenate, correlate


class PatchMatcher(nn.Module):
    def __init__(self, rgb_config: ExtractorConfig, head_config: HeadConfig,
                 fusion_mode="both", seed=0):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {fusion_mode!r}; expected one of {FUSION_MODES}")
        rgb_config = copy.deepcopy(rgb_config)
        rgb_config.input_channels = 3
        lwir_config = copy.deepcopy(rgb_config)
        lwir_config.input_channels = 1
        self.rgb_config, self.lwir_config = rgb_config, lwir_config
        self.head_config = head_config
        self.fusion_mode = fusion_mode

        # distinct seeds so the two streams never start from shared weights
        self.rgb = build_extractor(rgb_config, seed=2 * seed)
        self.lwir = build_extractor(lwir_config, seed=2 * seed + 1)

        p, c = rgb_config.patch_size, rgb_config.output_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 7919)
            self.corr_head = (Head((c, p, p), head_config.hidden)
                              if fusion_mode != "concatenation_only" else None)
            self.concat_head = (Head((c, 2 * p, p), head_config.hidden)
                                if fusion_mode != "correlation_only" else None)

    @property
    def patch_size(self):
        return self.rgb_config.patch_size

    def heads_scores(self, f_rgb, f_lwir):
        """Raw head scores for paired feature maps; absent heads map to None."""
        corr = self.corr_head(correlate(f_rgb, f_lwir)) if self.corr_head is not None else None
        concat = self.concat_head(concatenate(f_rgb, f_lwir)) if self.concat_head is not None else None
        return corr, concat

    def forward(self, rgb, lwir):
        return self.heads_scores(self.rgb(rgb), self.lwir(lwir))
