from __future__ import annotations

import torch
from torch import nn

from .blocks import BackboneSpec, ConvBNAct, build_backbone, init_weights
from .em import EmConfig, EMModule
from .head import GazeHead

TAIL_CHANNELS = 960


class EMNet(nn.Module):
    """Improved MobileNetV3 backbone -> 1x1 tail conv (960) -> EM module -> gaze head.

    ``attention`` selects what sits at the three backbone attention sites
    (gam, se, cbam, none); ``em=False`` drops the EM module and the head
    pools the 960-channel tail directly.
    """

    def __init__(self, attention: str = "gam", em: bool = True, em_cfg: EmConfig | None = None,
                 input_size: int = 224, head_hidden: int = 256, spec: BackboneSpec | None = None):
        super().__init__()
        self.attention = attention
        self.use_em = em
        self.input_size = input_size
        self.backbone = build_backbone(spec or BackboneSpec.canned("improved"), attention, input_size)
        self.tail = ConvBNAct(self.backbone.out_channels, TAIL_CHANNELS, 1, act="HS")
        if em:
            em_cfg = em_cfg or EmConfig(in_channels=TAIL_CHANNELS)
            self.em = EMModule(em_cfg)
            head_in = em_cfg.reduced_channels
        else:
            self.em = None
            head_in = TAIL_CHANNELS
        self.head = GazeHead(head_in, head_hidden)
        init_weights(self)

    def stage_names(self) -> list[str]:
        names = self.backbone.stage_names() + ["tail"]
        return names + (["em"] if self.em is not None else [])

    def features(self, x, until: str | None = None):
        if until is not None and until not in self.stage_names():
            raise KeyError(f"unknown stage {until!r}; valid: {', '.join(self.stage_names())}")
        if until in self.backbone.layers:
            return self.backbone(x, until)
        x = self.tail(self.backbone(x))
        if until == "tail" or self.em is None:
            return x
        return self.em(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))
