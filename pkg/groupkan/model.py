"""The GroupKAN encoder-decoder and its analytic parameter and FLOP counts."""

import logging
from collections import Counter
from typing import Dict, Tuple

import numpy as np
from pydantic import root_validator

from .common import BaseModel
from .config import RESOLUTION_MULTIPLE, GroupKanConfig
from .errors import DimensionError
from .layers import (
    COMPONENTS,
    DECODER,
    Conv2d,
    DecoderStage,
    EncoderStage,
    TokKanBlock,
)
from .module import Module
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Breakdown(BaseModel):
    """Counts per architectural component; `total` is their sum."""

    encoder: int = 0
    patch_embed: int = 0
    gka: int = 0
    gkt_spline: int = 0
    gkt_conv: int = 0
    mlp: int = 0
    decoder: int = 0
    total: int = 0

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_total(cls, values: dict) -> dict:
        parts = sum(values[name] for name in COMPONENTS)
        if values["total"] != parts:
            raise ValueError(f"total={values['total']} does not equal the component sum {parts}")
        return values

    @classmethod
    def from_counts(cls, counts: Dict[str, int], scale: int = 1) -> "Breakdown":
        unknown = set(counts) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"Unknown components {sorted(unknown)}")
        values = {name: int(counts.get(name, 0)) * scale for name in COMPONENTS}
        return cls(total=sum(values.values()), **values)


class GroupKanNet(Module):
    """Three conv encoder stages, two embedding ToK-KAN blocks at C2 and C3,
    and a decoder that mirrors both with skip connections.

    Resolutions for an H x W input:

        enc1 H/2 (C1/8), enc2 H/4 (C1/4), enc3 H/8 (C1)
        block1 H/16 (C2), block2 H/32 (C3)
        dec_block3 H/32 (C3), dec1 H/16 (C2) + dec_block2
        dec2 H/8 (C1), dec3 H/4 (C1/4), dec4 H/2 (C1/8), dec5 H (C1/8)
        head 1x1 -> num_classes
    """

    def __init__(self, cfg: GroupKanConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2, c3 = cfg.c1, cfg.c2, cfg.c3

        self.enc1 = EncoderStage(cfg.input_channels, c1 // 8, rng)
        self.enc2 = EncoderStage(c1 // 8, c1 // 4, rng)
        self.enc3 = EncoderStage(c1 // 4, c1, rng)

        self.block1 = self._tok_kan(cfg, c1, c2, rng, embed=True)
        self.block2 = self._tok_kan(cfg, c2, c3, rng, embed=True)

        self.dec_block3 = self._tok_kan(cfg, c3, c3, rng, embed=False)
        self.dec1 = DecoderStage(c3, c2, rng)
        self.dec_block2 = self._tok_kan(cfg, c2, c2, rng, embed=False)
        self.dec2 = DecoderStage(c2, c1, rng)
        self.dec3 = DecoderStage(c1, c1 // 4, rng)
        self.dec4 = DecoderStage(c1 // 4, c1 // 8, rng)
        self.dec5 = DecoderStage(c1 // 8, c1 // 8, rng, skip=False)

        self.head = Conv2d(c1 // 8, cfg.num_classes, 1, rng)
        self.head.component = DECODER

    @staticmethod
    def _tok_kan(
        cfg: GroupKanConfig, in_channels: int, channels: int, rng, embed: bool
    ) -> TokKanBlock:
        return TokKanBlock(
            in_channels,
            channels,
            cfg.gka_groups,
            cfg.gkt_groups,
            cfg.grid,
            rng,
            kinds=cfg.transform_kinds,
            embed=embed,
            gka_mode=cfg.gka_mode,
            token_activation=cfg.token_activation,
            sigma=cfg.sigma,
            base_activation=cfg.base_activation,
            use_spline=cfg.gkt_spline,
            use_pwconv=cfg.gkt_pwconv,
            use_dwconv=cfg.gkt_dwconv,
        )

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise DimensionError(
                f"Expected a B x {self.config.input_channels} x H x W input, got {x.shape}"
            )
        height, width = x.shape[2:]
        if height % RESOLUTION_MULTIPLE or width % RESOLUTION_MULTIPLE:
            raise DimensionError(
                f"Input {height}x{width} must have sides divisible by {RESOLUTION_MULTIPLE}"
            )

    def encode(self, x: Tensor) -> Tuple[Tensor, ...]:
        self.check_input(x)
        t1 = self.enc1(x)
        t2 = self.enc2(t1)
        t3 = self.enc3(t2)
        t4 = self.block1(t3)
        bottleneck = self.block2(t4)
        return t1, t2, t3, t4, bottleneck

    def forward(self, x: Tensor) -> Tensor:
        t1, t2, t3, t4, bottleneck = self.encode(x)
        out = self.dec_block3(bottleneck)
        out = self.dec_block2(self.dec1(out, t4))
        out = self.dec2(out, t3)
        out = self.dec3(out, t2)
        out = self.dec4(out, t1)
        out = self.dec5(out)
        return self.head(out)

    def bottleneck_features(self, x: Tensor) -> Tensor:
        """Output of the C3 ToK-KAN block, B x C3 x H/32 x W/32."""
        return self.encode(x)[-1]

    def profile(self, height: int, width: int) -> Counter:
        """Multiply-accumulates per component for one height x width sample."""
        if height % RESOLUTION_MULTIPLE or width % RESOLUTION_MULTIPLE:
            raise DimensionError(
                f"Input {height}x{width} must have sides divisible by {RESOLUTION_MULTIPLE}"
            )
        macs: Counter = Counter()
        h, w = height, width
        for stage in (self.enc1, self.enc2, self.enc3, self.block1, self.block2, self.dec_block3):
            h, w, stage_macs = stage.profile(h, w)
            macs.update(stage_macs)
        for stage in (self.dec1, self.dec_block2, self.dec2, self.dec3, self.dec4, self.dec5):
            h, w, stage_macs = stage.profile(h, w)
            macs.update(stage_macs)
        macs.update(self.head.profile(h, w)[2])
        return macs


def build(cfg: GroupKanConfig) -> GroupKanNet:
    net = GroupKanNet(cfg)
    logger.debug(
        "Built GroupKAN C=(%d, %d, %d) G=(%d, %d) with %d parameters",
        cfg.c1,
        cfg.c2,
        cfg.c3,
        cfg.gka_groups,
        cfg.gkt_groups,
        net.num_parameters(),
    )
    return net


def forward(net: GroupKanNet, x: Tensor) -> Tensor:
    return net(x)


def count_params(net: Module) -> Breakdown:
    counts: Counter = Counter()
    for _, param, component in net.named_parameters():
        counts[component or DECODER] += param.size
    return Breakdown.from_counts(counts)


def count_flops(net: GroupKanNet, height: int, width: int) -> Breakdown:
    """FLOPs (2 x multiply-accumulates) of one forward pass at height x width."""
    return Breakdown.from_counts(net.profile(height, width), scale=2)


def log_profile(net: GroupKanNet, height: int, width: int) -> Tuple[Breakdown, Breakdown]:
    params = count_params(net)
    flops = count_flops(net, height, width)
    logger.info(
        "params=%d (%.2fM) gflops=%.3f at %dx%d, spline grid %s",
        params.total,
        params.total / 1e6,
        flops.total / 1e9,
        height,
        width,
        net.config.grid.describe(),
    )
    return params, flops
