"""Convolutional building blocks and the grouped KAN operators.

Layers expose `profile(h, w, component)` which returns the output spatial
size and a `Counter` of multiply-accumulates per component, so that the
model can report FLOPs analytically.
"""

import logging
from collections import Counter
from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .config import GkaMode, TokenActivation, TransformKind
from .errors import ConfigurationError, DimensionError
from .module import Module, uniform_fan_in
from .spline import BaseActivation, GroupedKanLinear, SplineGrid, init_spline_coeffs, spline_bases
from .tensor import Parameter, Tensor, concat

logger = logging.getLogger(__name__)

Profile = Tuple[int, int, Counter]

# Depthwise kernel of the transform's spatial mixing stage.
DW_KERNEL = 3

# Exponential factor for BatchNorm running statistics.
BN_MOMENTUM = 0.1

ENCODER = "encoder"
DECODER = "decoder"
PATCH_EMBED = "patch_embed"
GKA = "gka"
GKT_SPLINE = "gkt_spline"
GKT_CONV = "gkt_conv"
MLP = "mlp"
COMPONENTS = (ENCODER, PATCH_EMBED, GKA, GKT_SPLINE, GKT_CONV, MLP, DECODER)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = uniform_fan_in(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = uniform_fan_in(rng, (out_channels,), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        out_h = F.conv_output_size(h, self.kernel, self.stride, self.padding)
        out_w = F.conv_output_size(w, self.kernel, self.stride, self.padding)
        macs = self.in_channels * self.out_channels * self.kernel ** 2 * out_h * out_w
        return out_h, out_w, Counter({self.component or component: macs})


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, padding: int = 0):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        self.padding = padding
        fan_in = kernel * kernel
        self.weight = uniform_fan_in(rng, (channels, 1, kernel, kernel), fan_in)
        self.bias = uniform_fan_in(rng, (channels,), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias, padding=self.padding)

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        out_h = F.conv_output_size(h, self.kernel, 1, self.padding)
        out_w = F.conv_output_size(w, self.kernel, 1, self.padding)
        macs = self.channels * self.kernel ** 2 * out_h * out_w
        return out_h, out_w, Counter({self.component or component: macs})


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim)
        self.bias = uniform_fan_in(rng, (out_dim,), in_dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects trailing dim {self.in_dim}, got {x.shape}")
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_dim)
        out = F.einsum("mp,qp->mq", flat, self.weight) + self.bias
        return out.reshape(lead + (self.out_dim,))


class LayerNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            out, _, _ = F.batch_norm(
                x,
                self.gamma,
                self.beta,
                self._buffers["running_mean"],
                self._buffers["running_var"],
            )
            return out

        out, mean, var = F.batch_norm(x, self.gamma, self.beta)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        self._buffers["running_mean"] = (1 - BN_MOMENTUM) * self._buffers[
            "running_mean"
        ] + BN_MOMENTUM * mean
        self._buffers["running_var"] = (1 - BN_MOMENTUM) * self._buffers[
            "running_var"
        ] + BN_MOMENTUM * unbiased
        return out


class ConvBlock(Module):
    """conv (same padding) -> BatchNorm -> ReLU"""

    def __init__(
        self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel: int = 3
    ):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng, padding=kernel // 2)
        self.norm = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.conv(x)))

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        return self.conv.profile(h, w, self.component or component)


class EncoderStage(Module):
    """ConvBlock followed by 2x2 max pooling"""

    component = ENCODER

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.block = ConvBlock(in_channels, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool2d(self.block(x))

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        h, w, macs = self.block.profile(h, w, self.component)
        return h // 2, w // 2, macs


class DecoderStage(Module):
    """Two ConvBlocks at low resolution, 2x upsampling, optional skip fusion.

    The skip feature is concatenated on channels and fused back to
    `out_channels` by a 1x1 ConvBlock.
    """

    component = DECODER

    def __init__(
        self, in_channels: int, out_channels: int, rng: np.random.Generator, skip: bool = True
    ):
        super().__init__()
        self.refine = ConvBlock(in_channels, in_channels, rng)
        self.project = ConvBlock(in_channels, out_channels, rng)
        self.fuse = ConvBlock(2 * out_channels, out_channels, rng, kernel=1) if skip else None

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        out = F.upsample_nearest2d(self.project(self.refine(x)))
        if self.fuse is None:
            return out
        if skip is None:
            raise DimensionError("This decoder stage needs a skip feature")
        return self.fuse(concat_channels(out, skip))

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        _, _, macs = self.refine.profile(h, w, self.component)
        _, _, project = self.project.profile(h, w, self.component)
        macs.update(project)
        h, w = 2 * h, 2 * w
        if self.fuse is not None:
            macs.update(self.fuse.profile(h, w, self.component)[2])
        return h, w, macs


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"Cannot join feature maps {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def to_tokens(x: Tensor) -> Tuple[Tensor, Tuple[int, int]]:
    """B x C x H x W map -> B x N x C tokens."""
    batch, channels, height, width = x.shape
    tokens = x.permute(0, 2, 3, 1).reshape(batch, height * width, channels)
    return tokens, (height, width)


def to_map(tokens: Tensor, spatial: Tuple[int, int]) -> Tensor:
    """B x N x C tokens -> B x C x H x W map."""
    batch, count, channels = tokens.shape
    height, width = spatial
    if count != height * width:
        raise DimensionError(f"{count} tokens do not form a {height}x{width} map")
    return tokens.reshape(batch, height, width, channels).permute(0, 3, 1, 2)


class PatchEmbedding(Module):
    """3x3 stride-2 convolution into tokens, normalized over channels"""

    component = PATCH_EMBED

    def __init__(self, in_channels: int, embed_channels: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Conv2d(in_channels, embed_channels, 3, rng, stride=2, padding=1)
        self.norm = LayerNorm(embed_channels)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tuple[int, int]]:
        tokens, spatial = to_tokens(self.proj(x))
        return self.norm(tokens), spatial

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        return self.proj.profile(h, w, self.component)


class GroupedKanActivation(Module):
    """Diagonal spline nonlinearity organized in contiguous channel groups.

    In shared mode every channel of a group goes through the group's single
    1 -> 1 spline; in per-channel mode each channel has its own spline.
    """

    component = GKA

    def __init__(
        self,
        channels: int,
        groups: int,
        grid: SplineGrid,
        rng: np.random.Generator,
        mode: str = GkaMode.SHARED,
        base_activation: str = BaseActivation.SILU,
    ):
        super().__init__()
        if groups < 1 or channels % groups:
            raise ConfigurationError(f"channels={channels} is not divisible by groups={groups}")
        self.channels = channels
        self.groups = groups
        self.group_size = channels // groups
        self.grid = grid
        self.mode = GkaMode(mode).value
        self.base_activation = BaseActivation(base_activation).value

        if self.mode == GkaMode.SHARED:
            self.spline_coeffs = init_spline_coeffs(rng, (groups, grid.num_basis), grid)
            self.base_weight = uniform_fan_in(rng, (groups, 1), 1)
        else:
            self.spline_coeffs = init_spline_coeffs(
                rng, (groups, self.group_size, grid.num_basis), grid
            )
            self.base_weight = uniform_fan_in(rng, (groups, self.group_size), 1)

    def forward(self, t: Tensor) -> Tensor:
        if t.shape[-1] != self.channels:
            raise DimensionError(
                f"GroupedKanActivation expects {self.channels} channels, got {t.shape}"
            )
        lead = t.shape[:-1]
        grouped = t.reshape(-1, self.groups, self.group_size)
        bases = spline_bases(grouped, self.grid)
        if self.mode == GkaMode.SHARED:
            spline = F.einsum("mgjk,gk->mgj", bases, self.spline_coeffs)
        else:
            spline = F.einsum("mgjk,gjk->mgj", bases, self.spline_coeffs)
        base = F.activation(self.base_activation)(grouped) * self.base_weight
        return (spline + base).reshape(lead + (self.channels,))

    def profile_tokens(self, tokens: int) -> Counter:
        return Counter({self.component: tokens * self.channels * (self.grid.num_basis + 1)})


class GroupedKanTransform(Module):
    """Grouped spline stage, PW conv -> sigma -> DW conv, residual and LayerNorm.

    `kind="mlp"` swaps the grouped spline stage for a full-channel Linear;
    the `use_*` switches drop individual stages.
    """

    def __init__(
        self,
        channels: int,
        groups: int,
        grid: SplineGrid,
        rng: np.random.Generator,
        sigma: str = BaseActivation.GELU,
        base_activation: str = BaseActivation.SILU,
        kind: str = TransformKind.GKT,
        use_spline: bool = True,
        use_pwconv: bool = True,
        use_dwconv: bool = True,
    ):
        super().__init__()
        if groups < 1 or channels % groups:
            raise ConfigurationError(f"channels={channels} is not divisible by groups={groups}")
        self.channels = channels
        self.groups = groups
        self.sigma = BaseActivation(sigma).value
        self.kind = TransformKind(kind).value

        self.mixer: Optional[Module] = None
        if self.kind == TransformKind.MLP:
            self.mixer = Linear(channels, channels, rng)
            self.mixer.component = MLP
        elif use_spline:
            self.mixer = GroupedKanLinear(channels, groups, grid, rng, base_activation)
            self.mixer.component = GKT_SPLINE

        self.pwconv = Conv2d(channels, channels, 1, rng) if use_pwconv else None
        self.dwconv = (
            DepthwiseConv2d(channels, DW_KERNEL, rng, padding=DW_KERNEL // 2)
            if use_dwconv
            else None
        )
        self.norm = LayerNorm(channels)
        for module in (self.pwconv, self.dwconv, self.norm):
            if module is not None:
                module.component = GKT_CONV

    def spline_stage(self, x: Tensor) -> Tensor:
        """Z of the transform: grouped channel mapping before any mixing."""
        return x if self.mixer is None else self.mixer(x)

    def forward(self, x: Tensor, spatial: Tuple[int, int]) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.channels:
            raise DimensionError(f"Expected B x N x {self.channels} tokens, got {x.shape}")
        if x.shape[1] != spatial[0] * spatial[1]:
            raise DimensionError(
                f"{x.shape[1]} tokens do not match spatial size {spatial[0]}x{spatial[1]}"
            )
        y = to_map(self.spline_stage(x), spatial)
        if self.pwconv is not None:
            y = self.pwconv(y)
        y = F.activation(self.sigma)(y)
        if self.dwconv is not None:
            y = self.dwconv(y)
        y, _ = to_tokens(y)
        return self.norm(y + x)

    def profile_tokens(self, h: int, w: int) -> Counter:
        tokens = h * w
        macs: Counter = Counter()
        if isinstance(self.mixer, GroupedKanLinear):
            macs[GKT_SPLINE] += tokens * self.mixer.macs_per_token()
        elif isinstance(self.mixer, Linear):
            macs[MLP] += tokens * self.channels * self.channels
        if self.pwconv is not None:
            macs.update(self.pwconv.profile(h, w)[2])
        if self.dwconv is not None:
            macs.update(self.dwconv.profile(h, w)[2])
        return macs


def gkt_spline_param_count(channels: int, groups: int, grid: SplineGrid) -> int:
    if groups < 1 or channels % groups:
        raise ConfigurationError(f"channels={channels} is not divisible by groups={groups}")
    return channels * channels * (grid.num_basis + 1) // groups


def gkt_param_count(channels: int, groups: int, grid: SplineGrid) -> int:
    """Trainable scalars of one full GroupedKanTransform."""
    spline = gkt_spline_param_count(channels, groups, grid)
    pwconv = channels * channels + channels
    dwconv = DW_KERNEL * DW_KERNEL * channels + channels
    norm = 2 * channels
    return spline + pwconv + dwconv + norm


class TokKanBlock(Module):
    """Group ToK-KAN block: [patch embedding] -> token activation -> N transforms.

    Encoder blocks embed with a stride-2 convolution. Decoder blocks
    (`embed=False`) tokenize the incoming map as is.
    """

    def __init__(
        self,
        in_channels: int,
        channels: int,
        gka_groups: int,
        gkt_groups: int,
        grid: SplineGrid,
        rng: np.random.Generator,
        kinds: List[str],
        embed: bool = True,
        gka_mode: str = GkaMode.SHARED,
        token_activation: str = TokenActivation.GKA,
        sigma: str = BaseActivation.GELU,
        base_activation: str = BaseActivation.SILU,
        use_spline: bool = True,
        use_pwconv: bool = True,
        use_dwconv: bool = True,
    ):
        super().__init__()
        if not embed and in_channels != channels:
            raise ConfigurationError(
                f"A block without embedding needs in_channels == channels, "
                f"got {in_channels} and {channels}"
            )
        self.channels = channels
        self.embed = PatchEmbedding(in_channels, channels, rng) if embed else None
        self.token_activation = TokenActivation(token_activation).value
        self.activation = (
            GroupedKanActivation(channels, gka_groups, grid, rng, gka_mode, base_activation)
            if self.token_activation == TokenActivation.GKA
            else None
        )
        self.transforms = [
            GroupedKanTransform(
                channels,
                gkt_groups,
                grid,
                rng,
                sigma=sigma,
                base_activation=base_activation,
                kind=kind,
                use_spline=use_spline,
                use_pwconv=use_pwconv,
                use_dwconv=use_dwconv,
            )
            for kind in kinds
        ]

    def activate(self, tokens: Tensor) -> Tensor:
        if self.activation is not None:
            return self.activation(tokens)
        if self.token_activation == TokenActivation.NONE:
            return tokens
        return F.activation(self.token_activation)(tokens)

    def forward(self, x: Tensor) -> Tensor:
        if self.embed is not None:
            tokens, spatial = self.embed(x)
        else:
            tokens, spatial = to_tokens(x)
        tokens = self.activate(tokens)
        for transform in self.transforms:
            tokens = transform(tokens, spatial)
        return to_map(tokens, spatial)

    def profile(self, h: int, w: int, component: Optional[str] = None) -> Profile:
        macs: Counter = Counter()
        if self.embed is not None:
            h, w, embed = self.embed.profile(h, w)
            macs.update(embed)
        if self.activation is not None:
            macs.update(self.activation.profile_tokens(h * w))
        for transform in self.transforms:
            macs.update(transform.profile_tokens(h, w))
        return h, w, macs


def tok_kan_block(block: TokKanBlock, x: Tensor) -> Tensor:
    return block(x)


def gka_forward(act: GroupedKanActivation, t: Tensor) -> Tensor:
    return act(t)


def gkt_forward(tr: GroupedKanTransform, x: Tensor, spatial: Tuple[int, int]) -> Tensor:
    return tr(x, spatial)
