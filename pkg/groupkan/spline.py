"""B-spline bases and spline-parameterized (Kolmogorov-Arnold) linear layers.

A KAN layer maps `in_dim` inputs to `out_dim` outputs through a matrix of
learnable univariate functions

    phi_{q,p}(x) = w_{q,p} * base_activation(x) + sum_i c_{q,p,i} * B_i(x)

where B_i are the order-k B-spline bases on a uniform grid of g intervals,
extended by k knots past each end of [range_min, range_max].
"""

import enum
import logging

import numpy as np
from pydantic import Field, root_validator

from .common import BaseModel
from .errors import ConfigurationError, DimensionError
from .functional import activation, einsum
from .module import Module, uniform_fan_in
from .tensor import Function, Parameter, Tensor

logger = logging.getLogger(__name__)

# Spline coefficients start at N(0, (SPLINE_INIT_SCALE / (g + k))^2).
SPLINE_INIT_SCALE = 0.1


@enum.unique
class BaseActivation(str, enum.Enum):
    SILU = "silu"
    GELU = "gelu"
    RELU = "relu"
    IDENTITY = "identity"


class SplineGrid(BaseModel):
    """Uniform knot grid shared by every spline of a layer"""

    intervals: int = Field(5, ge=1)
    order: int = Field(3, ge=0)
    range_min: float = -1.0
    range_max: float = 1.0

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_range(cls, values: dict) -> dict:
        if values["range_min"] >= values["range_max"]:
            raise ValueError(
                f"range_min ({values['range_min']}) must be below range_max ({values['range_max']})"
            )
        return values

    @property
    def num_basis(self) -> int:
        return self.intervals + self.order

    @property
    def step(self) -> float:
        return (self.range_max - self.range_min) / self.intervals

    def knots(self) -> np.ndarray:
        """The g + 2k + 1 knots, uniformly spaced."""
        offsets = np.arange(-self.order, self.intervals + self.order + 1)
        return self.range_min + offsets * self.step

    def describe(self) -> str:
        return (
            f"g={self.intervals} k={self.order} "
            f"range=[{self.range_min:g}, {self.range_max:g}]"
        )


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, order: int):
    """Bases of order `order` and `order - 1` at x, shapes (..., n) and (..., n + 1)."""
    x = x[..., None]
    bases = ((x >= knots[:-1]) & (x < knots[1:])).astype(np.float64)
    previous = None
    for p in range(1, order + 1):
        previous = bases
        left = (x - knots[: -(p + 1)]) / (knots[p:-1] - knots[: -(p + 1)])
        right = (knots[p + 1 :] - x) / (knots[p + 1 :] - knots[1:-p])
        bases = left * bases[..., :-1] + right * bases[..., 1:]
    return bases, previous


def bspline_bases(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """All g + k basis values at every entry of x; shape x.shape + (g + k,)."""
    bases, _ = _cox_de_boor(np.asarray(x, dtype=np.float64), grid.knots(), grid.order)
    return bases


def bspline_basis(x: float, grid: SplineGrid) -> np.ndarray:
    """Values of the g + k basis functions at a single point."""
    return bspline_bases(np.asarray(x, dtype=np.float64), grid)


def bspline_basis_derivatives(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    """d B_i / dx at every entry of x; same shape as `bspline_bases`."""
    x = np.asarray(x, dtype=np.float64)
    knots = grid.knots()
    order = grid.order
    if order == 0:
        return np.zeros(x.shape + (grid.num_basis,))
    _, lower = _cox_de_boor(x, knots, order)
    left = order / (knots[order:-1] - knots[: -(order + 1)])
    right = order / (knots[order + 1 :] - knots[1:-order])
    return left * lower[..., :-1] - right * lower[..., 1:]


class BsplineBasis(Function):
    def forward(self, x: np.ndarray, grid: SplineGrid) -> np.ndarray:
        self.x, self.grid = x, grid
        return bspline_bases(x, grid)

    def backward(self, grad):
        derivatives = bspline_basis_derivatives(self.x, self.grid)
        return (np.sum(grad * derivatives, axis=-1),)


def spline_bases(x: Tensor, grid: SplineGrid) -> Tensor:
    """Differentiable basis expansion, appending a trailing axis of g + k."""
    return BsplineBasis.apply(x, grid=grid)


def kan_param_count(in_dim: int, out_dim: int, grid: SplineGrid) -> int:
    return out_dim * in_dim * (grid.num_basis + 1)


def init_spline_coeffs(rng: np.random.Generator, shape, grid: SplineGrid) -> Parameter:
    return Parameter(rng.normal(0.0, SPLINE_INIT_SCALE / grid.num_basis, size=shape))


class KanLinear(Module):
    """Full in_dim -> out_dim matrix of learnable splines"""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        grid: SplineGrid,
        rng: np.random.Generator,
        base_activation: str = BaseActivation.SILU,
    ):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"KanLinear dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.grid = grid
        self.base_activation = BaseActivation(base_activation).value
        self.spline_coeffs = init_spline_coeffs(rng, (out_dim, in_dim, grid.num_basis), grid)
        self.base_weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 1 or x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"KanLinear expects trailing dim {self.in_dim}, got shape {x.shape}"
            )
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_dim)
        spline = einsum("mpk,qpk->mq", spline_bases(flat, self.grid), self.spline_coeffs)
        base = einsum("mp,qp->mq", activation(self.base_activation)(flat), self.base_weight)
        return (spline + base).reshape(lead + (self.out_dim,))


def kan_forward(layer: KanLinear, x: Tensor) -> Tensor:
    return layer(x)


class GroupedKanLinear(Module):
    """G independent C_g -> C_g spline matrices over contiguous channel blocks.

    With G = 1 this is a full-channel KanLinear whose coefficients are
    `spline_coeffs[0]` and `base_weight[0]`.
    """

    def __init__(
        self,
        channels: int,
        groups: int,
        grid: SplineGrid,
        rng: np.random.Generator,
        base_activation: str = BaseActivation.SILU,
    ):
        super().__init__()
        if groups < 1 or channels % groups:
            raise ConfigurationError(
                f"channels={channels} is not divisible by groups={groups}"
            )
        self.channels = channels
        self.groups = groups
        self.group_size = channels // groups
        self.grid = grid
        self.base_activation = BaseActivation(base_activation).value
        c_g = self.group_size
        self.spline_coeffs = init_spline_coeffs(rng, (groups, c_g, c_g, grid.num_basis), grid)
        self.base_weight = uniform_fan_in(rng, (groups, c_g, c_g), c_g)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise DimensionError(
                f"GroupedKanLinear expects {self.channels} channels, got shape {x.shape}"
            )
        lead = x.shape[:-1]
        grouped = x.reshape(-1, self.groups, self.group_size)
        spline = einsum(
            "mgpk,gqpk->mgq", spline_bases(grouped, self.grid), self.spline_coeffs
        )
        base = einsum(
            "mgp,gqp->mgq", activation(self.base_activation)(grouped), self.base_weight
        )
        return (spline + base).reshape(lead + (self.channels,))

    def macs_per_token(self) -> int:
        return self.channels * self.group_size * (self.grid.num_basis + 1)
