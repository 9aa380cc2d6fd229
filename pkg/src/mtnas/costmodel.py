"""Block and architecture cost accounting.

FLOPs are counted as multiply-accumulates (no factor of two). Only relative
costs enter the search, so the convention does not affect the hinge penalty.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostTable:
    costs: np.ndarray

    def __post_init__(self):
        costs = np.array(self.costs, dtype=float)
        if costs.ndim != 1:
            raise ValueError("cost table must be one-dimensional")
        if (costs < 0).any():
            raise ValueError("block costs must be nonnegative")
        costs.setflags(write=False)
        object.__setattr__(self, "costs", costs)

    @property
    def total(self) -> float:
        return float(self.costs.sum())

    def __len__(self):
        return len(self.costs)

    @classmethod
    def from_grid(cls, grid, searchable_only: bool = True) -> "CostTable":
        costs = grid.costs
        if searchable_only:
            costs = costs[grid.searchable_indices]
        return cls(costs)


def _check(mask, table: CostTable) -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    if mask.shape[-1] != len(table):
        raise ValueError(f"mask length {mask.shape[-1]} does not match cost table length {len(table)}")
    return mask


def arch_cost(mask, table: CostTable):
    """Sum of the selected blocks' costs. Accepts a single mask or a stack of masks."""
    return _check(mask, table) @ table.costs


def relative_cost(mask, table: CostTable):
    total = table.total
    if total <= 0:
        raise ValueError("relative cost is undefined for a zero-cost table")
    return arch_cost(mask, table) / total


def cost_reg(mask, table: CostTable, lambda_c: float, target: float = 0.5):
    """Hinge penalty ``lambda_c * max(0, relative_cost - target)``."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"relative cost target must lie in [0, 1], got {target}")
    if lambda_c == 0 or table.total <= 0:
        return 0.0 * arch_cost(mask, table)
    return lambda_c * np.maximum(0.0, relative_cost(mask, table) - target)


def cost_reg_grad(mask, table: CostTable, lambda_c: float, target: float = 0.5) -> np.ndarray:
    """Derivative of :func:`cost_reg` with respect to a continuous mask.

    At the hinge point itself the zero subgradient is used.
    """
    mask = _check(mask, table)
    if lambda_c == 0 or table.total <= 0:
        return np.zeros_like(table.costs)
    if relative_cost(mask, table) > target:
        return lambda_c * table.costs / table.total
    return np.zeros_like(table.costs)


@dataclass(frozen=True)
class CostPenalty:
    """Cost regularizer bound to a table, coefficient and relative target."""

    table: CostTable
    lambda_c: float = 0.0
    target: float = 0.5

    def __call__(self, bits):
        return cost_reg(bits, self.table, self.lambda_c, self.target)

    def grad(self, bits) -> np.ndarray:
        return cost_reg_grad(bits, self.table, self.lambda_c, self.target)


# -- block FLOPs --------------------------------------------------------------


@dataclass(frozen=True)
class IrbSpec:
    kernel: int
    expansion: float
    in_channels: int
    out_channels: int
    stride: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.kernel, self.expansion, self.in_channels, self.out_channels, self.height, self.width) <= 0:
            raise ValueError(f"all IRB dimensions must be positive: {self}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


def irb_flops(spec: IrbSpec) -> float:
    """MACs of an inverted residual block: 1x1 expand, kxk depthwise, 1x1 project.

    SE and activation costs are not counted.
    """
    s = spec.stride
    if spec.height % s or spec.width % s:
        raise ValueError(f"spatial size {spec.height}x{spec.width} not divisible by stride {s}")
    mid = spec.expansion * spec.in_channels
    h_out, w_out = spec.height // s, spec.width // s
    expand = spec.height * spec.width * spec.in_channels * mid
    depthwise = h_out * w_out * mid * spec.kernel**2
    project = h_out * w_out * mid * spec.out_channels
    return float(expand + depthwise + project)


def conv_flops(kernel: int, in_channels: int, out_channels: int, stride: int, height: int, width: int) -> float:
    """MACs of a dense kxk convolution with 'same' padding."""
    h_out, w_out = math.ceil(height / stride), math.ceil(width / stride)
    return float(h_out * w_out * in_channels * out_channels * kernel**2)


# -- detection-model resize and average FLOPs -----------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resize_dims(h: int, w: int, min_size: int, max_size: int) -> tuple[int, int]:
    """Scale the short side to ``min_size``; if the long side then exceeds
    ``max_size``, scale again so the long side equals ``max_size``."""
    if h <= 0 or w <= 0:
        raise ValueError("image dimensions must be positive")
    if min_size > max_size:
        raise ValueError("min_size must not exceed max_size")
    short, long = min(h, w), max(h, w)
    scale = min_size / short
    if long * scale > max_size:
        scale = max_size / long
    return _round_half_up(h * scale), _round_half_up(w * scale)


def average_flops(bb: float, rpn: float, roi: float, ratio: float) -> float:
    """Dataset-average FLOPs: backbone and RPN scale with pixel count, ROI does not."""
    if ratio <= 0:
        raise ValueError("pixel ratio must be positive")
    return ratio * (bb + rpn) + roi


def pixel_ratio(avg_pixels: float, ref_h: int, ref_w: int) -> float:
    return avg_pixels / (ref_h * ref_w)
