"""A small differentiable supernet plus analytic mask-only task losses.

The network follows the grid: stage 0 is a chain across paths, every later
stage sums fused features from the previous stage. Each block is gated by a
mask bit ``a``::

    y = a * tanh(W x + b) + (1 - a) * x

With ``prune=True`` a cross-path fusion edge carries the product of its
endpoint bits, so a skipped block keeps only its same-path connections. The
forward pass is polynomial in ``a``, and :meth:`ToyNet.backward` returns the
exact derivative with respect to a continuous relaxation of the mask.

Analytic tasks replace the network with a loss table over searchable bits.
Their ``d loss / d a`` is the gradient of the table's multilinear extension,
``loss(a | a_b = 1) - loss(a | a_b = 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from mtnas.archdist import ArchDistribution, all_masks, mask_index, prob
from mtnas.costmodel import CostPenalty, CostTable, arch_cost
from mtnas.supergrid import SupernetGrid, apply_mask, channel_fusion_matrix, validate_mask

MAX_ENUM_BITS = 16


@dataclass
class PassCounter:
    forwards: int = 0
    backwards: int = 0

    def reset(self):
        self.forwards = 0
        self.backwards = 0

    def __iadd__(self, other: "PassCounter"):
        self.forwards += other.forwards
        self.backwards += other.backwards
        return self


# -- tasks -------------------------------------------------------------------


@dataclass
class TaskSpec:
    """One search task.

    ``analytic`` tasks carry a loss ``table`` indexed by the lexicographic rank
    of the searchable bits (or a vectorised ``fn`` over masks).
    ``differentiable`` tasks read the last-stage feature of ``read_path``
    through a linear head and are scored by mean squared error;
    ``teacher_mask`` (searchable bits) defines their synthetic target.
    """

    task_id: int
    mode: str = "analytic"
    table: np.ndarray | None = None
    fn: Callable | None = None
    read_path: int | None = None
    teacher_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("analytic", "differentiable"):
            raise ValueError(f"unknown task mode {self.mode!r}")
        if self.mode == "analytic":
            if self.table is None and self.fn is None:
                raise ValueError("analytic task needs a table or a function")
            if self.table is not None:
                self.table = np.asarray(self.table, dtype=float)
                n = int(np.log2(self.table.size))
                if 2**n != self.table.size:
                    raise ValueError(f"table size {self.table.size} is not a power of two")
        elif self.read_path is None:
            raise ValueError("differentiable task needs a read_path")

    @property
    def num_bits(self) -> int | None:
        return None if self.table is None else int(np.log2(self.table.size))

    def lookup(self, bits) -> np.ndarray:
        bits = np.asarray(bits)
        if self.table is not None:
            if bits.shape[-1] != self.num_bits:
                raise ValueError(f"mask has {bits.shape[-1]} bits, table covers {self.num_bits}")
            return self.table[mask_index(bits)]
        return np.asarray(self.fn(bits), dtype=float)


def additive_table(coeffs, offset: float = 0.0, pairwise: dict | None = None) -> np.ndarray:
    """Table of ``offset + sum_b coeffs[b] a_b + sum_{(i,j)} w_ij a_i a_j``."""
    coeffs = np.asarray(coeffs, dtype=float)
    masks = all_masks(coeffs.size).astype(float)
    table = offset + masks @ coeffs
    for (i, j), wij in (pairwise or {}).items():
        table = table + wij * masks[:, i] * masks[:, j]
    return table


def format_table(table) -> str:
    table = np.asarray(table, dtype=float)
    n = int(np.log2(table.size))
    return "".join(
        "".join(map(str, m)) + f" {v:.17g}\n" for m, v in zip(all_masks(n), table)
    )


def parse_table(text: str) -> np.ndarray:
    entries = {}
    width = None
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        bits, value = ln.split()
        if set(bits) - {"0", "1"}:
            raise ValueError(f"malformed mask {bits!r} in loss table")
        if width is None:
            width = len(bits)
        elif len(bits) != width:
            raise ValueError("loss table rows have inconsistent mask lengths")
        entries[int(bits, 2)] = float(value)
    if width is None or len(entries) != 2**width:
        raise ValueError("loss table must list every mask exactly once")
    return np.array([entries[i] for i in range(2**width)])


def load_table(path) -> np.ndarray:
    return parse_table(Path(path).read_text())


def data_loss(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def data_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


def task_loss(task: TaskSpec, value, penalty: CostPenalty | None = None, bits=None, target=None):
    """Loss of one task, cost penalty included.

    Analytic tasks take the searchable bits as ``value``. Differentiable tasks
    take predictions as ``value`` plus ``target``; the penalty applies to
    ``bits`` when given.
    """
    if task.mode == "analytic":
        loss = task.lookup(value)
        if penalty is not None:
            loss = loss + penalty(value)
        return loss
    if target is None:
        raise ValueError("differentiable task loss needs a target")
    loss = data_loss(np.asarray(value), np.asarray(target))
    if penalty is not None and bits is not None:
        loss += float(penalty(bits))
    return loss


def analytic_grad_a(task: TaskSpec, bits, penalty: CostPenalty | None = None) -> np.ndarray:
    """Multilinear-extension derivative of an analytic loss at a binary point."""
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.size
    on = np.repeat(bits[None, :], n, axis=0)
    off = on.copy()
    np.fill_diagonal(on, 1)
    np.fill_diagonal(off, 0)
    return task_loss(task, on, penalty) - task_loss(task, off, penalty)


# -- enumeration oracles -------------------------------------------------------


def _enum_losses(n: int, task: TaskSpec, penalty) -> np.ndarray:
    if n > MAX_ENUM_BITS:
        raise ValueError(f"enumeration limited to {MAX_ENUM_BITS} bits, got {n}")
    return np.asarray(task_loss(task, all_masks(n), penalty), dtype=float)


def enumerate_expected_loss(dist: ArchDistribution, task: TaskSpec, penalty: CostPenalty | None = None) -> float:
    n = len(dist)
    losses = _enum_losses(n, task, penalty)
    return float(np.sum(prob(dist, all_masks(n)) * losses))


def enumerate_grad_pi(dist: ArchDistribution, task: TaskSpec, penalty: CostPenalty | None = None) -> np.ndarray:
    """Exact gradient of the expected loss by differentiating the multilinear sum.

    The expectation is a tensor contraction of the loss table with one
    ``(1 - pi_c, pi_c)`` vector per bit; its derivative in ``pi_b`` swaps the
    b-th vector for ``(-1, 1)``.
    """
    n = len(dist)
    tensor = _enum_losses(n, task, penalty).reshape((2,) * n)
    pi = dist.probs
    grad = np.empty(n)
    for b in range(n):
        r = np.moveaxis(tensor, b, 0)
        for c in reversed([c for c in range(n) if c != b]):
            r = r @ np.array([1.0 - pi[c], pi[c]])
        grad[b] = r[1] - r[0]
    return grad


def brute_force_best(task: TaskSpec, cost_table: CostTable, budget: float, n: int | None = None) -> np.ndarray:
    """Lowest-loss mask with ``arch_cost <= budget``; ties go to the lexicographically smallest."""
    n = task.num_bits if n is None else n
    if n is None:
        raise ValueError("number of bits unknown for a function-defined task")
    masks = all_masks(n)
    losses = _enum_losses(n, task, None)
    feasible = arch_cost(masks, cost_table) <= budget + 1e-12 * max(1.0, abs(budget))
    if not feasible.any():
        raise ValueError(f"no mask fits within budget {budget}")
    cand = np.where(feasible, losses, np.inf)
    return masks[int(np.argmin(cand))]


# -- differentiable supernet ----------------------------------------------------


def path_widths(grid: SupernetGrid, width: int = 8) -> tuple[int, ...]:
    """Per-path feature widths: grid channels rescaled so the widest path has ``width``."""
    cmax = max(grid.path_channels)
    return tuple(max(2, int(round(width * c / cmax))) for c in grid.path_channels)


@dataclass
class ModelWeights:
    """All parameters in one flat vector; per-block and per-head views index into it."""

    data: np.ndarray
    layout: dict = field(repr=False)

    def _view(self, key):
        off, shape = self.layout[key]
        size = int(np.prod(shape))
        return self.data[off : off + size].reshape(shape)

    def W(self, b: int) -> np.ndarray:
        return self._view(("W", b))

    def bias(self, b: int) -> np.ndarray:
        return self._view(("b", b))

    def head(self, t: int) -> np.ndarray:
        return self._view(("h", t))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.data.copy(), self.layout)

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights(np.zeros_like(self.data), self.layout)


@dataclass
class ForwardCache:
    mask: np.ndarray
    x: np.ndarray
    inputs: list
    acts: list
    outputs: list
    fused: dict
    weights: ModelWeights


class ToyNet:
    def __init__(self, grid: SupernetGrid, read_paths, width: int = 8, prune: bool = True):
        self.grid = grid
        self.read_paths = tuple(int(r) for r in read_paths)
        if any(not 0 <= r < grid.paths for r in self.read_paths):
            raise ValueError(f"read paths {self.read_paths} outside 0..{grid.paths - 1}")
        self.widths = path_widths(grid, width)
        self.prune = prune
        P = grid.paths
        self.fusion = {
            (q, p): channel_fusion_matrix(self.widths[q], self.widths[p])
            for q in range(P)
            for p in range(P)
            if q != p
        }
        layout = {}
        off = 0
        for b in range(grid.num_blocks):
            d = self.widths[b % P]
            layout[("W", b)] = (off, (d, d))
            off += d * d
            layout[("b", b)] = (off, (d,))
            off += d
        for t, r in enumerate(self.read_paths):
            layout[("h", t)] = (off, (self.widths[r],))
            off += self.widths[r]
        self.layout = layout
        self.num_params = off

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def num_tasks(self) -> int:
        return len(self.read_paths)

    def init_weights(self, rng: np.random.Generator, scale: float = 1.0) -> ModelWeights:
        data = np.empty(self.num_params)
        for (kind, _), (off, shape) in self.layout.items():
            d = shape[-1]
            size = int(np.prod(shape))
            bound = scale / np.sqrt(d)
            data[off : off + size] = rng.uniform(-bound, bound, size)
        return ModelWeights(data, self.layout)

    def _gate(self, a, src: int, dst: int) -> float:
        if not self.prune:
            return 1.0
        return a[src] * a[dst]

    def forward(self, mask, w: ModelWeights, x: np.ndarray, counter: PassCounter | None = None):
        """Predictions of shape (N, T) and the cache needed by :meth:`backward`.

        ``mask`` is a length-B block mask; fractional values are accepted for
        gradient checks.
        """
        grid = self.grid
        P, S = grid.paths, grid.stages
        a = np.asarray(mask, dtype=float)
        if a.shape != (grid.num_blocks,):
            raise ValueError(f"mask length {a.size} does not match B={grid.num_blocks}")
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ValueError(f"input must have shape (N, {self.input_width}), got {x.shape}")
        inputs, acts, outputs = [None] * grid.num_blocks, [None] * grid.num_blocks, [None] * grid.num_blocks
        fused = {}
        for s in range(S):
            for p in range(P):
                b = s * P + p
                if s == 0:
                    if p == 0:
                        xin = x
                    else:
                        xin = outputs[b - 1] @ self.fusion[(p - 1, p)].T
                else:
                    xin = None
                    for q in range(P):
                        src = (s - 1) * P + q
                        if q == p:
                            term = outputs[src]
                        else:
                            fused[(src, b)] = outputs[src] @ self.fusion[(q, p)].T
                            term = self._gate(a, src, b) * fused[(src, b)]
                        xin = term if xin is None else xin + term
                f = np.tanh(xin @ w.W(b).T + w.bias(b))
                inputs[b], acts[b] = xin, f
                outputs[b] = a[b] * f + (1.0 - a[b]) * xin
        last = (S - 1) * P
        preds = np.stack([outputs[last + r] @ w.head(t) for t, r in enumerate(self.read_paths)], axis=1)
        if counter is not None:
            counter.forwards += 1
        return preds, ForwardCache(a, x, inputs, acts, outputs, fused, w)

    def backward(self, cache: ForwardCache, grad_preds: np.ndarray, counter: PassCounter | None = None):
        """Reverse-mode pass; returns (d loss / d w as ModelWeights, d loss / d a)."""
        if cache is None:
            raise ValueError("backward needs the cache from a forward pass")
        grid = self.grid
        P, S = grid.paths, grid.stages
        a, w = cache.mask, cache.weights
        grad_preds = np.asarray(grad_preds, dtype=float)
        gw = w.zeros_like()
        ga = np.zeros(grid.num_blocks)
        dy = [np.zeros_like(o) for o in cache.outputs]
        last = (S - 1) * P
        for t, r in enumerate(self.read_paths):
            g = grad_preds[:, t]
            dy[last + r] += np.outer(g, w.head(t))
            gw.head(t)[...] = cache.outputs[last + r].T @ g
        for b in range(grid.num_blocks - 1, -1, -1):
            s, p = divmod(b, P)
            g_y = dy[b]
            xin, f = cache.inputs[b], cache.acts[b]
            ga[b] += np.sum(g_y * (f - xin))
            dpre = a[b] * g_y * (1.0 - f * f)
            gw.W(b)[...] = dpre.T @ xin
            gw.bias(b)[...] = dpre.sum(axis=0)
            dxin = (1.0 - a[b]) * g_y + dpre @ w.W(b)
            if s == 0:
                if p > 0:
                    dy[b - 1] += dxin @ self.fusion[(p - 1, p)]
                continue
            for q in range(P):
                src = (s - 1) * P + q
                if q == p:
                    dy[src] += dxin
                    continue
                dy[src] += self._gate(a, src, b) * (dxin @ self.fusion[(q, p)])
                if self.prune:
                    dg = np.sum(dxin * cache.fused[(src, b)])
                    ga[src] += dg * a[b]
                    ga[b] += dg * a[src]
        if counter is not None:
            counter.backwards += 1
        return gw, ga

    def reference_forward(self, mask, w: ModelWeights, x: np.ndarray) -> np.ndarray:
        """Graph-walk evaluation of a binary mask: skipped blocks are identities and
        only the edges kept by :func:`apply_mask` (or all edges when not pruning)
        feed each block. Used to check the gated forward pass."""
        grid = self.grid
        P, S = grid.paths, grid.stages
        mask = validate_mask(grid, mask) if not grid.searchable_stage0 else np.asarray(mask, dtype=np.uint8)
        if self.prune:
            edges = apply_mask(grid, mask).fusion_edges
        else:
            edges = {
                ((s - 1) * P + q, s * P + p) for s in range(1, S) for q in range(P) for p in range(P)
            }
        outputs = [None] * grid.num_blocks
        for s in range(S):
            for p in range(P):
                b = s * P + p
                if s == 0:
                    xin = x if p == 0 else outputs[b - 1] @ self.fusion[(p - 1, p)].T
                else:
                    xin = None
                    for q in range(P):
                        src = (s - 1) * P + q
                        if (src, b) not in edges:
                            continue
                        term = outputs[src] if q == p else outputs[src] @ self.fusion[(q, p)].T
                        xin = term if xin is None else xin + term
                if mask[b]:
                    outputs[b] = np.tanh(xin @ w.W(b).T + w.bias(b))
                else:
                    outputs[b] = xin
        last = (S - 1) * P
        return np.stack([outputs[last + r] @ w.head(t) for t, r in enumerate(self.read_paths)], axis=1)


@dataclass
class SyntheticDataset:
    inputs: np.ndarray
    targets: np.ndarray
    seed: int

    def __len__(self):
        return len(self.inputs)

    def batch(self, rng: np.random.Generator, size: int):
        idx = rng.integers(len(self), size=size)
        return self.inputs[idx], self.targets[idx]


def make_synthetic_dataset(net: ToyNet, tasks, seed: int, size: int = 1024, teacher_scale: float = 2.0) -> SyntheticDataset:
    """Inputs ~ N(0, 1); task t's target is a teacher network's head-t output
    under that task's own teacher mask, so tasks favour different masks."""
    rng = np.random.default_rng(seed)
    teacher = net.init_weights(rng, scale=teacher_scale)
    x = rng.standard_normal((size, net.input_width))
    targets = np.empty((size, len(tasks)))
    for t, task in enumerate(tasks):
        mask = net.grid.full_mask(task.teacher_mask)
        preds, _ = net.forward(mask, teacher, x)
        targets[:, t] = preds[:, t]
    return SyntheticDataset(x, targets, seed)
