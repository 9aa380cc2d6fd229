"""Product-Bernoulli architecture distributions and their estimators.

A distribution assigns each searchable block an independent keep-probability.
The proxy ``q`` is the uniform mixture of the per-task distributions; masks
drawn from it are reweighted by ``p_t(a) / q(a)`` to estimate expectations
under task ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS = 1e-3


def clamp_probs(probs, eps: float = EPS) -> np.ndarray:
    return np.clip(np.asarray(probs, dtype=float), eps, 1.0 - eps)


@dataclass(frozen=True)
class ArchDistribution:
    """Bernoulli keep-probabilities, clamped into [eps, 1 - eps]."""

    probs: np.ndarray
    eps: float = EPS

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if not np.isfinite(probs).all():
            raise ValueError("probs must be finite")
        probs = np.clip(probs, self.eps, 1.0 - self.eps)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return self.probs.size

    @classmethod
    def uniform(cls, n: int, p: float = 0.5, eps: float = EPS) -> "ArchDistribution":
        return cls(np.full(n, p), eps)


@dataclass(frozen=True)
class ProxyDistribution:
    components: tuple[ArchDistribution, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a proxy needs at least one component")
        if len({len(c) for c in comps}) != 1:
            raise ValueError("proxy components must share one length")
        object.__setattr__(self, "components", comps)

    def __len__(self):
        return len(self.components[0])

    @property
    def num_tasks(self) -> int:
        return len(self.components)


def _masks(dist_len: int, mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape[-1] != dist_len:
        raise ValueError(f"mask length {mask.shape[-1]} does not match distribution length {dist_len}")
    return mask


def prob(dist: ArchDistribution, mask):
    """p(a) = prod_b pi_b^a_b (1 - pi_b)^(1 - a_b); vectorised over leading axes."""
    mask = _masks(len(dist), mask)
    pi = dist.probs
    return np.prod(np.where(mask == 1, pi, 1.0 - pi), axis=-1)


def log_prob(dist: ArchDistribution, mask):
    mask = _masks(len(dist), mask)
    pi = dist.probs
    return np.sum(np.where(mask == 1, np.log(pi), np.log1p(-pi)), axis=-1)


def sample(dist: ArchDistribution, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = (len(dist),) if size is None else (size, len(dist))
    return (rng.random(shape) < dist.probs).astype(np.uint8)


def proxy_prob(proxy: ProxyDistribution, mask):
    """q(a): arithmetic mean of the component probabilities."""
    mask = _masks(len(proxy), mask)
    return sum(prob(c, mask) for c in proxy.components) / proxy.num_tasks


def sample_proxy(
    proxy: ProxyDistribution, rng: np.random.Generator, return_task: bool = False, size: int | None = None
):
    """Draw a task uniformly, then a mask from that task's distribution.

    With ``size`` the draws are vectorised: tasks of shape (size,) and masks
    of shape (size, B).
    """
    if size is None:
        t = int(rng.integers(proxy.num_tasks))
        mask = sample(proxy.components[t], rng)
        return (mask, t) if return_task else mask
    tasks = rng.integers(proxy.num_tasks, size=size)
    table = np.stack([c.probs for c in proxy.components])
    masks = (rng.random((size, len(proxy))) < table[tasks]).astype(np.uint8)
    return (masks, tasks) if return_task else masks


def importance_weight(task_dist: ArchDistribution, proxy: ProxyDistribution, mask):
    """Raw importance weight p_t(a) / q(a)."""
    return prob(task_dist, mask) / proxy_prob(proxy, mask)


def self_normalize(raws) -> np.ndarray:
    raws = np.asarray(raws, dtype=float)
    if raws.size == 0:
        raise ValueError("self-normalisation needs at least one weight")
    if (raws <= 0).any():
        raise ValueError("importance weights must be positive")
    return raws / raws.sum()


def score_function(dist: ArchDistribution, mask, signed: bool = True) -> np.ndarray:
    """Gradient of log p(a) with respect to the keep-probabilities.

    Element b is ``a_b / pi_b - (1 - a_b) / (1 - pi_b)``. ``signed=False``
    returns the bare magnitude ``1 / (pi_b^a_b (1 - pi_b)^(1 - a_b))``, which
    is not a valid score; it exists only so validation can show the
    zero-mean identity breaking.
    """
    mask = _masks(len(dist), mask)
    pi = dist.probs
    on = 1.0 / pi
    off = 1.0 / (1.0 - pi)
    if not signed:
        return np.where(mask == 1, on, off)
    return np.where(mask == 1, on, -off)


def all_masks(n: int) -> np.ndarray:
    """All 2^n masks in lexicographic order (bit 0 is the most significant)."""
    idx = np.arange(2**n)[:, None]
    shifts = np.arange(n - 1, -1, -1)[None, :]
    return ((idx >> shifts) & 1).astype(np.uint8)


def mask_index(mask) -> np.ndarray:
    """Inverse of :func:`all_masks`: the lexicographic rank of each mask."""
    mask = np.asarray(mask, dtype=np.int64)
    n = mask.shape[-1]
    return mask @ (1 << np.arange(n - 1, -1, -1))


def dump_distribution(dist: ArchDistribution, path) -> None:
    Path(path).write_text("".join(f"{p:.17g}\n" for p in dist.probs))


def load_distribution(path, eps: float = EPS) -> ArchDistribution:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return ArchDistribution([float(ln) for ln in lines if ln and not ln.startswith("#")], eps)
