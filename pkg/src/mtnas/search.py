"""Supernet search loops.

Four estimators of the multitask relaxed objective share one coordinator:

1. single task, straight-through (1 forward, 1 backward per worker-iteration)
2. per-task samples, straight-through (T forwards, T backwards)
3. one proxy sample, importance-weighted straight-through (1 forward, T backwards)
4. one proxy sample, importance-weighted REINFORCE (1 forward, 1 backward)

Each of ``workers`` logical workers draws its own architecture per iteration
from a private random stream. Worker results are merged in worker order, so
runs are bit-reproducible regardless of how many threads execute them.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from mtnas.archdist import (
    ArchDistribution,
    ProxyDistribution,
    clamp_probs,
    prob,
    proxy_prob,
    sample,
    sample_proxy,
    score_function,
    self_normalize,
)
from mtnas.costmodel import CostPenalty, CostTable
from mtnas.supergrid import SupernetGrid
from mtnas.toymodel import (
    ModelWeights,
    PassCounter,
    TaskSpec,
    ToyNet,
    analytic_grad_a,
    data_loss,
    data_loss_grad,
    make_synthetic_dataset,
)

logger = logging.getLogger(__name__)

#: (forwards, backwards) per worker-iteration, as a function of task count.
PASS_CONTRACT = {
    1: lambda T: (1, 1),
    2: lambda T: (T, T),
    3: lambda T: (1, T),
    4: lambda T: (1, 1),
}


class ConfigError(ValueError):
    pass


@dataclass
class SearchConfig:
    algorithm: int = 4
    num_tasks: int | None = None
    total_steps: int = 9375
    lr_weights: float = 0.96
    lr_arch_ratio: float = 0.01
    lr_decay_step: int = 3125
    lr_decay_factor: float = 10.0
    warmup_steps: int = 6250
    init_prob: float = 0.5
    workers: int = 16
    cost_lambda: float = 0.0
    cost_target: float = 0.5
    loss_norm_window: int = 200
    seed: int = 0
    momentum: float = 0.9
    arch_momentum: float = 0.0
    clamp_eps: float = 1e-3
    sigma_floor: float = 1e-8
    self_normalize: bool = True
    normalize_loss: bool = True
    # weight the REINFORCE loss by p_t(a)/q(a); False reproduces the bare listing
    is_correction: bool = True
    batch_size: int = 32
    dataset_size: int = 1024
    feature_width: int = 8
    prune_fusion: bool = True
    snapshot_every: int = 100
    threads: int = 1
    # give every task the same per-worker sampling stream (symmetry checks)
    tied_task_streams: bool = False

    def validate(self):
        if self.algorithm not in (1, 2, 3, 4):
            raise ConfigError(f"algorithm must be 1, 2, 3 or 4, got {self.algorithm}")
        if not 0.0 < self.init_prob < 1.0:
            raise ConfigError(f"init_prob must lie strictly inside (0, 1), got {self.init_prob}")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if self.workers < 1 or self.threads < 1:
            raise ConfigError("workers and threads must be >= 1")
        if self.loss_norm_window < 1:
            raise ConfigError("loss_norm_window must be >= 1")
        if not 0.0 <= self.cost_target <= 1.0:
            raise ConfigError("cost_target must lie in [0, 1]")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")
        return self

    def lr_at(self, step: int) -> float:
        if step >= self.lr_decay_step:
            return self.lr_weights / self.lr_decay_factor
        return self.lr_weights

    def arch_lr_at(self, step: int) -> float:
        return self.lr_arch_ratio * self.lr_at(step)

    @classmethod
    def scaled(cls, total_steps: int, **overrides) -> "SearchConfig":
        """Default schedule compressed to ``total_steps`` (decay at 1/3, warmup until 2/3)."""
        base = cls()
        kw = dict(
            total_steps=total_steps,
            lr_decay_step=round(total_steps * base.lr_decay_step / base.total_steps),
            warmup_steps=round(total_steps * base.warmup_steps / base.total_steps),
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> dict:
        return asdict(self)


class LossStats:
    """Loss history over the last ``window`` steps (``per_step`` samples each)."""

    def __init__(self, window: int = 200, per_step: int = 1, sigma_floor: float = 1e-8):
        self.buffer: deque[float] = deque(maxlen=window * per_step)
        self.sigma_floor = sigma_floor

    def __len__(self):
        return len(self.buffer)

    @property
    def mean(self) -> float:
        return float(np.mean(self.buffer)) if self.buffer else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.buffer)) if self.buffer else 0.0

    def normalize(self, raws) -> np.ndarray:
        """Normalise against the current history (population std, floored).

        With fewer than two past losses there is no spread to normalise by and
        the result is zero.
        """
        raws = np.asarray(raws, dtype=float)
        if len(self.buffer) < 2:
            return np.zeros_like(raws)
        return (raws - self.mean) / max(self.std, self.sigma_floor)

    def push(self, raws):
        self.buffer.extend(float(r) for r in np.atleast_1d(raws))


def normalize_loss(stats: LossStats, raw: float) -> float:
    """Normalise one loss against the history, then record it."""
    out = float(stats.normalize(raw))
    stats.push(raw)
    return out


def sample_final(dist) -> np.ndarray:
    """Most likely mask of a product distribution: keep a block iff pi_b > 0.5."""
    probs = dist.probs if isinstance(dist, ArchDistribution) else np.asarray(dist, dtype=float)
    return (probs > 0.5).astype(np.uint8)


@dataclass
class SearchState:
    weights: ModelWeights | None
    pis: list[np.ndarray]
    stats: list[LossStats]
    step: int = 0
    velocity_w: np.ndarray | None = None
    velocity_pi: list[np.ndarray] = field(default_factory=list)
    worker_counts: list[PassCounter] = field(default_factory=list)
    totals: PassCounter = field(default_factory=PassCounter)

    def dist(self, t: int, eps: float) -> ArchDistribution:
        return ArchDistribution(self.pis[t], eps)


@dataclass
class _Eval:
    bits: np.ndarray
    losses: np.ndarray  # per-task raw loss at ``bits``
    cache: object = None
    preds: np.ndarray | None = None
    targets: np.ndarray | None = None


@dataclass
class StepEstimate:
    """One iteration's merged update directions, before any state change."""

    delta_w: np.ndarray | None
    delta_pi: dict[int, np.ndarray]
    losses: dict[int, np.ndarray]  # per task: raw loss of every worker sample
    loss_est: dict[int, float]
    loss_norm_est: dict[int, float]
    worker_counts: list[PassCounter]


@dataclass
class StepRecord:
    step: int
    task: int
    loss_raw: float
    loss_norm: float
    forwards: int
    backwards: int

    def format(self) -> str:
        return f"{self.step} {self.task} {self.loss_raw:.17g} {self.loss_norm:.17g} {self.forwards} {self.backwards}"


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class Searcher:
    """Owns the search state and runs the per-iteration estimators."""

    DATA_STREAM = 0
    INIT_STREAM = 1
    WORKER_STREAM = 2
    TASK_STREAM = 3

    def __init__(self, grid: SupernetGrid, tasks: list[TaskSpec], config: SearchConfig):
        self.config = config.validate()
        if not tasks:
            raise ConfigError("at least one task is required")
        if config.num_tasks is not None and config.num_tasks != len(tasks):
            raise ConfigError(f"num_tasks={config.num_tasks} but {len(tasks)} tasks were given")
        modes = {t.mode for t in tasks}
        if len(modes) != 1:
            raise ConfigError("all tasks must share one mode")
        self.mode = modes.pop()
        self.grid = grid
        self.tasks = list(tasks)
        self.T = len(tasks)
        self.n = grid.num_searchable
        if self.n == 0:
            raise ConfigError("grid has no searchable blocks")
        self.penalty = CostPenalty(CostTable.from_grid(grid), config.cost_lambda, config.cost_target)
        seed = config.seed
        self.net = None
        self.dataset = None
        weights = None
        if self.mode == "analytic":
            for t in self.tasks:
                if t.table is not None and t.num_bits != self.n:
                    raise ConfigError(f"task {t.task_id}: table covers {t.num_bits} bits, grid searches {self.n}")
        else:
            for t in self.tasks:
                if t.teacher_mask is None or len(t.teacher_mask) != self.n:
                    raise ConfigError(f"task {t.task_id}: teacher_mask must have {self.n} bits")
            self.net = ToyNet(grid, [t.read_path for t in self.tasks], config.feature_width, config.prune_fusion)
            self.dataset = make_synthetic_dataset(
                self.net, self.tasks, np.random.SeedSequence(seed, spawn_key=(self.DATA_STREAM,)), config.dataset_size
            )
            weights = self.net.init_weights(_stream(seed, self.INIT_STREAM))
        pis = [clamp_probs(np.full(self.n, config.init_prob), config.clamp_eps) for _ in range(self.T)]
        stats = [LossStats(config.loss_norm_window, config.workers, config.sigma_floor) for _ in range(self.T)]
        self.state = SearchState(
            weights=weights,
            pis=pis,
            stats=stats,
            velocity_w=None if weights is None else np.zeros_like(weights.data),
            velocity_pi=[np.zeros(self.n) for _ in range(self.T)],
        )
        self.worker_rngs = [_stream(seed, self.WORKER_STREAM, k) for k in range(config.workers)]
        # per-task sampling streams used by the straight-through estimators
        self.task_rngs = [
            [_stream(seed, self.TASK_STREAM, k, 0 if config.tied_task_streams else t) for t in range(self.T)]
            for k in range(config.workers)
        ]
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- worker primitives ---------------------------------------------------

    def _map(self, fn, *args):
        ks = range(self.config.workers)
        if self._pool is None:
            return [fn(k, *args) for k in ks]
        return list(self._pool.map(lambda k: fn(k, *args), ks))

    def _draw_batch(self, rng):
        if self.dataset is None:
            return None
        return self.dataset.batch(rng, self.config.batch_size)

    def _forward(self, bits, batch, counter: PassCounter) -> _Eval:
        if self.mode == "analytic":
            counter.forwards += 1
            losses = np.array([t.lookup(bits) for t in self.tasks], dtype=float) + self.penalty(bits)
            return _Eval(bits, losses)
        x, y = batch
        mask = self.grid.full_mask(bits)
        preds, cache = self.net.forward(mask, self.state.weights, x, counter)
        cost = float(self.penalty(bits))
        losses = np.array([data_loss(preds[:, t], y[:, t]) for t in range(self.T)]) + cost
        return _Eval(bits, losses, cache, preds, y)

    def _backward(self, ev: _Eval, coeffs, counter: PassCounter, need_a: bool = True):
        """Gradient of ``sum_t coeffs[t] * loss_t`` at the evaluated sample."""
        coeffs = np.asarray(coeffs, dtype=float)
        if self.mode == "analytic":
            counter.backwards += 1
            if not need_a:
                return None, None
            ga = np.zeros(self.n)
            for t, c in enumerate(coeffs):
                if c != 0.0:
                    ga = ga + c * analytic_grad_a(self.tasks[t], ev.bits, self.penalty)
            return None, ga
        grad_preds = np.zeros_like(ev.preds)
        for t, c in enumerate(coeffs):
            if c != 0.0:
                grad_preds[:, t] = c * data_loss_grad(ev.preds[:, t], ev.targets[:, t])
        gw, ga_full = self.net.backward(ev.cache, grad_preds, counter)
        ga = None
        if need_a:
            ga = ga_full[self.grid.searchable_indices] + coeffs.sum() * self.penalty.grad(ev.bits)
        return gw.data, ga

    def _dists(self) -> list[ArchDistribution]:
        return [self.state.dist(t, self.config.clamp_eps) for t in range(self.T)]

    def _is_weights(self, raw: np.ndarray) -> np.ndarray:
        """(K, T) raw importance weights -> per-sample estimator weights."""
        if self.config.self_normalize:
            return np.stack([self_normalize(raw[:, t]) for t in range(self.T)], axis=1)
        return raw / raw.shape[0]

    # -- estimators ----------------------------------------------------------

    def estimate_alg1(self, task: int = 0) -> StepEstimate:
        dist = self._dists()[task]
        onehot = np.eye(self.T)[task]

        def work(k):
            rng, c = self.worker_rngs[k], PassCounter()
            batch = self._draw_batch(rng)
            ev = self._forward(sample(dist, self.task_rngs[k][task]), batch, c)
            gw, ga = self._backward(ev, onehot, c)
            return ev.losses[task], gw, ga, c

        res = self._map(work)
        K = len(res)
        losses = np.array([r[0] for r in res])
        return StepEstimate(
            delta_w=_mean_or_none([r[1] for r in res]),
            delta_pi={task: sum(r[2] for r in res) / K},
            losses={task: losses},
            loss_est={task: float(losses.mean())},
            loss_norm_est={task: float(self.state.stats[task].normalize(losses).mean())},
            worker_counts=[r[3] for r in res],
        )

    def estimate_alg2(self) -> StepEstimate:
        dists = self._dists()
        eye = np.eye(self.T)

        def work(k):
            rng, c = self.worker_rngs[k], PassCounter()
            batch = self._draw_batch(rng)
            losses, gas, dw = [], [], None
            for t in range(self.T):
                ev = self._forward(sample(dists[t], self.task_rngs[k][t]), batch, c)
                gw, ga = self._backward(ev, eye[t], c)
                dw = gw if dw is None else dw + gw
                losses.append(ev.losses[t])
                gas.append(ga)
            return np.array(losses), dw, gas, c

        res = self._map(work)
        K = len(res)
        losses = np.stack([r[0] for r in res])
        return StepEstimate(
            delta_w=_mean_or_none([r[1] for r in res]),
            delta_pi={t: sum(r[2][t] for r in res) / K for t in range(self.T)},
            losses={t: losses[:, t] for t in range(self.T)},
            loss_est={t: float(losses[:, t].mean()) for t in range(self.T)},
            loss_norm_est={t: float(self.state.stats[t].normalize(losses[:, t]).mean()) for t in range(self.T)},
            worker_counts=[r[3] for r in res],
        )

    def _proxy_forward(self, k, proxy, dists):
        rng, c = self.worker_rngs[k], PassCounter()
        batch = self._draw_batch(rng)
        bits = sample_proxy(proxy, rng)
        ev = self._forward(bits, batch, c)
        q = proxy_prob(proxy, bits)
        raw = np.array([prob(d, bits) / q for d in dists])
        return ev, raw, c

    def estimate_alg3(self) -> StepEstimate:
        dists = self._dists()
        proxy = ProxyDistribution(tuple(dists))
        eye = np.eye(self.T)

        def work(k):
            ev, raw, c = self._proxy_forward(k, proxy, dists)
            grads = [self._backward(ev, eye[t], c) for t in range(self.T)]
            return ev, raw, grads, c

        res = self._map(work)
        raw = np.stack([r[1] for r in res])
        gamma = self._is_weights(raw)
        losses = np.stack([r[0].losses for r in res])
        delta_w = None
        if self.mode != "analytic":
            for k, r in enumerate(res):
                for t in range(self.T):
                    term = gamma[k, t] * r[2][t][0]
                    delta_w = term if delta_w is None else delta_w + term
        delta_pi = {t: sum(gamma[k, t] * r[2][t][1] for k, r in enumerate(res)) for t in range(self.T)}
        return StepEstimate(
            delta_w=delta_w,
            delta_pi=delta_pi,
            losses={t: losses[:, t] for t in range(self.T)},
            loss_est={t: float(gamma[:, t] @ losses[:, t]) for t in range(self.T)},
            loss_norm_est={t: float(gamma[:, t] @ self.state.stats[t].normalize(losses[:, t])) for t in range(self.T)},
            worker_counts=[r[3] for r in res],
        )

    def estimate_alg4(self) -> StepEstimate:
        cfg = self.config
        dists = self._dists()
        proxy = ProxyDistribution(tuple(dists))
        phase1 = self._map(lambda k: self._proxy_forward(k, proxy, dists))
        raw = np.stack([r[1] for r in phase1])
        gamma = self._is_weights(raw)
        # one backward per worker of the importance-weighted task-loss sum
        grads = self._map(lambda k: self._backward(phase1[k][0], gamma[k], phase1[k][2], need_a=False)[0])
        K = len(phase1)
        losses = np.stack([r[0].losses for r in phase1])
        delta_pi, norm_est = {}, {}
        for t in range(self.T):
            if cfg.normalize_loss:
                advantage = self.state.stats[t].normalize(losses[:, t])
            else:
                advantage = losses[:, t]
            coeff = gamma[:, t] * advantage if cfg.is_correction else advantage / K
            delta_pi[t] = sum(coeff[k] * score_function(dists[t], phase1[k][0].bits) for k in range(K))
            norm_est[t] = float(gamma[:, t] @ self.state.stats[t].normalize(losses[:, t]))
        delta_w = None
        if self.mode != "analytic":
            delta_w = grads[0]
            for g in grads[1:]:
                delta_w = delta_w + g
        return StepEstimate(
            delta_w=delta_w,
            delta_pi=delta_pi,
            losses={t: losses[:, t] for t in range(self.T)},
            loss_est={t: float(gamma[:, t] @ losses[:, t]) for t in range(self.T)},
            loss_norm_est=norm_est,
            worker_counts=[r[2] for r in phase1],
        )

    def estimate(self, algorithm: int | None = None, task: int = 0) -> StepEstimate:
        algorithm = self.config.algorithm if algorithm is None else algorithm
        if algorithm == 1:
            return self.estimate_alg1(task)
        return {2: self.estimate_alg2, 3: self.estimate_alg3, 4: self.estimate_alg4}[algorithm]()

    # -- updates -------------------------------------------------------------

    def apply(self, est: StepEstimate) -> list[StepRecord]:
        cfg, st = self.config, self.state
        step = st.step
        if est.delta_w is not None:
            st.velocity_w = cfg.momentum * st.velocity_w + est.delta_w
            st.weights.data -= cfg.lr_at(step) * st.velocity_w
        if step >= cfg.warmup_steps:
            lr_pi = cfg.arch_lr_at(step)
            for t, d in est.delta_pi.items():
                st.velocity_pi[t] = cfg.arch_momentum * st.velocity_pi[t] + d
                st.pis[t] = clamp_probs(st.pis[t] - lr_pi * st.velocity_pi[t], cfg.clamp_eps)
        for t, raws in est.losses.items():
            st.stats[t].push(raws)
        st.worker_counts = est.worker_counts
        for c in est.worker_counts:
            st.totals += c
        fwd, bwd = est.worker_counts[0].forwards, est.worker_counts[0].backwards
        st.step += 1
        return [
            StepRecord(step, t, est.loss_est[t], est.loss_norm_est[t], fwd, bwd) for t in sorted(est.losses)
        ]

    def step_alg1(self, task: int = 0) -> list[StepRecord]:
        return self.apply(self.estimate_alg1(task))

    def step_alg2(self) -> list[StepRecord]:
        return self.apply(self.estimate_alg2())

    def step_alg3(self) -> list[StepRecord]:
        return self.apply(self.estimate_alg3())

    def step_alg4(self) -> list[StepRecord]:
        return self.apply(self.estimate_alg4())

    def step(self) -> list[StepRecord]:
        return self.apply(self.estimate())

    def distributions(self) -> list[ArchDistribution]:
        return self._dists()


def _mean_or_none(items):
    if items[0] is None:
        return None
    total = items[0]
    for g in items[1:]:
        total = total + g
    return total / len(items)


@dataclass
class SearchResult:
    bits: list[np.ndarray]
    masks: list[np.ndarray]
    pis: list[np.ndarray]
    records: list[StepRecord]
    snapshots: list[tuple[int, int, np.ndarray]]
    totals: PassCounter
    weights: ModelWeights | None = None
    net: ToyNet | None = None
    dataset: object = None


def run_search(grid: SupernetGrid, tasks: list[TaskSpec], config: SearchConfig) -> SearchResult:
    """Run the configured estimator for ``total_steps`` and read off the final masks."""
    config.validate()
    if config.algorithm == 1 and len(tasks) != 1:
        raise ConfigError("algorithm 1 searches a single task")
    records, snapshots = [], []
    with Searcher(grid, tasks, config) as s:
        for step in range(config.total_steps):
            if step % config.snapshot_every == 0:
                snapshots.extend((step, t, s.state.pis[t].copy()) for t in range(s.T))
            records.extend(s.step())
            if step % 1000 == 0:
                logger.debug("step %d: %s", step, [round(r.loss_raw, 4) for r in records[-s.T :]])
        snapshots.extend((config.total_steps, t, s.state.pis[t].copy()) for t in range(s.T))
        bits = [sample_final(p) for p in s.state.pis]
        return SearchResult(
            bits=bits,
            masks=[grid.full_mask(b) for b in bits],
            pis=[p.copy() for p in s.state.pis],
            records=records,
            snapshots=snapshots,
            totals=s.state.totals,
            weights=s.state.weights,
            net=s.net,
            dataset=s.dataset,
        )


def expected_passes(algorithm: int, num_tasks: int) -> tuple[int, int]:
    return PASS_CONTRACT[algorithm](num_tasks)


def cosine(u, v) -> float:
    u, v = np.asarray(u, float), np.asarray(v, float)
    return float(u @ v / (math.sqrt(u @ u) * math.sqrt(v @ v)))
