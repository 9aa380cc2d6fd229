"""Command-line entry point: ``mtnas {search,validate,cost,topology}``.

One YAML file describes an experiment::

    seed: 0
    out: runs/demo
    grid: {paths: 4, stages: 3}          # or {preset: fbnetv3a}, {file: grid.yaml}
    tasks:
      - {mode: analytic, table: t0.txt}  # "bits value" lines, path relative to the config
      - {mode: analytic, coeffs: [...], offset: 10.0, pairwise: [[0, 4, -0.4]]}
      - {mode: differentiable, read_path: 0, teacher_mask: "10110011"}
    search: {algorithm: 4, total_steps: 2000, workers: 16, cost_lambda: 8.0}
    validate: {bits: 6, tasks: 3, instances: 20, mc_samples: 20000}

Every SearchConfig field can be overridden from the command line, either as
``--field-name VALUE`` or ``--set field_name=VALUE``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from contextlib import contextmanager
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from mtnas import archdist, search
from mtnas.archdist import (
    ArchDistribution,
    ProxyDistribution,
    all_masks,
    importance_weight,
    log_prob,
    prob,
    proxy_prob,
    sample_proxy,
    score_function,
    self_normalize,
)
from mtnas.costmodel import CostPenalty, CostTable, arch_cost, average_flops, cost_reg
from mtnas.search import (
    ConfigError,
    LossStats,
    SearchConfig,
    Searcher,
    cosine,
    expected_passes,
    normalize_loss,
    run_search,
    sample_final,
)
from mtnas.supergrid import (
    TOPOLOGIES,
    GridError,
    SupernetGrid,
    canonical_mask,
    format_mask,
    grid_from_dict,
    grid_to_dict,
    read_mask,
    uniform_grid,
    write_mask,
)
from mtnas.toymodel import TaskSpec, additive_table, data_loss, enumerate_grad_pi, load_table

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
MAX_VALIDATE_BITS = 12


# -- experiment config ---------------------------------------------------------


@dataclass
class ValidateConfig:
    bits: int | None = None
    tasks: int = 3
    instances: int = 20
    mc_samples: int = 20000
    cost_lambda: float = 1.0
    cost_target: float = 0.5
    seed: int = 0


@dataclass
class ExperimentConfig:
    grid: SupernetGrid | None
    tasks: list[TaskSpec]
    search: SearchConfig
    validate: ValidateConfig
    out: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.search.seed

    def canonical(self) -> dict:
        """Fully resolved config (tables inlined) used for hashing and export."""
        return {
            "grid": None if self.grid is None else grid_to_dict(self.grid),
            "tasks": [_task_to_dict(t) for t in self.tasks],
            # thread count only changes scheduling, never results
            "search": {k: v for k, v in self.search.to_dict().items() if k != "threads"},
            "validate": self.validate.__dict__.copy(),
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def header(self, **extra) -> str:
        items = {"config_hash": self.config_hash, "seed": self.seed, **extra}
        return " ".join(f"{k}={v}" for k, v in items.items())


def _task_to_dict(t: TaskSpec) -> dict:
    d = {"task_id": t.task_id, "mode": t.mode}
    if t.table is not None:
        d["table"] = [float(v) for v in t.table]
    if t.read_path is not None:
        d["read_path"] = int(t.read_path)
    if t.teacher_mask is not None:
        d["teacher_mask"] = format_mask(t.teacher_mask)
    return d


def _resolve(base: Path, path) -> Path:
    p = Path(path)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"referenced file does not exist: {p}")
    return p


def _load_yaml(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _parse_bits(value) -> np.ndarray:
    text = str(value).strip()
    if not text or set(text) - {"0", "1"}:
        raise ConfigError(f"malformed mask string {value!r}")
    return np.array([int(c) for c in text], dtype=np.uint8)


def _grid_section(section, base: Path) -> SupernetGrid:
    section = dict(section)
    if "file" in section:
        inner = _load_yaml(_resolve(base, section.pop("file")))
        section = {**inner.get("grid", inner), **section}
    if "blocks" not in section and "preset" not in section:
        try:
            return uniform_grid(
                int(section["paths"]),
                int(section["stages"]),
                section.get("channels"),
                section.get("costs"),
                bool(section.get("searchable_stage0", False)),
            )
        except KeyError as exc:
            raise ConfigError(f"grid section missing field {exc}") from None
    return grid_from_dict(section)


def _task_section(i: int, entry: dict, base: Path) -> TaskSpec:
    mode = entry.get("mode", "analytic")
    if mode == "analytic":
        if "table" in entry:
            table = load_table(_resolve(base, entry["table"]))
        elif "coeffs" in entry:
            pairs = {(int(a), int(b)): float(w) for a, b, w in entry.get("pairwise", [])}
            table = additive_table(entry["coeffs"], float(entry.get("offset", 0.0)), pairs)
        else:
            raise ConfigError(f"analytic task {i} needs 'table' or 'coeffs'")
        return TaskSpec(i, "analytic", table=table)
    if mode == "differentiable":
        if "read_path" not in entry or "teacher_mask" not in entry:
            raise ConfigError(f"differentiable task {i} needs 'read_path' and 'teacher_mask'")
        return TaskSpec(i, mode, read_path=int(entry["read_path"]), teacher_mask=_parse_bits(entry["teacher_mask"]))
    raise ConfigError(f"task {i}: unknown mode {mode!r}")


def _coerce(name: str, value):
    """Convert a string override to the type of the SearchConfig field."""
    default = {f.name: f.default for f in fields(SearchConfig)}[name]
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if value.lower() in ("none", "null"):
        return None
    try:
        if isinstance(default, float):
            return float(value)
        return int(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


def load_experiment(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a config file (optional) and apply SearchConfig overrides."""
    raw, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw, base = _load_yaml(path), path.resolve().parent
    known = {"seed", "out", "grid", "tasks", "search", "validate", "algorithm"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    grid = _grid_section(raw["grid"], base) if raw.get("grid") is not None else None
    tasks = [_task_section(i, dict(e), base) for i, e in enumerate(raw.get("tasks") or [])]

    search_kw = dict(raw.get("search") or {})
    for key in ("seed", "algorithm"):
        if key in raw:
            search_kw[key] = raw[key]
    search_kw.update(overrides or {})
    names = set(SearchConfig.field_names())
    bad = set(search_kw) - names
    if bad:
        raise ConfigError(f"unknown search fields: {sorted(bad)}")
    search_kw = {k: _coerce(k, v) for k, v in search_kw.items()}
    if "total_steps" in search_kw and not ({"lr_decay_step", "warmup_steps"} & set(search_kw)):
        cfg = SearchConfig.scaled(**search_kw)
    else:
        cfg = SearchConfig(**search_kw)
    cfg.validate()

    vraw = dict(raw.get("validate") or {})
    vnames = {f.name for f in fields(ValidateConfig)}
    if set(vraw) - vnames:
        raise ConfigError(f"unknown validate fields: {sorted(set(vraw) - vnames)}")
    vcfg = ValidateConfig(**vraw)
    out = raw.get("out")
    return ExperimentConfig(grid, tasks, cfg, vcfg, None if out is None else Path(out), raw)


# -- search --------------------------------------------------------------------


def _write(path: Path, text: str):
    path.write_text(text)


def final_losses(exp: ExperimentConfig, result) -> list[tuple[str, float]]:
    """Per task: (kind, loss) at the returned mask, without the cost term."""
    out = []
    for t, task in enumerate(exp.tasks):
        if task.mode == "analytic":
            out.append(("analytic", float(task.lookup(result.bits[t]))))
        else:
            x, y = result.dataset.inputs, result.dataset.targets
            preds, _ = result.net.forward(result.masks[t], result.weights, x)
            out.append(("data_mse", data_loss(preds[:, t], y[:, t])))
    return out


def cmd_search(exp: ExperimentConfig, out: Path) -> int:
    if exp.grid is None or not exp.tasks:
        raise ConfigError("search needs a grid section and at least one task")
    cfg = exp.search
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = run_search(exp.grid, exp.tasks, cfg)
    elapsed = time.perf_counter() - t0
    head = f"# {exp.header()}\n"

    lines = [head, "# step task loss_raw loss_norm fwd bwd\n"]
    lines += [r.format() + "\n" for r in result.records]
    _write(out / "metrics.log", "".join(lines))

    lines = [head, "# step task pi...\n"]
    lines += [f"{s} {t} " + " ".join(f"{p:.17g}" for p in pi) + "\n" for s, t, pi in result.snapshots]
    _write(out / "pi_snapshots.log", "".join(lines))

    table = CostTable.from_grid(exp.grid)
    per_task = []
    for t, (kind, loss) in enumerate(final_losses(exp, result)):
        write_mask(out / f"mask_task{t}.txt", result.masks[t], header=exp.header(task=t))
        _write(
            out / f"pi_task{t}.txt",
            f"# {exp.header(task=t)}\n" + "".join(f"{p:.17g}\n" for p in result.pis[t]),
        )
        per_task.append(
            {
                "task": t,
                "mask": format_mask(result.masks[t]),
                "loss_kind": kind,
                "loss": loss,
                "arch_cost": float(arch_cost(result.bits[t], table)),
                "relative_cost": float(arch_cost(result.bits[t], table) / table.total) if table.total else 0.0,
                "cost_reg": float(cost_reg(result.bits[t], table, cfg.cost_lambda, cfg.cost_target)),
            }
        )
    summary = {
        "config_hash": exp.config_hash,
        "seed": exp.seed,
        "algorithm": cfg.algorithm,
        "workers": cfg.workers,
        "total_steps": cfg.total_steps,
        "total_forwards": result.totals.forwards,
        "total_backwards": result.totals.backwards,
        "tasks": per_task,
    }
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write(out / "config.json", json.dumps(exp.canonical(), indent=2, sort_keys=True) + "\n")
    for row in per_task:
        print(f"task {row['task']}: mask={row['mask']} {row['loss_kind']}={row['loss']:.6g} rel_cost={row['relative_cost']:.4f}")
    print(f"forwards={result.totals.forwards} backwards={result.totals.backwards} ({elapsed:.1f}s) -> {out}")
    return EXIT_OK


# -- validate ------------------------------------------------------------------

#: Estimator operations the validation report must touch at least once.
COVERED_OPS = (
    ("archdist", "prob"),
    ("archdist", "log_prob"),
    ("archdist", "sample"),
    ("archdist", "proxy_prob"),
    ("archdist", "sample_proxy"),
    ("archdist", "importance_weight"),
    ("archdist", "self_normalize"),
    ("archdist", "score_function"),
    ("search", "normalize_loss"),
    ("search", "sample_final"),
    ("Searcher", "estimate_alg1"),
    ("Searcher", "estimate_alg2"),
    ("Searcher", "estimate_alg3"),
    ("Searcher", "estimate_alg4"),
)


@contextmanager
def _trace_calls():
    """Count calls to the estimator operations, wherever they are imported."""
    import mtnas.cli as cli_mod

    hits = {op: 0 for op in COVERED_OPS}
    patched = []

    def wrap(fn, key):
        def inner(*a, **kw):
            hits[key] += 1
            return fn(*a, **kw)

        return inner

    for key in COVERED_OPS:
        owner, name = key
        if owner == "Searcher":
            targets = [Searcher]
        else:
            targets = [m for m in (archdist, search, cli_mod) if hasattr(m, name)]
        for target in targets:
            orig = getattr(target, name)
            patched.append((target, name, orig))
            setattr(target, name, wrap(orig, key))
    try:
        yield hits
    finally:
        for target, name, orig in reversed(patched):
            setattr(target, name, orig)


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: float
    note: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return f"{tag} {self.name}: measured={self.measured:.3e} tol={self.tolerance:.1e}{extra}"


def _random_dists(rng, n, T):
    return [ArchDistribution(rng.uniform(0.05, 0.95, n)) for _ in range(T)]


def run_validation(vcfg: ValidateConfig, n: int, signed: bool = True) -> list[Check]:
    rng = np.random.default_rng(vcfg.seed)
    T, inst = vcfg.tasks, vcfg.instances
    masks = all_masks(n)
    checks = []

    err = max(abs(prob(d, masks).sum() - 1.0) for d in _random_dists(rng, n, inst))
    checks.append(Check("normalization", err <= 1e-12, err, 1e-12))

    err = max(abs(np.exp(log_prob(d, masks)) - prob(d, masks)).max() for d in _random_dists(rng, n, inst))
    checks.append(Check("log_prob_consistency", err <= 1e-12, err, 1e-12))

    err = 0.0
    for _ in range(inst):
        dists = _random_dists(rng, n, T)
        proxy = ProxyDistribution(tuple(dists))
        table = rng.normal(size=masks.shape[0])
        q = proxy_prob(proxy, masks)
        for d in dists:
            lhs = np.sum(q * importance_weight(d, proxy, masks) * table)
            err = max(err, abs(lhs - np.sum(prob(d, masks) * table)))
    checks.append(Check("is_unbiased_exact", err <= 1e-10, err, 1e-10))

    within, N = 0, vcfg.mc_samples
    for _ in range(inst):
        dists = _random_dists(rng, n, T)
        proxy = ProxyDistribution(tuple(dists))
        table = rng.normal(size=masks.shape[0])
        draws = np.stack([sample_proxy(proxy, rng) for _ in range(N)])
        t = int(rng.integers(T))
        vals = importance_weight(dists[t], proxy, draws) * table[archdist.mask_index(draws)]
        truth = np.sum(prob(dists[t], masks) * table)
        se = vals.std(ddof=1) / np.sqrt(N)
        within += abs(vals.mean() - truth) <= 3 * se
    frac = within / inst
    checks.append(Check("is_unbiased_mc", frac >= 0.9, frac, 0.9, f"{within}/{inst} within 3 SE at N={N}"))

    raws = rng.uniform(0.1, 5.0, (inst, 16))
    err = max(abs(self_normalize(r).sum() - 1.0) for r in raws)
    checks.append(Check("self_normalize_sum", err <= 1e-12, err, 1e-12))

    err = 0.0
    for d in _random_dists(rng, n, inst):
        score = np.stack([score_function(d, m, signed=signed) for m in masks])
        err = max(err, np.abs(prob(d, masks) @ score).max())
    checks.append(Check("score_zero_mean", err <= 1e-10, err, 1e-10))

    err = 0.0
    table_grid = CostTable(rng.uniform(0.5, 2.0, n))
    penalty = CostPenalty(table_grid, vcfg.cost_lambda, vcfg.cost_target)
    for d in _random_dists(rng, n, inst):
        task = TaskSpec(0, table=rng.normal(size=masks.shape[0]))
        losses = task.lookup(masks) + penalty(masks)
        score = np.stack([score_function(d, m, signed=signed) for m in masks])
        lhs = (prob(d, masks) * losses) @ score
        err = max(err, np.abs(lhs - enumerate_grad_pi(d, task, penalty)).max())
    checks.append(Check("reinforce_identity", err <= 1e-10, err, 1e-10))

    err = 0
    for d in _random_dists(rng, n, inst):
        best = masks[np.argmax(prob(d, masks))]
        err = max(err, int(np.sum(best != sample_final(d))))
    checks.append(Check("sample_final_argmax", err == 0, err, 0))

    stats = LossStats(window=4)
    seq = rng.normal(size=12)
    got = [normalize_loss(stats, x) for x in seq]
    ref = [0.0 if i < 2 else (x - seq[max(0, i - 4) : i].mean()) / seq[max(0, i - 4) : i].std() for i, x in enumerate(seq)]
    err = float(np.max(np.abs(np.subtract(got, ref))))
    checks.append(Check("loss_normalization", err <= 1e-12, err, 1e-12))

    checks.append(_counter_check(n, rng))
    checks.append(_reinforce_mc_check(n, vcfg, rng, signed))
    return checks


def _validation_grid(n: int) -> SupernetGrid:
    return uniform_grid(n, 2)


def _counter_check(n: int, rng) -> Check:
    grid = _validation_grid(n)
    bad = []
    for T in (1, 2, 3, 5):
        tasks = [TaskSpec(t, table=rng.normal(size=2**n)) for t in range(T)]
        for alg in (1, 2, 3, 4):
            cfg = SearchConfig(algorithm=alg, total_steps=2, warmup_steps=0, lr_decay_step=1, workers=3)
            with Searcher(grid, tasks, cfg) as s:
                s.step()
                got = {(c.forwards, c.backwards) for c in s.state.worker_counts}
            if got != {expected_passes(alg, T)}:
                bad.append(f"alg{alg}/T={T}: {sorted(got)}")
    return Check("pass_counters", not bad, len(bad), 0, "; ".join(bad))


def _reinforce_mc_check(n: int, vcfg: ValidateConfig, rng, signed: bool) -> Check:
    """Monte Carlo mean of the REINFORCE direction against the enumerated gradient."""
    grid = _validation_grid(n)
    T = vcfg.tasks
    tasks = [TaskSpec(t, table=rng.normal(size=2**n)) for t in range(T)]
    workers = 1000
    cfg = SearchConfig(
        algorithm=4,
        total_steps=1,
        warmup_steps=0,
        lr_decay_step=1,
        workers=workers,
        cost_lambda=vcfg.cost_lambda,
        cost_target=vcfg.cost_target,
        self_normalize=False,
        normalize_loss=False,
        seed=vcfg.seed,
    )
    reps = max(1, vcfg.mc_samples // workers)
    with Searcher(grid, tasks, cfg) as s:
        s.state.pis = [rng.uniform(0.2, 0.8, n) for _ in range(T)]
        penalty = s.penalty
        acc = [np.zeros(n) for _ in range(T)]
        for _ in range(reps):
            est = s.estimate_alg4() if signed else _unsigned_alg4(s)
            for t in range(T):
                acc[t] += est.delta_pi[t] / reps
        truth = [enumerate_grad_pi(d, tasks[t], penalty) for t, d in enumerate(s.distributions())]
    cos = min(cosine(a, g) for a, g in zip(acc, truth))
    return Check("reinforce_mc_cosine", cos >= 0.99, cos, 0.99, f"{reps * workers} samples per task")


def _unsigned_alg4(s: Searcher):
    import mtnas.search as sm

    orig = sm.score_function
    sm.score_function = lambda d, m, signed=True: orig(d, m, signed=False)
    try:
        return s.estimate_alg4()
    finally:
        sm.score_function = orig


def _smoke_estimators(n: int, rng):
    """One estimate from every algorithm so the report covers all of them."""
    grid = _validation_grid(n)
    for alg in (1, 2, 3, 4):
        T = 1 if alg == 1 else 2
        tasks = [TaskSpec(t, table=rng.normal(size=2**n)) for t in range(T)]
        cfg = SearchConfig(algorithm=alg, total_steps=1, warmup_steps=0, lr_decay_step=1, workers=2)
        with Searcher(grid, tasks, cfg) as s:
            s.estimate()


def cmd_validate(exp: ExperimentConfig, out: Path | None, unsigned_score: bool = False) -> int:
    vcfg = exp.validate
    n = vcfg.bits
    if n is None:
        n = exp.grid.num_searchable if exp.grid is not None else 6
    if not 1 <= n <= MAX_VALIDATE_BITS:
        raise ConfigError(f"validation enumerates 2^B masks; B must lie in [1, {MAX_VALIDATE_BITS}], got {n}")
    with _trace_calls() as hits:
        checks = run_validation(vcfg, n, signed=not unsigned_score)
        _smoke_estimators(n, np.random.default_rng(vcfg.seed + 1))
    missing = [f"{o}.{f}" for (o, f), c in hits.items() if c == 0]
    covered = len(COVERED_OPS) - len(missing)
    checks.append(
        Check("coverage", not missing, covered, len(COVERED_OPS), "missing: " + ", ".join(missing) if missing else "")
    )
    lines = [f"# {exp.header(bits=n, score='unsigned' if unsigned_score else 'signed')}"]
    lines += [c.line() for c in checks]
    ok = all(c.passed for c in checks)
    lines.append(f"{'ALL PASS' if ok else 'FAILED'}: {sum(c.passed for c in checks)}/{len(checks)} checks")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "validate_report.txt", report)
    return EXIT_OK if ok else EXIT_FAILED


# -- cost ----------------------------------------------------------------------


def cmd_cost(exp: ExperimentConfig, args) -> int:
    printed = False
    if args.bb is not None or args.rpn is not None or args.roi is not None:
        if None in (args.bb, args.rpn, args.roi):
            raise ConfigError("--bb, --rpn and --roi go together")
        ratio = 1.0 if args.ratio is None else args.ratio
        total = args.bb + args.rpn + args.roi
        avg = average_flops(args.bb, args.rpn, args.roi, ratio)
        print(f"total={total:.6g} ratio={ratio:.6g} average={avg:.6g} rounded={round(avg)}")
        printed = True
    if args.mask is not None:
        if exp.grid is None:
            raise ConfigError("cost with --mask needs a grid section in the config")
        grid = exp.grid
        try:
            mask = read_mask(args.mask)
        except OSError as exc:
            raise ConfigError(str(exc)) from None
        if mask.size == grid.num_searchable:
            bits = mask
        elif mask.size == grid.num_blocks:
            bits = grid.searchable_bits(mask)
        else:
            raise GridError(
                f"mask has {mask.size} bits; expected {grid.num_searchable} searchable or {grid.num_blocks} total"
            )
        full = grid.full_mask(bits)
        table = CostTable.from_grid(grid)
        all_costs = np.array([b.cost for b in grid.blocks])
        fixed = np.ones(grid.num_blocks, dtype=bool)
        fixed[grid.searchable_indices] = False
        fixed_cost = float(all_costs[fixed].sum())
        selected = float(arch_cost(bits, table))
        lam = exp.search.cost_lambda if args.cost_lambda is None else args.cost_lambda
        target = exp.search.cost_target if args.target is None else args.target
        rel = selected / table.total if table.total else 0.0
        rel_all = (selected + fixed_cost) / all_costs.sum() if all_costs.sum() else 0.0
        print(f"mask={format_mask(full)}")
        print(f"arch_cost={selected:.6g} of {table.total:.6g} (searchable)")
        print(f"relative_cost={rel:.6g}")
        print(f"fixed_stage0_cost={fixed_cost:.6g}")
        print(f"relative_cost_with_fixed={rel_all:.6g}")
        print(f"cost_reg={cost_reg(bits, table, lam, target):.6g} (lambda={lam:g}, target={target:g})")
        if args.breakdown:
            for i in np.flatnonzero(full):
                b = grid.blocks[i]
                kind = "fixed" if fixed[i] else "searched"
                print(f"  block {i} stage={b.stage} path={b.path} cost={b.cost:.6g} {kind}")
        printed = True
    if not printed:
        raise ConfigError("cost needs --mask or the --bb/--rpn/--roi detector components")
    return EXIT_OK


# -- topology ------------------------------------------------------------------


def cmd_topology(exp: ExperimentConfig, args, out: Path | None) -> int:
    if args.paths is not None and args.stages is not None:
        P, S = args.paths, args.stages
    elif exp.grid is not None:
        P, S = exp.grid.paths, exp.grid.stages
    else:
        raise ConfigError("topology needs --paths and --stages or a grid section")
    names = [args.name] if args.name else list(TOPOLOGIES)
    for name in names:
        try:
            mask = canonical_mask(name, P, S)
        except GridError as exc:
            if args.name:
                raise
            print(f"{name}: skipped ({exc})")
            continue
        print(f"{name}: {format_mask(mask)}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_mask(out / f"mask_{name}.txt", mask, header=f"topology={name} paths={P} stages={S}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def _override_parser() -> argparse.ArgumentParser:
    """Parent parser carrying one flag per SearchConfig field plus globals."""
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", default=argparse.SUPPRESS, help="experiment YAML file")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    g.add_argument(
        "--set", dest="sets", action="append", default=argparse.SUPPRESS, metavar="FIELD=VALUE",
        help="override any search field (repeatable)",
    )
    sg = p.add_argument_group("search fields")
    for f in fields(SearchConfig):
        default = f.default if f.default is not MISSING else None
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            sg.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        else:
            kind = float if isinstance(default, float) else int
            sg.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS, metavar=kind.__name__.upper())
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _override_parser()
    parser = argparse.ArgumentParser(prog="mtnas", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("search", parents=[common], help="run a supernet search and export masks, logs, summary")

    v = sub.add_parser("validate", parents=[common], help="run the enumeration-oracle checks")
    v.add_argument("--bits", type=int, help="searchable bits B (overrides the validate section)")
    v.add_argument("--unsigned-score", action="store_true", help="use the sign-dropped score (expected to fail)")

    c = sub.add_parser("cost", parents=[common], help="report the cost of a mask or detector FLOPs")
    c.add_argument("--mask", type=Path, help="mask file (searchable or full-length bits)")
    c.add_argument("--lambda", dest="cost_lambda_flag", type=float, help="cost_reg weight (default: config)")
    c.add_argument("--target", type=float, help="relative-cost target (default: config)")
    c.add_argument("--breakdown", action="store_true", help="list the cost of every selected block")
    c.add_argument("--bb", type=float, help="backbone FLOPs at the reference size")
    c.add_argument("--rpn", type=float, help="RPN FLOPs at the reference size")
    c.add_argument("--roi", type=float, help="ROI-head FLOPs")
    c.add_argument("--ratio", type=float, help="average-to-reference pixel ratio")

    t = sub.add_parser("topology", parents=[common], help="emit canonical topology masks")
    t.add_argument("--name", choices=TOPOLOGIES)
    t.add_argument("--paths", type=int)
    t.add_argument("--stages", type=int)
    return parser


def _collect_overrides(ns: argparse.Namespace) -> dict:
    names = SearchConfig.field_names()
    overrides = {k: v for k, v in vars(ns).items() if k in names}
    for item in getattr(ns, "sets", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects FIELD=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        exp = load_experiment(getattr(ns, "config", None), _collect_overrides(ns))
        out = getattr(ns, "out", None)
        out = Path(out) if out is not None else exp.out
        if ns.command == "search":
            if out is None:
                raise ConfigError("search needs --out or an 'out' entry in the config")
            return cmd_search(exp, out)
        if ns.command == "validate":
            if ns.bits is not None:
                exp.validate.bits = ns.bits
            return cmd_validate(exp, out, ns.unsigned_score)
        if ns.command == "cost":
            ns.cost_lambda = ns.cost_lambda_flag
            return cmd_cost(exp, ns)
        return cmd_topology(exp, ns, out)
    except (ConfigError, GridError, ValueError, TypeError) as exc:
        print(f"mtnas: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
