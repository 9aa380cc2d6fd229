"""Grid supernet topology: paths x stages of gated blocks joined by fusion modules.

Blocks are indexed stage-major: ``index = stage * paths + path``. Path 0 has the
highest resolution (smallest divisor). Stage 0 is the backbone chain; every
later stage is fused from all paths of the previous stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GridError(ValueError):
    """Raised for malformed grids, masks, or topology requests."""


@dataclass(frozen=True)
class BlockSpec:
    stage: int
    path: int
    channels: int
    resolution_divisor: int
    cost: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise GridError(f"block ({self.stage},{self.path}): channels must be >= 1")
        if self.cost < 0:
            raise GridError(f"block ({self.stage},{self.path}): negative cost")
        d = self.resolution_divisor
        if d < 1 or d & (d - 1):
            raise GridError(
                f"block ({self.stage},{self.path}): resolution divisor {d} is not a power of two"
            )


@dataclass(frozen=True)
class SupernetGrid:
    paths: int
    stages: int
    blocks: tuple[BlockSpec, ...]
    searchable_stage0: bool = False

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def index(self, stage: int, path: int) -> int:
        return stage * self.paths + path

    def block(self, stage: int, path: int) -> BlockSpec:
        return self.blocks[self.index(stage, path)]

    @property
    def path_channels(self) -> tuple[int, ...]:
        return tuple(self.blocks[p].channels for p in range(self.paths))

    @property
    def path_divisors(self) -> tuple[int, ...]:
        return tuple(self.blocks[p].resolution_divisor for p in range(self.paths))

    @property
    def costs(self) -> np.ndarray:
        return np.array([b.cost for b in self.blocks], dtype=float)

    @property
    def searchable_indices(self) -> np.ndarray:
        """Block indices whose bits are searched (stage 0 excluded unless flagged)."""
        start = 0 if self.searchable_stage0 else self.paths
        return np.arange(start, self.num_blocks)

    @property
    def num_searchable(self) -> int:
        return len(self.searchable_indices)

    def full_mask(self, bits) -> np.ndarray:
        """Expand a searchable-bit vector into a length-B block mask."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (self.num_searchable,):
            raise GridError(
                f"expected {self.num_searchable} searchable bits, got shape {bits.shape}"
            )
        mask = np.ones(self.num_blocks, dtype=np.uint8)
        mask[self.searchable_indices] = bits
        return mask

    def searchable_bits(self, mask) -> np.ndarray:
        mask = validate_mask(self, mask)
        return mask[self.searchable_indices].copy()


def build_grid(paths: int, stages: int, block_specs, searchable_stage0: bool = False) -> SupernetGrid:
    """Validate block specs and arrange them stage-major into a grid."""
    if paths < 1 or stages < 1:
        raise GridError(f"need paths >= 1 and stages >= 1, got P={paths}, S={stages}")
    specs = list(block_specs)
    if len(specs) != paths * stages:
        raise GridError(f"expected {paths * stages} blocks for P={paths}, S={stages}, got {len(specs)}")
    cells: dict[tuple[int, int], BlockSpec] = {}
    for spec in specs:
        if not (0 <= spec.stage < stages and 0 <= spec.path < paths):
            raise GridError(f"block ({spec.stage},{spec.path}) lies outside the {stages}x{paths} grid")
        key = (spec.stage, spec.path)
        if key in cells:
            raise GridError(f"duplicate block at stage {spec.stage}, path {spec.path}")
        cells[key] = spec
    ordered = tuple(cells[(s, p)] for s in range(stages) for p in range(paths))

    for p in range(paths):
        row = [cells[(s, p)] for s in range(stages)]
        if len({b.channels for b in row}) != 1:
            raise GridError(f"path {p}: channel count varies along the path")
        if len({b.resolution_divisor for b in row}) != 1:
            raise GridError(f"path {p}: resolution divisor varies along the path")
    divisors = [cells[(0, p)].resolution_divisor for p in range(paths)]
    if any(a >= b for a, b in zip(divisors, divisors[1:])):
        raise GridError(f"resolution divisors must strictly increase with path index: {divisors}")
    return SupernetGrid(paths, stages, ordered, bool(searchable_stage0))


def uniform_grid(paths: int, stages: int, channels=None, costs=None, searchable_stage0=False) -> SupernetGrid:
    """Convenience grid: divisors 4, 8, 16, ...; per-path channels; per-block or per-path costs."""
    if channels is None:
        channels = [8 * (p + 1) for p in range(paths)]
    if costs is None:
        costs = np.ones(paths * stages)
    costs = np.asarray(costs, dtype=float)
    if costs.shape == (paths,):
        costs = np.tile(costs, stages)
    specs = [
        BlockSpec(s, p, int(channels[p]), 4 * 2**p, float(costs[s * paths + p]))
        for s in range(stages)
        for p in range(paths)
    ]
    return build_grid(paths, stages, specs, searchable_stage0)


def validate_mask(grid: SupernetGrid, mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (grid.num_blocks,):
        raise GridError(f"mask length {mask.size} does not match B={grid.num_blocks}")
    if not np.isin(mask, (0, 1)).all():
        raise GridError("mask entries must be 0 or 1")
    mask = mask.astype(np.uint8)
    if not grid.searchable_stage0 and not mask[: grid.paths].all():
        raise GridError("stage-0 blocks are fixed-selected; their bits must be 1")
    return mask


@dataclass(frozen=True)
class PrunedGraph:
    active_blocks: frozenset[int]
    fusion_edges: frozenset[tuple[int, int]]
    paths: int = 1

    @property
    def cross_path_edges(self) -> frozenset[tuple[int, int]]:
        return frozenset((s, d) for s, d in self.fusion_edges if s % self.paths != d % self.paths)


def apply_mask(grid: SupernetGrid, mask) -> PrunedGraph:
    """Fusion edges kept under the connection-removal rule.

    A skipped block loses every fusion connection from and to other paths;
    same-path connections always survive (the skipped block passes its input
    through).
    """
    mask = validate_mask(grid, mask)
    P = grid.paths
    edges = set()
    for s in range(grid.stages - 1):
        for p_src in range(P):
            src = grid.index(s, p_src)
            for p_dst in range(P):
                dst = grid.index(s + 1, p_dst)
                if p_src == p_dst or (mask[src] and mask[dst]):
                    edges.add((src, dst))
    active = frozenset(int(i) for i in np.flatnonzero(mask))
    return PrunedGraph(active, frozenset(edges), P)


# -- parameter-free fusion ---------------------------------------------------


def repeat_drop(x: np.ndarray, c_out: int, axis: int = 0) -> np.ndarray:
    """Repeat channels ceil(c_out / c_in) times, keep the leading c_out."""
    c_in = x.shape[axis]
    reps = math.ceil(c_out / c_in)
    tiled = np.concatenate([x] * reps, axis=axis)
    return np.take(tiled, np.arange(c_out), axis=axis)


def pad_group_mean(x: np.ndarray, c_out: int, axis: int = 0) -> np.ndarray:
    """Zero-pad channels to ceil(c_in / c_out) * c_out, then average consecutive groups."""
    x = np.moveaxis(x, axis, 0)
    c_in = x.shape[0]
    group = math.ceil(c_in / c_out)
    padded = np.zeros((group * c_out,) + x.shape[1:], dtype=np.result_type(x, float))
    padded[:c_in] = x
    out = padded.reshape((c_out, group) + x.shape[1:]).mean(axis=1)
    return np.moveaxis(out, 0, axis)


def channel_fusion_matrix(c_in: int, c_out: int) -> np.ndarray:
    """The (c_out, c_in) linear map applied to channels by fusion between paths."""
    eye = np.eye(c_in)
    if c_out >= c_in:
        return repeat_drop(eye, c_out, axis=0)
    return pad_group_mean(eye, c_out, axis=0)


def resample_nearest(x: np.ndarray, src_div: int, dst_div: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two (spatial) axes by the divisor ratio."""
    if dst_div == src_div:
        return x
    if dst_div > src_div:
        step = dst_div // src_div
        return x[..., ::step, ::step]
    factor = src_div // dst_div
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def fuse_channels(feature: np.ndarray, src: BlockSpec, dst: BlockSpec) -> np.ndarray:
    """Carry a (..., C, H, W) feature map from ``src``'s path to ``dst``'s path."""
    if src.path == dst.path:
        return feature
    if feature.shape[-3] != src.channels:
        raise GridError(f"feature has {feature.shape[-3]} channels, source block has {src.channels}")
    out = resample_nearest(feature, src.resolution_divisor, dst.resolution_divisor)
    if dst.channels >= src.channels:
        return repeat_drop(out, dst.channels, axis=-3)
    return pad_group_mean(out, dst.channels, axis=-3)


# -- canonical topologies -----------------------------------------------------

TOPOLOGIES = ("linear", "unet", "fpn", "panet", "bifpn")


def topology_paths(name: str, P: int) -> list[int]:
    """Path selected at stages 1, 2, ... for each canonical topology.

    unet:  decoder climbs from the bottleneck's neighbour to path 0.
    fpn:   top-down pass visiting every path from P-1 to 0.
    panet: fpn followed by a bottom-up pass from 1 to P-1.
    bifpn: panet without the single-input top node of the top-down pass.
    """
    if name == "linear":
        return []
    if name == "unet":
        return list(range(P - 2, -1, -1))
    down = list(range(P - 1, -1, -1))
    up = list(range(1, P))
    if name == "fpn":
        return down
    if name == "panet":
        return down + up
    if name == "bifpn":
        return down[1:] + up
    raise GridError(f"unknown topology {name!r}; choose from {TOPOLOGIES}")


def canonical_mask(name: str, P: int, S: int) -> np.ndarray:
    seq = topology_paths(name, P)
    if len(seq) > S - 1:
        raise GridError(f"{name} with P={P} needs at least {len(seq) + 1} stages, got {S}")
    mask = np.zeros(P * S, dtype=np.uint8)
    mask[:P] = 1
    for stage, path in enumerate(seq, start=1):
        mask[stage * P + path] = 1
    return mask


def selected_path_sequence(mask, P: int) -> list[list[int]]:
    """Selected paths per stage >= 1."""
    grid = np.asarray(mask).reshape(-1, P)
    return [list(np.flatnonzero(row)) for row in grid[1:]]


def is_topology(name: str, mask, P: int) -> bool:
    """Structural predicate for a canonical topology (stage-0 backbone assumed)."""
    mask = np.asarray(mask)
    if not mask[:P].all():
        return False
    rows = selected_path_sequence(mask, P)
    if any(len(r) > 1 for r in rows):
        return False
    seq = [r[0] for r in rows if r]
    n = len(seq)
    # the pattern must occupy stages 1..n with nothing after it
    if any(not r for r in rows[:n]):
        return False

    def strictly_down(xs):
        return all(a - b == 1 for a, b in zip(xs, xs[1:]))

    def strictly_up(xs):
        return all(b - a == 1 for a, b in zip(xs, xs[1:]))

    if name == "linear":
        return n == 0
    if name == "unet":
        return n == P - 1 and (n == 0 or (seq[0] == P - 2 and seq[-1] == 0)) and strictly_down(seq)
    if name == "fpn":
        return n == P and seq[0] == P - 1 and seq[-1] == 0 and strictly_down(seq)
    if name in ("panet", "bifpn"):
        top = P - 1 if name == "panet" else P - 2
        if 0 not in seq:
            return False
        turn = seq.index(0)
        down, up = seq[: turn + 1], seq[turn:]
        return (
            down[0] == top
            and strictly_down(down)
            and strictly_up(up)
            and up[-1] == P - 1
            and len(up) == P
        )
    raise GridError(f"unknown topology {name!r}")


# -- file formats -------------------------------------------------------------


def format_mask(mask) -> str:
    return "".join(str(int(b)) for b in np.asarray(mask))


def parse_mask(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if len(lines) != 1:
        raise GridError(f"mask file must hold exactly one line of bits, found {len(lines)}")
    bits = lines[0]
    if not bits or set(bits) - {"0", "1"}:
        raise GridError(f"malformed mask line {bits!r}")
    return np.array([int(c) for c in bits], dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    return parse_mask(Path(path).read_text())


def write_mask(path, mask, header: str | None = None) -> None:
    body = format_mask(mask) + "\n"
    if header:
        body = "".join(f"# {ln}\n" for ln in header.splitlines()) + body
    Path(path).write_text(body)


def grid_from_dict(cfg: dict) -> SupernetGrid:
    """Build a grid from a parsed ``grid`` config section.

    Either ``preset: fbnetv3a`` (with ``stages``) or explicit ``paths``,
    ``stages`` and a ``blocks`` list of {stage, path, channels,
    resolution_divisor, cost}.
    """
    cfg = dict(cfg)
    flag = bool(cfg.get("searchable_stage0", False))
    if "preset" in cfg:
        from mtnas.presets import PRESETS

        name = cfg["preset"]
        if name not in PRESETS:
            raise GridError(f"unknown grid preset {name!r}")
        return PRESETS[name](stages=int(cfg.get("stages", 3)), searchable_stage0=flag)
    try:
        paths, stages, blocks = int(cfg["paths"]), int(cfg["stages"]), cfg["blocks"]
    except KeyError as exc:
        raise GridError(f"grid config missing field {exc}") from None
    specs = []
    for b in blocks:
        try:
            specs.append(
                BlockSpec(
                    int(b["stage"]),
                    int(b["path"]),
                    int(b["channels"]),
                    int(b["resolution_divisor"]),
                    float(b.get("cost", 0.0)),
                )
            )
        except KeyError as exc:
            raise GridError(f"block entry {b} missing field {exc}") from None
    return build_grid(paths, stages, specs, flag)


def grid_to_dict(grid: SupernetGrid) -> dict:
    return {
        "paths": grid.paths,
        "stages": grid.stages,
        "searchable_stage0": grid.searchable_stage0,
        "blocks": [
            {
                "stage": b.stage,
                "path": b.path,
                "channels": b.channels,
                "resolution_divisor": b.resolution_divisor,
                "cost": b.cost,
            }
            for b in grid.blocks
        ],
    }
