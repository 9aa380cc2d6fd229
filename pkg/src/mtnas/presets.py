"""Block configurations for the FBNetV3-A backbone and the supernet built on it.

Each entry is ``[operator, channels, stride, repeats, {options}]``. Stage 0
of path ``p`` is partition ``p`` of the backbone; every later stage on path
``p`` repeats that path's block group.
"""
from __future__ import annotations

import re

from mtnas.costmodel import IrbSpec, conv_flops, irb_flops
from mtnas.supergrid import BlockSpec, build_grid

INPUT_SIZE = 224

FBNETV3A_PARTITIONS = [
    [
        ["conv_k3_hs", 16, 2, 1],
        ["ir_k3_hs", 16, 1, 2, {"expansion": 1}],
        ["ir_k5_hs", 24, 2, 1, {"expansion": 4}],
        ["ir_k5_hs", 24, 1, 3, {"expansion": 2}],
    ],
    [
        ["ir_k5_sehsig_hs", 40, 2, 1, {"expansion": 5}],
        ["ir_k5_sehsig_hs", 40, 1, 4, {"expansion": 3}],
    ],
    [
        ["ir_k5_hs", 72, 2, 1, {"expansion": 5}],
        ["ir_k3_hs", 72, 1, 4, {"expansion": 3}],
        ["ir_k3_sehsig_hs", 120, 1, 1, {"expansion": 5}],
        ["ir_k5_sehsig_hs", 120, 1, 5, {"expansion": 3}],
    ],
    [
        ["ir_k3_sehsig_hs", 184, 2, 1, {"expansion": 6}],
        ["ir_k5_sehsig_hs", 184, 1, 5, {"expansion": 4}],
        ["ir_k5_sehsig_hs", 224, 1, 1, {"expansion": 6}],
    ],
]

SUPERNET_PATH_BLOCKS = [
    [["ir_k5_hs", 24, 1, 2, {"expansion": 2}]],
    [["ir_k5_sehsig_hs", 40, 1, 2, {"expansion": 3}]],
    [["ir_k5_sehsig_hs", 120, 1, 2, {"expansion": 3}]],
    [
        ["ir_k5_sehsig_hs", 224, 1, 1, {"expansion": 4}],
        ["ir_k5_sehsig_hs", 224, 1, 1, {"expansion": 6}],
    ],
]

FUSION_CHANNELS = [24, 40, 120, 224]

_KERNEL = re.compile(r"_k(\d+)")


def group_flops(ops, in_channels: int, size: int) -> tuple[float, int, int]:
    """MACs of a block group; returns (macs, out_channels, out_size)."""
    total = 0.0
    c_in = in_channels
    for op in ops:
        name, c_out, stride, repeats = op[:4]
        opts = op[4] if len(op) > 4 else {}
        k = int(_KERNEL.search(name).group(1))
        for r in range(repeats):
            s = stride if r == 0 else 1
            if name.startswith("conv"):
                total += conv_flops(k, c_in, c_out, s, size, size)
                size = -(-size // s)
            else:
                total += irb_flops(IrbSpec(k, opts.get("expansion", 1), c_in, c_out, s, size, size))
                size //= s
            c_in = c_out
    return total, c_in, size


def fbnetv3a_supernet(stages: int = 3, searchable_stage0: bool = False, input_size: int = INPUT_SIZE):
    """P=4 supernet grid with per-block costs in MMACs."""
    specs = []
    c_in, size = 3, input_size
    sizes = []
    for p, ops in enumerate(FBNETV3A_PARTITIONS):
        macs, c_in, size = group_flops(ops, c_in, size)
        sizes.append(size)
        specs.append(BlockSpec(0, p, FUSION_CHANNELS[p], input_size // size, macs / 1e6))
    for p, ops in enumerate(SUPERNET_PATH_BLOCKS):
        macs, _, _ = group_flops(ops, FUSION_CHANNELS[p], sizes[p])
        for s in range(1, stages):
            specs.append(BlockSpec(s, p, FUSION_CHANNELS[p], input_size // sizes[p], macs / 1e6))
    return build_grid(4, stages, specs, searchable_stage0)


PRESETS = {"fbnetv3a": fbnetv3a_supernet}
