"""Analytical cost model for the in-memory-compute accelerator.

Three independent accountings over a layer graph: multiply-accumulate
counts split into integer vs float work by quantization mode, packed
low-bit weight storage, and a throughput latency model with a single
calibrated efficiency scalar. Conventions: 1 MAC = 2 ops, 1 MB = 10^6
bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import CalibrationError, GraphError, LatencyModelError
from .graph import MODE_REGIONS, NetGraph
from .ops import conv_output_hw

MB = 10**6
QPW_HEADER_BYTES = 30  # magic + extents + bit width + signedness + scale


@dataclass(frozen=True)
class OpCount:
    int_macs: int = 0
    float_macs: int = 0

    def __post_init__(self):
        if self.int_macs < 0 or self.float_macs < 0:
            raise LatencyModelError("MAC counters must be non-negative")

    @property
    def int_ops(self) -> int:
        return 2 * self.int_macs

    @property
    def float_flops(self) -> int:
        return 2 * self.float_macs

    @property
    def percentage(self) -> float:
        """Integer share of all work, in [0, 1]."""
        total = self.int_ops + self.float_flops
        return self.int_ops / total if total else 0.0

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(self.int_macs + other.int_macs, self.float_macs + other.float_macs)


@dataclass(frozen=True)
class PimConfig:
    units: int = 64
    macs_per_unit_per_cycle: int = 32
    clock_hz: float = 100e6
    efficiency: float = 1.0

    def __post_init__(self):
        if self.units <= 0 or self.macs_per_unit_per_cycle <= 0 or self.clock_hz <= 0:
            raise LatencyModelError("accelerator dimensions must be positive")
        if not (0 < self.efficiency <= 1.0):
            raise LatencyModelError(f"efficiency must be in (0, 1], got {self.efficiency}")


def conv_layer_macs(
    n: int, c_in: int, h: int, w: int, c_out: int,
    k_h: int, k_w: int, stride: int = 1, padding: int = 0,
) -> int:
    h_out, w_out = conv_output_hw(h, w, k_h, k_w, stride, padding)
    return n * h_out * w_out * c_out * c_in * k_h * k_w


def deployment_conv_opcount() -> OpCount:
    """The calibration workload: one 3x3 conv on a 128x128x64 map with 128
    output channels, executed entirely as integer MACs."""
    return OpCount(int_macs=conv_layer_macs(1, 64, 128, 128, 128, 3, 3, 1, 1))


def per_layer_counts(g: NetGraph, input_dims: dict, mode: str):
    """Per-layer rows (name, kind, int_macs, float_macs); conv work is
    labeled by the mode's regions, the graph's first conv stays float,
    elementwise and bn layers cost one float MAC per output element, and
    data movement (input, upsample) is free."""
    if mode not in MODE_REGIONS:
        raise GraphError(f"unknown quantization mode {mode!r} (expected I, II, or III)")
    regions = MODE_REGIONS[mode]
    dims = g.infer_shapes(input_dims)
    first_conv = g.first_conv_name()
    rows = []
    for s in g.layers:
        n, c, h, w = dims[s.name]
        numel = n * c * h * w
        int_macs = float_macs = 0
        if s.kind == "conv":
            p = s.params
            macs = conv_layer_macs(
                dims[s.inputs[0]][0], p.in_channels, dims[s.inputs[0]][2],
                dims[s.inputs[0]][3], p.out_channels, *p.weight.dims[2:],
                p.stride, p.padding,
            )
            if s.region in regions and s.name != first_conv:
                int_macs = macs
            else:
                float_macs = macs
        elif s.kind == "fused":
            fl = s.params
            co, ci, kh, kw = fl.q_weight.dims
            src = dims[s.inputs[0]]
            int_macs = conv_layer_macs(src[0], ci, src[2], src[3], co, kh, kw,
                                       fl.stride, fl.padding)
        elif s.kind in ("bn", "relu", "add", "sub", "quantize"):
            float_macs = numel
        rows.append((s.name, s.kind, int_macs, float_macs))
    return rows


def count_ops(g: NetGraph, input_dims: dict, mode: str) -> OpCount:
    total = OpCount()
    for _, _, im, fm in per_layer_counts(g, input_dims, mode):
        total = total + OpCount(im, fm)
    return total


@dataclass(frozen=True)
class StorageReport:
    param_count: int
    packed_bytes: int
    header_bytes: int
    saving_pct: float

    @property
    def megabytes(self) -> float:
        return self.packed_bytes / MB


def storage_footprint(g: NetGraph, bit_width: int) -> StorageReport:
    """Packed parameter footprint at a given code width; 32 is the float
    baseline. Headers are bookkeeping, reported separately from payload."""
    if not (1 <= bit_width <= 32):
        raise GraphError(f"bit width must be in [1, 32], got {bit_width}")
    n_params = g.param_count()
    n_tensors = sum(1 for _ in g.param_arrays())
    packed = math.ceil(n_params * bit_width / 8)
    saving = (1.0 - bit_width / 32.0) * 100.0
    return StorageReport(n_params, packed, n_tensors * QPW_HEADER_BYTES, saving)


def latency(oc: OpCount, cfg: PimConfig) -> tuple[int, float]:
    """Cycles and seconds to stream a workload through the array.

    Only integer MACs are schedulable; float work must be fused or
    quantized away first.
    """
    if oc.float_macs > 0:
        raise LatencyModelError(
            "workload contains float MACs; fuse and quantize the graph before timing it"
        )
    throughput = cfg.units * cfg.macs_per_unit_per_cycle * cfg.efficiency
    cycles = math.ceil(oc.int_macs / throughput)
    return cycles, cycles / cfg.clock_hz


def calibrate(cfg: PimConfig, observed_seconds: float, oc: OpCount) -> PimConfig:
    """Fit the efficiency scalar so the model reproduces one measured
    latency. Observations faster than the ideal roofline are impossible
    under the model and are rejected."""
    if observed_seconds <= 0:
        raise CalibrationError(f"observed latency must be positive, got {observed_seconds}")
    ideal_cfg = replace(cfg, efficiency=1.0)
    _, ideal_seconds = latency(oc, ideal_cfg)
    if observed_seconds < ideal_seconds:
        raise CalibrationError(
            f"observed {observed_seconds:.6g} s beats the ideal roofline "
            f"{ideal_seconds:.6g} s; the throughput model cannot explain it"
        )
    return replace(cfg, efficiency=ideal_seconds / observed_seconds)
