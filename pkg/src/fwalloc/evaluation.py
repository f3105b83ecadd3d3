"""Ground truth and metrics: exhaustive allocation on small instances,
deviation statistics, Bjontegaard rate deltas, and R-D curve assembly.

The brute-force search is the reference answer the trained agents are
judged against; everything here is evaluation plumbing and never runs
inside the training loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import codec

SEARCH_SPACE_LIMIT = 10_000_000


class SearchSpaceError(ValueError):
    """The requested enumeration exceeds the tuple budget."""


@dataclass(frozen=True)
class OracleSolution:
    """Best QP tuple found by exhaustive enumeration."""

    qps: tuple[float, ...]
    total_bits: float
    total_quality: float
    feasible: bool
    deviation: float  # |total_bits - r_gop| / r_gop

    def to_dict(self) -> dict:
        return {
            "qps": list(self.qps),
            "total_bits": self.total_bits,
            "total_quality": self.total_quality,
            "feasible": self.feasible,
            "deviation": self.deviation,
        }


def _frame_grids(model: codec.GopModel, qp_level: float, grid_step: float,
                 delta_range: tuple[float, float]) -> list[np.ndarray]:
    """Per decision frame, the QP values the search enumerates."""
    lo_k = round(delta_range[0] / grid_step)
    hi_k = round(delta_range[1] / grid_step)
    offsets = np.arange(lo_k, hi_k + 1) * grid_step
    grids = []
    for display in range(1, model.structure.size + 1):
        base = codec.base_qp_for(qp_level, model.structure.frame_types[display])
        grids.append(base + offsets)
    return grids


def brute_force_allocate(
    model: codec.GopModel,
    qp_level: float,
    r_gop: float,
    tolerance: float = 0.05,
    grid_step: float = 1.0,
    delta_range: tuple[float, float] = codec.DELTA_QP_RANGE,
) -> OracleSolution:
    """Enumerate every QP tuple on the grid and keep the best one.

    Within the budget band the quality-maximal tuple wins; if no tuple is
    within the band, the minimal-deviation tuple wins.  Ties break toward
    the lexicographically lowest tuple, which the row ordering below gives
    for free: the first frame's index varies slowest, so np.argmax's
    first-hit rule lands on the lowest QPs.
    """
    if r_gop <= 0:
        raise ValueError("r_gop must be positive")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    grids = _frame_grids(model, qp_level, grid_step, delta_range)
    n = len(grids)
    space = math.prod(len(g) for g in grids)
    if space > SEARCH_SPACE_LIMIT:
        raise SearchSpaceError(
            f"{space} tuples exceed the {SEARCH_SPACE_LIMIT} enumeration limit"
        )

    index_grid = np.indices([len(g) for g in grids]).reshape(n, space)
    qps = np.empty((space, n))
    for col, (grid, idx) in enumerate(zip(grids, index_grid)):
        qps[:, col] = grid[idx]

    total_bits = np.zeros(space)
    total_quality = np.zeros(space)
    anchor = model.anchor_qp
    context_qp = codec.base_qp_for(qp_level, model.structure.frame_types[0])
    for display in range(1, n + 1):
        col = display - 1
        grid = grids[col]
        per_point = np.array([model.bits(display, q) for q in grid])
        total_bits += per_point[index_grid[col]]
        # same closed form as GopModel.quality, vectorized over rows
        value = (model.quality_ceiling[display]
                 - model.quality_slope[display] * (qps[:, col] - anchor))
        refs = model.structure.references[display]
        if refs:
            ref_qps = np.stack([
                np.full(space, context_qp) if r == 0 else qps[:, r - 1]
                for r in refs
            ])
            penalty = np.maximum(0.0, ref_qps - anchor).mean(axis=0)
            value -= model.dependency[display] * penalty
        total_quality += np.clip(value, 0.0, 100.0)

    deviation = np.abs(total_bits - r_gop) / r_gop
    within = deviation <= tolerance
    if within.any():
        quality_in_band = np.where(within, total_quality, -np.inf)
        best = int(np.argmax(quality_in_band))
        feasible = True
    else:
        best = int(np.argmin(deviation))
        feasible = False
    return OracleSolution(
        qps=tuple(float(q) for q in qps[best]),
        total_bits=float(total_bits[best]),
        total_quality=float(total_quality[best]),
        feasible=feasible,
        deviation=float(deviation[best]),
    )


def rate_deviation_stats(traces: Sequence, tolerance: float = 0.05) -> dict:
    """Mean absolute deviation, raw and with the tolerance band zeroed.

    ``traces`` holds episode summaries or bare deviation numbers.
    """
    if len(traces) == 0:
        raise ValueError("need at least one trace")
    raw = np.array([
        abs(t.rate_deviation) if hasattr(t, "rate_deviation") else abs(float(t))
        for t in traces
    ])
    raw.sort()  # fixed summation order: exactly permutation invariant
    tolerated = np.where(raw <= tolerance, 0.0, raw)
    return {
        "mean_raw": float(raw.mean()),
        "mean_tolerated": float(tolerated.mean()),
    }


@dataclass(frozen=True)
class RdPoint:
    """One operating point: bits spent and the quality bought with them."""

    bitrate: float
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.bitrate) and math.isfinite(self.quality)):
            raise ValueError("rate-distortion point must be finite")
        if self.bitrate <= 0:
            raise ValueError("bitrate must be positive")


def _curve_arrays(points: Sequence[RdPoint], label: str):
    if len(points) < 4:
        raise ValueError(f"{label} curve needs at least 4 points")
    ordered = sorted(points, key=lambda p: p.bitrate)
    quality = np.array([p.quality for p in ordered])
    log_rate = np.log10([p.bitrate for p in ordered])
    if not (np.all(np.diff(quality) > 0) and np.all(np.diff(log_rate) > 0)):
        raise ValueError(f"{label} curve must be strictly monotone")
    return quality, log_rate


def bd_rate(anchor: Sequence[RdPoint], test: Sequence[RdPoint]) -> float:
    """Average bitrate change of ``test`` over ``anchor`` at equal quality,
    in percent; negative means the test curve spends fewer bits.

    Monotone piecewise-cubic interpolation of log-rate against quality,
    integrated over the overlapping quality interval.
    """
    q_a, r_a = _curve_arrays(anchor, "anchor")
    q_t, r_t = _curve_arrays(test, "test")
    lo = max(q_a[0], q_t[0])
    hi = min(q_a[-1], q_t[-1])
    if not hi > lo:
        raise ValueError("curves share no quality interval")
    int_a = PchipInterpolator(q_a, r_a).antiderivative()
    int_t = PchipInterpolator(q_t, r_t).antiderivative()
    avg_diff = ((int_t(hi) - int_t(lo)) - (int_a(hi) - int_a(lo))) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


def build_rd_curve(
    policy: Callable[[codec.StateVector], float],
    profile: str,
    seed: int,
    qp_levels: Sequence[float] = (22.0, 27.0, 32.0, 37.0),
    pool_size: int = 4,
) -> list[RdPoint]:
    """One point per QP level: summed bits and mean frame quality of the
    noise-free policy over the level's evaluation instances, at the budget
    matching the anchor exactly."""
    points = []
    for level in qp_levels:
        env = codec.make_environment(profile, [float(level)], seed=seed,
                                     pool_size=pool_size,
                                     budget_factors=(1.0,))
        bits = 0.0
        quality = 0.0
        frames = 0
        for model, ep in env.eval_instances():
            _, summary = codec.run_episode(model, policy, ep)
            bits += summary.total_bits
            quality += summary.total_quality
            frames += len(summary.frames)
        points.append(RdPoint(bitrate=bits, quality=quality / frames))
    return points


def write_rd_curve_csv(path, points: Sequence[RdPoint],
                       qp_levels: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: fwalloc.rdcurve.v1\n")
        fh.write("qp_level,bitrate,quality\n")
        for level, p in zip(qp_levels, points):
            fh.write(f"{level:.10g},{p.bitrate:.10g},{p.quality:.10g}\n")


def write_oracle_report(path, solutions: Sequence[dict]) -> None:
    """Oracle solutions with their instance descriptions as one JSON doc."""
    doc = {"schema": "fwalloc.oracle.v1", "solutions": list(solutions)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
