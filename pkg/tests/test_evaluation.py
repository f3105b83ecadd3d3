"""Tests for the brute-force allocator, deviation statistics, Bjontegaard
deltas and R-D curve assembly.

The Bjontegaard check carries its own independent interpolator: slopes by
the Fritsch-Carlson rule and a fine trapezoid integration, written without
looking at scipy, so the two implementations can disagree.
"""

import itertools
import json
import math

import numpy as np
import pytest

from fwalloc import codec, evaluation


def _uniform_model(n, complexity=10e3, ceiling=80.0, slope=1.0, dep=0.0,
                   types=None, refs=None):
    """Hand-built model with identical decision frames."""
    if types is None:
        types = ("I",) + ("B",) * n
    if refs is None:
        refs = ((),) + tuple((0,) for _ in range(n))
    structure = codec.GopStructure(
        size=n, frame_types=types, temporal_ids=(0,) + (1,) * n,
        references=refs, coding_order=tuple(range(1, n + 1)),
    )
    k = n + 1
    return codec.GopModel(
        structure=structure,
        complexity=(complexity,) * k,
        quality_ceiling=(ceiling,) * k,
        quality_slope=(slope,) * k,
        dependency=(dep,) * k,
    )


def _rescan(model, qp_level, r_gop, tolerance, grid_step=1.0):
    """Plain-Python enumeration over the same grid, using only the scalar
    model methods."""
    grids = []
    for d in range(1, model.structure.size + 1):
        base = codec.base_qp_for(qp_level, model.structure.frame_types[d])
        grids.append([base + s for s in range(-5, 6)])
        assert grid_step == 1.0
    context_qp = codec.base_qp_for(qp_level, model.structure.frame_types[0])
    rows = []
    for tup in itertools.product(*grids):
        bits = sum(model.bits(d, tup[d - 1])
                   for d in range(1, model.structure.size + 1))
        quality = 0.0
        for d in range(1, model.structure.size + 1):
            ref_qps = [context_qp if r == 0 else tup[r - 1]
                       for r in model.structure.references[d]]
            quality += model.quality(d, tup[d - 1], ref_qps)
        rows.append((tup, bits, quality, abs(bits - r_gop) / r_gop))
    return rows


class TestBruteForce:
    def test_single_frame_matches_direct_scan(self):
        model = _uniform_model(1)
        r_gop = model.bits(1, 31.0)
        sol = evaluation.brute_force_allocate(model, 32.0, r_gop,
                                              tolerance=0.02)
        rows = _rescan(model, 32.0, r_gop, 0.02)
        in_band = [r for r in rows if r[3] <= 0.02]
        best = max(in_band, key=lambda r: r[2])
        assert sol.qps == best[0]
        assert sol.feasible
        # 1 QP step moves bits by 2^(1/6)-1 = 12%, so only 31 fits the band
        assert sol.qps == (31.0,)

    def test_symmetric_model_uniform_is_optimal(self):
        # quality is linear in QP, so tuples with equal QP sums tie; the
        # uniform tuple must reach the optimum, though a lexicographically
        # lower tie may be the one returned
        model = _uniform_model(3)
        q_star = 33.0
        r_gop = 3 * model.bits(1, q_star)
        context = codec.base_qp_for(32.0, "I")
        uniform_quality = 3 * model.quality(1, q_star, [context])
        sol = evaluation.brute_force_allocate(model, 32.0, r_gop,
                                              tolerance=0.02)
        assert sol.feasible
        assert sol.total_quality == pytest.approx(uniform_quality, rel=1e-12)

    def test_symmetric_model_tight_band_returns_uniform(self):
        # spreading QPs with the same sum costs strictly more bits, so a
        # tight enough band leaves the uniform tuple alone in it
        model = _uniform_model(3)
        q_star = 33.0
        r_gop = 3 * model.bits(1, q_star)
        sol = evaluation.brute_force_allocate(model, 32.0, r_gop,
                                              tolerance=0.004)
        assert sol.qps == (q_star,) * 3
        assert sol.total_bits == pytest.approx(r_gop)

    def test_matches_exhaustive_rescan_on_random_instance(self):
        model = codec.build_gop_model(7, "textured", codec.chain_gop(3))
        r_gop = codec.anchor_total_bits(model, 30.0) * 0.9
        sol = evaluation.brute_force_allocate(model, 30.0, r_gop)
        rows = _rescan(model, 30.0, r_gop, 0.05)
        in_band = [r for r in rows if r[3] <= 0.05]
        assert in_band, "instance must admit a feasible tuple"
        best_quality = max(r[2] for r in in_band)
        assert sol.feasible
        assert sol.total_quality == pytest.approx(best_quality, rel=1e-12)
        # no feasible tuple beats the returned one
        assert all(r[2] <= sol.total_quality + 1e-9 for r in in_band)

    def test_tie_break_is_lowest_tuple(self):
        # flat quality everywhere: every feasible tuple ties, the
        # lexicographically lowest must win
        model = _uniform_model(3, slope=0.0)
        r_gop = 3 * model.bits(1, 32.0)
        sol = evaluation.brute_force_allocate(model, 32.0, r_gop)
        rows = _rescan(model, 32.0, r_gop, 0.05)
        lowest = min(r[0] for r in rows if r[3] <= 0.05)
        assert sol.qps == lowest

    def test_infeasible_budget_returns_minimal_deviation(self):
        model = _uniform_model(2)
        # far below what +5 on every frame can reach
        r_gop = 2 * model.bits(1, 32.0) * 0.25
        sol = evaluation.brute_force_allocate(model, 32.0, r_gop)
        assert not sol.feasible
        # base QP for a B frame at level 32 is 30, so the grid tops out at 35
        assert sol.qps == (35.0, 35.0)
        rows = _rescan(model, 32.0, r_gop, 0.05)
        assert sol.deviation == pytest.approx(min(r[3] for r in rows))

    def test_dependency_pulls_reference_frame_down(self):
        # frame 2 is predicted from frame 1; raising frame 1's QP hurts
        # both, so a tight budget should load the extra QP onto frame 2
        types = ("I", "B", "B")
        refs = ((), (0,), (1,))
        model = _uniform_model(2, slope=1.0, dep=1.0, types=types, refs=refs)
        anchor = 2 * model.bits(1, 32.0)
        saw_split = False
        for factor in (0.6, 0.7, 0.8, 0.9):
            sol = evaluation.brute_force_allocate(model, 32.0,
                                                  anchor * factor)
            if sol.qps[0] < sol.qps[1]:
                saw_split = True
        assert saw_split

    def test_search_space_bound(self):
        model = _uniform_model(4)
        with pytest.raises(evaluation.SearchSpaceError):
            evaluation.brute_force_allocate(model, 32.0, 1e5, grid_step=0.1)

    def test_input_validation(self):
        model = _uniform_model(1)
        with pytest.raises(ValueError):
            evaluation.brute_force_allocate(model, 32.0, 0.0)
        with pytest.raises(ValueError):
            evaluation.brute_force_allocate(model, 32.0, 1e4, tolerance=-0.1)

    def test_solution_serializes(self):
        model = _uniform_model(1)
        sol = evaluation.brute_force_allocate(model, 32.0, model.bits(1, 32.0))
        d = sol.to_dict()
        assert d["qps"] == [32.0]
        assert d["feasible"] is True


class TestDeviationStats:
    def test_inside_band_zeroes_out(self):
        stats = evaluation.rate_deviation_stats([0.04, 0.03])
        assert stats["mean_tolerated"] == 0.0

    def test_outside_band_passes_through(self):
        assert evaluation.rate_deviation_stats([0.10])["mean_tolerated"] == 0.10

    def test_mixed_band(self):
        stats = evaluation.rate_deviation_stats([0.04, 0.08])
        assert stats["mean_tolerated"] == pytest.approx(0.04)
        assert stats["mean_raw"] == pytest.approx(0.06)

    def test_permutation_invariant(self):
        devs = [0.01, 0.2, 0.07, 0.04]
        assert (evaluation.rate_deviation_stats(devs)
                == evaluation.rate_deviation_stats(devs[::-1]))

    def test_accepts_episode_summaries(self):
        model = codec.build_gop_model(3, "easy")
        ep = codec.fresh_episode(model, 32.0, 1.0)
        _, summary = codec.run_episode(model, codec.anchor_policy, ep)
        stats = evaluation.rate_deviation_stats([summary])
        assert stats["mean_raw"] == pytest.approx(summary.rate_deviation)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluation.rate_deviation_stats([])


def _pchip_slopes(x, y):
    """Fritsch-Carlson monotone slopes, endpoints by the shape-preserving
    three-point rule."""
    h = np.diff(x)
    delta = np.diff(y) / h
    n = len(x)
    d = np.zeros(n)
    for i in range(1, n - 1):
        if delta[i - 1] * delta[i] > 0:
            w1 = 2 * h[i] + h[i - 1]
            w2 = h[i] + 2 * h[i - 1]
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i])
    d[0] = ((2 * h[0] + h[1]) * delta[0] - h[0] * delta[1]) / (h[0] + h[1])
    if d[0] * delta[0] <= 0:
        d[0] = 0.0
    elif delta[0] * delta[1] < 0 and abs(d[0]) > 3 * abs(delta[0]):
        d[0] = 3 * delta[0]
    d[-1] = ((2 * h[-1] + h[-2]) * delta[-1] - h[-1] * delta[-2]) / (h[-1] + h[-2])
    if d[-1] * delta[-1] <= 0:
        d[-1] = 0.0
    elif delta[-1] * delta[-2] < 0 and abs(d[-1]) > 3 * abs(delta[-1]):
        d[-1] = 3 * delta[-1]
    return d


def _hermite_eval(x, y, d, xq):
    """Piecewise cubic Hermite values at query points."""
    idx = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, len(x) - 2)
    h = x[idx + 1] - x[idx]
    t = (xq - x[idx]) / h
    h00 = (1 + 2 * t) * (1 - t) ** 2
    h10 = t * (1 - t) ** 2
    h01 = t * t * (3 - 2 * t)
    h11 = t * t * (t - 1)
    return (h00 * y[idx] + h10 * h * d[idx]
            + h01 * y[idx + 1] + h11 * h * d[idx + 1])


def _bd_rate_reference(anchor, test, samples=20001):
    """Straight-line reimplementation: same slopes rule, trapezoid
    integral on a dense grid instead of an exact antiderivative."""
    def arrays(points):
        pts = sorted(points, key=lambda p: p.bitrate)
        return (np.array([p.quality for p in pts]),
                np.log10([p.bitrate for p in pts]))

    q_a, r_a = arrays(anchor)
    q_t, r_t = arrays(test)
    lo, hi = max(q_a[0], q_t[0]), min(q_a[-1], q_t[-1])
    grid = np.linspace(lo, hi, samples)
    f_a = _hermite_eval(q_a, r_a, _pchip_slopes(q_a, r_a), grid)
    f_t = _hermite_eval(q_t, r_t, _pchip_slopes(q_t, r_t), grid)
    avg = np.trapezoid(f_t - f_a, grid) / (hi - lo)
    return (10.0 ** avg - 1.0) * 100.0


FIXTURE_ANCHOR = [
    evaluation.RdPoint(1000.0, 60.0),
    evaluation.RdPoint(2100.0, 72.0),
    evaluation.RdPoint(4400.0, 81.0),
    evaluation.RdPoint(9000.0, 87.0),
]
FIXTURE_TEST = [
    evaluation.RdPoint(930.0, 61.5),
    evaluation.RdPoint(1900.0, 73.0),
    evaluation.RdPoint(4100.0, 81.8),
    evaluation.RdPoint(8700.0, 87.4),
]


class TestBdRate:
    def test_identical_curves_zero(self):
        assert evaluation.bd_rate(FIXTURE_ANCHOR, FIXTURE_ANCHOR) == 0.0

    def test_uniform_rate_shift(self):
        shifted = [evaluation.RdPoint(p.bitrate * 1.10, p.quality)
                   for p in FIXTURE_ANCHOR]
        assert evaluation.bd_rate(FIXTURE_ANCHOR, shifted) == pytest.approx(
            10.0, abs=0.01
        )

    def test_matches_independent_implementation(self):
        ours = evaluation.bd_rate(FIXTURE_ANCHOR, FIXTURE_TEST)
        theirs = _bd_rate_reference(FIXTURE_ANCHOR, FIXTURE_TEST)
        assert ours == pytest.approx(theirs, abs=0.01)
        assert ours < 0  # the test fixture spends fewer bits throughout

    def test_approximate_antisymmetry(self):
        ab = evaluation.bd_rate(FIXTURE_ANCHOR, FIXTURE_TEST) / 100.0
        ba = evaluation.bd_rate(FIXTURE_TEST, FIXTURE_ANCHOR) / 100.0
        assert (1 + ab) * (1 + ba) == pytest.approx(1.0, abs=1e-3)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match="4 points"):
            evaluation.bd_rate(FIXTURE_ANCHOR[:3], FIXTURE_TEST)

    def test_disjoint_quality_ranges_rejected(self):
        high = [evaluation.RdPoint(p.bitrate, p.quality + 40) for p in FIXTURE_TEST]
        with pytest.raises(ValueError, match="quality interval"):
            evaluation.bd_rate(FIXTURE_ANCHOR, high)

    def test_non_monotone_rejected(self):
        bent = list(FIXTURE_ANCHOR)
        bent[2] = evaluation.RdPoint(4400.0, 71.0)
        with pytest.raises(ValueError, match="monotone"):
            evaluation.bd_rate(bent, FIXTURE_TEST)

    def test_rd_point_validation(self):
        with pytest.raises(ValueError):
            evaluation.RdPoint(0.0, 50.0)
        with pytest.raises(ValueError):
            evaluation.RdPoint(100.0, math.nan)


class TestRdCurve:
    def test_anchor_curve_is_monotone(self):
        points = evaluation.build_rd_curve(codec.anchor_policy, "easy", seed=0,
                                           pool_size=2)
        rates = [p.bitrate for p in points]
        quals = [p.quality for p in points]
        # qp levels ascend, so bits and quality must both descend
        assert rates == sorted(rates, reverse=True)
        assert quals == sorted(quals, reverse=True)

    def test_deterministic(self):
        a = evaluation.build_rd_curve(codec.anchor_policy, "easy", seed=3,
                                      qp_levels=(27.0, 32.0), pool_size=2)
        b = evaluation.build_rd_curve(codec.anchor_policy, "easy", seed=3,
                                      qp_levels=(27.0, 32.0), pool_size=2)
        assert a == b

    def test_curve_feeds_bd_rate(self):
        anchor = evaluation.build_rd_curve(codec.anchor_policy, "easy", seed=0,
                                           pool_size=2)
        cheaper = [evaluation.RdPoint(p.bitrate * 0.95, p.quality)
                   for p in anchor]
        assert evaluation.bd_rate(anchor, cheaper) == pytest.approx(-5.0,
                                                                    abs=0.01)

    def test_csv_round_trip(self, tmp_path):
        points = [evaluation.RdPoint(1000.0, 60.0),
                  evaluation.RdPoint(2000.0, 70.0)]
        path = tmp_path / "curve.csv"
        evaluation.write_rd_curve_csv(path, points, (37.0, 32.0))
        lines = path.read_text().splitlines()
        assert lines[0] == "# schema: fwalloc.rdcurve.v1"
        assert lines[2] == "37,1000,60"

    def test_oracle_report_round_trip(self, tmp_path):
        model = _uniform_model(1)
        sol = evaluation.brute_force_allocate(model, 32.0, model.bits(1, 32.0))
        path = tmp_path / "oracle.json"
        evaluation.write_oracle_report(path, [sol.to_dict()])
        doc = json.loads(path.read_text())
        assert doc["schema"] == "fwalloc.oracle.v1"
        assert doc["solutions"][0]["qps"] == [32.0]
