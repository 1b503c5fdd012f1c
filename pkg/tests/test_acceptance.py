"""Acceptance suite: one test per criterion, each reporting a pass/fail line."""

import math
import statistics
import time

import numpy as np
import pytest

from l2box.analysis import diagnose
from l2box.baselines import ml_bruteforce
from l2box.detector import (
    AdmmState,
    DetectorConfig,
    PenaltySchedule,
    detect,
    precompute,
    update_x,
    update_z1,
    update_z2,
    x_update_rhs,
)
from l2box.harness import ExperimentConfig, records_to_csv, strip_timing, sweep, timing_bench, trial_rng
from l2box.mimo import random_frame, sample_channel, snr_to_noise_variance, transmit

SEED = 2024


def instance(B, U, Q, snr_db, rng):
    channel = sample_channel(B, U, rng)
    frame = random_frame(U, Q, rng)
    sigma2 = 0.0 if snr_db is None else snr_to_noise_variance(snr_db, U, Q)
    return channel.H, transmit(channel.H, frame.symbols, sigma2, rng).r, frame


def test_oracle_equivalence(criterion_line):
    t0 = time.perf_counter()
    agree = 0
    ml_not_worse = 0
    for t in range(200):
        H, r, _ = instance(2, 2, 1, None, trial_rng(SEED, 1, t))
        out = detect(H, r, 1)
        ml, ml_obj = ml_bruteforce(H, r, 1)
        agree += bool(np.array_equal(out.symbols, ml))
        # the ML objective is ||r - Hx||^2, the detector reports half of it
        ml_not_worse += ml_obj <= 2 * out.objective * (1 + 1e-12) + 1e-12
    elapsed = time.perf_counter() - t0
    passed = agree >= 198 and ml_not_worse == 200 and elapsed < 10
    criterion_line(1, "oracle equivalence", passed,
                   f"ADMM = ML in {agree}/200 (need >= 198), ML objective <= ADMM in {ml_not_worse}/200, {elapsed:.1f}s")
    assert agree >= 198
    assert ml_not_worse == 200
    assert elapsed < 10


def test_projections(criterion_line):
    rng = np.random.default_rng(SEED)
    N, n = 10_000, 8
    x = rng.standard_normal((N, n)) * 2
    y = rng.standard_normal((N, n))
    rho = rng.uniform(0.1, 10, (N, 1))

    z1 = update_z1(x, y, rho)
    v = x + y / rho
    inside = np.abs(v) <= 1
    box_ok = bool(np.all(np.abs(z1) <= 1) and np.array_equal(z1[inside], v[inside]))

    z2, flags = update_z2(x, y, rho)
    norm_err = np.max(np.abs(np.sum(z2 * z2, axis=1) / n - 1))
    c = rho * x + y
    samples = rng.standard_normal((N, n))
    samples *= math.sqrt(n) / np.linalg.norm(samples, axis=1, keepdims=True)
    best_sample = np.concatenate([np.max(c[i:i + 1000] @ samples.T, axis=1) for i in range(0, N, 1000)])
    beaten = int(np.count_nonzero(np.sum(c * z2, axis=1) >= best_sample))

    passed = box_ok and norm_err <= 1e-9 and beaten == N and not flags.any()
    criterion_line(2, "projections", passed,
                   f"box ok={box_ok}, max rel norm error {norm_err:.1e}, sphere beats samples in {beaten}/{N}")
    assert box_ok
    assert norm_err <= 1e-9
    assert beaten == N


def test_x_update_optimality(criterion_line):
    rng = np.random.default_rng(SEED)
    worst = 0.0
    failures = 0
    for _ in range(1000):
        Q = int(rng.integers(1, 4))
        n = 2 * int(rng.integers(1, 33))
        H = rng.standard_normal((n, n))
        r = rng.standard_normal(n)
        pen = PenaltySchedule(rng.uniform(0.1, 50, Q), rng.uniform(0.1, 50, Q))
        solver = precompute(H, r, pen)
        state = AdmmState(*(rng.standard_normal((Q, n)) for _ in range(5)))
        q = int(rng.integers(Q))
        rhs = x_update_rhs(q, state, solver)
        state.x[q] = update_x(q, state, solver)
        w = 2.0 ** np.arange(Q)
        grad = (
            -w[q] * H.T @ (r - H @ (w @ state.x))
            + state.y1[q] + state.y2[q]
            + pen.rho1[q] * (state.x[q] - state.z1[q])
            + pen.rho2[q] * (state.x[q] - state.z2[q])
        )
        ratio = np.linalg.norm(grad) / (1 + np.linalg.norm(rhs))
        worst = max(worst, ratio)
        failures += ratio > 1e-8
    criterion_line(3, "x-update optimality", failures == 0,
                   f"{failures}/1000 above tolerance, worst ||grad||/(1+||rhs||) = {worst:.1e}")
    assert failures == 0


def test_descent(criterion_line):
    totals = {"lagrangian_increases": 0, "dual_change": 0, "lower_bound": 0}
    runs_clean = 0
    for t in range(50):
        H, r, _ = instance(16, 16, 2, 20, trial_rng(SEED, 4, t))
        _, report = diagnose(H, r, 2, DetectorConfig(alpha=1.1))
        assert report.hypothesis_met
        for k in totals:
            totals[k] += report.lemma_violations[k]
        runs_clean += all(report.lemma_violations[k] == 0 for k in totals)
    passed = all(v == 0 for v in totals.values())
    criterion_line(4, "Lagrangian descent and iterate bounds", passed,
                   f"over 50 runs: {totals['lagrangian_increases']} Lagrangian increases, "
                   f"{totals['dual_change']} dual-change violations, {totals['lower_bound']} lower-bound violations; "
                   f"{runs_clean}/50 runs clean")
    assert totals["lagrangian_increases"] == 0
    assert totals["dual_change"] == 0
    assert totals["lower_bound"] == 0


@pytest.fixture(scope="module")
def convergence_runs():
    t0 = time.perf_counter()
    config = DetectorConfig(alpha=1.1, max_iters=50, tol=1e-4)
    reports = []
    for t in range(100):
        H, r, _ = instance(32, 32, 2, 20, trial_rng(SEED, 5, t))
        reports.append(diagnose(H, r, 2, config)[1])
    return reports, time.perf_counter() - t0


def test_convergence_speed(criterion_line, convergence_runs):
    reports, elapsed = convergence_runs
    converged = [rep for rep in reports if rep.converged]
    # censored runs count as exceeding the cap when taking the median
    stops = [rep.measured_iterations if rep.converged else math.inf for rep in reports]
    median = statistics.median(stops)
    passed = len(converged) >= 99 and median <= 30 and elapsed < 120
    criterion_line(5, "convergence speed", passed,
                   f"{len(converged)}/100 below 1e-4 within 50 iterations (need >= 99), "
                   f"median stop {median}, {elapsed:.0f}s")
    assert len(converged) >= 99
    assert median <= 30
    assert elapsed < 120


def test_iteration_bound(criterion_line, convergence_runs):
    reports, _ = convergence_runs
    undefined = sum(rep.iteration_bound is None for rep in reports)
    violations = sum(bool(rep.bound_violated) for rep in reports)
    censored = sum(not rep.converged for rep in reports)
    smallest = min(rep.iteration_bound for rep in reports if rep.iteration_bound is not None)
    passed = violations == 0 and undefined == 0
    criterion_line(6, "iteration-complexity bound", passed,
                   f"{violations} violations, {undefined} undefined bounds, {censored} censored runs, "
                   f"smallest bound {smallest:.3g}")
    assert undefined == 0
    assert violations == 0


def test_quality_vs_mmse(criterion_line):
    t0 = time.perf_counter()
    U = 16
    trials = math.ceil(2e5 / (2 * U * 2))
    cfg = ExperimentConfig(B=U, U=U, Q=2, snr_db_list=[16.0], trials=trials, seed=SEED, detectors=["l2box", "mmse"])
    recs = {r.detector: r for r in sweep(cfg)}
    elapsed = time.perf_counter() - t0
    a, m = recs["l2box"], recs["mmse"]
    se = math.hypot(math.sqrt(a.ber * (1 - a.ber) / a.total_bits), math.sqrt(m.ber * (1 - m.ber) / m.total_bits))
    gap = m.ber - a.ber
    passed = gap > 2 * se and elapsed < 300
    criterion_line(7, "detection quality vs MMSE", passed,
                   f"BER ADMM {a.ber:.4g} vs MMSE {m.ber:.4g} over {a.total_bits} bits, "
                   f"gap {gap:.3g} vs 2 SE {2 * se:.2g}, {elapsed:.0f}s")
    assert gap > 2 * se
    assert elapsed < 300


def test_complexity_scaling(criterion_line):
    recs = timing_bench([16, 32, 64], Q=2, iters=50, repetitions=20)
    pre = [b.pre_micros / a.pre_micros for a, b in zip(recs, recs[1:])]
    per_iter = [b.per_iter_micros / a.per_iter_micros for a, b in zip(recs, recs[1:])]
    pre_ok = all(4 <= x <= 16 for x in pre)
    iter_ok = all(2.5 <= x <= 8 for x in per_iter)
    criterion_line(8, "complexity scaling", pre_ok and iter_ok,
                   f"pre-iteration ratios {[round(x, 2) for x in pre]} (need [4, 16]), "
                   f"per-iteration ratios {[round(x, 2) for x in per_iter]} (need [2.5, 8])")
    assert iter_ok
    assert pre_ok


def test_reproducibility(criterion_line, tmp_path):
    cfg = ExperimentConfig(B=4, U=4, Q=2, snr_db_list=[5.0, 10.0, 15.0], trials=200, seed=SEED,
                           detectors=["l2box", "mmse", "zf"])
    first = strip_timing(records_to_csv(sweep(cfg)))
    second = strip_timing(records_to_csv(sweep(cfg, workers=4)))
    (tmp_path / "a.csv").write_text(first)
    (tmp_path / "b.csv").write_text(second)
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    criterion_line(9, "reproducibility", same, f"non-timing CSV bytes identical across runs: {same}")
    assert same
