"""Convergence diagnostics for the l2-box ADMM detector.

The convergence theory bundles the two copies of each layer into stacked
vectors ``xbar_q = [x_q; x_q]``, ``z_q = [z1_q; z2_q]``, ``y_q = [y1_q; y2_q]``
with a single penalty ``rho_q``. The checks here therefore require
``rho1_q == rho2_q``. The smooth term on stacked vectors is evaluated at the
average of the two copies, which agrees with the data fit whenever the
copies coincide.

All inequality checks count failures instead of raising: a run whose
penalties miss the threshold may legitimately violate them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from l2box.detector import (
    AdmmState,
    DetectorConfig,
    DetectorOutput,
    PenaltySchedule,
    detect,
    half_residual,
)
from l2box.spectral import SpectralInfo, spectral_bounds

__all__ = [
    "ConvergenceReport",
    "SpectralInfo",
    "augmented_lagrangian",
    "complexity_constant",
    "check_descent",
    "check_dual_change",
    "check_lower_bound",
    "count_increases",
    "diagnose",
    "iteration_bound",
    "layer_constants",
    "penalty_threshold",
    "spectral_bounds",
    "stationarity_residuals",
]

SLACK = 1e-9


def penalty_threshold(Q: int, lambda_max: float) -> np.ndarray:
    """``4**q * sqrt(2) * lambda_max`` for ``q = 0..Q-1``."""
    if lambda_max < 0:
        raise ValueError("lambda_max must be non-negative")
    return 4.0 ** np.arange(Q) * math.sqrt(2.0) * lambda_max


def hypothesis_met(penalties: PenaltySchedule, lambda_max: float) -> bool:
    """Both penalties of every layer strictly above the threshold."""
    thr = penalty_threshold(penalties.Q, lambda_max)
    return bool(np.all(penalties.rho1 > thr) and np.all(penalties.rho2 > thr))


def data_fit(H, r, layers) -> float:
    """``1/2 ||r - H sum_q 2**q layers[q]||^2``."""
    layers = np.atleast_2d(np.asarray(layers, dtype=float))
    return half_residual(H, r, 2.0 ** np.arange(layers.shape[0]) @ layers)


def augmented_lagrangian(state: AdmmState, H, r, penalties: PenaltySchedule) -> float:
    """Data fit plus the multiplier and penalty terms of both splittings."""
    d1 = state.x - state.z1
    d2 = state.x - state.z2
    rho1 = penalties.rho1[:, None]
    rho2 = penalties.rho2[:, None]
    return (
        data_fit(H, r, state.x)
        + float(np.sum(state.y1 * d1) + np.sum(0.5 * rho1 * d1 * d1))
        + float(np.sum(state.y2 * d2) + np.sum(0.5 * rho2 * d2 * d2))
    )


def _require_equal(penalties: PenaltySchedule) -> np.ndarray:
    if not penalties.is_equal:
        raise ValueError(
            "diagnostics need rho1_q == rho2_q for every layer; the bounds are "
            "stated for a single penalty per layer"
        )
    return penalties.rho1


def layer_constants(penalties: PenaltySchedule, spectral: SpectralInfo) -> np.ndarray:
    """Per-layer descent constants ``(rho + 4**q lmin)/2 - 16**q lmax**2 / rho``."""
    rho = _require_equal(penalties)
    q = np.arange(penalties.Q)
    return (rho + 4.0**q * spectral.lambda_min) / 2.0 - 16.0**q * spectral.lambda_max**2 / rho


def complexity_constant(penalties: PenaltySchedule, spectral: SpectralInfo) -> float:
    """Smallest per-layer constant; positive under the penalty threshold."""
    return float(np.min(layer_constants(penalties, spectral)))


def iteration_bound(L1: float, f_star: float, C: float, eps: float) -> float:
    """Upper bound ``(L1 - f_star) / (C eps)`` on the first iteration with residual below ``eps``."""
    if not C > 0:
        raise ValueError(f"iteration bound undefined for C = {C:.6g} <= 0")
    if not eps > 0:
        raise ValueError("eps must be positive")
    return (L1 - f_star) / (C * eps)


def _trace_arrays(states: Sequence[AdmmState], name: str) -> np.ndarray:
    return np.stack([getattr(s, name) for s in states])


def check_dual_change(
    y1_trace, y2_trace, x_trace, spectral: SpectralInfo, start: int = 0
) -> int:
    """Count (iteration, layer) pairs breaking the dual-change bound.

    The bound is ``||y_q^{k+1} - y_q^k||^2 <= 16**q lmax**2 ||xbar_q^{k+1} - xbar_q^k||^2``
    on stacked vectors, so the right side carries ``2 ||dx_q||^2``.
    Traces have shape ``(K, Q, n)``; transitions before ``start`` are skipped.
    """
    y1 = np.asarray(y1_trace, dtype=float)
    y2 = np.asarray(y2_trace, dtype=float)
    x = np.asarray(x_trace, dtype=float)
    if len(x) < 2:
        return 0
    dy = np.sum(np.diff(y1, axis=0) ** 2, axis=2) + np.sum(np.diff(y2, axis=0) ** 2, axis=2)
    dx = 2.0 * np.sum(np.diff(x, axis=0) ** 2, axis=2)
    q = np.arange(x.shape[1])
    rhs = 16.0**q * spectral.lambda_max**2 * dx
    bad = dy > (1.0 + SLACK) * rhs
    return int(np.count_nonzero(bad[start:]))


def check_descent(lagrangian_trace, constants, x_trace, start: int = 0) -> int:
    """Count iterations whose Lagrangian drop falls short of ``sum_q C_q ||dxbar_q||^2``."""
    L = np.asarray(lagrangian_trace, dtype=float)
    x = np.asarray(x_trace, dtype=float)
    if len(L) < 2:
        return 0
    dxbar = 2.0 * np.sum(np.diff(x, axis=0) ** 2, axis=2)
    required = dxbar @ np.asarray(constants, dtype=float)
    bad = np.diff(L) > -required + SLACK * (1.0 + np.abs(L[:-1]))
    return int(np.count_nonzero(bad[start:]))


def count_increases(lagrangian_trace, start: int = 0) -> int:
    """Iterations where the Lagrangian rises by more than the relative slack."""
    L = np.asarray(lagrangian_trace, dtype=float)
    if len(L) < 2:
        return 0
    bad = np.diff(L) > SLACK * (1.0 + np.abs(L[:-1]))
    return int(np.count_nonzero(bad[start:]))


def check_lower_bound(lagrangian_trace, z1_trace, z2_trace, H, r) -> int:
    """Count iterates with ``L^k`` below the data fit at the stacked ``z^k``."""
    L = np.asarray(lagrangian_trace, dtype=float)
    z1 = np.asarray(z1_trace, dtype=float)
    z2 = np.asarray(z2_trace, dtype=float)
    count = 0
    for Lk, a, b in zip(L, z1, z2):
        fz = data_fit(H, r, 0.5 * (a + b))
        if Lk < fz - SLACK * (1.0 + abs(fz)):
            count += 1
    return count


def stationarity_residuals(state: AdmmState, H, r, penalties: PenaltySchedule) -> dict:
    """Per-layer distances from the stationarity conditions.

    ``dual_gradient``: ``||y1_q + y2_q + grad_q f||``, the condition the x-step
    enforces at a fixed point. ``consensus``: ``||xbar_q - z_q||``.
    ``box``: ``max(0, -min_{z in box} <z - z1_q, -y1_q>)``, zero iff every
    multiplier entry points out of the box at ``z1_q``. ``sphere``: distance of
    ``z2_q`` from its own sphere projection.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    Q, n = state.x.shape
    weights = 2.0 ** np.arange(Q)
    resid = r - H @ (weights @ state.x)
    g = -H.T @ resid
    out = {"dual_gradient": [], "consensus": [], "box": [], "sphere": []}
    for q in range(Q):
        grad = weights[q] * g
        out["dual_gradient"].append(float(np.linalg.norm(state.y1[q] + state.y2[q] + grad)))
        out["consensus"].append(
            float(math.hypot(np.linalg.norm(state.x[q] - state.z1[q]), np.linalg.norm(state.x[q] - state.z2[q])))
        )
        b = -state.y1[q]
        # coordinatewise minimum of (z - z1) * b over z in [-1, 1]
        margin = float(np.sum(-np.abs(b) - state.z1[q] * b))
        out["box"].append(max(0.0, -margin))
        v = penalties.rho2[q] * state.x[q] + state.y2[q]
        nv = np.linalg.norm(v)
        if nv == 0.0:
            out["sphere"].append(float(abs(np.linalg.norm(state.z2[q]) - math.sqrt(n))))
        else:
            out["sphere"].append(float(np.linalg.norm(state.z2[q] - math.sqrt(n) * v / nv)))
    return out


@dataclass
class ConvergenceReport:
    Q: int
    lambda_max: float
    lambda_min: float
    rho1: list[float]
    rho2: list[float]
    thresholds: list[float]
    hypothesis_met: bool
    layer_constants: list[float]
    C: float
    tol: float
    max_iters: int
    iterations_used: int
    converged: bool
    #: first k with residual below tol; None if the cap was hit first
    measured_iterations: int | None
    L1: float
    #: data fit at the final soft iterate, standing in for the unknown optimum
    f_star_proxy: float
    iteration_bound: float | None
    bound_violated: bool | None
    lemma_violations: dict = field(default_factory=dict)
    checked_from_iteration: int = 2
    stationarity: dict = field(default_factory=dict)
    degenerate_steps: int = 0
    lagrangian_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def build_report(
    output: DetectorOutput, H, r, Q: int, config: DetectorConfig, spectral: SpectralInfo
) -> ConvergenceReport:
    """Evaluate every check on a run made with ``capture_traces=True``."""
    if output.states is None:
        raise ValueError("the detector run has no captured states")
    penalties = output.penalties
    states = output.states
    notes: list[str] = []

    L = [augmented_lagrangian(s, H, r, penalties) for s in states]
    x_tr = _trace_arrays(states, "x")
    z1_tr = _trace_arrays(states, "z1")
    z2_tr = _trace_arrays(states, "z2")
    y1_tr = _trace_arrays(states, "y1")
    y2_tr = _trace_arrays(states, "y2")

    met = hypothesis_met(penalties, spectral.lambda_max)
    if not met:
        notes.append("penalties do not exceed the convergence threshold; checks are informative only")

    consts = layer_constants(penalties, spectral)
    C = float(np.min(consts))
    # the all-zeros start is off the sphere, so the first transition is not
    # covered by the descent argument; checks begin at the first projected state
    start = 1
    violations = {
        "dual_change": check_dual_change(y1_tr, y2_tr, x_tr, spectral, start=start),
        "sufficient_decrease": check_descent(L, consts, x_tr, start=start),
        "lower_bound": check_lower_bound(L[start:], z1_tr[start:], z2_tr[start:], H, r),
        "lagrangian_increases": count_increases(L, start=start),
    }

    converged = bool(output.residual_trace) and output.residual_trace[-1] < config.tol
    measured = output.iterations_used if converged else None
    f_star = data_fit(H, r, output.soft_layers)
    try:
        bound = iteration_bound(L[0], f_star, C, config.tol)
    except ValueError as exc:
        bound = None
        notes.append(str(exc))
    if bound is None:
        violated = None
    elif measured is not None:
        violated = measured > bound
    else:
        # censored: t > max_iters, a violation only if max_iters already reaches the bound
        violated = output.iterations_used >= bound
        notes.append(f"residual stayed above tol for all {output.iterations_used} iterations")

    thr = penalty_threshold(Q, spectral.lambda_max)
    return ConvergenceReport(
        Q=Q,
        lambda_max=spectral.lambda_max,
        lambda_min=spectral.lambda_min,
        rho1=penalties.rho1.tolist(),
        rho2=penalties.rho2.tolist(),
        thresholds=thr.tolist(),
        hypothesis_met=met,
        layer_constants=consts.tolist(),
        C=C,
        tol=config.tol,
        max_iters=config.max_iters,
        iterations_used=output.iterations_used,
        converged=converged,
        measured_iterations=measured,
        L1=L[0],
        f_star_proxy=f_star,
        iteration_bound=bound,
        bound_violated=violated,
        lemma_violations=violations,
        checked_from_iteration=start + 1,
        stationarity=stationarity_residuals(states[-1], H, r, penalties),
        degenerate_steps=output.degenerate_steps,
        lagrangian_trace=L,
        residual_trace=list(output.residual_trace),
        notes=notes,
    )


def diagnose(H, r, Q: int, config: DetectorConfig | None = None) -> tuple[DetectorOutput, ConvergenceReport]:
    """Run the detector with trace capture and evaluate the convergence checks."""
    config = config or DetectorConfig()
    H = np.atleast_2d(np.asarray(H, dtype=float))
    spectral = spectral_bounds(H)
    if config.penalties is None:
        config = DetectorConfig(
            alpha=config.alpha,
            max_iters=config.max_iters,
            tol=config.tol,
            penalties=PenaltySchedule.scaled_threshold(Q, spectral.lambda_max, config.alpha),
            capture_traces=True,
        )
    else:
        _require_equal(config.penalties)
        config = DetectorConfig(
            alpha=config.alpha,
            max_iters=config.max_iters,
            tol=config.tol,
            penalties=config.penalties,
            capture_traces=True,
        )
    output = detect(H, r, Q, config)
    return output, build_report(output, H, r, Q, config, spectral)
