"""l2-box ADMM detector for 4**Q-QAM MIMO.

Each symbol vector is written as ``x = sum_q 2**q x_q`` with binary layers
``x_q in {-1, 1}^n`` (``n = 2U``). The binary constraint is relaxed to the
intersection of the box ``[-1, 1]^n`` and the sphere ``||x_q||^2 = n`` and
split with two auxiliary copies per layer::

    min 1/2 ||r - H sum_q 2**q x_q||^2
    s.t. x_q = z1_q in box,  x_q = z2_q in sphere

One ADMM sweep projects onto the box and the sphere (independent across
layers), solves for each ``x_q`` in turn (the layers are coupled through
``H``), then takes a dual ascent step on both multipliers.

Layer indices are 0-based, so layer ``q`` carries weight ``2**q`` and its Gram
block is ``4**q H^T H``. Every array may carry leading batch axes: ``H`` is
``(..., 2B, n)``, ``r`` is ``(..., 2B)`` and state arrays are ``(..., Q, n)``.
A batch is iterated in lockstep, which is how :func:`detect_batch` and the
timing bench amortize interpreter overhead.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import lapack

from l2box.mimo import compose_symbols, layers_to_bits
from l2box.spectral import largest_eigenvalue

#: Below this norm the sphere projection has no direction.
DEGENERATE_NORM = 1e-14


@dataclass(frozen=True)
class PenaltySchedule:
    """Per-layer penalties, shape ``(..., Q)`` each."""

    rho1: np.ndarray
    rho2: np.ndarray

    def __post_init__(self):
        rho1 = np.atleast_1d(np.asarray(self.rho1, dtype=float))
        rho2 = np.atleast_1d(np.asarray(self.rho2, dtype=float))
        if rho1.shape != rho2.shape:
            raise ValueError("rho1 and rho2 must have the same shape")
        if not (np.all(np.isfinite(rho1)) and np.all(np.isfinite(rho2))):
            raise ValueError("penalties must be finite")
        if np.any(rho1 <= 0) or np.any(rho2 <= 0):
            raise ValueError("penalties must be strictly positive")
        object.__setattr__(self, "rho1", rho1)
        object.__setattr__(self, "rho2", rho2)

    @classmethod
    def uniform(cls, rho, Q: int | None = None) -> PenaltySchedule:
        """Equal ``rho1 = rho2 = rho`` per layer (``rho`` scalar or per layer)."""
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        if Q is not None and rho.size == 1:
            rho = np.full(Q, rho.item())
        return cls(rho, rho.copy())

    @classmethod
    def scaled_threshold(cls, Q: int, lambda_max, alpha: float = 1.1) -> PenaltySchedule:
        """``rho1 = rho2 = alpha * 4**q * sqrt(2) * lambda_max`` per layer.

        ``alpha > 1`` puts every penalty above the convergence threshold.
        ``lambda_max`` may be an array of batch values.
        """
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        lam = np.maximum(np.asarray(lambda_max, dtype=float), np.finfo(float).tiny)
        return cls.uniform(alpha * np.sqrt(2.0) * lam[..., None] * 4.0 ** np.arange(Q))

    @property
    def Q(self) -> int:
        return self.rho1.shape[-1]

    @property
    def is_equal(self) -> bool:
        return bool(np.array_equal(self.rho1, self.rho2))


@dataclass
class AdmmState:
    """Iterates ``z1, z2, x, y1, y2``, each of shape ``(..., Q, n)``."""

    z1: np.ndarray
    z2: np.ndarray
    x: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    k: int = 1

    @classmethod
    def zeros(cls, Q: int, n: int, batch: tuple[int, ...] = ()) -> AdmmState:
        shape = (*batch, Q, n)
        return cls(*(np.zeros(shape) for _ in range(5)), k=1)

    def copy(self) -> AdmmState:
        return AdmmState(
            self.z1.copy(), self.z2.copy(), self.x.copy(), self.y1.copy(), self.y2.copy(), self.k
        )

    def __getitem__(self, idx) -> AdmmState:
        """Select batch entries."""
        return AdmmState(self.z1[idx], self.z2[idx], self.x[idx], self.y1[idx], self.y2[idx], self.k)

    @property
    def Q(self) -> int:
        return self.x.shape[-2]

    @property
    def n(self) -> int:
        return self.x.shape[-1]


def _matvec(A, v):
    return np.matmul(A, v[..., None])[..., 0]


class PrecomputedSolver:
    """Inverses of ``P_q = 4**q H^T H + (rho1_q + rho2_q) I``.

    Built once per ``(H, penalties)`` pair. Each ``P_q`` is inverted through
    its Cholesky factor (LAPACK ``potrf``/``potri``) so that every iteration
    costs one ``O(n^2)`` product per layer.
    """

    def __init__(self, H, r, penalties: PenaltySchedule):
        H = np.asarray(H, dtype=float)
        r = np.asarray(r, dtype=float)
        if H.ndim < 2:
            H = np.atleast_2d(H)
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(r))):
            raise ValueError("H and r must be finite")
        if H.shape[-2] != r.shape[-1]:
            raise ValueError(f"H has {H.shape[-2]} rows but r has length {r.shape[-1]}")
        self.penalties = penalties
        self.gram = np.matmul(np.swapaxes(H, -1, -2), H)
        self.htr = _matvec(np.swapaxes(H, -1, -2), r)
        self.inverse = [_spd_inverse(self.matrix(q)) for q in range(penalties.Q)]

    @property
    def n(self) -> int:
        return self.gram.shape[-1]

    @property
    def Q(self) -> int:
        return len(self.inverse)

    def matrix(self, q: int) -> np.ndarray:
        p = self.penalties
        shift = (p.rho1[..., q] + p.rho2[..., q])[..., None, None]
        return 4.0**q * self.gram + shift * np.eye(self.n)

    def solve(self, q: int, w) -> np.ndarray:
        """``P_q^{-1} w``."""
        return _matvec(self.inverse[q], np.asarray(w, dtype=float))


def _spd_inverse(P) -> np.ndarray:
    """Inverse of each symmetric positive definite matrix in ``P``."""
    n = P.shape[-1]
    flat = np.ascontiguousarray(P).reshape(-1, n, n)
    out = np.empty_like(flat)
    for i, A in enumerate(flat):
        c, info = lapack.dpotrf(A, lower=1, clean=0)
        if info != 0:
            raise np.linalg.LinAlgError(f"matrix is not positive definite (potrf info {info})")
        out[i], info = lapack.dpotri(c, lower=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"inversion failed (potri info {info})")
    # potri fills the lower triangle only
    out = np.tril(out) + np.swapaxes(np.tril(out, -1), -1, -2)
    return out.reshape(P.shape)


def precompute(H, r, penalties: PenaltySchedule) -> PrecomputedSolver:
    return PrecomputedSolver(H, r, penalties)


def update_z1(x, y1, rho1) -> np.ndarray:
    """Box projection of ``x + y1 / rho1`` onto ``[-1, 1]``."""
    z = np.asarray(x) + np.asarray(y1) / rho1
    # minimum/maximum instead of np.clip: same result, far less call overhead
    return np.minimum(np.maximum(z, -1.0, out=z), 1.0, out=z)


def update_z2(x, y2, rho2):
    """Maximize ``(rho2 x + y2)^T z`` over the sphere ``||z||^2 = n``.

    Works along the last axis. ``rho2`` must broadcast against ``x[..., :1]``.

    Returns:
        The maximizer and a flag (boolean array for batched input) set where
        ``rho2 x + y2`` vanishes. Every sphere point is then optimal and the
        all-ones vector is returned.
    """
    v = rho2 * np.asarray(x, dtype=float) + np.asarray(y2, dtype=float)
    nv = np.sqrt(np.einsum("...i,...i->...", v, v))[..., None]
    degenerate = nv < DEGENERATE_NORM
    if degenerate.any():
        z = np.where(degenerate, 1.0, v * (np.sqrt(v.shape[-1]) / np.where(degenerate, 1.0, nv)))
    else:
        z = v * (np.sqrt(v.shape[-1]) / nv)
    flag = degenerate[..., 0]
    return z, (bool(flag) if flag.ndim == 0 else flag)


def x_update_rhs(q: int, state: AdmmState, solver: PrecomputedSolver) -> np.ndarray:
    """Right-hand side of ``P_q x_q = rhs`` given the current state.

    Layers other than ``q`` enter with whatever ``state`` holds: during a
    sweep that is the fresh value for layers below ``q`` and the previous
    iterate for layers above.
    """
    p = solver.penalties
    weights = 2.0 ** np.arange(state.Q)
    others = np.matmul(weights, state.x) - weights[q] * state.x[..., q, :]
    return (
        weights[q] * (solver.htr - _matvec(solver.gram, others))
        + p.rho1[..., q, None] * state.z1[..., q, :]
        + p.rho2[..., q, None] * state.z2[..., q, :]
        - state.y1[..., q, :]
        - state.y2[..., q, :]
    )


def update_x(q: int, state: AdmmState, solver: PrecomputedSolver) -> np.ndarray:
    """Exact minimizer of the augmented Lagrangian over layer ``q``."""
    return solver.solve(q, x_update_rhs(q, state, solver))


def update_duals(state: AdmmState, penalties: PenaltySchedule) -> AdmmState:
    """Dual ascent ``y <- y + rho (x - z)`` on both multipliers, in place."""
    state.y1 += penalties.rho1[..., None] * (state.x - state.z1)
    state.y2 += penalties.rho2[..., None] * (state.x - state.z2)
    return state


def admm_sweep(state: AdmmState, solver: PrecomputedSolver):
    """Advance ``state`` by one iteration in place.

    Returns:
        The residual ``sum_q ||x_q^{k+1} - x_q^k||^2`` and the number of
        degenerate sphere projections, per batch entry.

    Raises:
        FloatingPointError: the iterates stopped being finite.
    """
    p = solver.penalties
    x_prev = state.x.copy()
    # projections are independent across layers
    state.z1 = update_z1(state.x, state.y1, p.rho1[..., None])
    state.z2, degenerate = update_z2(state.x, state.y2, p.rho2[..., None])
    # the layers are coupled through H: update in series
    for q in range(state.Q):
        state.x[..., q, :] = update_x(q, state, solver)
    update_duals(state, p)
    state.k += 1
    d = state.x - x_prev
    res = np.einsum("...ij,...ij->...", d, d)
    # a non-finite entry anywhere in x propagates into the residual
    if not np.all(np.isfinite(res)):
        raise FloatingPointError("non-finite detector state")
    return res, np.sum(degenerate, axis=-1)


def harden(soft_layers) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sign of each soft layer (``0 -> +1``), the composed symbols and the bits."""
    soft = np.atleast_2d(np.asarray(soft_layers, dtype=float))
    hard = np.where(soft >= 0, 1, -1).astype(np.int64)
    return hard, compose_symbols(hard), layers_to_bits(hard)


@dataclass(frozen=True)
class DetectorConfig:
    """ADMM parameters.

    Attributes:
        alpha: Multiple of the per-layer penalty threshold, used when
            ``penalties`` is not given.
        max_iters: Iteration cap.
        tol: Stop once ``sum_q ||x_q^{k+1} - x_q^k||^2 < tol``.
        penalties: Explicit penalties, overriding ``alpha``.
        capture_traces: Keep a copy of the state after every iteration.
    """

    alpha: float = 1.1
    max_iters: int = 50
    tol: float = 1e-5
    penalties: PenaltySchedule | None = None
    capture_traces: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class DetectorOutput:
    symbols: np.ndarray
    hard_layers: np.ndarray
    bits: np.ndarray
    #: ``1/2 ||r - H symbols||^2`` at the hardened output
    objective: float
    soft_layers: np.ndarray | None = None
    soft_symbols: np.ndarray | None = None
    iterations_used: int = 0
    residual_trace: list[float] = field(default_factory=list)
    degenerate_steps: int = 0
    penalties: PenaltySchedule | None = None
    states: list[AdmmState] | None = None


def half_residual(H, r, x) -> float:
    """``1/2 ||r - H x||^2``."""
    e = np.asarray(r, dtype=float) - np.asarray(H, dtype=float) @ np.asarray(x, dtype=float)
    return 0.5 * float(e @ e)


def default_penalties(H, Q: int, alpha: float = 1.1) -> PenaltySchedule:
    """Threshold-scaled penalties from the largest eigenvalue of each ``H^T H``."""
    H = np.asarray(H, dtype=float)
    gram = np.matmul(np.swapaxes(H, -1, -2), H)
    return PenaltySchedule.scaled_threshold(Q, largest_eigenvalue(gram), alpha)


def _check_inputs(H, r, Q, config):
    H = np.asarray(H, dtype=float)
    r = np.asarray(r, dtype=float)
    if H.ndim < 2 or r.ndim < 1 or H.shape[-2] != r.shape[-1] or H.shape[:-2] != r.shape[:-1]:
        raise ValueError(f"incompatible shapes H{H.shape} and r{r.shape}")
    penalties = config.penalties or default_penalties(H, Q, config.alpha)
    if penalties.Q != Q:
        raise ValueError(f"penalties given for {penalties.Q} layers, Q={Q}")
    if penalties.rho1.ndim > 1 and penalties.rho1.shape[:-1] != H.shape[:-2]:
        raise ValueError("batched penalties do not match the batch shape of H")
    return H, r, penalties


def detect(H, r, Q: int, config: DetectorConfig | None = None) -> DetectorOutput:
    """Run the l2-box ADMM detector from the all-zeros state.

    Args:
        H: Real ``2B x 2U`` channel.
        r: Real received vector of length ``2B``.
        Q: Bits per real dimension (``4**Q``-QAM).
        config: Iteration controls and penalties.

    Returns:
        Hardened symbols and bits plus the soft layers and iteration history.
    """
    config = config or DetectorConfig()
    H = np.atleast_2d(np.asarray(H, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    H, r, penalties = _check_inputs(H, r, Q, config)
    solver = precompute(H, r, penalties)
    state = AdmmState.zeros(Q, H.shape[-1])
    states = [state.copy()] if config.capture_traces else None

    trace: list[float] = []
    degenerate = 0
    for _ in range(config.max_iters):
        res, deg = admm_sweep(state, solver)
        trace.append(float(res))
        degenerate += int(deg)
        if states is not None:
            states.append(state.copy())
        if res < config.tol:
            break

    return _output(H, r, state, trace, degenerate, penalties, states)


def _output(H, r, state, trace, degenerate, penalties, states=None) -> DetectorOutput:
    hard, symbols, bits = harden(state.x)
    return DetectorOutput(
        symbols=symbols,
        hard_layers=hard,
        bits=bits,
        objective=half_residual(H, r, symbols),
        soft_layers=state.x.copy(),
        soft_symbols=2.0 ** np.arange(state.Q) @ state.x,
        iterations_used=len(trace),
        residual_trace=trace,
        degenerate_steps=degenerate,
        penalties=penalties,
        states=states,
    )


def detect_batch(H, r, Q: int, config: DetectorConfig | None = None) -> list[DetectorOutput]:
    """Detect a stack of ``R`` problems (``H`` is ``(R, 2B, n)``) in lockstep.

    Each problem stops on its own residual; finished problems are frozen
    while the rest keep iterating. Trace capture is not supported here.
    """
    config = config or DetectorConfig()
    H, r, penalties = _check_inputs(H, r, Q, config)
    if H.ndim != 3:
        raise ValueError("detect_batch expects H of shape (R, 2B, n)")
    R, _, n = H.shape
    if penalties.rho1.ndim == 1:
        penalties = PenaltySchedule(
            np.broadcast_to(penalties.rho1, (R, Q)).copy(), np.broadcast_to(penalties.rho2, (R, Q)).copy()
        )
    solver = precompute(H, r, penalties)
    state = AdmmState.zeros(Q, n, batch=(R,))
    active = np.ones(R, dtype=bool)
    traces: list[list[float]] = [[] for _ in range(R)]
    degenerate = np.zeros(R, dtype=int)
    for _ in range(config.max_iters):
        prev = state.copy()
        res, deg = admm_sweep(state, solver)
        frozen = ~active
        if frozen.any():
            for name in ("z1", "z2", "x", "y1", "y2"):
                getattr(state, name)[frozen] = getattr(prev, name)[frozen]
        for i in np.flatnonzero(active):
            traces[i].append(float(res[i]))
        degenerate += np.where(active, deg, 0)
        active &= ~(res < config.tol)
        if not active.any():
            break
    return [
        _output(
            H[i],
            r[i],
            state[i],
            traces[i],
            int(degenerate[i]),
            PenaltySchedule(penalties.rho1[i], penalties.rho2[i]),
        )
        for i in range(R)
    ]


def with_penalties(config: DetectorConfig, penalties: PenaltySchedule) -> DetectorConfig:
    return replace(config, penalties=penalties)
