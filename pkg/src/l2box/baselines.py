"""Reference detectors: MMSE, zero-forcing and exhaustive ML."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from l2box.detector import DetectorOutput, half_residual
from l2box.mimo import ModulationScheme, decompose_symbols, layers_to_bits


class BudgetExceededError(ValueError):
    pass


@dataclass(frozen=True)
class MlSearchBudget:
    max_candidates: int = 2**20

    def check(self, Q: int, n: int) -> int:
        count = (2**Q) ** n
        if count > self.max_candidates:
            raise BudgetExceededError(
                f"exhaustive search over {count} candidates exceeds budget {self.max_candidates}"
            )
        return count


def quantize_to_alphabet(v, Q: int) -> np.ndarray:
    """Nearest alphabet point per entry; midpoints round toward +inf."""
    v = np.asarray(v, dtype=float)
    m = 2**Q - 1
    return np.clip(2 * np.floor(v / 2) + 1, -m, m).astype(np.int64)


def _linear_output(H, r, soft, Q: int) -> DetectorOutput:
    symbols = quantize_to_alphabet(soft, Q)
    layers = decompose_symbols(symbols, Q)
    return DetectorOutput(
        symbols=symbols,
        hard_layers=layers,
        bits=layers_to_bits(layers),
        objective=half_residual(H, r, symbols),
        soft_symbols=soft,
    )


def mmse_soft(H, r, noise_variance: float, Q: int) -> np.ndarray:
    """``(H^T H + sigma2 / (2 Es_real) I)^{-1} H^T r`` in the real model."""
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    H = np.atleast_2d(np.asarray(H, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    reg = noise_variance / (2.0 * ModulationScheme(Q).es_real)
    A = H.T @ H + reg * np.eye(H.shape[1])
    try:
        return scipy.linalg.solve(A, H.T @ r, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "MMSE system is singular (zero noise with a rank-deficient channel)"
        ) from exc


def mmse_detect(H, r, noise_variance: float, Q: int) -> DetectorOutput:
    return _linear_output(H, r, mmse_soft(H, r, noise_variance, Q), Q)


def zf_soft(H, r) -> np.ndarray:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    sol, _, rank, _ = np.linalg.lstsq(H, np.asarray(r, dtype=float).ravel(), rcond=None)
    if rank < H.shape[1]:
        raise np.linalg.LinAlgError(f"channel is rank deficient (rank {rank} < {H.shape[1]})")
    return sol


def zf_detect(H, r, Q: int) -> DetectorOutput:
    return _linear_output(H, r, zf_soft(H, r), Q)


def ml_bruteforce(
    H, r, Q: int, budget: MlSearchBudget | None = None, chunk: int = 1 << 14
) -> tuple[np.ndarray, float]:
    """Exact minimizer of ``||r - H x||^2`` over the QAM lattice.

    Candidates are scanned in lexicographic order of the symbol vector, so
    ties go to the lexicographically smallest one.

    Returns:
        The symbol vector and its squared residual ``||r - H x||^2``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    n = H.shape[1]
    (budget or MlSearchBudget()).check(Q, n)
    alphabet = ModulationScheme(Q).alphabet

    best_obj = np.inf
    best = None
    candidates = itertools.product(alphabet, repeat=n)
    while True:
        block = np.array(list(itertools.islice(candidates, chunk)), dtype=float)
        if block.size == 0:
            break
        e = r[None, :] - block @ H.T
        obj = np.einsum("ij,ij->i", e, e)
        i = int(np.argmin(obj))
        if obj[i] < best_obj:
            best_obj = float(obj[i])
            best = block[i]
    return best.astype(np.int64), best_obj


def ml_detect(H, r, Q: int, budget: MlSearchBudget | None = None) -> DetectorOutput:
    symbols, _ = ml_bruteforce(H, r, Q, budget)
    layers = decompose_symbols(symbols, Q)
    return DetectorOutput(
        symbols=symbols,
        hard_layers=layers,
        bits=layers_to_bits(layers),
        objective=half_residual(H, r, symbols),
        soft_symbols=symbols.astype(float),
    )
