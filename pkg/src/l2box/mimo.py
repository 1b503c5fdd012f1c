"""Transmission model: channels, QAM symbols as binary layers, AWGN.

Symbols live in the real-valued embedding. A complex vector of length U is
stored as ``[Re; Im]`` of length ``2U`` and a complex ``B x U`` channel as the
``2B x 2U`` block matrix returned by :func:`embed_real`.

Bits map onto layers with the natural per-layer rule ``b -> 2b - 1`` and a
``4**Q``-QAM symbol vector is ``sum_q 2**q * layer[q]`` (layers indexed from
0 here, so layer ``q`` carries weight ``2**q``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class ModulationScheme:
    """Real PAM alphabet ``{+-1, +-3, ..., +-(2**Q - 1)}`` for ``4**Q``-QAM."""

    Q: int

    def __post_init__(self):
        if int(self.Q) != self.Q or self.Q < 1:
            raise ValueError(f"Q must be a positive integer, got {self.Q!r}")

    @cached_property
    def alphabet(self) -> np.ndarray:
        m = 2**self.Q
        return np.arange(-(m - 1), m, 2, dtype=np.int64)

    @property
    def max_amplitude(self) -> int:
        return 2**self.Q - 1

    @property
    def es_real(self) -> float:
        """Average energy per real dimension (5 for 16-QAM)."""
        a = self.alphabet.astype(float)
        return float(np.mean(a * a))

    @property
    def es_complex(self) -> float:
        return 2.0 * self.es_real

    @property
    def qam_order(self) -> int:
        return 4**self.Q


@dataclass(frozen=True)
class ChannelInstance:
    Hc: np.ndarray
    H: np.ndarray = field(repr=False)

    @classmethod
    def from_complex(cls, Hc) -> ChannelInstance:
        Hc = np.atleast_2d(np.asarray(Hc, dtype=complex))
        return cls(Hc=Hc, H=embed_real(Hc))

    @property
    def B(self) -> int:
        return self.Hc.shape[0]

    @property
    def U(self) -> int:
        return self.Hc.shape[1]


@dataclass(frozen=True)
class TransmitFrame:
    bits: np.ndarray
    layers: np.ndarray
    symbols: np.ndarray


@dataclass(frozen=True)
class ReceivedVector:
    r: np.ndarray
    noise_variance: float


def embed_real(Hc) -> np.ndarray:
    """Real ``2B x 2U`` embedding ``[[Re, -Im], [Im, Re]]`` of a complex matrix."""
    Hc = np.atleast_2d(np.asarray(Hc, dtype=complex))
    if not np.all(np.isfinite(Hc)):
        raise ValueError("channel matrix has non-finite entries")
    re, im = Hc.real, Hc.imag
    return np.block([[re, -im], [im, re]])


def stack_complex(v) -> np.ndarray:
    """``[Re v; Im v]`` for a complex vector."""
    v = np.asarray(v, dtype=complex).ravel()
    return np.concatenate([v.real, v.imag])


def map_bits_to_layers(bits, Q: int, U: int) -> np.ndarray:
    """Split ``2U*Q`` bits into ``Q`` layers of length ``2U`` with ``b -> 2b - 1``.

    Bit ``q * 2U + i`` drives entry ``i`` of layer ``q``.
    """
    bits = np.asarray(bits).ravel()
    n = 2 * U
    if bits.size != n * Q:
        raise ValueError(f"expected {n * Q} bits for Q={Q}, U={U}; got {bits.size}")
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("bits must be 0 or 1")
    return 2 * bits.astype(np.int64).reshape(Q, n) - 1


def layers_to_bits(layers) -> np.ndarray:
    layers = np.asarray(layers)
    return ((layers.reshape(-1) + 1) // 2).astype(np.int8)


def compose_symbols(layers) -> np.ndarray:
    """Return ``sum_q 2**q * layers[q]``."""
    layers = np.atleast_2d(np.asarray(layers))
    if not np.all(np.abs(layers) == 1):
        raise ValueError("layer entries must be -1 or +1")
    weights = 2 ** np.arange(layers.shape[0], dtype=np.int64)
    return weights @ layers.astype(np.int64)


def decompose_symbols(x, Q: int) -> np.ndarray:
    """Unique ``Q`` binary layers whose weighted sum is ``x``."""
    x = np.asarray(x).ravel()
    m = 2**Q - 1
    xi = np.rint(x).astype(np.int64)
    if np.any(xi != x) or np.any(np.abs(xi) > m) or np.any(xi % 2 == 0):
        raise ValueError(f"symbols outside the {4**Q}-QAM alphabet: {x}")
    # (x + 2**Q - 1) / 2 has binary digits (layer + 1) / 2
    idx = (xi + m) // 2
    digits = (idx[None, :] >> np.arange(Q)[:, None]) & 1
    return 2 * digits - 1


def frame_from_bits(bits, Q: int, U: int) -> TransmitFrame:
    layers = map_bits_to_layers(bits, Q, U)
    return TransmitFrame(
        bits=np.asarray(bits, dtype=np.int8).ravel(),
        layers=layers,
        symbols=compose_symbols(layers),
    )


def random_frame(U: int, Q: int, rng: np.random.Generator) -> TransmitFrame:
    return frame_from_bits(rng.integers(0, 2, size=2 * U * Q), Q, U)


def transmit(H, x, noise_variance: float, rng: np.random.Generator | None = None) -> ReceivedVector:
    """``r = Hx + n`` with real noise of variance ``noise_variance / 2`` per entry.

    ``noise_variance`` is the per-entry variance of the complex noise, so each
    real component carries half of it. ``noise_variance == 0`` is allowed and
    then ``rng`` may be omitted.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    x = np.asarray(x, dtype=float).ravel()
    if H.shape[1] != x.size:
        raise ValueError(f"H has {H.shape[1]} columns but x has length {x.size}")
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    r = H @ x
    if noise_variance > 0:
        if rng is None:
            raise ValueError("an rng is required for noisy transmission")
        r = r + rng.standard_normal(r.size) * np.sqrt(noise_variance / 2.0)
    return ReceivedVector(r=r, noise_variance=float(noise_variance))


def snr_to_noise_variance(snr_db: float, U: int, Q: int) -> float:
    """Per-receive-antenna SNR to complex noise variance.

    With unit-variance channel entries each receive antenna collects
    ``U * Es_complex`` of signal power, hence ``sigma2 = U * Es_complex / snr``.
    """
    if U < 1 or Q < 1:
        raise ValueError("U and Q must be >= 1")
    return U * ModulationScheme(Q).es_complex / 10.0 ** (snr_db / 10.0)


def sample_channel(B: int, U: int, rng: np.random.Generator) -> ChannelInstance:
    """i.i.d. CN(0, 1) Rayleigh channel."""
    if not (B >= U >= 1):
        raise ValueError(f"need B >= U >= 1, got B={B}, U={U}")
    Hc = (rng.standard_normal((B, U)) + 1j * rng.standard_normal((B, U))) / np.sqrt(2.0)
    return ChannelInstance.from_complex(Hc)
