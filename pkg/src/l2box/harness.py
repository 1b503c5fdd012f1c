"""Seeded Monte-Carlo BER sweeps and timing benches."""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from l2box.baselines import MlSearchBudget, ml_detect, mmse_detect, zf_detect
from l2box.detector import AdmmState, DetectorConfig, admm_sweep, default_penalties, detect_batch, precompute
from l2box.mimo import random_frame, sample_channel, snr_to_noise_variance, transmit

log = logging.getLogger(__name__)

DETECTORS = ("l2box", "mmse", "zf", "ml")
CSV_HEADER = (
    "detector",
    "snr_db",
    "U",
    "B",
    "Q",
    "trials",
    "total_bits",
    "bit_errors",
    "ber",
    "avg_iterations",
    "avg_detect_micros",
)
TIMING_COLUMNS = ("avg_detect_micros",)
MAX_CHANNEL_REDRAWS = 10
ADMM_CHUNK = 256


@dataclass(frozen=True)
class DetectorSpec:
    name: str
    alpha: float = 1.1
    max_iters: int = 50
    tol: float = 1e-5

    def __post_init__(self):
        if self.name not in DETECTORS:
            raise ValueError(f"unknown detector {self.name!r}; valid: {', '.join(DETECTORS)}")

    def admm_config(self) -> DetectorConfig:
        return DetectorConfig(alpha=self.alpha, max_iters=self.max_iters, tol=self.tol)


def _as_spec(d) -> DetectorSpec:
    if isinstance(d, DetectorSpec):
        return d
    if isinstance(d, str):
        return DetectorSpec(d)
    return DetectorSpec(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    B: int
    U: int
    Q: int
    snr_db_list: tuple[float, ...]
    trials: int
    seed: int = 0
    detectors: tuple[DetectorSpec, ...] = (DetectorSpec("l2box"), DetectorSpec("mmse"))
    capture_traces: bool = False

    def __post_init__(self):
        object.__setattr__(self, "snr_db_list", tuple(float(s) for s in self.snr_db_list))
        object.__setattr__(
            self,
            "detectors",
            tuple(_as_spec(d) for d in self.detectors),
        )
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not (self.B >= self.U >= 1):
            raise ValueError(f"need B >= U >= 1, got B={self.B}, U={self.U}")
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if not self.snr_db_list:
            raise ValueError("snr_db_list must not be empty")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        if "detectors" in d:
            d["detectors"] = tuple(d["detectors"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def bits_per_trial(self) -> int:
        return 2 * self.U * self.Q


@dataclass
class TrialResult:
    bit_errors: int
    iterations: int
    micros: float


@dataclass
class BerRecord:
    detector: str
    snr_db: float
    U: int
    B: int
    Q: int
    trials: int
    total_bits: int
    bit_errors: int
    ber: float
    avg_iterations: float
    avg_detect_micros: float


def trial_rng(seed: int, snr_index: int, trial_index: int) -> np.random.Generator:
    """Independent stream per (seed, SNR point, trial)."""
    return np.random.default_rng([seed, snr_index, trial_index])


def _run_baseline(name: str, H, r, Q: int, noise_variance: float):
    if name == "mmse":
        return mmse_detect(H, r, noise_variance, Q)
    if name == "zf":
        return zf_detect(H, r, Q)
    return ml_detect(H, r, Q, MlSearchBudget())


@dataclass
class _Draw:
    H: np.ndarray
    r: np.ndarray
    bits: np.ndarray
    results: dict


def _draw_trial(config: ExperimentConfig, snr_db: float, rng: np.random.Generator) -> _Draw:
    """One channel, frame and noise draw, with every non-ADMM detector run on it.

    A draw on which a linear detector hits a singular system is discarded and
    the channel redrawn from the same stream. The ADMM detector cannot fail
    this way (its penalties keep every system positive definite).
    """
    sigma2 = snr_to_noise_variance(snr_db, config.U, config.Q)
    for attempt in range(MAX_CHANNEL_REDRAWS):
        channel = sample_channel(config.B, config.U, rng)
        frame = random_frame(config.U, config.Q, rng)
        rx = transmit(channel.H, frame.symbols, sigma2, rng)
        results = {}
        try:
            for spec in config.detectors:
                if spec.name == "l2box":
                    continue
                t0 = time.perf_counter()
                out = _run_baseline(spec.name, channel.H, rx.r, config.Q, sigma2)
                micros = (time.perf_counter() - t0) * 1e6
                errors = int(np.count_nonzero(out.bits != frame.bits))
                results[spec.name] = TrialResult(errors, out.iterations_used, micros)
        except np.linalg.LinAlgError as exc:
            log.warning("ill-conditioned draw at %.3g dB (attempt %d): %s", snr_db, attempt + 1, exc)
            continue
        return _Draw(channel.H, rx.r, frame.bits, results)
    raise RuntimeError(f"{MAX_CHANNEL_REDRAWS} consecutive singular channel draws at {snr_db} dB")


def _run_admm(spec: DetectorSpec, draws: list[_Draw], Q: int) -> None:
    """Run the ADMM detector on ``draws`` in lockstep, recording per-trial results."""
    if not draws:
        return
    t0 = time.perf_counter()
    outs = detect_batch(np.stack([d.H for d in draws]), np.stack([d.r for d in draws]), Q, spec.admm_config())
    micros = (time.perf_counter() - t0) * 1e6 / len(draws)
    for d, out in zip(draws, outs):
        errors = int(np.count_nonzero(out.bits != d.bits))
        d.results[spec.name] = TrialResult(errors, out.iterations_used, micros)


def run_trial(config: ExperimentConfig, snr_db: float, rng: np.random.Generator) -> dict[str, TrialResult]:
    """Every configured detector on one shared channel, frame and noise draw."""
    draw = _draw_trial(config, snr_db, rng)
    for spec in config.detectors:
        if spec.name == "l2box":
            _run_admm(spec, [draw], config.Q)
    return draw.results


def _thread_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("L2BOX_THREADS")
    return max(1, int(env)) if env else 1


def sweep(
    config: ExperimentConfig,
    workers: int | None = None,
    progress: Callable[[float, int], None] | None = None,
    chunk: int = ADMM_CHUNK,
) -> list[BerRecord]:
    """One :class:`BerRecord` per (detector, SNR).

    Every trial draws from its own index-keyed stream, so the error counts do
    not depend on ``workers``, ``chunk`` or the detector order. The ADMM
    detector runs on blocks of ``chunk`` trials in lockstep; its reported
    time per detection is the block time divided by the block size.
    """
    if not config.detectors:
        return []
    n_workers = _thread_count(workers)
    records = []
    for si, snr in enumerate(config.snr_db_list):
        def one(t, si=si, snr=snr):
            return _draw_trial(config, snr, trial_rng(config.seed, si, t))

        blocks = [(lo, min(lo + chunk, config.trials)) for lo in range(0, config.trials, chunk)]
        with ThreadPoolExecutor(n_workers) as pool:
            draws = list(pool.map(one, range(config.trials)))
            for spec in config.detectors:
                if spec.name == "l2box":
                    list(pool.map(lambda b, spec=spec: _run_admm(spec, draws[b[0]:b[1]], config.Q), blocks))
        results = [d.results for d in draws]
        total_bits = config.trials * config.bits_per_trial
        for spec in config.detectors:
            rs = [res[spec.name] for res in results]
            errors = sum(r.bit_errors for r in rs)
            records.append(
                BerRecord(
                    detector=spec.name,
                    snr_db=snr,
                    U=config.U,
                    B=config.B,
                    Q=config.Q,
                    trials=config.trials,
                    total_bits=total_bits,
                    bit_errors=errors,
                    ber=errors / total_bits,
                    avg_iterations=sum(r.iterations for r in rs) / len(rs),
                    avg_detect_micros=sum(r.micros for r in rs) / len(rs),
                )
            )
        if progress is not None:
            progress(snr, config.trials)
    return records


@dataclass
class TimingRecord:
    size: int
    pre_micros: float
    per_iter_micros: float | None


def timing_bench(
    sizes: Iterable[int],
    Q: int = 2,
    iters: int = 50,
    snr_db: float = 20.0,
    repetitions: int = 20,
    batch: int = 256,
    seed: int = 0,
    alpha: float = 1.1,
    warmup: int = 2,
) -> list[TimingRecord]:
    """Median wall time per detection of the factorization step and of one iteration.

    Square systems ``B = U = size``. Each repetition processes ``batch``
    independent problems in lockstep and divides by ``batch``, so interpreter
    overhead does not mask the arithmetic cost at small sizes. Penalty
    selection (the eigenvalue estimate) happens outside the timed region,
    and ``warmup`` untimed repetitions per size absorb first-call costs.
    """
    if repetitions < 1 or batch < 1:
        raise ValueError("repetitions and batch must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    out = []
    for size in sizes:
        rng = np.random.default_rng([seed, size])
        H = np.stack([sample_channel(size, size, rng).H for _ in range(batch)])
        x = np.stack([random_frame(size, Q, rng).symbols for _ in range(batch)])
        sigma2 = snr_to_noise_variance(snr_db, size, Q)
        r = np.stack([transmit(H[i], x[i], sigma2, rng).r for i in range(batch)])
        penalties = default_penalties(H, Q, alpha)
        pre, per_iter = [], []
        for rep in range(warmup + repetitions):
            t0 = time.perf_counter()
            solver = precompute(H, r, penalties)
            t_pre = (time.perf_counter() - t0) * 1e6 / batch
            t_iter = None
            if iters > 0:
                state = AdmmState.zeros(Q, 2 * size, batch=(batch,))
                t0 = time.perf_counter()
                for _ in range(iters):
                    admm_sweep(state, solver)
                t_iter = (time.perf_counter() - t0) * 1e6 / (batch * iters)
            if rep < warmup:
                continue
            pre.append(t_pre)
            if t_iter is not None:
                per_iter.append(t_iter)
        out.append(
            TimingRecord(
                size=size,
                pre_micros=statistics.median(pre),
                per_iter_micros=statistics.median(per_iter) if per_iter else None,
            )
        )
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def records_to_csv(records: Iterable[BerRecord]) -> str:
    rows = sorted(records, key=lambda r: (r.detector, r.snr_db))
    lines = [",".join(CSV_HEADER)]
    for rec in rows:
        d = asdict(rec)
        lines.append(",".join(_fmt(d[c]) for c in CSV_HEADER))
    return "\n".join(lines) + "\n"


def write_csv(records: Iterable[BerRecord], path) -> None:
    atomic_write_text(path, records_to_csv(records))


def read_csv(path) -> list[BerRecord]:
    types = {f: t for f, t in zip(CSV_HEADER, (str, float, int, int, int, int, int, int, float, float, float))}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [BerRecord(**{k: types[k](v) for k, v in row.items()}) for row in reader]


def timing_to_csv(records: Iterable[TimingRecord]) -> str:
    lines = ["size,pre_micros,per_iter_micros"]
    for rec in records:
        per_iter = "" if rec.per_iter_micros is None else _fmt(rec.per_iter_micros)
        lines.append(f"{rec.size},{_fmt(rec.pre_micros)},{per_iter}")
    return "\n".join(lines) + "\n"


def write_json(report, path) -> None:
    data = report.to_dict() if hasattr(report, "to_dict") else report
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


def strip_timing(csv_text: str) -> str:
    """CSV text with the timing columns removed, for byte comparisons."""
    lines = csv_text.splitlines()
    keep = [i for i, c in enumerate(CSV_HEADER) if c not in TIMING_COLUMNS]
    return "\n".join(",".join(line.split(",")[i] for i in keep) for line in lines) + "\n"
