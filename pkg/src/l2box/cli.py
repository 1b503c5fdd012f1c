"""Command-line front end: ``l2box {detect,sweep,diagnose,bench}``.

Exit codes: 0 on success, 2 for invalid arguments or input files (checked
before any computation), 1 for failures during the run. Output files are
written atomically, so a failed run leaves no partial file behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from l2box.analysis import diagnose
from l2box.baselines import BudgetExceededError, ml_detect, mmse_detect, zf_detect
from l2box.detector import DetectorConfig, detect
from l2box.harness import (
    DETECTORS,
    DetectorSpec,
    ExperimentConfig,
    atomic_write_text,
    records_to_csv,
    sweep,
    timing_bench,
    timing_to_csv,
    trial_rng,
)
from l2box.mimo import embed_real, random_frame, sample_channel, snr_to_noise_variance, stack_complex, transmit

log = logging.getLogger("l2box")

DEFAULT_ALPHA = 1.1
DEFAULT_MAX_ITERS = 50
DEFAULT_TOL = 1e-5


class UsageError(Exception):
    """Invalid input detected before computation; maps to exit code 2."""


def qam_to_q(value: str) -> int:
    """``16 -> 2``; rejects anything that is not ``4**Q`` with ``Q >= 1``."""
    try:
        m = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"QAM order must be an integer, got {value!r}") from None
    q = 0
    while m > 1 and m % 4 == 0:
        m //= 4
        q += 1
    if m != 1 or q < 1:
        raise argparse.ArgumentTypeError(f"QAM order {value} is not a power of 4 (4, 16, 64, ...)")
    return q


def _positive_int(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(value: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {value!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive finite number, got {value}")
    return v


def _seed(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return v


def _float_list(value: str) -> list[float]:
    try:
        out = [float(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("list must not be empty")
    return out


def _size_list(value: str) -> list[int]:
    parts = [s for s in value.split(",") if s.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("size list must not be empty")
    sizes = [_positive_int(s) for s in parts]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise argparse.ArgumentTypeError("sizes must be strictly ascending")
    return sizes


def _detector_list(value: str) -> list[str]:
    names = [s.strip() for s in value.split(",") if s.strip()]
    if not names:
        raise argparse.ArgumentTypeError("detector list must not be empty")
    bad = [n for n in names if n not in DETECTORS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown detector(s) {', '.join(bad)}; valid: {', '.join(DETECTORS)}")
    if len(set(names)) != len(names):
        raise argparse.ArgumentTypeError("duplicate detector names")
    return names


def _detector_name(value: str) -> str:
    if value not in DETECTORS:
        raise argparse.ArgumentTypeError(f"unknown detector {value!r}; valid: {', '.join(DETECTORS)}")
    return value


def _add_admm_flags(p: argparse.ArgumentParser, with_iters: bool = True) -> None:
    p.add_argument("--alpha", type=_positive_float, default=None,
                   help=f"penalty as a multiple of the convergence threshold (default: {DEFAULT_ALPHA})")
    if with_iters:
        p.add_argument("--max-iters", type=_positive_int, default=None,
                       help=f"ADMM iteration cap T (default: {DEFAULT_MAX_ITERS})")
        p.add_argument("--tol", type=_positive_float, default=None,
                       help=f"stop when sum_q ||x_q^(k+1) - x_q^k||^2 < tol (default: {DEFAULT_TOL:g})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l2box",
        description="l2-box ADMM detection for 4^Q-QAM MIMO: detection, BER sweeps, diagnostics, timing.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{detect,sweep,diagnose,bench}")

    p = sub.add_parser("detect", help="detect one instance read from JSON",
                       description="Run one detector on an instance file and write the result as JSON.")
    p.add_argument("--instance", required=True, help="instance JSON: Hc and r_c as [re, im] pairs, or real H and r; plus Q")
    p.add_argument("--detector", type=_detector_name, default="l2box",
                   help=f"one of {', '.join(DETECTORS)} (default: l2box)")
    p.add_argument("--out", default=None, help="output JSON path (default: standard output)")
    _add_admm_flags(p)

    p = sub.add_parser("sweep", help="Monte-Carlo BER sweep to CSV",
                       description="Seeded BER sweep. Inline flags override values from --config.")
    p.add_argument("--config", default=None, help="experiment JSON (keys B, U, Q, snr_db_list, trials, seed, detectors)")
    p.add_argument("--tx", type=_positive_int, default=None, help="transmit antennas U")
    p.add_argument("--rx", type=_positive_int, default=None, help="receive antennas B (default: U)")
    p.add_argument("--qam", type=qam_to_q, default=None, metavar="M", help="QAM order, a power of 4 (default: 16)")
    p.add_argument("--snr-db", type=_float_list, default=None, help="comma-separated SNR points in dB")
    p.add_argument("--trials", type=_positive_int, default=None, help="trials per SNR point (default: 100)")
    p.add_argument("--seed", type=_seed, default=None, help="master seed (default: 0)")
    p.add_argument("--detectors", type=_detector_list, default=None,
                   help=f"comma-separated subset of {','.join(DETECTORS)} (default: l2box,mmse)")
    p.add_argument("--workers", type=_positive_int, default=None,
                   help="worker threads (default: $L2BOX_THREADS or 1)")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_admm_flags(p)

    p = sub.add_parser("diagnose", help="convergence report for one seeded instance",
                       description="Run one seeded instance with trace capture and report the convergence checks.")
    p.add_argument("--tx", type=_positive_int, default=8, help="transmit antennas U (default: 8)")
    p.add_argument("--rx", type=_positive_int, default=None, help="receive antennas B (default: U)")
    p.add_argument("--qam", type=qam_to_q, default=2, metavar="M", help="QAM order, a power of 4 (default: 16)")
    p.add_argument("--snr-db", type=float, default=20.0, help="SNR in dB (default: 20)")
    p.add_argument("--seed", type=_seed, default=0, help="instance seed (default: 0)")
    p.add_argument("--out", default=None, help="output JSON path (default: standard output)")
    _add_admm_flags(p)

    p = sub.add_parser("bench", help="per-detection timing of setup and of one iteration",
                       description="Timing bench on square systems B = U = size.")
    p.add_argument("--sizes", type=_size_list, required=True, help="ascending comma-separated sizes")
    p.add_argument("--qam", type=qam_to_q, default=2, metavar="M", help="QAM order, a power of 4 (default: 16)")
    p.add_argument("--iters", type=_positive_int, default=DEFAULT_MAX_ITERS,
                   help=f"timed iterations per repetition (default: {DEFAULT_MAX_ITERS})")
    p.add_argument("--repetitions", type=_positive_int, default=20, help="repetitions, median reported (default: 20)")
    p.add_argument("--batch", type=_positive_int, default=256, help="problems per repetition (default: 256)")
    p.add_argument("--seed", type=_seed, default=0, help="seed (default: 0)")
    p.add_argument("--out", default=None, help="output CSV path (default: standard output)")
    _add_admm_flags(p, with_iters=False)
    return parser


def _admm_config(args) -> DetectorConfig:
    return DetectorConfig(
        alpha=args.alpha if args.alpha is not None else DEFAULT_ALPHA,
        max_iters=args.max_iters if args.max_iters is not None else DEFAULT_MAX_ITERS,
        tol=args.tol if args.tol is not None else DEFAULT_TOL,
    )


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def _pairs_to_complex(value, field: str, ndim: int) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise UsageError(f"field {field!r}: expected numeric [re, im] pairs") from None
    if a.ndim != ndim + 1 or a.shape[-1] != 2 or a.size == 0:
        shape = "rows of [re, im] pairs" if ndim == 2 else "a list of [re, im] pairs"
        raise UsageError(f"field {field!r}: expected {shape}, got shape {a.shape}")
    return a[..., 0] + 1j * a[..., 1]


def _real_array(value, field: str, ndim: int) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise UsageError(f"field {field!r}: expected numbers") from None
    if a.ndim != ndim or a.size == 0:
        raise UsageError(f"field {field!r}: expected a {ndim}-d array, got shape {a.shape}")
    return a


def load_instance(path: str) -> dict:
    """Parse and validate an instance file.

    Returns:
        Dict with real ``H``, ``r``, ``Q``, ``noise_variance`` and ``params``.

    Raises:
        UsageError: unreadable file or a missing or malformed field.
    """
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read instance {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"instance {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("instance must be a JSON object")

    if "Q" not in data:
        raise UsageError("missing field 'Q'")
    Q = data["Q"]
    if isinstance(Q, bool) or not isinstance(Q, int) or Q < 1:
        raise UsageError(f"field 'Q': expected a positive integer, got {Q!r}")

    if "Hc" in data or "r_c" in data:
        for name in ("Hc", "r_c"):
            if name not in data:
                raise UsageError(f"missing field {name!r}")
        H = embed_real(_pairs_to_complex(data["Hc"], "Hc", 2))
        r = stack_complex(_pairs_to_complex(data["r_c"], "r_c", 1))
    elif "H" in data or "r" in data:
        for name in ("H", "r"):
            if name not in data:
                raise UsageError(f"missing field {name!r}")
        H = _real_array(data["H"], "H", 2)
        r = _real_array(data["r"], "r", 1)
    else:
        raise UsageError("missing channel: give 'Hc' and 'r_c', or real 'H' and 'r'")
    if H.shape[0] != r.size:
        raise UsageError(f"fields 'H'/'r': {H.shape[0]} channel rows but received vector has length {r.size}")
    if H.shape[0] < H.shape[1]:
        raise UsageError(f"field 'H': need at least as many rows as columns, got shape {H.shape}")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(r))):
        raise UsageError("fields 'H'/'r': non-finite entries")

    nv = data.get("noise_variance", 0.0)
    if isinstance(nv, bool) or not isinstance(nv, (int, float)) or not nv >= 0:
        raise UsageError(f"field 'noise_variance': expected a non-negative number, got {nv!r}")

    params = data.get("params", {})
    if not isinstance(params, dict):
        raise UsageError("field 'params': expected an object")
    unknown = set(params) - {"alpha", "max_iters", "tol"}
    if unknown:
        raise UsageError(f"field 'params': unknown key(s) {', '.join(sorted(unknown))}")
    try:
        DetectorConfig(**params)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"field 'params': {exc}") from None
    return {"H": H, "r": r, "Q": Q, "noise_variance": float(nv), "params": params}


def _tolist(a):
    return None if a is None else np.asarray(a).tolist()


def cmd_detect(args) -> int:
    inst = load_instance(args.instance)
    H, r, Q = inst["H"], inst["r"], inst["Q"]
    if args.detector == "l2box":
        cfg = {**inst["params"]}
        for name in ("alpha", "max_iters", "tol"):
            if getattr(args, name) is not None:
                cfg[name] = getattr(args, name)
        out = detect(H, r, Q, DetectorConfig(**cfg))
    elif args.detector == "mmse":
        out = mmse_detect(H, r, inst["noise_variance"], Q)
    elif args.detector == "zf":
        out = zf_detect(H, r, Q)
    else:
        out = ml_detect(H, r, Q)
    result = {
        "detector": args.detector,
        "Q": Q,
        "soft_layers": _tolist(out.soft_layers),
        "soft_symbols": _tolist(out.soft_symbols),
        "symbols": _tolist(out.symbols),
        "hard_layers": _tolist(out.hard_layers),
        "bits": _tolist(out.bits),
        "iterations_used": out.iterations_used,
        "objective": out.objective,
        "residual_trace": list(out.residual_trace),
        "degenerate_steps": out.degenerate_steps,
    }
    _emit(json.dumps(result, indent=2) + "\n", args.out)
    return 0


def _sweep_config(args) -> ExperimentConfig:
    base: dict = {}
    if args.config is not None:
        try:
            with open(args.config) as f:
                base = json.load(f)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError("config must be a JSON object")
    overrides = {"U": args.tx, "B": args.rx, "Q": args.qam, "snr_db_list": args.snr_db,
                 "trials": args.trials, "seed": args.seed}
    d = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    d.setdefault("Q", 2)
    d.setdefault("trials", 100)
    if "U" not in d:
        raise UsageError("transmit antennas missing: pass --tx or set U in --config")
    if "snr_db_list" not in d:
        raise UsageError("SNR points missing: pass --snr-db or set snr_db_list in --config")
    d.setdefault("B", d["U"])

    names = args.detectors
    specs = d.get("detectors", ["l2box", "mmse"]) if names is None else names
    admm = {k: getattr(args, k) for k in ("alpha", "max_iters", "tol") if getattr(args, k) is not None}
    detectors = []
    try:
        for s in specs:
            s = {"name": s} if isinstance(s, str) else dict(s)
            if s.get("name") == "l2box":
                s.update(admm)
            detectors.append(DetectorSpec(**s))
        d["detectors"] = detectors
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment: {exc}") from None


def cmd_sweep(args) -> int:
    config = _sweep_config(args)

    def progress(snr, trials):
        log.info("%g dB: %d trials done", snr, trials)

    records = sweep(config, workers=args.workers, progress=progress)
    atomic_write_text(args.out, records_to_csv(records))
    return 0


def cmd_diagnose(args) -> int:
    U = args.tx
    B = args.rx if args.rx is not None else U
    if B < U:
        raise UsageError(f"need --rx >= --tx, got {B} < {U}")
    Q = args.qam
    rng = trial_rng(args.seed, 0, 0)
    channel = sample_channel(B, U, rng)
    frame = random_frame(U, Q, rng)
    rx = transmit(channel.H, frame.symbols, snr_to_noise_variance(args.snr_db, U, Q), rng)
    output, report = diagnose(channel.H, rx.r, Q, _admm_config(args))
    data = report.to_dict()
    data["instance"] = {"U": U, "B": B, "Q": Q, "snr_db": args.snr_db, "seed": args.seed}
    data["bit_errors"] = int(np.count_nonzero(output.bits != frame.bits))
    _emit(json.dumps(data, indent=2) + "\n", args.out)
    return 0


def cmd_bench(args) -> int:
    alpha = args.alpha if args.alpha is not None else DEFAULT_ALPHA
    records = timing_bench(
        args.sizes, Q=args.qam, iters=args.iters, repetitions=args.repetitions,
        batch=args.batch, seed=args.seed, alpha=alpha,
    )
    _emit(timing_to_csv(records), args.out)
    return 0


COMMANDS = {"detect": cmd_detect, "sweep": cmd_sweep, "diagnose": cmd_diagnose, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog} {args.command}: error: {exc}\n")
    except BudgetExceededError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"{parser.prog} {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
