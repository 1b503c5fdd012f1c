"""Tests for the Monte-Carlo sweep, timing bench and file output."""

import json
import math

import numpy as np
import pytest

from l2box.harness import (
    CSV_HEADER,
    BerRecord,
    DetectorSpec,
    ExperimentConfig,
    TimingRecord,
    read_csv,
    records_to_csv,
    run_trial,
    strip_timing,
    sweep,
    timing_bench,
    timing_to_csv,
    trial_rng,
    write_csv,
    write_json,
)


def small_config(**kw):
    base = dict(B=4, U=4, Q=2, snr_db_list=[5.0, 15.0], trials=40, seed=3, detectors=["l2box", "mmse", "zf"])
    base.update(kw)
    return ExperimentConfig(**base)


def std_err(ber, total):
    return math.sqrt(max(ber * (1 - ber), 1e-12) / total)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"trials": 0}, {"B": 2, "U": 3}, {"snr_db_list": []}, {"Q": 0}, {"seed": -1}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_unknown_detector(self):
        with pytest.raises(ValueError, match="valid"):
            small_config(detectors=["foo"])

    def test_json_round_trip(self, tmp_path):
        cfg = small_config(detectors=[{"name": "l2box", "alpha": 2.0}, "mmse"])
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg
        assert cfg.detectors[0] == DetectorSpec("l2box", alpha=2.0)


class TestRunTrial:
    @staticmethod
    def errors_at_high_snr(detectors, trials=10):
        cfg = ExperimentConfig(B=4, U=4, Q=1, snr_db_list=[60], trials=1, detectors=detectors)
        return [
            {k: v.bit_errors for k, v in run_trial(cfg, 60.0, trial_rng(0, 0, t)).items()}
            for t in range(trials)
        ]

    def test_high_snr_error_free_baselines(self):
        for errors in self.errors_at_high_snr(["mmse", "zf", "ml"]):
            assert errors == {"mmse": 0, "zf": 0, "ml": 0}

    @pytest.mark.xfail(strict=True, reason="threshold-scaled penalties stall on wrong vertices; see the decisions ledger")
    def test_high_snr_error_free_admm_default(self):
        for errors in self.errors_at_high_snr(["l2box"]):
            assert errors == {"l2box": 0}

    def test_high_snr_error_free_admm_small_penalty(self):
        spec = DetectorSpec("l2box", alpha=0.02, max_iters=300)
        for errors in self.errors_at_high_snr([spec]):
            assert errors == {"l2box": 0}

    def test_deterministic(self):
        cfg = small_config()
        a = run_trial(cfg, 10.0, trial_rng(5, 1, 2))
        b = run_trial(cfg, 10.0, trial_rng(5, 1, 2))
        assert {k: v.bit_errors for k, v in a.items()} == {k: v.bit_errors for k, v in b.items()}

    def test_ml_is_best(self):
        cfg = ExperimentConfig(B=2, U=2, Q=1, snr_db_list=[10.0], trials=10_000, seed=11,
                               detectors=["l2box", "mmse", "zf", "ml"])
        ber = {r.detector: r.ber for r in sweep(cfg)}
        for name in ("l2box", "mmse", "zf"):
            assert ber["ml"] <= ber[name], name


class TestSweep:
    def test_empty_detectors(self):
        assert sweep(small_config(detectors=[])) == []

    def test_single_record(self):
        cfg = ExperimentConfig(B=3, U=2, Q=2, snr_db_list=[10], trials=1, detectors=["mmse"])
        (rec,) = sweep(cfg)
        assert rec.total_bits == 2 * 2 * 2
        assert rec.ber == rec.bit_errors / rec.total_bits

    def test_schedule_independent(self):
        cfg = small_config()
        a = records_to_csv(sweep(cfg, workers=1, chunk=256))
        b = records_to_csv(sweep(cfg, workers=4, chunk=7))
        assert strip_timing(a) == strip_timing(b)

    def test_detector_order_irrelevant(self):
        a = {r.detector: r.bit_errors for r in sweep(small_config(detectors=["l2box", "mmse", "zf"]))}
        b = {r.detector: r.bit_errors for r in sweep(small_config(detectors=["zf", "mmse", "l2box"]))}
        c = {r.detector: r.bit_errors for r in sweep(small_config(detectors=["mmse"]))}
        assert a == b
        assert c["mmse"] == a["mmse"]

    def test_thread_env_override(self, monkeypatch):
        monkeypatch.setenv("L2BOX_THREADS", "3")
        cfg = small_config(trials=10)
        assert strip_timing(records_to_csv(sweep(cfg))) == strip_timing(records_to_csv(sweep(cfg, workers=1)))

    def test_ber_decreasing_linear_detectors(self):
        cfg = ExperimentConfig(B=8, U=8, Q=2, snr_db_list=[8, 12, 16], trials=4000, seed=1, detectors=["mmse", "zf"])
        recs = sweep(cfg)
        for name in ("mmse", "zf"):
            bers = [r.ber for r in recs if r.detector == name]
            assert all(a > b for a, b in zip(bers, bers[1:])), name

    def test_ber_decreasing_every_detector(self):
        cfg = ExperimentConfig(B=16, U=16, Q=2, snr_db_list=[8, 12, 16], trials=20_000, seed=0,
                               detectors=["l2box", "mmse", "zf"])
        recs = sweep(cfg)
        for name in ("l2box", "mmse", "zf"):
            bers = [r.ber for r in recs if r.detector == name]
            assert all(a > b for a, b in zip(bers, bers[1:])), name

    def test_ber_non_increasing_within_two_standard_errors(self):
        cfg = ExperimentConfig(B=4, U=4, Q=2, snr_db_list=[6, 12, 18], trials=2000, seed=2,
                               detectors=["l2box", "mmse", "zf"])
        recs = sweep(cfg)
        for name in ("l2box", "mmse", "zf"):
            rs = [r for r in recs if r.detector == name]
            for lo, hi in zip(rs, rs[1:]):
                se = math.hypot(std_err(lo.ber, lo.total_bits), std_err(hi.ber, hi.total_bits))
                assert hi.ber <= lo.ber + 2 * se, name


class TestTiming:
    def test_columns(self):
        recs = timing_bench([4, 8], iters=3, repetitions=3, batch=8)
        assert [r.size for r in recs] == [4, 8]
        assert all(r.pre_micros > 0 and r.per_iter_micros > 0 for r in recs)
        assert timing_to_csv(recs).splitlines()[0] == "size,pre_micros,per_iter_micros"

    def test_zero_iterations(self):
        (rec,) = timing_bench([4], iters=0, repetitions=3, batch=4)
        assert rec.per_iter_micros is None
        assert rec.pre_micros > 0
        assert timing_to_csv([rec]).splitlines()[1].endswith(",")

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            timing_bench([4], repetitions=0)

    def test_per_iteration_monotone(self):
        recs = timing_bench([8, 16, 32], iters=20, repetitions=20)
        per_iter = [r.per_iter_micros for r in recs]
        assert per_iter == sorted(per_iter)


class TestCsv:
    def record(self, **kw):
        base = dict(detector="mmse", snr_db=10.0, U=4, B=4, Q=2, trials=10, total_bits=160,
                    bit_errors=7, ber=7 / 160, avg_iterations=0.0, avg_detect_micros=123.456789)
        base.update(kw)
        return BerRecord(**base)

    def test_empty(self, tmp_path):
        path = tmp_path / "e.csv"
        write_csv([], path)
        assert path.read_text() == ",".join(CSV_HEADER) + "\n"

    def test_one_record(self, tmp_path):
        path = tmp_path / "o.csv"
        write_csv([self.record()], path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[1] == "mmse,10,4,4,2,10,160,7,0.04375,0,123.457"

    def test_sorted(self):
        recs = [self.record(detector="zf"), self.record(snr_db=5.0), self.record(detector="l2box")]
        rows = records_to_csv(recs).splitlines()[1:]
        assert [r.split(",")[:2] for r in rows] == [["l2box", "10"], ["mmse", "5"], ["zf", "10"]]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "r.csv"
        recs = sweep(small_config(trials=5))
        write_csv(recs, path)
        back = read_csv(path)
        for a, b in zip(sorted(recs, key=lambda r: (r.detector, r.snr_db)), back):
            assert (a.detector, a.snr_db, a.bit_errors, a.total_bits) == (b.detector, b.snr_db, b.bit_errors, b.total_bits)
            assert b.ber == pytest.approx(a.ber, rel=1e-5)
            assert b.avg_detect_micros == pytest.approx(a.avg_detect_micros, rel=1e-5)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(path)

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError, match="cannot write"):
            write_csv([], tmp_path / "missing" / "x.csv")

    def test_strip_timing(self):
        text = records_to_csv([self.record()])
        assert "avg_detect_micros" not in strip_timing(text)
        assert strip_timing(text) == strip_timing(records_to_csv([self.record(avg_detect_micros=1.0)]))

    def test_write_json(self, tmp_path):
        path = tmp_path / "t.json"
        write_json({"a": [1, 2]}, path)
        assert json.loads(path.read_text()) == {"a": [1, 2]}
        assert list(tmp_path.iterdir()) == [path]
