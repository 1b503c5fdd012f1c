import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_instance(B, U, Q, snr_db, rng):
    """Channel, frame and received vector drawn from ``rng``."""
    from l2box.mimo import random_frame, sample_channel, snr_to_noise_variance, transmit

    channel = sample_channel(B, U, rng)
    frame = random_frame(U, Q, rng)
    sigma2 = snr_to_noise_variance(snr_db, U, Q) if snr_db is not None else 0.0
    rx = transmit(channel.H, frame.symbols, sigma2, rng)
    return channel, frame, rx


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion_line():
    """Record one pass/fail line for the end-of-run acceptance summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
