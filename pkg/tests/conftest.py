import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mbdiff.audio import AudioSignal, RngStream

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def snr_db(ref: np.ndarray, est: np.ndarray) -> float:
    ref = np.asarray(ref)
    return float(10 * np.log10(np.sum(ref**2) / np.sum((ref - np.asarray(est)) ** 2)))


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def noise_8k():
    return AudioSignal(RngStream(7).normal(16000), 8000)


@pytest.fixture
def chirp_8k():
    from mbdiff.audio import SynthSpec, synthesize

    return synthesize(SynthSpec("chirp", {"f_start": 100.0, "f_end": 3000.0, "amplitude": 0.8}), 2.0, 8000)


TINY_OVERRIDES = {
    "schedule.T": 50,
    "denoiser.T": 50,
    "denoiser.depth": 1,
    "denoiser.base_channels": 2,
    "corpus.n_items": 6,
    "corpus.n_frames": 15,
    "conditioner.K": 8,
    "conditioner.kmeans_iters": 10,
    "eq.noise_samples": 100_000,
    "training.iters": 40,
    "training.batch": 4,
    "training.segment_samples": 256,
    "sampling.steps": 5,
}


@pytest.fixture(scope="session")
def tiny_cfg():
    from mbdiff.config import PipelineConfig

    return PipelineConfig().replace(**TINY_OVERRIDES)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call" or (outcome == "error" and "criterion" in props):
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines):
            terminalreporter.write_line(f"{name:<4} {status}  {detail}")
