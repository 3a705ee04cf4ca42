import functools

import numpy as np
import pytest

from rigidkit.simkit import NoiseConfig, corrupt, make_degenerate_scenario, render


@functools.lru_cache(maxsize=None)
def scenario(kind, seed=0):
    """Rendered ground truth for a canonical scenario (cached across tests)."""
    return render(make_degenerate_scenario(kind, seed))


@functools.lru_cache(maxsize=None)
def noisy_inputs(kind, seed=0, **noise):
    return corrupt(scenario(kind, seed), NoiseConfig(seed=seed, **noise))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, max_deg=180.0):
    from scipy.spatial.transform import Rotation
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(np.deg2rad(rng.uniform(0, max_deg)) * axis).as_matrix()


ACCEPTANCE_LINES = []


def record_acceptance(number, title, checks, **measured):
    """Print and keep a one-line verdict for an acceptance criterion; returns overall pass."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in measured.items())
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    if failed:
        line += f" failed checks: {', '.join(failed)}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
