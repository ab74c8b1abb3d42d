import dataclasses

import numpy as np
import pytest

from cellfree.scenario import ScenarioConfig, build_stats, drop_network

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return ScenarioConfig(L=8, N_t=2, K=4, cluster_size=3, tau_p=2, radius_m=300.0)


@pytest.fixture(scope="session")
def small_stats(small_cfg):
    return drop_network(small_cfg, np.random.default_rng(7))


@pytest.fixture(scope="session")
def default_stats():
    return drop_network(ScenarioConfig(), np.random.default_rng(11))


def manual_stats(cfg, beta, kappa, los_angle=None, R=None, seed=0):
    """Scenario with prescribed large-scale quantities (AP/user positions are dummies)."""
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    K, L = beta.shape
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (K, L)).copy()
    los_angle = np.zeros((K, L)) if los_angle is None else np.asarray(los_angle, dtype=float)
    stats = build_stats(cfg, np.zeros((L, 2)), np.zeros((K, 2)), beta, kappa, los_angle,
                        np.random.default_rng(seed))
    if R is not None:
        stats = dataclasses.replace(stats, R=np.asarray(R, dtype=complex))
    return stats
