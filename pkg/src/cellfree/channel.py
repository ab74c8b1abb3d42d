"""Rician channel draws, uplink pilot training and phase-aware MMSE estimation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from .scenario import ScenarioStats


class EstimationError(RuntimeError):
    pass


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric complex normal samples with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


@dataclass
class ChannelRealization:
    h: np.ndarray      # (K, L, N) true channels
    theta: np.ndarray  # (K, L) LoS phase shifts
    mu: np.ndarray     # (K, L, N) LoS means given theta


@dataclass
class ChannelEstimate:
    h_hat: np.ndarray  # (K, L, N)
    Theta: np.ndarray  # (K, L, N, N) error covariances
    Psi: np.ndarray    # (K, L, N, N)

    def stacked(self) -> np.ndarray:
        """(K, M) collective estimates, AP blocks concatenated."""
        K, L, N = self.h_hat.shape
        return self.h_hat.reshape(K, L * N)

    def theta_blockdiag(self, k: int) -> np.ndarray:
        return block_diag(*self.Theta[k])


@dataclass
class EstimatorStats:
    """Realization-independent estimator matrices of one scenario."""

    Psi: np.ndarray    # (K, L, N, N)
    gain: np.ndarray   # (K, L, N, N): sqrt(p_u tau_p) Q Psi^{-1}
    Theta: np.ndarray  # (K, L, N, N)
    est_cov: np.ndarray  # (K, L, N, N): p_u tau_p Q Psi^{-1} Q


def estimator_statistics(stats: ScenarioStats, max_cond: float = 1e12) -> EstimatorStats:
    cfg = stats.cfg
    ptau = cfg.p_u * cfg.tau_p
    Q = stats.Q
    eye = np.eye(stats.N)
    Psi = ptau * np.einsum("ki,ilmn->klmn", stats.copilot.astype(float), Q) + cfg.noise_variance * eye
    cond = np.linalg.cond(Psi)
    if np.any(cond > max_cond):
        raise EstimationError(f"Psi near-singular (condition number {cond.max():.3e})")
    Psi_inv = np.linalg.inv(Psi)
    QPinv = Q @ Psi_inv
    est_cov = ptau * QPinv @ Q
    est_cov = (est_cov + np.conj(np.swapaxes(est_cov, -1, -2))) / 2
    Theta = Q - est_cov
    return EstimatorStats(Psi=Psi, gain=np.sqrt(ptau) * QPinv, Theta=Theta, est_cov=est_cov)


def los_mean(stats: ScenarioStats, theta: np.ndarray) -> np.ndarray:
    return (stats.los_amplitude * np.exp(1j * theta))[..., None] * stats.steering


def draw_channel(stats: ScenarioStats, rng: np.random.Generator,
                 theta: np.ndarray | None = None) -> ChannelRealization:
    """One coherence block of h = mu + CN(0, Q); fresh LoS phases unless ``theta`` is given."""
    K, L, N = stats.K, stats.L, stats.N
    if theta is None:
        theta = rng.uniform(0, 2 * np.pi, size=(K, L))
    mu = los_mean(stats, theta)
    z = crandn(rng, (K, L, N))
    h = mu + np.einsum("klmn,kln->klm", stats.nlos_factor, z)
    return ChannelRealization(h=h, theta=theta, mu=mu)


def uplink_training(real: ChannelRealization, stats: ScenarioStats,
                    rng: np.random.Generator | None = None,
                    noise: np.ndarray | None = None) -> np.ndarray:
    """Pilot-correlated observations (K, L, N).

    Co-pilot users see the same noise draw ``noise[t, l]`` for pilot ``t``.
    Pass ``noise`` explicitly (shape (tau_p, L, N)) for deterministic audits.
    """
    cfg = stats.cfg
    K, L, N = real.h.shape
    if noise is None:
        noise = np.sqrt(cfg.noise_variance) * crandn(rng, (cfg.tau_p, L, N))
    per_pilot = np.zeros((cfg.tau_p, L, N), dtype=complex)
    np.add.at(per_pilot, stats.pilot_of, real.h)
    return np.sqrt(cfg.p_u * cfg.tau_p) * per_pilot[stats.pilot_of] + noise[stats.pilot_of]


def mmse_estimate(obs: np.ndarray, real: ChannelRealization, stats: ScenarioStats,
                  est: EstimatorStats | None = None) -> ChannelEstimate:
    """Phase-aware MMSE estimate; uses the LoS means (phases known) from ``real``."""
    if est is None:
        est = estimator_statistics(stats)
    cfg = stats.cfg
    mean_obs = np.sqrt(cfg.p_u * cfg.tau_p) * np.einsum(
        "ki,iln->kln", stats.copilot.astype(float), real.mu)
    h_hat = real.mu + np.einsum("klmn,kln->klm", est.gain, obs - mean_obs)
    return ChannelEstimate(h_hat=h_hat, Theta=est.Theta, Psi=est.Psi)


def dump_block(path, real: ChannelRealization, estimate: ChannelEstimate) -> None:
    """Write one block's (h, h_hat, Theta) as JSON for regression fixtures."""
    def cplx(a):
        return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}
    doc = {"format": "cellfree.block/1", "h": cplx(real.h), "theta": real.theta.tolist(),
           "h_hat": cplx(estimate.h_hat), "Theta": cplx(estimate.Theta)}
    Path(path).write_text(json.dumps(doc, sort_keys=True))
