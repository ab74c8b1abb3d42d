"""Unnormalized precoding directions on cluster-punctured channel estimates.

Arrays are user-major: distributed directions have shape (K, L, N) with
``d[k, l]`` the vector AP ``l`` uses for user ``k``; centralized directions
use the same shape, ``d[k].reshape(-1)`` being the collective M-vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelEstimate

DISTRIBUTED = "distributed"
CENTRALIZED = "centralized"
MODES = (DISTRIBUTED, CENTRALIZED)


class InfeasiblePrecoderError(ValueError):
    pass


@dataclass
class PuncturedChannels:
    serving: np.ndarray     # (K, L) bool
    hds: np.ndarray         # (K, L, N): U_kl h_hat_kl
    theta_sum: np.ndarray   # (L, N, N): sum_k U_kl Theta_kl U_kl
    Theta: np.ndarray       # (K, L, N, N) unpunctured error covariances

    @property
    def K(self):
        return self.hds.shape[0]

    @property
    def L(self):
        return self.hds.shape[1]

    @property
    def N(self):
        return self.hds.shape[2]

    @property
    def Hl(self) -> np.ndarray:
        """(L, N, K) local punctured channel matrices."""
        return np.transpose(self.hds, (1, 2, 0))

    @property
    def Hglob(self) -> np.ndarray:
        """(M, K) punctured collective channel matrix."""
        return self.hds.reshape(self.K, -1).T

    def theta_punct(self, k: int) -> np.ndarray:
        """U_k Theta_k U_k as an (M, M) block-diagonal matrix."""
        from scipy.linalg import block_diag
        return block_diag(*(self.Theta[k] * self.serving[k][:, None, None]))


def selection_masks(serving: np.ndarray, N: int) -> np.ndarray:
    """(K, M, M) block-diagonal selection matrices U_k."""
    K, L = serving.shape
    diag = np.repeat(serving, N, axis=1).astype(float)
    return np.einsum("km,mn->kmn", diag, np.eye(L * N))


def puncture(estimate: ChannelEstimate, serving: np.ndarray) -> PuncturedChannels:
    hds = estimate.h_hat * serving[..., None]
    theta_sum = np.einsum("kl,klmn->lmn", serving.astype(float), estimate.Theta)
    return PuncturedChannels(serving=serving, hds=hds, theta_sum=theta_sum, Theta=estimate.Theta)


@dataclass
class DirectionSet:
    mode: str
    scheme: str
    d: np.ndarray          # (K, L, N)
    serving: np.ndarray    # (K, L) bool
    power_diag: np.ndarray | None = None  # E (K,) or E_l as (K, L), MMSE only

    def collective(self) -> np.ndarray:
        """(K, M) collective vectors."""
        return self.d.reshape(self.d.shape[0], -1)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def mr_direction(pch: PuncturedChannels, mode: str) -> DirectionSet:
    _check_mode(mode)
    return DirectionSet(mode, "MR", np.conj(pch.hds), pch.serving)


def _from_local(dl: np.ndarray) -> np.ndarray:
    # (L, N, K) -> (K, L, N)
    return np.transpose(dl, (2, 0, 1))


def _restrict(d: np.ndarray, pch: PuncturedChannels, restrict: bool) -> np.ndarray:
    return d * pch.serving[..., None] if restrict else d


def rzf_direction(pch: PuncturedChannels, mode: str, sigma2: float,
                  regularize: bool = True, restrict: bool = True) -> DirectionSet:
    """RZF (or ZF with ``regularize=False``) computed in the K x K dual form.

    Centralized directions mix all users' punctured columns, so they are
    generally nonzero on APs outside the user's cluster; ``restrict=True``
    zeros those segments so that only serving APs transmit.
    """
    _check_mode(mode)
    K, L, N = pch.K, pch.L, pch.N
    if mode == CENTRALIZED:
        H = pch.Hglob
        gram = H.T @ H.conj()
        if regularize:
            d = H.conj() @ np.linalg.solve(gram + sigma2 * np.eye(K), np.eye(K))
        else:
            if np.linalg.matrix_rank(gram) < K:
                raise InfeasiblePrecoderError("centralized ZF: channel Gram matrix is rank-deficient")
            d = H.conj() @ np.linalg.inv(gram)
        d = _restrict(d.T.reshape(K, L, N), pch, restrict)
        return DirectionSet(mode, "RZF" if regularize else "ZF", d, pch.serving)

    Hl = pch.Hl
    if regularize:
        gram = np.swapaxes(Hl, 1, 2) @ Hl.conj()
        dl = Hl.conj() @ np.linalg.solve(gram + sigma2 * np.eye(K), np.broadcast_to(np.eye(K), (L, K, K)))
        return DirectionSet(mode, "RZF", _from_local(dl), pch.serving)

    dl = np.zeros((L, N, K), dtype=complex)
    for l in range(L):
        users = np.flatnonzero(pch.serving[:, l])
        if users.size == 0:
            continue
        Hs = Hl[l][:, users]
        if users.size > N or np.linalg.matrix_rank(Hs) < users.size:
            raise InfeasiblePrecoderError(
                f"local ZF infeasible at AP {l}: {users.size} served users, {N} antennas")
        dl[l][:, users] = Hs.conj() @ np.linalg.inv(Hs.T @ Hs.conj())
    return DirectionSet(mode, "ZF", _from_local(dl), pch.serving)


def mmse_direction(pch: PuncturedChannels, mode: str, power_diag: np.ndarray,
                   p_u: float, sigma2: float, restrict: bool = True) -> DirectionSet:
    """MMSE directions. ``power_diag`` is eps (K,) when centralized, eta (K, L) when distributed.

    ``restrict`` has the same meaning as in :func:`rzf_direction`.
    """
    _check_mode(mode)
    K, L, N = pch.K, pch.L, pch.N
    if mode == CENTRALIZED:
        H = pch.Hglob
        A = p_u * (H * power_diag) @ H.conj().T
        idx = np.arange(L)
        blocks = np.zeros((L, N, L, N), dtype=complex)
        blocks[idx, :, idx, :] = p_u * pch.theta_sum
        A = A + blocks.reshape(L * N, L * N) + sigma2 * np.eye(L * N)
        d = np.conj(np.linalg.solve(A, H))
        d = _restrict(d.T.reshape(K, L, N), pch, restrict)
        return DirectionSet(mode, "MMSE", d, pch.serving, np.asarray(power_diag))

    Hl = pch.Hl
    eta = np.asarray(power_diag)
    A = p_u * (Hl * eta.T[:, None, :]) @ np.conj(np.swapaxes(Hl, 1, 2))
    A = A + p_u * pch.theta_sum + sigma2 * np.eye(N)
    dl = np.conj(np.linalg.solve(A, Hl))
    return DirectionSet(mode, "MMSE", _from_local(dl), pch.serving, eta)
