"""Precoder normalization, power allocation and per-AP power enforcement."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .precoding import CENTRALIZED, DISTRIBUTED, DirectionSet

log = logging.getLogger(__name__)

SHORT_TERM = "short_term"
LONG_TERM = "long_term"


class PrecoderError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass
class PrecoderSet:
    mode: str
    scheme: str
    v: np.ndarray          # (K, L, N); w for distributed, segmented v for centralized
    serving: np.ndarray
    normalization: str = SHORT_TERM
    enforcement: str = "none"

    def segment_power(self) -> np.ndarray:
        """(K, L) squared segment norms ||v_kl||^2."""
        return np.sum(np.abs(self.v) ** 2, axis=-1)


@dataclass
class PowerAllocation:
    mode: str
    coeffs: np.ndarray     # eps (K,) when centralized, eta (K, L) when distributed
    alpha_g: float = 1.0
    scheme: str = "EPA"

    @property
    def eps(self) -> np.ndarray:
        return self.coeffs

    @property
    def eta(self) -> np.ndarray:
        return self.coeffs

    @property
    def eps_bar(self) -> np.ndarray:
        return self.alpha_g * self.coeffs


def normalize(dirs: DirectionSet, flavor: str = SHORT_TERM,
              mean_sq_norm: np.ndarray | None = None) -> PrecoderSet:
    """Scale directions to unit (instantaneous or average) power.

    Long-term normalization needs ``mean_sq_norm``: E||d_kl||^2 as (K, L) for
    distributed or E||d_k||^2 as (K,) for centralized.
    """
    d = dirs.d
    if dirs.mode == DISTRIBUTED:
        sq = np.sum(np.abs(d) ** 2, axis=-1)
        if flavor == SHORT_TERM:
            c2 = sq
        elif flavor == LONG_TERM:
            c2 = np.asarray(mean_sq_norm, dtype=float)
        else:
            raise ValueError(f"unknown normalization {flavor!r}")
        if np.any(c2[dirs.serving] <= 0):
            k, l = np.argwhere(dirs.serving & (c2 <= 0))[0]
            raise PrecoderError(f"zero direction for served pair (k={k}, l={l})")
        scale = np.where(dirs.serving, 1 / np.sqrt(np.where(c2 > 0, c2, 1.0)), 0.0)
        v = d * scale[..., None]
    else:
        sq = np.sum(np.abs(d) ** 2, axis=(1, 2))
        c2 = sq if flavor == SHORT_TERM else np.asarray(mean_sq_norm, dtype=float)
        if flavor not in (SHORT_TERM, LONG_TERM):
            raise ValueError(f"unknown normalization {flavor!r}")
        if np.any(c2 <= 0):
            raise PrecoderError(f"zero centralized direction for user {int(np.argmin(c2))}")
        v = d / np.sqrt(c2)[:, None, None]
    return PrecoderSet(dirs.mode, dirs.scheme, v, dirs.serving, flavor)


def per_ap_power(prec: PrecoderSet, alloc: PowerAllocation, P_s: float, p_a: float) -> np.ndarray:
    """Instantaneous emitted power of every AP in watts, shape (L,)."""
    seg = prec.segment_power()
    if prec.mode == CENTRALIZED:
        return P_s * alloc.eps_bar @ seg
    return p_a * np.sum(alloc.eta * seg, axis=0)


def enforce_ps(alloc: PowerAllocation, per_ap_powers: np.ndarray, p_a: float) -> PowerAllocation:
    """Global back-off of all power coefficients so the busiest AP meets ``p_a``."""
    p_max = float(np.max(per_ap_powers))
    alpha = min(1.0, p_a / p_max) if p_max > 0 else 1.0
    return dataclasses.replace(alloc, alpha_g=alloc.alpha_g * alpha)


def enforce_ln(prec: PrecoderSet, L: int) -> PrecoderSet:
    """Rescale every serving segment to norm 1/sqrt(L)."""
    seg = np.sqrt(prec.segment_power())
    if np.any(seg[prec.serving] == 0):
        k, l = np.argwhere(prec.serving & (seg == 0))[0]
        raise PrecoderError(f"local normalization undefined: zero segment for served pair (k={k}, l={l})")
    active = seg > 0
    scale = np.where(active, 1 / (np.sqrt(L) * np.where(active, seg, 1.0)), 0.0)
    return dataclasses.replace(prec, v=prec.v * scale[..., None], enforcement="LN")


def epa(mode: str, serving: np.ndarray) -> PowerAllocation:
    K, L = serving.shape
    if mode == CENTRALIZED:
        return PowerAllocation(mode, np.full(K, 1.0 / K))
    load = serving.sum(axis=0)
    eta = np.where(serving, 1.0 / np.maximum(load, 1), 0.0)
    return PowerAllocation(mode, eta)


# --- max-min fairness -----------------------------------------------------

def _bisect(lo, hi, solve, feasible, rtol, max_iter):
    best = solve(lo) if lo > 0 else None
    for it in range(max_iter):
        if hi - lo <= rtol * hi:
            return lo, best, it
        mid = 0.5 * (lo + hi)
        x = solve(mid)
        if x is not None and feasible(x):
            lo, best = mid, x
        else:
            hi = mid
    raise SolverError(f"max-min bisection did not converge in {max_iter} iterations "
                      f"(bracket [{lo:.6g}, {hi:.6g}])")


def maxmin_centralized(hs, constraint: str = "sum_power", per_ap=None,
                       sum_budget: float | None = 1.0,
                       rtol: float = 1e-6, max_iter: int = 100) -> PowerAllocation:
    """Max-min SINR coefficients eps for fixed centralized precoders, sum(eps) <= 1.

    For a common target t the equal-SINR allocation solves the linear system
    (diag(a) (1 + t) - t B) eps = t * noise; it is feasible when nonnegative
    and within budget. Bisection finds the largest feasible t.

    ``per_ap=(seg, cap)`` adds the linear constraints ``eps @ seg <= cap``
    where ``seg[k, l]`` is the (average) squared segment norm; with
    ``cap = p_a / P_s`` this bounds the average per-AP power.
    ``sum_budget=None`` drops the sum constraint (the per-AP constraints
    must then bound the allocation).
    """
    from .evaluation import sinr_centralized

    if constraint not in ("sum_power", "post_PS", "post_LN"):
        raise ValueError(f"unknown constraint {constraint!r}")
    if sum_budget is None and per_ap is None:
        raise ValueError("need a sum budget or per-AP constraints")
    a = np.abs(hs.mean_gain) ** 2
    B = hs.second_moment
    n = hs.noise
    K = a.size
    base = PowerAllocation(CENTRALIZED, np.full(K, 1.0 / K))

    def solve(t):
        try:
            return np.linalg.solve(np.diag(a * (1 + t)) - t * B, np.full(K, t * n))
        except np.linalg.LinAlgError:
            return None

    def feasible(x):
        if not np.all(x >= 0):
            return False
        if sum_budget is not None and x.sum() > sum_budget * (1 + 1e-12):
            return False
        return per_ap is None or np.all(x @ per_ap[0] <= per_ap[1] * (1 + 1e-12))

    t_epa = float(np.min(sinr_centralized(hs, base)))
    epa_ok = feasible(base.eps)
    if np.any(a <= 0):
        if not epa_ok:
            raise SolverError("user with zero effective gain and infeasible EPA")
        return base
    t_lo = t_epa if epa_ok else 0.0
    t_hi = float(np.min(a / (np.diag(B) - a + n)))
    t, eps, iters = _bisect(t_lo, max(t_hi, t_lo), solve, feasible, rtol, max_iter)
    log.debug("maxmin_centralized: t=%.6g after %d iterations", t, iters)
    if eps is None or not feasible(eps):
        if epa_ok:
            return base
        raise SolverError("no feasible max-min allocation found")
    alloc = PowerAllocation(CENTRALIZED, np.clip(eps, 0, None), scheme=f"MM[{constraint}]")
    if epa_ok and np.min(sinr_centralized(hs, alloc)) < t_epa:
        return base
    return alloc


def gain_split(est_power: np.ndarray, serving: np.ndarray) -> np.ndarray:
    """AP split weights proportional to E||h_hat_kl||^2 over each user's cluster."""
    w = np.where(serving, est_power, 0.0)
    tot = w.sum(axis=1, keepdims=True)
    return np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)


def _maxmin_split(hs, serving, split, t_lo, rtol, max_iter):
    a = hs.mean_gain          # (K, L)
    b = hs.second_moment      # (K, K', L)
    n = hs.noise
    K = a.shape[0]
    A = np.abs(np.sum(np.sqrt(split) * a, axis=1)) ** 2
    C = np.sum(split * np.abs(a) ** 2, axis=1)
    Bm = np.einsum("jl,kjl->kj", split, b)
    if np.any(A <= 0):
        return None

    def solve(t):
        M = np.diag(A + t * C) - t * Bm
        try:
            return np.linalg.solve(M, np.full(K, t * n))
        except np.linalg.LinAlgError:
            return None

    def feasible(q):
        return np.all(q >= 0) and np.all(split.T @ q <= 1 + 1e-12)

    with np.errstate(divide="ignore"):
        q_max = np.min(np.where(split > 0, 1 / np.where(split > 0, split, 1), np.inf), axis=1)
    self_var = np.diag(Bm) - C
    t_hi = float(np.min(q_max * A / (q_max * self_var + n)))
    t, q, _ = _bisect(t_lo, max(t_hi, t_lo), solve, feasible, rtol, max_iter)
    if q is None or not feasible(q):
        return None
    return np.clip(q, 0, None)[:, None] * split


def maxmin_distributed(hs, serving: np.ndarray, rtol: float = 1e-6,
                       max_iter: int = 100) -> PowerAllocation:
    """Max-min over eta_kl = q_k * split_kl for fixed AP splits.

    Two splits are tried, gain-proportional and the EPA split (for which
    q = 1 is EPA itself); the better result is returned, so the outcome
    never falls below EPA.
    """
    from .evaluation import sinr_distributed

    base = epa(DISTRIBUTED, serving)
    t_epa = float(np.min(sinr_distributed(hs, base)))
    best, best_t = base, t_epa
    splits = []
    if hs.est_power is not None:
        splits.append(("gain", gain_split(hs.est_power, serving), 0.0))
    splits.append(("epa", base.eta, t_epa))
    for name, split, t_lo in splits:
        eta = _maxmin_split(hs, serving, split, t_lo, rtol, max_iter)
        if eta is None:
            continue
        cand = PowerAllocation(DISTRIBUTED, eta, scheme=f"MM[{name}]")
        t = float(np.min(sinr_distributed(hs, cand)))
        if t > best_t:
            best, best_t = cand, t
    return best
