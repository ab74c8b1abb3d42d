"""Hardening-bound SINRs, spectral efficiency and result aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import channel, power, precoding
from .power import PowerAllocation
from .precoding import CENTRALIZED, DISTRIBUTED
from .scenario import ScenarioStats

log = logging.getLogger(__name__)

PRECODERS = ("MR", "RZF", "ZF", "MMSE")
ENFORCEMENTS = ("none", "PS", "LN")
POWER_CONTROLS = ("EPA", "MM")


class StatisticsError(RuntimeError):
    pass


@dataclass
class HardeningStats:
    """Monte-Carlo moments of the effective gains.

    Centralized: ``mean_gain[k] = E[h_k^T v_k]``, ``second_moment[k, j] = E|h_k^T v_j|^2``.
    Distributed: ``mean_gain[k, l] = E[h_kl^T w_kl]``,
    ``second_moment[k, j, l] = E|h_kl^T w_jl|^2``.
    """

    mode: str
    mean_gain: np.ndarray
    second_moment: np.ndarray
    noise: float
    n_samples: int
    est_power: np.ndarray | None = None
    mean_gain_se: np.ndarray | None = None


def block_gains(h: np.ndarray, prec) -> np.ndarray:
    """Inner products of true channels with the precoders of one block.

    Returns (K, K) ``h_k^T v_j`` (centralized) or (K, K, L) ``h_kl^T w_jl``.
    """
    if prec.mode == CENTRALIZED:
        return np.einsum("kln,jln->kj", h, prec.v)
    return np.einsum("kln,jln->kjl", h, prec.v)


def hardening_from_gains(gains: np.ndarray, mode: str, noise: float,
                         weights: np.ndarray | None = None,
                         est_power: np.ndarray | None = None) -> HardeningStats:
    """Moments from stacked per-block gains; ``weights`` scale power per block (PS back-off)."""
    n = gains.shape[0]
    x = gains if weights is None else gains * np.sqrt(weights).reshape((-1,) + (1,) * (gains.ndim - 1))
    K = gains.shape[1]
    diag = x[:, np.arange(K), np.arange(K)]
    mean = diag.mean(axis=0)
    se = diag.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else None
    second = np.mean(np.abs(x) ** 2, axis=0)
    return HardeningStats(mode, mean, second, noise, n, est_power, se)


class HardeningAccumulator:
    """Streaming version of :func:`hardening_from_gains` (unit weights)."""

    def __init__(self, mode: str, noise: float):
        self.mode, self.noise = mode, noise
        self.n = 0
        self.s1 = self.s2 = self.sq = self.p = None

    def add(self, gains: np.ndarray, est_power: np.ndarray | None = None) -> None:
        K = gains.shape[0]
        diag = gains[np.arange(K), np.arange(K)]
        if self.n == 0:
            self.s1 = np.zeros_like(diag)
            self.sq = np.zeros(diag.shape)
            self.s2 = np.zeros(gains.shape)
        self.s1 += diag
        self.sq += np.abs(diag) ** 2
        self.s2 += np.abs(gains) ** 2
        if est_power is not None:
            self.p = est_power.copy() if self.p is None else self.p + est_power
        self.n += 1

    def result(self) -> HardeningStats:
        n = self.n
        mean = self.s1 / n
        var = np.maximum(self.sq / n - np.abs(mean) ** 2, 0) * n / max(n - 1, 1)
        return HardeningStats(self.mode, mean, self.s2 / n, self.noise, n,
                              None if self.p is None else self.p / n, np.sqrt(var / n))


def _coeffs(alloc):
    return alloc.coeffs if isinstance(alloc, PowerAllocation) else np.asarray(alloc, dtype=float)


def _finish(num, den, scale):
    slack = 1e-9 * scale
    if np.any(den < -slack):
        raise StatisticsError(f"negative SINR denominator {den.min():.3e}; inconsistent statistics")
    den = np.maximum(den, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(num > 0, num / den, 0.0)
    return out


def sinr_centralized(hs: HardeningStats, alloc) -> np.ndarray:
    eps = _coeffs(alloc)
    sig = eps * np.abs(hs.mean_gain) ** 2
    interf = hs.second_moment @ eps
    return _finish(sig, interf - sig + hs.noise, interf + hs.noise)


def sinr_distributed(hs: HardeningStats, alloc) -> np.ndarray:
    eta = _coeffs(alloc)
    a = hs.mean_gain
    sig = np.abs(np.sum(np.sqrt(eta) * a, axis=1)) ** 2
    interf = np.einsum("jl,kjl->k", eta, hs.second_moment)
    self_coh = np.sum(eta * np.abs(a) ** 2, axis=1)
    return _finish(sig, interf - self_coh + hs.noise, interf + hs.noise)


def spectral_efficiency(sinr, overhead: float = 1.0):
    return overhead * np.log2(1 + np.asarray(sinr))


# --- scheme pipeline --------------------------------------------------------

@dataclass(frozen=True)
class Scheme:
    precoder: str
    mode: str
    enforcement: str = "none"
    power: str = "EPA"

    def __post_init__(self):
        if self.precoder not in PRECODERS:
            raise ValueError(f"unknown precoder {self.precoder!r}")
        if self.mode not in (DISTRIBUTED, CENTRALIZED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.enforcement not in ENFORCEMENTS:
            raise ValueError(f"unknown enforcement {self.enforcement!r}")
        if self.power not in POWER_CONTROLS:
            raise ValueError(f"unknown power control {self.power!r}")
        if self.mode == DISTRIBUTED and self.enforcement != "none":
            raise ValueError("per-AP enforcement applies to centralized schemes only")

    @property
    def short_label(self) -> str:
        if self.mode == DISTRIBUTED:
            return f"dist-{self.power}"
        enf = {"none": "SP", "PS": "PS", "LN": "LN"}[self.enforcement]
        return f"cent-{enf}-{self.power}"

    @property
    def label(self) -> str:
        return f"{self.precoder}/{self.short_label}"

    @classmethod
    def parse(cls, label: str) -> "Scheme":
        """Inverse of :attr:`label`, e.g. ``"MMSE/cent-LN-MM"``."""
        try:
            prec, rest = label.split("/")
            parts = rest.split("-")
            if parts[0] == "dist" and len(parts) == 2:
                return cls(prec, DISTRIBUTED, "none", parts[1])
            if parts[0] == "cent" and len(parts) == 3:
                enf = {"SP": "none", "PS": "PS", "LN": "LN"}[parts[1]]
                return cls(prec, CENTRALIZED, enf, parts[2])
        except (ValueError, KeyError):
            pass
        raise ValueError(f"cannot parse scheme label {label!r}")


def build_precoders(pch, precoder: str, mode: str, stats: ScenarioStats) -> power.PrecoderSet:
    """Short-term normalized precoders of one block (MMSE uses EPA inside)."""
    cfg = stats.cfg
    if precoder == "MR":
        dirs = precoding.mr_direction(pch, mode)
    elif precoder in ("RZF", "ZF"):
        dirs = precoding.rzf_direction(pch, mode, cfg.noise_variance, regularize=precoder == "RZF")
    else:
        diag = power.epa(mode, stats.serving).coeffs
        dirs = precoding.mmse_direction(pch, mode, diag, cfg.p_u, cfg.noise_variance)
    return power.normalize(dirs)


@dataclass
class CentralSamples:
    gains: list = field(default_factory=list)      # (K, K) per block, sum-power precoders
    seg: list = field(default_factory=list)        # (K, L) ||v_kl||^2 per block
    gains_ln: list = field(default_factory=list)   # (K, K) per block, LN precoders

    def stacked(self):
        return np.array(self.gains), np.array(self.seg), (np.array(self.gains_ln) if self.gains_ln else None)


def simulate_setup(stats: ScenarioStats, families, n_blocks: int, rng: np.random.Generator,
                   with_ln: bool = True, failures: dict | None = None) -> dict:
    """Run ``n_blocks`` coherence blocks; all families share channel realizations.

    ``families`` is an iterable of (precoder, mode). Returns a dict mapping
    each family to a :class:`HardeningAccumulator` (distributed) or
    :class:`CentralSamples` (centralized).

    When a ``failures`` dict is given, a family whose precoder cannot be
    built is dropped and its exception stored there; the other families
    still see exactly the same realizations. Otherwise the error propagates.
    """
    cfg = stats.cfg
    est_stats = channel.estimator_statistics(stats)
    families = list(dict.fromkeys(families))
    out = {}
    for prec, mode in families:
        out[(prec, mode)] = (HardeningAccumulator(DISTRIBUTED, cfg.noise_variance / cfg.p_a)
                             if mode == DISTRIBUTED else CentralSamples())
    for _ in range(n_blocks):
        real = channel.draw_channel(stats, rng)
        obs = channel.uplink_training(real, stats, rng)
        est = channel.mmse_estimate(obs, real, stats, est_stats)
        pch = precoding.puncture(est, stats.serving)
        est_power = np.sum(np.abs(est.h_hat) ** 2, axis=-1)
        for fam in list(out):
            sink = out[fam]
            try:
                pset = build_precoders(pch, *fam, stats)
                if fam[1] == DISTRIBUTED:
                    sink.add(block_gains(real.h, pset), est_power)
                else:
                    ln = power.enforce_ln(pset, stats.L) if with_ln else None
                    sink.gains.append(block_gains(real.h, pset))
                    sink.seg.append(pset.segment_power())
                    if ln is not None:
                        sink.gains_ln.append(block_gains(real.h, ln))
            except (np.linalg.LinAlgError, precoding.InfeasiblePrecoderError, power.PrecoderError) as exc:
                if failures is None:
                    raise
                failures[fam] = exc
                del out[fam]
    return out


@dataclass
class SchemeResult:
    scheme: Scheme
    sinr: np.ndarray               # (K,)
    alloc: PowerAllocation
    alpha: np.ndarray | None = None        # per-block PS back-off
    ap_power: np.ndarray | None = None     # per-block normalized P_l / P_s, shape (n, L)


def evaluate_scheme(scheme: Scheme, samples, stats: ScenarioStats,
                    ps_mm: str = "aware") -> SchemeResult:
    """SINRs of one scheme from the block samples of its precoder family.

    ``ps_mm`` picks the max-min variant for PS: ``"aware"`` (see
    :func:`ps_aware_maxmin`) or ``"sum_power_first"`` (max-min under sum
    power, then back-off).
    """
    cfg = stats.cfg
    if scheme.mode == DISTRIBUTED:
        hs = samples.result()
        alloc = (power.epa(DISTRIBUTED, stats.serving) if scheme.power == "EPA"
                 else power.maxmin_distributed(hs, stats.serving))
        return SchemeResult(scheme, sinr_distributed(hs, alloc), alloc)

    noise = cfg.noise_variance / cfg.P_s
    gains, seg, gains_ln = samples.stacked()
    if scheme.enforcement == "LN":
        if gains_ln is None:
            raise ValueError("LN samples were not collected")
        hs = hardening_from_gains(gains_ln, CENTRALIZED, noise)
        if scheme.power == "EPA":
            alloc = power.epa(CENTRALIZED, stats.serving)
        else:
            # after LN, AP l emits p_a * sum_{k in K_l} eps_k: budget per AP, not per system
            alloc = power.maxmin_centralized(hs, "post_LN", per_ap=(stats.serving / stats.L, 1 / stats.L),
                                             sum_budget=None)
        # LN per-AP power: P_l / P_s = sum_{k in K_l} eps_k / L
        ap = np.tile((alloc.eps @ stats.serving) / stats.L, (gains.shape[0], 1))
        return SchemeResult(scheme, sinr_centralized(hs, alloc), alloc, ap_power=ap)

    hs = hardening_from_gains(gains, CENTRALIZED, noise)
    if scheme.enforcement == "none":
        alloc = (power.epa(CENTRALIZED, stats.serving) if scheme.power == "EPA"
                 else power.maxmin_centralized(hs, "sum_power"))
        return SchemeResult(scheme, sinr_centralized(hs, alloc), alloc, ap_power=alloc.eps @ seg)

    if scheme.power == "EPA":
        alloc = power.epa(CENTRALIZED, stats.serving)
    elif ps_mm == "sum_power_first":
        alloc = power.maxmin_centralized(hs, "post_PS")
    elif ps_mm == "aware":
        alloc = ps_aware_maxmin(gains, seg, noise, stats.L, serving=stats.serving)
    else:
        raise ValueError(f"unknown ps_mm mode {ps_mm!r}")
    sinr, alpha, ap = _post_ps(gains, seg, noise, alloc.eps, stats.L)
    return SchemeResult(scheme, sinr, alloc, alpha=alpha, ap_power=ap)


def _post_ps(gains, seg, noise, eps, L):
    """SINR after per-realization PS back-off, folded into the effective precoders."""
    ap = eps @ seg  # (n, L) normalized per-AP power P_l / P_s
    alpha = np.minimum(1.0, (1.0 / L) / ap.max(axis=1))
    hs_ps = hardening_from_gains(gains, CENTRALIZED, noise, weights=alpha)
    return sinr_centralized(hs_ps, eps), alpha, ap * alpha[:, None]


PS_CAP_SCALES = (0.5, 0.71, 1.0, 1.41, 2.0, 2.83, 4.0, 8.0, 16.0, np.inf)


def ps_aware_maxmin(gains, seg, noise, L, scales=PS_CAP_SCALES, refine: int = 3,
                    serving: np.ndarray | None = None) -> PowerAllocation:
    """Max-min allocation judged after PS back-off.

    Each candidate solves max-min under sum power plus an average per-AP
    cap ``scale / L`` (``inf`` drops the cap); the candidate with the best
    post-PS minimum SINR wins.  The winner is then refined by re-solving on
    moments that already include its own back-off.  When ``serving`` is given,
    equal power allocation joins the candidate pool as a floor.
    """
    hs = hardening_from_gains(gains, CENTRALIZED, noise)
    seg_mean = seg.mean(axis=0)
    cands = []
    for scale in scales:
        per_ap = None if np.isinf(scale) else (seg_mean, scale / L)
        try:
            cands.append(power.maxmin_centralized(hs, "post_PS", per_ap=per_ap))
        except power.SolverError:
            continue
    if serving is not None:
        cands.append(power.epa(CENTRALIZED, serving))
    if not cands:
        raise power.SolverError("no PS-aware candidate converged")
    scores = [float(np.min(_post_ps(gains, seg, noise, a.eps, L)[0])) for a in cands]
    i = int(np.argmax(scores))
    best, best_t = cands[i], scores[i]
    for _ in range(refine):
        alpha = _post_ps(gains, seg, noise, best.eps, L)[1]
        try:
            alloc = power.maxmin_centralized(hardening_from_gains(gains, CENTRALIZED, noise, weights=alpha),
                                             "post_PS")
        except power.SolverError:
            break
        t = float(np.min(_post_ps(gains, seg, noise, alloc.eps, L)[0]))
        if t <= best_t * (1 + 1e-9):
            break
        best, best_t = alloc, t
    best = PowerAllocation(best.mode, best.eps, scheme="MM[post_PS,aware]")
    return best


def estimate_hardening(stats: ScenarioStats, scheme: Scheme, n_blocks: int,
                       rng: np.random.Generator) -> HardeningStats:
    """Hardening statistics of a scheme's (enforced) precoders under EPA coefficients."""
    if n_blocks < 2:
        raise ValueError("need at least 2 blocks")
    samples = simulate_setup(stats, [(scheme.precoder, scheme.mode)], n_blocks, rng,
                             with_ln=scheme.enforcement == "LN")[(scheme.precoder, scheme.mode)]
    if scheme.mode == DISTRIBUTED:
        return samples.result()
    cfg = stats.cfg
    noise = cfg.noise_variance / cfg.P_s
    gains, seg, gains_ln = samples.stacked()
    if scheme.enforcement == "LN":
        return hardening_from_gains(gains_ln, CENTRALIZED, noise)
    if scheme.enforcement == "PS":
        ap = power.epa(CENTRALIZED, stats.serving).eps @ seg
        alpha = np.minimum(1.0, (1 / stats.L) / ap.max(axis=1))
        return hardening_from_gains(gains, CENTRALIZED, noise, weights=alpha)
    return hardening_from_gains(gains, CENTRALIZED, noise)


# --- aggregation ------------------------------------------------------------

SE_GRID = np.round(np.arange(0, 20.0001, 0.05), 10)


@dataclass
class SEReport:
    label: str
    sinr: np.ndarray       # (n_setups, K)
    se: np.ndarray         # (n_setups, K)
    alpha: np.ndarray | None = None      # pooled PS back-off samples
    ap_power: np.ndarray | None = None   # pooled normalized per-AP powers (n, L)

    def cdf(self, grid: np.ndarray = SE_GRID) -> np.ndarray:
        flat = np.sort(self.se.ravel())
        return np.searchsorted(flat, grid, side="right") / flat.size

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.se.ravel(), q))

    @property
    def likely95(self) -> float:
        return self.percentile(5)

    def summary(self) -> dict:
        out = {
            "scheme": self.label,
            "samples": int(self.se.size),
            "likely95": self.likely95,
            "median": self.percentile(50),
            "p95": self.percentile(95),
            "mean": float(self.se.mean()),
        }
        if self.alpha is not None:
            out["alpha_median"] = float(np.median(self.alpha))
            out["alpha_mean"] = float(np.mean(self.alpha))
        if self.ap_power is not None:
            out["ap_power_max_median"] = float(np.median(self.ap_power.max(axis=1)))
        return out


def aggregate(label: str, results: list, overhead: float = 1.0) -> SEReport:
    """Pool per-setup :class:`SchemeResult` objects into one report."""
    sinr = np.array([r.sinr for r in results])
    alpha = [r.alpha for r in results if r.alpha is not None]
    ap = [r.ap_power for r in results if r.ap_power is not None]
    return SEReport(label, sinr, spectral_efficiency(sinr, overhead),
                    np.concatenate(alpha) if alpha else None,
                    np.concatenate(ap) if ap else None)


def bootstrap_percentile_diff(se_a: np.ndarray, se_b: np.ndarray, q: float = 5,
                              n_boot: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Difference of pooled q-th percentiles (a - b) and its bootstrap std.

    Setups are resampled jointly (paired) since schemes share realizations.
    """
    rng = np.random.default_rng(seed)
    n = se_a.shape[0]
    diff = np.percentile(se_a, q) - np.percentile(se_b, q)
    idx = rng.integers(0, n, size=(n_boot, n))
    boots = np.array([np.percentile(se_a[i], q) - np.percentile(se_b[i], q) for i in idx])
    return float(diff), float(boots.std(ddof=1))
