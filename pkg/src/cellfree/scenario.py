"""Network geometry, large-scale fading and user-centric clustering."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid scenario or experiment configuration."""


@dataclass
class ScenarioConfig:
    L: int = 50
    N_t: int = 4
    K: int = 10
    radius_m: float = 1000.0
    cluster_size: int = 10
    tau_p: int = 5
    tau_c: int = 200
    p_u: float = 0.2
    p_a: float = 0.2
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 9.0
    bandwidth_hz: float = 5e6
    # three-slope COST-Hata model
    carrier_mhz: float = 1900.0
    ap_height_m: float = 15.0
    ue_height_m: float = 1.65
    d0_m: float = 10.0
    d1_m: float = 50.0
    shadowing_std_db: float = 8.0
    min_distance_m: float = 1.0
    angular_spread_deg: float = 10.0
    covariance_model: str = "exact"  # or "closed_form"
    kappa_mean_db: float = 8.0
    kappa_std_db: float = 4.0
    cluster_metric: str = "gain"  # or "distance"
    pilot_scheme: str = "round_robin"  # or "random"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def M(self) -> int:
        return self.L * self.N_t

    @property
    def P_s(self) -> float:
        return self.L * self.p_a

    @property
    def noise_variance(self) -> float:
        dbm = self.noise_psd_dbm_hz + 10 * math.log10(self.bandwidth_hz) + self.noise_figure_db
        return 10 ** ((dbm - 30) / 10)

    @property
    def overhead(self) -> float:
        return (self.tau_c - self.tau_p) / self.tau_c

    def validate(self) -> None:
        if self.L < 1 or self.N_t < 1 or self.K < 1:
            raise ConfigError("L, N_t and K must be >= 1")
        if not 1 <= self.cluster_size <= self.L:
            raise ConfigError(f"cluster_size must lie in [1, L={self.L}], got {self.cluster_size}")
        if not 1 <= self.tau_p <= self.tau_c:
            raise ConfigError("need 1 <= tau_p <= tau_c")
        if min(self.p_u, self.p_a, self.radius_m, self.bandwidth_hz) <= 0:
            raise ConfigError("powers, radius and bandwidth must be positive")
        if self.angular_spread_deg <= 0:
            raise ConfigError("angular spread must be positive")
        if self.covariance_model not in ("exact", "closed_form"):
            raise ConfigError(f"unknown covariance_model {self.covariance_model!r}")
        if self.cluster_metric not in ("gain", "distance"):
            raise ConfigError(f"unknown cluster_metric {self.cluster_metric!r}")
        if self.pilot_scheme not in ("round_robin", "random"):
            raise ConfigError(f"unknown pilot_scheme {self.pilot_scheme!r}")

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def pathloss(distance_m, cfg: ScenarioConfig, rng: np.random.Generator | None = None):
    """Linear large-scale gain of the three-slope COST-Hata model.

    Log-normal shadowing (std ``cfg.shadowing_std_db``) is added beyond ``d1``
    when an ``rng`` is given.
    """
    d = np.maximum(np.asarray(distance_m, dtype=float), cfg.min_distance_m) / 1000.0
    d0, d1 = cfg.d0_m / 1000.0, cfg.d1_m / 1000.0
    f = cfg.carrier_mhz
    loss = (46.3 + 33.9 * math.log10(f) - 13.82 * math.log10(cfg.ap_height_m)
            - (1.1 * math.log10(f) - 0.7) * cfg.ue_height_m + (1.56 * math.log10(f) - 0.8))
    gain_db = np.where(
        d > d1,
        -loss - 35 * np.log10(d),
        np.where(d > d0,
                 -loss - 15 * math.log10(d1) - 20 * np.log10(d),
                 -loss - 15 * math.log10(d1) - 20 * math.log10(d0)),
    )
    if rng is not None and cfg.shadowing_std_db > 0:
        z = rng.standard_normal(d.shape)
        gain_db = gain_db + np.where(d > d1, cfg.shadowing_std_db * z, 0.0)
    return 10 ** (gain_db / 10)


def steering_vector(angle: float, n: int) -> np.ndarray:
    """ULA response with half-wavelength spacing."""
    return np.exp(1j * np.pi * np.arange(n) * np.sin(angle))


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(64)


def gaussian_scattering_covariance(beta, angle, spread_deg, n, exact=True):
    """Spatial covariance of a ULA under Gaussian angular scattering.

    ``exact=True`` integrates the Gaussian angle density numerically
    (Gauss-Hermite); ``exact=False`` uses the small-angle closed form
    ``beta * exp(j pi m sin(a)) * exp(-s^2 (pi m cos(a))^2 / 2)``.
    """
    if spread_deg <= 0:
        raise ValueError("angular spread must be positive")
    sigma = np.deg2rad(spread_deg)
    lag = np.arange(n)
    if exact:
        deltas = np.sqrt(2.0) * sigma * _GH_NODES
        phase = np.exp(1j * np.pi * np.outer(lag, np.sin(angle + deltas)))
        col = phase @ _GH_WEIGHTS / np.sqrt(np.pi)
    else:
        col = (np.exp(1j * np.pi * lag * np.sin(angle))
               * np.exp(-sigma**2 * (np.pi * lag * np.cos(angle)) ** 2 / 2))
    # Toeplitz: R[m, m'] = beta * col[m - m'] for m >= m'
    diff = lag[:, None] - lag[None, :]
    R = np.where(diff >= 0, col[np.abs(diff)], np.conj(col[np.abs(diff)]))
    return beta * repair_psd(R)


def repair_psd(R: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Hermitize and clip slightly negative eigenvalues; error on real indefiniteness."""
    R = (R + R.conj().T) / 2
    lam, U = np.linalg.eigh(R)
    tr = float(np.real(np.trace(R)))
    if lam.min() >= 0:
        return R
    if -lam.min() > rel_tol * max(tr, np.finfo(float).tiny):
        raise ValueError(f"covariance is not PSD (min eigenvalue {lam.min():.3e}, trace {tr:.3e})")
    lam = np.clip(lam, 0, None)
    out = (U * lam) @ U.conj().T
    # restore the exact diagonal scale lost to clipping
    return out * (tr / np.real(np.trace(out)))


def assign_pilots(K: int, tau_p: int, rng: np.random.Generator | None = None,
                  scheme: str = "round_robin") -> np.ndarray:
    if tau_p < 1:
        raise ConfigError("tau_p must be >= 1")
    if scheme == "round_robin":
        return np.arange(K) % tau_p
    if scheme == "random":
        if rng is None:
            raise ValueError("random pilot assignment needs an rng")
        # balanced random: shuffle a round-robin assignment
        return rng.permutation(np.arange(K) % tau_p)
    raise ConfigError(f"unknown pilot scheme {scheme!r}")


def select_clusters(metric: np.ndarray, cluster_size: int, largest: bool = True) -> np.ndarray:
    """Boolean (K, L) mask of the ``cluster_size`` best APs per user."""
    order = np.argsort(-metric if largest else metric, axis=1, kind="stable")
    mask = np.zeros(metric.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :cluster_size], True, axis=1)
    return mask


@dataclass
class ScenarioStats:
    """Large-scale state of one network snapshot. Treated as immutable."""

    cfg: ScenarioConfig
    ap_pos: np.ndarray     # (L, 2)
    ue_pos: np.ndarray     # (K, 2)
    beta: np.ndarray       # (K, L)
    kappa: np.ndarray      # (K, L)
    los_angle: np.ndarray  # (K, L)
    R: np.ndarray          # (K, L, N, N)
    serving: np.ndarray    # (K, L) bool
    pilot_of: np.ndarray   # (K,)
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    @property
    def L(self) -> int:
        return self.beta.shape[1]

    @property
    def N(self) -> int:
        return self.R.shape[-1]

    @cached_property
    def Q(self) -> np.ndarray:
        return self.R / (1 + self.kappa)[..., None, None]

    @cached_property
    def los_amplitude(self) -> np.ndarray:
        return np.sqrt(self.beta * self.kappa / (1 + self.kappa))

    @cached_property
    def steering(self) -> np.ndarray:
        """(K, L, N) steering vectors toward each user."""
        return np.exp(1j * np.pi * np.arange(self.N) * np.sin(self.los_angle)[..., None])

    @cached_property
    def nlos_factor(self) -> np.ndarray:
        """Square-root factors F with F F^H = Q, via eigendecomposition (tolerates rank loss)."""
        lam, U = np.linalg.eigh(self.Q)
        return U * np.sqrt(np.clip(lam, 0, None))[..., None, :]

    @property
    def serving_sets(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.serving]

    @property
    def served_users(self) -> list[list[int]]:
        return [np.flatnonzero(col).tolist() for col in self.serving.T]

    @cached_property
    def copilot(self) -> np.ndarray:
        """(K, K) bool: users sharing a pilot."""
        return self.pilot_of[:, None] == self.pilot_of[None, :]

    @property
    def copilot_sets(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.copilot]

    def to_dict(self) -> dict:
        def cplx(a):
            return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}
        return {
            "format": "cellfree.scenario/1",
            "config": self.cfg.to_dict(),
            "ap_pos": self.ap_pos.tolist(),
            "ue_pos": self.ue_pos.tolist(),
            "beta": self.beta.tolist(),
            "kappa": self.kappa.tolist(),
            "los_angle": self.los_angle.tolist(),
            "R": cplx(self.R),
            "serving": self.serving.astype(int).tolist(),
            "pilot_of": self.pilot_of.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioStats":
        return cls(
            cfg=ScenarioConfig.from_dict(d["config"]),
            ap_pos=np.array(d["ap_pos"], dtype=float),
            ue_pos=np.array(d["ue_pos"], dtype=float),
            beta=np.array(d["beta"], dtype=float),
            kappa=np.array(d["kappa"], dtype=float),
            los_angle=np.array(d["los_angle"], dtype=float),
            R=np.array(d["R"]["re"]) + 1j * np.array(d["R"]["im"]),
            serving=np.array(d["serving"], dtype=bool),
            pilot_of=np.array(d["pilot_of"], dtype=int),
            meta=d.get("meta", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ScenarioStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_stats(cfg: ScenarioConfig, ap_pos, ue_pos, beta, kappa, los_angle,
                rng: np.random.Generator | None = None) -> ScenarioStats:
    """Assemble covariances, clusters and pilots from given large-scale quantities."""
    K, L = beta.shape
    R = np.empty((K, L, cfg.N_t, cfg.N_t), dtype=complex)
    exact = cfg.covariance_model == "exact"
    for k in range(K):
        for l in range(L):
            R[k, l] = gaussian_scattering_covariance(
                beta[k, l], los_angle[k, l], cfg.angular_spread_deg, cfg.N_t, exact=exact)
    if cfg.cluster_metric == "gain":
        serving = select_clusters(beta, cfg.cluster_size)
    else:
        dist = np.linalg.norm(ue_pos[:, None, :] - ap_pos[None, :, :], axis=-1)
        serving = select_clusters(dist, cfg.cluster_size, largest=False)
    pilot_of = assign_pilots(K, cfg.tau_p, rng, cfg.pilot_scheme)
    return ScenarioStats(cfg, ap_pos, ue_pos, beta, kappa, los_angle, R, serving, pilot_of)


def _uniform_disc(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi)])


def drop_network(cfg: ScenarioConfig, rng: np.random.Generator) -> ScenarioStats:
    """Draw one network snapshot: positions, fading statistics, clusters and pilots."""
    cfg.validate()
    ap_pos = _uniform_disc(rng, cfg.L, cfg.radius_m)
    ue_pos = _uniform_disc(rng, cfg.K, cfg.radius_m)
    delta = ue_pos[:, None, :] - ap_pos[None, :, :]
    dist = np.hypot(delta[..., 0], delta[..., 1])
    beta = pathloss(dist, cfg, rng)
    kappa_db = cfg.kappa_mean_db + cfg.kappa_std_db * rng.standard_normal(beta.shape)
    kappa = 10 ** (kappa_db / 10)
    los_angle = np.arctan2(delta[..., 1], delta[..., 0])
    return build_stats(cfg, ap_pos, ue_pos, beta, kappa, los_angle, rng)
