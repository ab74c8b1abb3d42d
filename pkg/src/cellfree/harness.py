"""Experiment runner: config loading, seeding, scheme sweeps and result files."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import evaluation, power, precoding
from .channel import EstimationError
from .evaluation import Scheme, StatisticsError
from .scenario import ConfigError, ScenarioConfig, drop_network

log = logging.getLogger(__name__)

CORE_CURVES = ("dist-EPA", "dist-MM", "cent-PS-MM", "cent-LN-EPA", "cent-LN-MM")
ALL_CURVES = CORE_CURVES + ("cent-SP-EPA", "cent-SP-MM", "cent-PS-EPA")
NUMERICAL_ERRORS = (np.linalg.LinAlgError, power.SolverError, power.PrecoderError,
                    precoding.InfeasiblePrecoderError, StatisticsError, EstimationError)

# spawn-key stream ids
_SCENARIO, _BLOCKS, _FIG1 = 0, 1, 2


def parse_schemes(labels) -> list[Scheme]:
    """Scheme list from labels; ``"core"``/``"all"`` expand per precoder.

    Accepts a comma-separated string or a list, e.g. ``"MMSE/dist-MM,RZF/core"``.
    """
    items = labels.split(",") if isinstance(labels, str) else list(labels)
    out = []
    for item in (i.strip() for i in items):
        if not item:
            continue
        precs, _, curve = item.partition("/")
        precs = ("MR", "RZF", "MMSE") if precs in ("core", "all") and not curve else (precs,)
        curve = curve or item
        curves = {"core": CORE_CURVES, "all": ALL_CURVES}.get(curve, (curve,))
        for p in precs:
            for c in curves:
                try:
                    out.append(Scheme.parse(f"{p}/{c}"))
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
    return list(dict.fromkeys(out))


@dataclass
class ExperimentPlan:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    schemes: list = field(default_factory=lambda: parse_schemes("core"))
    n_setups: int = 100
    n_blocks: int = 200
    out_dir: str = "results"
    seed: int = 0
    workers: int = 1
    include_overhead: bool = True
    ps_mm: str = "aware"
    fig1_cluster_size: int | None = None   # None: every AP serves every user
    fig1_blocks: int = 5

    def validate(self) -> None:
        self.scenario.validate()
        if not self.schemes:
            raise ConfigError("no runs requested")
        if self.n_setups < 1 or self.n_blocks < 2:
            raise ConfigError("need setups >= 1 and blocks >= 2")
        if self.ps_mm not in ("aware", "sum_power_first"):
            raise ConfigError(f"unknown ps_mm {self.ps_mm!r}")
        for s in self.schemes:
            if s.mode == precoding.DISTRIBUTED and s.enforcement != "none":
                raise ConfigError(f"{s.label}: enforcement only applies to centralized schemes")

    @property
    def overhead(self) -> float:
        return self.scenario.overhead if self.include_overhead else 1.0

    def resolved(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "schemes": [s.label for s in self.schemes],
            "n_setups": self.n_setups,
            "n_blocks": self.n_blocks,
            "seed": self.seed,
            "include_overhead": self.include_overhead,
            "overhead": self.overhead,
            "ps_mm": self.ps_mm,
            "noise_variance_w": self.scenario.noise_variance,
            "fig1_cluster_size": self.fig1_cluster_size,
            "fig1_blocks": self.fig1_blocks,
        }


def load_plan(path=None, **overrides) -> ExperimentPlan:
    """Build a plan from a TOML file (sections ``[scenario]``, ``[experiment]``) and overrides.

    Overrides with value ``None`` are ignored.
    """
    doc = {}
    if path is not None:
        try:
            doc = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(doc) - {"scenario", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    exp = dict(doc.get("experiment", {}))
    exp.update({k: v for k, v in overrides.items() if v is not None})
    try:
        scenario = ScenarioConfig.from_dict(doc.get("scenario", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if "seed" in exp:
        scenario = scenario.replace(seed=int(exp["seed"]))
    known = {f.name for f in dataclasses.fields(ExperimentPlan)} - {"scenario"}
    bad = set(exp) - known
    if bad:
        raise ConfigError(f"unknown experiment keys: {sorted(bad)}")
    if "schemes" in exp:
        exp["schemes"] = parse_schemes(exp["schemes"])
    plan = ExperimentPlan(scenario=scenario, **exp)
    if "seed" not in exp:
        plan.seed = scenario.seed
    plan.validate()
    return plan


def setup_rng(seed: int, setup: int, stream: int) -> np.random.Generator:
    """Independent generator for (master seed, setup index, stream id)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(setup, stream)))


def run_setup(plan: ExperimentPlan, setup: int) -> dict:
    """Evaluate every scheme on one setup. Returns {label: SchemeResult | error string}."""
    stats = drop_network(plan.scenario, setup_rng(plan.seed, setup, _SCENARIO))
    families = list(dict.fromkeys((s.precoder, s.mode) for s in plan.schemes))
    with_ln = any(s.enforcement == "LN" for s in plan.schemes)
    out, failed = {}, {}
    try:
        samples = evaluation.simulate_setup(stats, families, plan.n_blocks,
                                            setup_rng(plan.seed, setup, _BLOCKS), with_ln=with_ln,
                                            failures=failed)
    except NUMERICAL_ERRORS as exc:
        return {s.label: f"{type(exc).__name__}: {exc}" for s in plan.schemes}
    for s in plan.schemes:
        fam = (s.precoder, s.mode)
        if fam in failed:
            out[s.label] = f"{type(failed[fam]).__name__}: {failed[fam]}"
            continue
        try:
            out[s.label] = evaluation.evaluate_scheme(s, samples[fam], stats, plan.ps_mm)
        except NUMERICAL_ERRORS as exc:
            out[s.label] = f"{type(exc).__name__}: {exc}"
    return out


def _run_setup_star(args):
    return run_setup(*args)


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _safe(label: str) -> str:
    return label.replace("/", "_")


@dataclass
class RunResult:
    reports: dict
    warnings: list
    out_dir: Path

    @property
    def exit_code(self) -> int:
        return 2 if any(r is None for r in self.reports.values()) else 0


def run(plan: ExperimentPlan) -> RunResult:
    """Run every scheme over all setups and write the result files."""
    plan.validate()
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = [(plan, s) for s in range(plan.n_setups)]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            per_setup = list(pool.map(_run_setup_star, args))
    else:
        per_setup = []
        for a in args:
            per_setup.append(_run_setup_star(a))
            log.info("setup %d/%d done", a[1] + 1, plan.n_setups)

    warnings, reports = [], {}
    for scheme in plan.schemes:
        ok, setups = [], []
        for idx, res in enumerate(per_setup):
            r = res[scheme.label]
            if isinstance(r, str):
                warnings.append({"scheme": scheme.label, "setup": idx, "error": r})
                log.warning("%s setup %d skipped: %s", scheme.label, idx, r)
            else:
                ok.append(r)
                setups.append(idx)
        if not ok:
            reports[scheme.label] = None
            continue
        rep = evaluation.aggregate(scheme.label, ok, plan.overhead)
        reports[scheme.label] = rep
        _write_scheme_csv(out / f"se_{_safe(scheme.label)}.csv", scheme.label, setups, rep)

    _write_summary(out, plan, reports, warnings)
    return RunResult(reports, warnings, out)


def _write_scheme_csv(path: Path, label: str, setups, rep) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "setup", "user", "sinr", "se"])
        for row, s in enumerate(setups):
            for k in range(rep.se.shape[1]):
                w.writerow([label, s, k, _fmt(rep.sinr[row, k]), _fmt(rep.se[row, k])])


def _write_summary(out: Path, plan: ExperimentPlan, reports: dict, warnings: list) -> None:
    cols = ["scheme", "samples", "likely95", "median", "p95", "mean", "alpha_median", "alpha_mean",
            "ap_power_max_median"]
    summaries = {}
    with (out / "summary.tsv").open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for label, rep in reports.items():
            if rep is None:
                w.writerow([label] + ["nan"] * (len(cols) - 1))
                continue
            summ = rep.summary()
            summaries[label] = summ
            w.writerow([label] + [_fmt(summ[c]) if c in summ else "" for c in cols[1:]])

    grid = evaluation.SE_GRID
    with (out / "cdf.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        labels = [lab for lab, rep in reports.items() if rep is not None]
        w.writerow(["se"] + labels)
        cdfs = [reports[lab].cdf(grid) for lab in labels]
        for i, x in enumerate(grid):
            w.writerow([_fmt(x)] + [_fmt(c[i]) for c in cdfs])

    hist = {}
    bins = np.linspace(0, 1, 51)
    for label, rep in reports.items():
        if rep is not None and rep.ap_power is not None:
            counts, _ = np.histogram(rep.ap_power.ravel(), bins=bins)
            hist[label] = counts.tolist()
    meta = {
        "format": "cellfree.run/1",
        "plan": plan.resolved(),
        "summary": summaries,
        "ap_power_histogram": {"bin_edges": bins.tolist(), "counts": hist},
        "warnings": warnings,
        "warning_count": len(warnings),
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


# --- power concentration (single-antenna APs, centralized ZF, equal eps) -----

def fig1_mode(plan: ExperimentPlan) -> dict:
    """Per-AP normalized transmit power P_l / P_s of centralized ZF with equal eps.

    Writes ``fig1_power.csv`` (snapshot, rank, ap, p_norm; APs sorted by power)
    and ``fig1_summary.json``.
    """
    cfg = plan.scenario.replace(N_t=1, cluster_size=plan.fig1_cluster_size or plan.scenario.L)
    cfg.validate()
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .channel import draw_channel, estimator_statistics, mmse_estimate, uplink_training

    snapshots = []
    for s in range(plan.n_setups):
        stats = drop_network(cfg, setup_rng(plan.seed, s, _SCENARIO))
        rng = setup_rng(plan.seed, s, _FIG1)
        est_stats = estimator_statistics(stats)
        alloc = power.epa(precoding.CENTRALIZED, stats.serving)
        for _ in range(plan.fig1_blocks):
            real = draw_channel(stats, rng)
            est = mmse_estimate(uplink_training(real, stats, rng), real, stats, est_stats)
            pch = precoding.puncture(est, stats.serving)
            prec = power.normalize(precoding.rzf_direction(pch, precoding.CENTRALIZED, 0.0, regularize=False))
            snapshots.append(power.per_ap_power(prec, alloc, cfg.P_s, cfg.p_a) / cfg.P_s)
    p = np.array(snapshots)
    ref = 1.0 / cfg.L
    with (out / "fig1_power.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "rank", "ap", "p_norm"])
        for i, row in enumerate(p):
            order = np.argsort(-row, kind="stable")
            for r, l in enumerate(order):
                w.writerow([i, r, int(l), _fmt(row[l])])
    pmax = p.max(axis=1)
    summary = {
        "reference": ref,
        "snapshots": int(p.shape[0]),
        "frac_max_above_ref": float(np.mean(pmax > ref)),
        "frac_max_above_3ref": float(np.mean(pmax > 3 * ref)),
        "median_max_over_ref": float(np.median(pmax / ref)),
        "median_alpha_g": float(np.median(np.minimum(1, ref / pmax))),
        "sum_check_max_dev": float(np.max(np.abs(p.sum(axis=1) - 1))),
        "config": cfg.to_dict(),
    }
    (out / "fig1_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
