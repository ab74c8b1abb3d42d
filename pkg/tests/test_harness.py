import json

import numpy as np
import pytest

from cellfree import cli
from cellfree.harness import ExperimentPlan, fig1_mode, load_plan, parse_schemes, run, setup_rng
from cellfree.scenario import ConfigError, ScenarioConfig

SMALL = {"L": 12, "N_t": 2, "K": 4, "cluster_size": 4, "tau_p": 2, "radius_m": 400.0}


def small_plan(tmp_path, name="out", **kw):
    kw.setdefault("schemes", parse_schemes("MMSE/dist-MM,MMSE/cent-LN-MM,RZF/cent-PS-EPA"))
    return ExperimentPlan(scenario=ScenarioConfig(**SMALL), n_setups=3, n_blocks=20,
                          out_dir=str(tmp_path / name), **kw)


def test_parse_schemes_shorthands():
    assert len(parse_schemes("core")) == 15
    assert [s.label for s in parse_schemes("MMSE/core")][:2] == ["MMSE/dist-EPA", "MMSE/dist-MM"]
    assert len(parse_schemes(["MR/dist-MM", "MR/dist-MM"])) == 1
    with pytest.raises(ConfigError):
        parse_schemes("MMSE/dist-PS-MM")


def test_empty_plan_rejected(tmp_path):
    with pytest.raises(ConfigError, match="no runs requested"):
        run(small_plan(tmp_path, schemes=[]))


def test_load_plan_toml(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[scenario]\nK = 6\ncluster_size = 5\n\n[experiment]\n'
                   'schemes = ["MMSE/dist-MM", "RZF/cent-LN-EPA"]\nn_setups = 4\nseed = 9\n')
    plan = load_plan(cfg, n_blocks=30)
    assert plan.scenario.K == 6 and plan.n_setups == 4 and plan.n_blocks == 30
    assert plan.seed == 9 and plan.scenario.seed == 9
    assert [s.label for s in plan.schemes] == ["MMSE/dist-MM", "RZF/cent-LN-EPA"]
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nn_setup = 3\n")
    with pytest.raises(ConfigError):
        load_plan(bad)
    bad.write_text("[scenario]\ncluster_size = 99\n")
    with pytest.raises(ConfigError):
        load_plan(bad)


def test_run_outputs_and_determinism(tmp_path):
    a = run(small_plan(tmp_path, "a"))
    b = run(small_plan(tmp_path, "b"))
    assert a.exit_code == 0 and not a.warnings
    files = sorted(p.name for p in a.out_dir.iterdir())
    assert files == ["cdf.csv", "metadata.json", "se_MMSE_cent-LN-MM.csv", "se_MMSE_dist-MM.csv",
                     "se_RZF_cent-PS-EPA.csv", "summary.tsv"]
    for f in files:
        assert (a.out_dir / f).read_bytes() == (b.out_dir / f).read_bytes()
    meta = json.loads((a.out_dir / "metadata.json").read_text())
    assert meta["plan"]["scenario"]["K"] == 4 and meta["warning_count"] == 0
    rows = (a.out_dir / "se_MMSE_dist-MM.csv").read_text().splitlines()
    assert rows[0] == "scheme,setup,user,sinr,se" and len(rows) == 1 + 3 * 4
    summary = (a.out_dir / "summary.tsv").read_text().splitlines()
    assert summary[0].split("\t")[:3] == ["scheme", "samples", "likely95"]


def test_seed_changes_results(tmp_path):
    a = run(small_plan(tmp_path, "a"))
    b = run(small_plan(tmp_path, "b", seed=1))
    assert (a.out_dir / "se_MMSE_dist-MM.csv").read_bytes() != (b.out_dir / "se_MMSE_dist-MM.csv").read_bytes()


def test_stream_isolation(tmp_path):
    only = run(small_plan(tmp_path, "one", schemes=parse_schemes("MMSE/dist-MM")))
    more = run(small_plan(tmp_path, "many", schemes=parse_schemes("MR/cent-SP-EPA,MMSE/dist-MM,RZF/core")))
    name = "se_MMSE_dist-MM.csv"
    assert (only.out_dir / name).read_bytes() == (more.out_dir / name).read_bytes()


def test_worker_pool_matches_serial(tmp_path):
    a = run(small_plan(tmp_path, "serial"))
    b = run(small_plan(tmp_path, "pool", workers=2))
    for f in a.out_dir.iterdir():
        if f.suffix == ".csv":
            assert f.read_bytes() == (b.out_dir / f.name).read_bytes()


def test_numerical_failures_are_counted(tmp_path):
    # full clustering with 4 users on 2-antenna APs: local ZF is infeasible on every setup
    plan = small_plan(tmp_path, schemes=parse_schemes("ZF/dist-EPA,MR/dist-EPA"))
    plan.scenario = plan.scenario.replace(cluster_size=plan.scenario.L)
    res = run(plan)
    assert res.reports["ZF/dist-EPA"] is None and res.exit_code == 2
    assert len(res.warnings) == plan.n_setups
    assert all(w["scheme"] == "ZF/dist-EPA" for w in res.warnings)
    # the failing family does not disturb the others
    ref_plan = small_plan(tmp_path, "ref", schemes=parse_schemes("MR/dist-EPA"))
    ref_plan.scenario = plan.scenario
    ref = run(ref_plan)
    name = "se_MR_dist-EPA.csv"
    assert (res.out_dir / name).read_bytes() == (ref.out_dir / name).read_bytes()


def test_partial_failures_keep_exit_zero(tmp_path):
    plan = small_plan(tmp_path, schemes=parse_schemes("ZF/dist-EPA,MR/dist-EPA"))
    res = run(plan)
    zf_fail = sum(w["scheme"] == "ZF/dist-EPA" for w in res.warnings)
    assert all(w["scheme"] == "ZF/dist-EPA" for w in res.warnings)
    if 0 < zf_fail < plan.n_setups:
        assert res.exit_code == 0
    meta = json.loads((res.out_dir / "metadata.json").read_text())
    assert meta["warning_count"] == zf_fail


def test_setup_rng_streams_independent():
    a = setup_rng(0, 3, 0).standard_normal(4)
    assert not np.array_equal(a, setup_rng(0, 3, 1).standard_normal(4))
    assert not np.array_equal(a, setup_rng(0, 4, 0).standard_normal(4))
    np.testing.assert_array_equal(a, setup_rng(0, 3, 0).standard_normal(4))


def test_fig1_mode(tmp_path):
    plan = ExperimentPlan(n_setups=4, fig1_blocks=2, out_dir=str(tmp_path))
    summ = fig1_mode(plan)
    assert summ["reference"] == pytest.approx(0.02)
    assert summ["snapshots"] == 8
    assert summ["sum_check_max_dev"] < 1e-12
    rows = (tmp_path / "fig1_power.csv").read_text().splitlines()
    assert len(rows) == 1 + 8 * 50


def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "cli"
    rc = cli.main(["--setups", "2", "--blocks", "10", "--out", str(out), "--schemes", "MR/dist-EPA"])
    assert rc == 0 and (out / "summary.tsv").exists()
    assert cli.main(["--schemes", "", "--out", str(out)]) == 1
    assert "no runs requested" in capsys.readouterr().err
    assert cli.main(["--schemes", "MMSE/dist-LN-MM", "--out", str(out)]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.toml")]) == 1
