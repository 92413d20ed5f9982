import json

import numpy as np
import pandas as pd
import pytest

from homophily_lab import experiment
from homophily_lab.config import RunConfig
from homophily_lab.experiment import StageError, closed_form_oracle, evaluate_invariants, run_experiment, summarise
from homophily_lab.model import ModelParams


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig.from_dict({
        "population": {"n_schools": 3, "n_grades": 3, "students_per_network": 24, "male_share": 0.5},
        "d_range": [1, 2, 3],
        "n_seeds": 2,
        "oracle_reps": 20000,
    })


@pytest.fixture(scope="module")
def report(small_cfg):
    return run_experiment(small_cfg, modes=["learning", "preference"], threads=1)


def test_report_is_deterministic_and_thread_invariant(small_cfg, report):
    again = run_experiment(small_cfg, modes=["learning", "preference"], threads=2)
    assert again.to_json() == report.to_json()
    pd.testing.assert_frame_equal(again.curves, report.curves)


def test_provenance(small_cfg, report):
    prov = report.provenance
    assert prov["config_hash"] == small_cfg.config_hash()
    assert prov["seeds"] == [0, 1] and prov["modes"] == ["learning", "preference"]
    assert json.loads(report.to_json())["config"] == small_cfg.to_dict()


def test_curves_cover_every_spec(report):
    c = report.curves
    assert set(c["seed"]) == {0, 1}
    assert {"first_stage", "placebo", "proximity", "heterogeneity", "heterogeneity_expected"} <= set(c["spec"])
    assert set(c.loc[c["spec"] == "proximity", "mode"]) == {"learning", "preference"}
    assert set(c["d"][c["spec"] == "proximity"]) == {1, 2, 3}
    homophily = c[c["spec"].str.startswith("homophily:")]
    assert homophily["spec"].nunique() == 7


def test_oracles_pass_on_small_run(report):
    assert report.invariant("frequency_oracle")["passed"]
    assert report.invariant("closed_form_oracle")["passed"]
    assert len(report.closed_form_oracle) == 16  # 2 modes x 4 similarity levels x 2 distances


def test_write_outputs(report, tmp_path):
    out = report.write(tmp_path / "r")
    fig = pd.read_csv(out / "figure_proximity.csv")
    assert set(fig["outcome"]) == {"endline", "baseline"}
    het = pd.read_csv(out / "figure_heterogeneity.csv")
    assert set(het["variable"]) == {"D_p", "D_a", "D_s"}
    assert (out / "report.json").read_text() == report.to_json()


def test_zero_replications_only_first_stage(small_cfg):
    rep = run_experiment(small_cfg.override(replications=0, n_seeds=1), oracle=False)
    assert set(rep.curves["spec"]) == {"first_stage"}
    assert rep.frequency_oracle.empty and rep.closed_form_oracle.empty


def test_stage_error_names_stage_and_seed(small_cfg, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(experiment, "simulate_network", broken)
    with pytest.raises(StageError, match=r"stage 'simulate' failed \(seed 0\): boom") as info:
        run_experiment(small_cfg.override(n_seeds=1), oracle=False)
    assert info.value.stage == "simulate" and info.value.seed == 0


def test_summarise_shares():
    curves = pd.DataFrame({
        "mode": "m", "spec": "s", "d": 1, "term": "x", "seed": [0, 1, 2, 3],
        "estimate": [3.0, 1.0, -3.0, 2.5], "cluster_se": [1.0, 1.0, 1.0, 0.0], "n": 10, "n_clusters": 5,
    })
    row = summarise(curves).iloc[0]
    assert row["n_seeds"] == 4 and row["mean"] == pytest.approx(0.875)
    # zero SE gives an undefined t and counts as not significant
    assert row["share_pos_sig"] == 0.25 and row["share_neg_sig"] == 0.25
    assert summarise(curves.iloc[:0]).empty


def test_invariants_detect_wrong_signs():
    curves = pd.DataFrame({
        "mode": "learning", "spec": "proximity", "d": [1, 2], "term": ["l_1", "l_2"], "seed": 0,
        "estimate": [0.01, 0.02], "cluster_se": 0.001, "n": 10, "n_clusters": 5,
    })
    checks = {c["name"]: c for c in evaluate_invariants(summarise(curves), curves, None, None, [1, 2], ["learning"])}
    assert checks["learning:gamma_positive"]["passed"]
    assert not checks["learning:gamma_declining"]["passed"]


def test_closed_form_oracle_preference_mode():
    table = closed_form_oracle(ModelParams(), "preference", 50_000, seed=1)
    assert table["pass"].all()
    # preference mode holds lambda fixed so only mu moves the link rate
    near = table[table["distance"] == "near"].sort_values("s")["closed_form"].to_numpy()
    assert np.allclose(near / near[-1], np.array([0.6, 0.75, 0.9, 1.0]))
