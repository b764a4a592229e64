import csv
import io
import json

import numpy as np
import pytest

from curefit import __version__
from curefit.analysis import select_covariates
from curefit.cli import main
from curefit.em import EMConfig, fit_em
from curefit.io import CohortTable, read_cohort_csv, write_cohort_csv
from curefit.exceptions import DataValidationError

from conftest import sim


def _write(path, data):
    with open(path, "w", newline="") as fh:
        write_cohort_csv(fh, data)
    return str(path)


def _load(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    data = sim(n=300, trunc=0.1, cens=0.2, seed=21)
    return _write(d / "cohort.csv", data), data


# ------------------------------------------------------------------ fit
def test_fit_outputs(cohort, tmp_path, medium_fit):
    path, data = cohort
    assert main(["fit", path, "--out", str(tmp_path)]) == 0
    doc = _load(tmp_path / "fit.json")
    _, fit = medium_fit
    assert doc["schema_version"] == 1 and doc["converged"] is True
    assert [r["term"] for r in doc["logistic"]] == ["intercept", "z1", "z2"]
    assert [r["estimate"] for r in doc["cox"]] == list(fit.params.beta)
    assert {w["covariate"] for w in doc["wald_2df"]} == {"z1", "z2"}
    for key in ("loglik_observed", "loglik_tilde", "iterations", "baseline_residual"):
        assert key in doc
    rows = list(csv.reader(open(tmp_path / "baseline.csv")))
    assert rows[0] == ["time", "hazard_jump", "cumulative_hazard"]
    assert len(rows) - 1 == data.K
    man = _load(tmp_path / "manifest.json")
    assert man["command"] == "fit" and man["version"] == __version__
    assert len(man["input_digest"]) == 64
    assert set(man["outputs"]) == {"fit.json", "baseline.csv"}


def test_fit_design_flags_and_config(cohort, tmp_path):
    path, _ = cohort
    cfg = tmp_path / "model.json"
    cfg.write_text(json.dumps({"cure": ["z1"], "latency": ["z2"], "tau": 20}))
    assert main(["fit", path, "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    doc = _load(tmp_path / "a" / "fit.json")
    assert [r["term"] for r in doc["logistic"]] == ["intercept", "z1"]
    assert [r["term"] for r in doc["cox"]] == ["z2"] and doc["wald_2df"] == []
    # explicit flags override the config file
    assert main(["fit", path, "--config", str(cfg), "--latency", "z1,z2",
                 "--out", str(tmp_path / "b")]) == 0
    assert len(_load(tmp_path / "b" / "fit.json")["cox"]) == 2


def test_fit_to_stdout(cohort, capsys):
    path, _ = cohort
    assert main(["fit", path, "--out", "-"]) == 0
    assert json.loads(capsys.readouterr().out)["converged"] is True


def test_not_converged_exit_code(cohort, tmp_path):
    path, _ = cohort
    assert main(["fit", path, "--max-iter", "1", "--out", str(tmp_path)]) == 3
    assert _load(tmp_path / "fit.json")["converged"] is False


def test_bad_row_reports_row_number(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("id,entry,time,status,x\n1,0,2,event,0.1\n2,3,3,censored,0.2\n")
    assert main(["fit", str(p), "--out", str(tmp_path)]) == 2
    assert "row 2" in capsys.readouterr().err


def test_tau_mismatch(cohort, tmp_path, capsys):
    path, _ = cohort
    assert main(["fit", path, "--tau", "18", "--out", str(tmp_path)]) == 2
    assert "tau" in capsys.readouterr().err


@pytest.mark.parametrize("text, fragment", [
    ("entry,time,status\n0,1,event\n", "missing required"),
    ("id,entry,time,status\n1,0,1,maybe\n", "row 1"),
    ("id,entry,time,status\n1,0,1,event\n1,0,2,event\n", "duplicate id"),
    ("id,entry,time,status,x\n1,0,1,event,nan\n", "non-finite"),
    ("id,entry,time,status\n", "no data rows"),
])
def test_reader_rejections(text, fragment):
    with pytest.raises(DataValidationError, match=fragment):
        read_cohort_csv(io.StringIO(text))


def test_missing_input_file(tmp_path):
    assert main(["fit", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2


def test_solver_error_exit_code(tmp_path):
    p = tmp_path / "const.csv"
    p.write_text("id,entry,time,status,x\n1,0,1,event,1\n2,0,2,event,1\n"
                 "3,0,20,cured,1\n4,0,3,censored,1\n")
    assert main(["fit", str(p), "--cure", "", "--latency", "x", "--out", str(tmp_path)]) == 4


# ------------------------------------------------------------- simulate
def test_simulate_single_trial_has_no_sd(tmp_path):
    out = tmp_path / "s"
    assert main(["simulate", "--n", "200", "--trunc", "0.1", "--cens", "0.2",
                 "--trials", "1", "--seed", "4", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "study.csv")))
    assert len(rows) == 5 and all(r["sample_sd"] == "" for r in rows)
    doc = _load(out / "study.json")
    assert all(p["sample_sd"] is None for p in doc["studies"][0]["params"])
    man = _load(out / "manifest.json")
    assert man["seeds"] == {"master_seed": 4}
    assert set(man["bounds"]) == {"n200_trunc10_cens20"}


def test_simulate_deterministic_and_env_seed(tmp_path, monkeypatch):
    args = ["simulate", "--n", "200", "--trials", "2", "--cens", "0.2"]
    assert main(args + ["--seed", "11", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("CUREFIT_SEED", "11")
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "study.csv").read_bytes()
    assert a == (tmp_path / "b" / "study.csv").read_bytes()
    monkeypatch.setenv("CUREFIT_SEED", "12")
    assert main(args + ["--out", str(tmp_path / "c")]) == 0
    assert a != (tmp_path / "c" / "study.csv").read_bytes()
    monkeypatch.setenv("CUREFIT_SEED", "eleven")
    assert main(args + ["--out", str(tmp_path / "d")]) == 2


def test_simulate_infeasible_truncation(tmp_path):
    assert main(["simulate", "--trunc", "0.3", "--trials", "1", "--out", str(tmp_path)]) == 5


def test_simulate_bad_truth(tmp_path):
    assert main(["simulate", "--truth", "1,2", "--trials", "1", "--out", str(tmp_path)]) == 2


def test_emit_data_round_trip(tmp_path):
    emit = tmp_path / "data"
    assert main(["simulate", "--n", "200", "--trunc", "0.1", "--cens", "0.2", "--trials",
                 "2", "--seed", "8", "--emit-data", str(emit),
                 "--out", str(tmp_path / "s")]) == 0
    path = emit / "n200_trunc10_cens20" / "trial_0002.csv"
    assert main(["fit", str(path), "--out", str(tmp_path / "f")]) == 0
    doc = _load(tmp_path / "f" / "fit.json")
    fit = fit_em(sim(n=200, trunc=0.1, cens=0.2, seed=8, trial=2))
    assert [r["estimate"] for r in doc["logistic"]] == list(fit.params.alpha)
    assert [r["estimate"] for r in doc["cox"]] == list(fit.params.beta)
    assert [r["se"] for r in doc["cox"]] == list(fit.se_beta)


# ------------------------------------------------------------------- km
def test_km_by_group(cohort, tmp_path):
    path, data = cohort
    assert main(["km", path, "--by", "z2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "km_z2_0.csv").exists() and (tmp_path / "km_z2_1.csv").exists()
    assert main(["km", path, "--out", str(tmp_path / "pooled")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "pooled" / "km.csv")))
    assert len(rows) == data.K and int(rows[0]["n_risk"]) <= data.n


def test_km_exclude_cured(cohort, tmp_path):
    path, data = cohort
    assert main(["km", path, "--exclude-cured", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "km.csv")))
    n_risk = max(int(r["n_risk"]) for r in rows)
    assert n_risk <= int((~data.is_cured).sum())


def test_km_rejects_continuous_group(cohort, tmp_path):
    path, _ = cohort
    assert main(["km", path, "--by", "z1", "--out", str(tmp_path)]) == 2
    assert main(["km", path, "--by", "nope", "--out", str(tmp_path)]) == 2


# -------------------------------------------------------------- compare
def test_compare(cohort, tmp_path):
    path, _ = cohort
    assert main(["compare", path, "--out", str(tmp_path)]) == 0
    doc = _load(tmp_path / "compare.json")
    assert set(doc) == {"schema_version", "cure_model", "naive_logistic", "naive_cox"}
    terms = [r["term"] for r in doc["naive_logistic"]["logistic"]]
    assert terms == [r["term"] for r in doc["cure_model"]["logistic"]]
    assert [r["term"] for r in doc["naive_cox"]["cox"]] == ["z1", "z2"]
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert {r["model"] for r in rows} == {"cure_model", "naive_logistic", "naive_cox"}


def test_compare_degenerate_equivalence(tmp_path):
    data = sim(n=400, trunc=0.0, cens=0.0, seed=12)
    path = _write(tmp_path / "d.csv", data)
    assert main(["compare", path, "--out", str(tmp_path)]) == 0
    doc = _load(tmp_path / "compare.json")
    cure = [r["estimate"] for r in doc["cure_model"]["logistic"]]
    naive = [r["estimate"] for r in doc["naive_logistic"]["logistic"]]
    assert np.allclose(cure, naive, atol=1e-6)


# --------------------------------------------------------------- select
def _table(n, seed, signal=True):
    rng = np.random.default_rng(seed)
    data = sim(n=n, trunc=0.1, cens=0.2, seed=seed)
    cov = {"z1": data.z2[:, 0], "noise": rng.normal(size=n)}
    if not signal:
        cov = {"noise": cov["noise"]}
    return CohortTable(data.ids, data.entry, data.time, data.status, cov)


def test_select_strong_covariate_survives(tmp_path):
    table = _table(600, 31)
    res = select_covariates(table, ["z1", "noise"])
    assert "z1" in res.selected
    screen = [t for t in res.trace if t["stage"] == "screen"]
    assert [t["covariate"] for t in screen] == ["z1", "noise"]


def test_select_force_and_tie_break(monkeypatch):
    import curefit.analysis as an
    table = _table(300, 32)
    monkeypatch.setattr(an, "_joint_p", lambda fit, data, col: 0.15)
    res = an.select_covariates(table, ["z1", "noise"])
    back = [t for t in res.trace if t["stage"] == "backward"]
    # equal p-values: the later column goes first
    assert back[0]["dropped"] == "noise" and back[1]["dropped"] == "z1"
    assert res.selected == [] and res.warnings
    res = an.select_covariates(table, ["noise"], force=["z1"])
    assert res.selected == ["z1"]


def test_select_cli(tmp_path):
    table = _table(400, 33)
    p = tmp_path / "t.csv"
    data = table.to_dataset([], [])
    cols = np.column_stack([table.covariates["z1"], table.covariates["noise"]])
    with open(p, "w", newline="") as fh:
        write_cohort_csv(fh, data, ["z1", "noise"], cols)
    assert main(["select", str(p), "--out", str(tmp_path)]) == 0
    doc = _load(tmp_path / "select.json")
    assert "z1" in doc["selected"] and doc["trace"]
    assert main(["select", str(p), "--candidates", "bogus", "--out", str(tmp_path)]) == 2


def test_noise_covariate_screened_out_mostly():
    dropped = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        data = sim(n=1000, trunc=0.1, cens=0.2, seed=1000 + seed)
        table = CohortTable(data.ids, data.entry, data.time, data.status,
                            {"noise": rng.normal(size=data.n)})
        d = table.to_dataset(["noise"], ["noise"])
        fit = fit_em(d, EMConfig())
        from curefit.variance import wald_test
        p = wald_test(fit, None, [1, 2])[2]
        dropped += p > 0.2
    assert dropped >= 75


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
