import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from robinhum.cli import (ConfigInvalid, ExperimentConfig, config_from_dict, config_to_dict, emit_plotdata,
                          load_config, main, plotdata_csv, run)

BASE = {
    "kind": "control-forward",
    "seed": 0,
    "geometry": {"M": 12, "g0": [0.25, 0.5], "g1": [0.3, 0.45]},
    "noise": {"L": 3, "T": 1.0},
    "coefficients": {"a1": 1.0, "a2": 0.5, "B1": 0.1, "B2": 0.1, "beta": 0.5},
    "hum": {"eps": [0.1, 0.01], "cg_tol": 1e-10, "max_iters": 500},
}


def _write(tmp_path, d, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return p


def _csv(tmp_path, out):
    (f,) = list((tmp_path / out).glob("*.csv"))
    return f.read_bytes()


def test_zero_datum_record(tmp_path, capsys):
    p = _write(tmp_path, BASE | {"data": {"kind": "zero"}})
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    (f,) = (tmp_path / "o").glob("*.json")
    rec = json.loads(f.read_text())
    assert rec["status"] == "ok"
    assert all(r["cost"] == 0 for r in rec["report"]["runs"])


def test_deterministic_csv(tmp_path):
    d = BASE | {"kind": "control-backward", "data": {"kind": "sin"}}
    p = _write(tmp_path, d)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "b")]) == 0
    assert _csv(tmp_path, "a") == _csv(tmp_path, "b")


def test_oracle_check_kind(tmp_path):
    d = BASE | {"kind": "oracle-check", "geometry": {"M": 4, "g0": [0.25, 0.5], "g1": [0.3, 0.45]},
                "noise": {"L": 2, "T": 4.0}, "hum": {"eps": [0.05], "cg_tol": 1e-13, "max_iters": 2000}}
    cfg = config_from_dict(d)
    rec = run(cfg, str(tmp_path / "o"))
    assert rec["report"]["max_control_diff"] <= 1e-8
    assert rec["report"]["max_oracle_residual"] <= 1e-12
    assert [r["variant"] for r in rec["rows"]] == ["forward", "backward", "weighted-A", "weighted-B"]


def test_config_errors_exit_2(tmp_path, capsys):
    bad = BASE | {"noise": {"L": 0, "T": -1.0}, "extra": 1}
    p = _write(tmp_path, bad)
    assert main(["run", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "noise.L" in err and "noise.T" in err and "extra" in err


def test_config_errors_fields():
    with pytest.raises(ConfigInvalid) as ex:
        config_from_dict(BASE | {"geometry": {"M": 12, "g0": [0.25, 0.5], "g1": [0.1, 0.9]},
                                 "hum": {"eps": [], "cg_tol": 0}})
    assert {"geometry", "hum.eps", "hum.cg_tol"} <= set(ex.value.errors)
    with pytest.raises(ConfigInvalid) as ex:
        config_from_dict(BASE | {"kind": "observability-forward", "data": {"n_samples": 5}})
    assert "data.n_samples" in ex.value.errors
    with pytest.raises(ConfigInvalid):
        config_from_dict(BASE | {"coefficients": {"a": -1.0}})


def test_solver_error_exit_3(tmp_path):
    d = BASE | {"hum": {"eps": [1e-6], "cg_tol": 1e-14, "max_iters": 1}}
    p = _write(tmp_path, d)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    (f,) = (tmp_path / "o").glob("*.json")
    assert json.loads(f.read_text())["status"] == "failed"


def test_overrides(tmp_path):
    p = _write(tmp_path, BASE)
    cfg = load_config(p, ["noise.L=5", "hum.eps=[1e-3]", "sweep.name=a1", "sweep.values=[0, 1]"])
    assert cfg.noise.L == 5 and cfg.hum.eps == (1e-3,) and cfg.sweep.values == (0, 1)


def test_yaml_exponent_floats(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("kind: control-forward\nhum: {eps: [1e-2], cg_tol: 1e-9}\n")
    cfg = load_config(p)
    assert cfg.hum.cg_tol == 1e-9 and cfg.hum.eps == (0.01,)


def test_table_coefficient_config(tmp_path):
    d = BASE | {"coefficients": {"a1": {"times": [0, 1], "xs": [0, 1], "values": [[0, 1], [1, 2]]}}}
    cfg = config_from_dict(d)
    assert config_from_dict(config_to_dict(cfg)) == cfg
    rec = run(cfg, str(tmp_path / "o"))
    assert rec["status"] == "ok"


@given(M=st.integers(8, 64), L=st.integers(1, 8), T=st.floats(0.1, 5), seed=st.integers(0, 1000),
       eps=st.lists(st.floats(1e-6, 1), min_size=1, max_size=4),
       kind=st.sampled_from(["control-forward", "carleman-backward", "ito-check"]),
       beta=st.one_of(st.floats(-2, 2), st.tuples(st.floats(-2, 2), st.floats(-2, 2)).map(list)))
@settings(max_examples=40, deadline=None)
def test_config_round_trip(M, L, T, seed, eps, kind, beta):
    d = {"kind": kind, "seed": seed, "geometry": {"M": M}, "noise": {"L": L, "T": T},
         "coefficients": {"beta": beta}, "hum": {"eps": eps}}
    try:
        cfg = config_from_dict(d)
    except ConfigInvalid:
        return
    echo = json.loads(json.dumps(config_to_dict(cfg)))
    assert config_from_dict(echo) == cfg
    assert config_from_dict(yaml.safe_load(yaml.safe_dump(echo))) == cfg


def test_plotdata_empty(tmp_path, capsys):
    assert main(["plot-data", "--records", str(tmp_path / "*.json"), "--kind", "eps"]) == 0
    assert capsys.readouterr().out.strip() == "experiment_id,x_name,x_value,y_name,y_value"
    assert plotdata_csv([]) == "experiment_id,x_name,x_value,y_name,y_value\r\n"


def test_plotdata_eps_rows(tmp_path):
    d = BASE | {"hum": {"eps": [1e-1, 1e-2, 1e-3, 1e-4], "cg_tol": 1e-8, "max_iters": 2000}}
    rec = run(config_from_dict(d), str(tmp_path / "o"))
    rows = emit_plotdata([json.loads(json.dumps(rec, default=str))], "eps")
    assert len(rows) == 4
    assert [r[2] for r in rows] == [1e-1, 1e-2, 1e-3, 1e-4]
    out = tmp_path / "t.csv"
    assert main(["plot-data", "--records", str(tmp_path / "o" / "*.json"), "--kind", "eps",
                 "--out", str(out)]) == 0
    assert len(out.read_text().strip().splitlines()) == 5


def test_plotdata_lambda_order(tmp_path):
    d = BASE | {"kind": "carleman-backward", "data": {"n_samples": 3}}
    rec = run(config_from_dict(d), str(tmp_path / "o"))
    rows = emit_plotdata([rec], "lambda")
    assert [r[2] for r in rows] == rec["report"]["lambda_grid"]
    assert np.all(np.diff([r[2] for r in rows]) > 0)


def test_csv_columns_are_report_fields(tmp_path):
    rec = run(config_from_dict(BASE), str(tmp_path / "o"))
    (f,) = (tmp_path / "o").glob("*.csv")
    header = f.read_text().splitlines()[0].split(",")
    assert header == list(rec["report"]["runs"][0].keys())
    assert "wall_time" not in header


@pytest.mark.parametrize("kind", ["carleman-forward", "observability-forward", "observability-backward",
                                  "ito-check", "weighted-hum-A", "weighted-hum-B"])
def test_all_kinds_run(tmp_path, kind):
    d = BASE | {"kind": kind, "data": {"n_samples": 10 if kind.startswith("obs") else 2},
                "noise": {"L": 3, "T": 4.0 if kind.startswith("weighted") else 1.0}}
    rec = run(config_from_dict(d), str(tmp_path / "o"))
    assert rec["status"] == "ok" and rec["rows"]


def test_default_config_valid():
    assert config_from_dict({}) == ExperimentConfig()
