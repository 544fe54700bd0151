import json

import numpy as np
import pytest

import loiv
from loiv.cli import main, read_config
from loiv.simulate import make_design


def _write_labeled_csv(path, y, x, labels):
    lines = ["y,x,z"]
    lines += [f"{y[i]:.17g},{x[i]:.17g},{labels[i]}" for i in range(len(y))]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def _design_csv(tmp_path, e_tfs=8.0, seed=4, rep=0):
    d = make_design("binary_judge", 16, 5, e_tfs=e_tfs, e_tar=0.0, beta=0.4, seed=seed)
    ds = loiv.draw_dataset(d, rep)
    return _write_labeled_csv(tmp_path / "data.csv", ds.y, ds.x, ds.z_labels)


def test_estimate_outputs_match_direct_computation(tmp_path, capsys):
    path = _design_csv(tmp_path)
    assert main(["estimate", path]) == 0
    report = json.loads(capsys.readouterr().out)
    ds = loiv.Dataset.from_csv(path)
    w = loiv.build_weights(ds, "jive")
    assert report["beta_hat"] == pytest.approx(loiv.jive_estimate(w, ds.y, ds.x).beta, rel=1e-10)
    assert report["n"] == ds.n and report["k"] == ds.k
    assert set(report["first_stage"]) == {"s_fs", "fs_l3o", "fs_mo", "fs_cms", "fs_ms"}
    # --out writes exactly what stdout carries
    out = tmp_path / "report.json"
    assert main(["estimate", path, "--out", str(out)]) == 0
    capsys.readouterr()
    assert json.loads(out.read_text(encoding="utf-8")) == report


def test_test_subcommand_reports(tmp_path, capsys):
    path = _design_csv(tmp_path)
    rc = main(["test", path, "--beta0", "0.4", "--procedures", "l3o,tsls,mo"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    tests = report["tests"]
    assert set(tests) == {"l3o", "tsls", "mo"}
    for entry in tests.values():
        assert entry["status"] == "ok"
        assert entry["reject"] in (True, False)
        assert 0.0 <= entry["p_value"] <= 1.0
    assert tests["l3o"]["beta0"] == 0.4


def test_cs_json_and_text(tmp_path, capsys):
    path = _design_csv(tmp_path)
    assert main(["cs", path, "--procedures", "l3o,ms", "--grid", "201"]) == 0
    report = json.loads(capsys.readouterr().out)
    l3o = report["sets"]["l3o"]
    assert l3o["shape"] == "interval"
    assert l3o["lower"] < l3o["upper"]
    assert report["sets"]["ms"]["shape"] in ("interval", "two_rays", "whole_line", "empty")
    assert main(["cs", path, "--format", "text"]) == 0
    text = capsys.readouterr().out
    head, row = text.splitlines()[:2]
    for col in ("LB", "UB", "Estimate", "CIlength"):
        assert col in head
    assert row.startswith("L3O")
    assert f"{l3o['lower']:.4f}" in row and f"{l3o['upper']:.4f}" in row


def test_cs_text_marks_empty_set(tmp_path, capsys):
    # a pure-noise draw whose inverted set is empty
    d = make_design("binary_judge", 16, 5, e_tfs=0.0, e_tar=0.0, beta=0.0, seed=5)
    ds = loiv.draw_dataset(d, 0)
    w = loiv.build_weights(ds, "jive")
    assert loiv.invert_lm_cs(w, ds.y, ds.x).shape == "empty"
    path = _write_labeled_csv(tmp_path / "weak.csv", ds.y, ds.x, ds.z_labels)
    assert main(["cs", path, "--format", "text"]) == 0
    assert "∅" in capsys.readouterr().out


def test_diagnose_reports_feasibility(tmp_path, capsys):
    path = _design_csv(tmp_path)
    assert main(["diagnose", path]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["l3o_feasible"] is True
    assert report["n_singular_triples"] == 0
    assert report["leverage"]["max"] < 1.0


def test_exit_code_2_on_schema_violation(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,q\n1.0,2.0\n", encoding="utf-8")
    assert main(["estimate", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_exit_code_3_on_rank_deficient(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 12
    y, x, z1 = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
    lines = ["y,x,z1,z2"]
    lines += [f"{y[i]:.17g},{x[i]:.17g},{z1[i]:.17g},{z1[i]:.17g}" for i in range(n)]
    path = tmp_path / "dup.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert main(["estimate", str(path)]) == 3
    assert "error:" in capsys.readouterr().err


def test_exit_code_4_on_infeasible_design(tmp_path, capsys):
    cfg = tmp_path / "design.cfg"
    cfg.write_text("family=binary_judge\nK=18\nc=5\ne_tfs=2.0\n", encoding="utf-8")
    assert main(["simulate", str(cfg), "--reps", "4"]) == 4
    assert "multiple of 4" in capsys.readouterr().err


def test_exit_code_5_on_singular_triples(tmp_path, capsys):
    rng = np.random.default_rng(1)
    labels = [0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2]
    y, x = rng.standard_normal(12), rng.standard_normal(12)
    path = _write_labeled_csv(tmp_path / "thin.csv", y, x, labels)
    assert main(["test", str(path)]) == 5
    assert "--conservative" in capsys.readouterr().err
    assert main(["test", str(path), "--conservative"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["tests"]["l3o"]["status"] in ("ok", "negative_variance")


def test_exit_code_1_on_unsupported_procedure(tmp_path, capsys):
    path = _design_csv(tmp_path)
    assert main(["test", path, "--procedures", "lmorc"]) == 1
    assert main(["test", path, "--procedures", "bogus"]) == 1
    capsys.readouterr()


def test_read_config_types(tmp_path):
    cfg = tmp_path / "design.cfg"
    cfg.write_text(
        "# headline design\n"
        "family = binary_judge\n"
        "K=8\nc=5\n\n"
        "e_tfs=4.0\nn_reps=48\nseed=3\nsigma_ev=0.25\n",
        encoding="utf-8",
    )
    config = read_config(cfg)
    assert config["family"] == "binary_judge"
    assert config["K"] == 8 and isinstance(config["K"], int)
    assert config["n_reps"] == 48 and config["seed"] == 3
    assert config["e_tfs"] == 4.0
    assert config["sigma_ev"] == 0.25
    bad = tmp_path / "bad.cfg"
    bad.write_text("family binary_judge\n", encoding="utf-8")
    with pytest.raises(loiv.SchemaError):
        read_config(bad)


def test_simulate_csv_is_reproducible(tmp_path, capsys):
    cfg = tmp_path / "design.cfg"
    cfg.write_text(
        "family=binary_judge\nK=8\nc=5\ne_tfs=4.0\nn_reps=48\nseed=3\n",
        encoding="utf-8",
    )
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    for out in (first, second):
        assert main(["simulate", str(cfg), "--procedures", "l3o,ms",
                     "--out", str(out)]) == 0
    capsys.readouterr()
    assert first.read_bytes() == second.read_bytes()
    lines = first.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ("family,K,c,beta,e_tfs,e_tar,beta0,procedure,"
                        "rejection_rate,valid_count,undefined_count")
    assert len(lines) == 3
    for line in lines[1:]:
        fields = line.split(",")
        assert fields[0] == "binary_judge" and fields[1] == "8"
        assert int(fields[9]) + int(fields[10]) == 48


def test_simulate_json_structure(tmp_path, capsys):
    cfg = tmp_path / "design.cfg"
    cfg.write_text(
        "family=binary_judge\nK=8\nc=5\ne_tfs=4.0\nn_reps=16\nseed=3\n",
        encoding="utf-8",
    )
    assert main(["simulate", str(cfg), "--format", "json"]) == 0
    report = json.loads(capsys.readouterr().out)
    (res,) = report["results"]
    assert res["design"]["K"] == 8
    cell = res["cells"]["L3O"]
    assert cell["valid_count"] + cell["undefined_count"] == 16
    assert np.isfinite(res["mean_t_fs"])


def test_simulate_argument_conflicts(tmp_path, capsys):
    assert main(["simulate"]) == 2
    cfg = tmp_path / "design.cfg"
    cfg.write_text("family=binary_judge\nK=8\nc=5\n", encoding="utf-8")
    assert main(["simulate", str(cfg), "--table1"]) == 2
    capsys.readouterr()
