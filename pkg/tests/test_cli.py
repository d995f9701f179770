from __future__ import annotations

import csv
import filecmp
import json

import numpy as np
import pytest

from firesale_lab import cli
from firesale_lab.config import load_config
from firesale_lab.errors import ConfigError, NoFixedPoint
from firesale_lab.synth import GeneratorSpec, gen_economy

FAST = {"welfare": {"draws": 200, "oracle_draws": 200}}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_unknown_keys_rejected_with_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, {"generator": {"n_asets": 3}})
    assert cli.run(["solve-middle", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["kind"] == "config_error" and "n_asets" in err["message"]
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, {"train": {"seed": 1}}, "b.json"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, {"mode": "levy"}, "c.json"))
    assert cli.run(["solve-middle", "--config", str(tmp_path / "missing.json")]) == 2


def test_seed_override_changes_hash(tmp_path):
    path = write(tmp_path, FAST)
    a, b = load_config(path), load_config(path, seed=5)
    assert b.seed == 5 and a.config_hash() != b.config_hash()
    assert load_config(path).config_hash() == a.config_hash()


def test_every_output_is_stamped(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, FAST)
    assert cli.run(["solve-middle", "--config", cfg, "--out", str(out)]) == 0
    h = load_config(cfg).config_hash()
    for f in out.rglob("*"):
        if f.suffix == ".csv":
            r = rows(f)
            assert r and all(x["config_hash"] == h and x["seed"] == "0" for x in r)
        elif f.suffix == ".json":
            doc = json.loads(f.read_text())
            assert doc["config_hash"] == h and doc["seed"] == 0


def test_zero_gamma_gives_zero_tau(tmp_path):
    params, prior, q = gen_economy(GeneratorSpec(seed=7))
    doc = params.to_dict()
    doc["Gamma"] = np.zeros((2, 2)).tolist()
    cfg = write(tmp_path, {**FAST, "economy": doc, "prior": prior.to_dict(), "q": q.tolist()})
    out = tmp_path / "o"
    assert cli.run(["optimal-tau", "--config", cfg, "--out", str(out)]) == 0
    assert all(float(r["tau"]) == 0.0 for r in rows(out / "policy" / "tau.csv"))


def test_explicit_economy_needs_prior(tmp_path):
    params, _, _ = gen_economy(GeneratorSpec(seed=7))
    cfg = write(tmp_path, {"economy": params.to_dict()})
    assert cli.run(["solve-middle", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_sweep_over_noise_scale_is_monotone(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, {**FAST, "sweep": {"parameter": "noise_scale", "values": [0.1, 0.5, 1, 5, 25]}})
    assert cli.run(["sweep", "--config", cfg, "--out", str(out)]) == 0
    gains = [float(r["precision_gain"]) for r in rows(out / "reports" / "sweep.csv")]
    assert all(a > b for a, b in zip(gains, gains[1:]))
    assert json.loads((out / "reports" / "sweep.json").read_text())["precision_gain_monotone"]


def test_ex_ante_modes_and_model_choice(tmp_path):
    cfg = write(tmp_path, FAST)
    for mode in ("tax", "subsidy"):
        out = tmp_path / mode
        assert cli.run(["ex-ante", "--config", cfg, "--out", str(out), "--mode", mode]) == 0
        doc = json.loads((out / "ex_ante" / "summary.json").read_text())
        assert doc["mode"] == mode and doc["residual"] <= 1e-8
    qt = [float(r["q_star"]) for r in rows(tmp_path / "tax" / "ex_ante" / "wedges.csv")]
    qs = [float(r["q_star"]) for r in rows(tmp_path / "subsidy" / "ex_ante" / "wedges.csv")]
    assert np.allclose(qt, qs, atol=1e-8)
    out = tmp_path / "mc"
    assert cli.run(["model-choice", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "model_choice" / "summary.json").read_text())
    assert doc["lyapunov_residual"] <= 1e-10
    assert sum(r["chosen"] == "1" for r in rows(out / "model_choice" / "selection.csv")) == 1


def test_evaluate_without_checkpoint_is_a_config_error(tmp_path):
    assert cli.run(["evaluate", "--config", write(tmp_path, FAST), "--out", str(tmp_path / "o")]) == 2


def test_non_convergence_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise NoFixedPoint("pattern iteration cycled")

    monkeypatch.setattr(cli, "ex_ante_wedges", boom)
    assert cli.run(["ex-ante", "--config", write(tmp_path, FAST), "--out", str(tmp_path / "o")]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "NoFixedPoint"


def test_fast_commands_byte_identical(tmp_path):
    cfg = write(tmp_path, FAST)
    for cmd in ("solve-middle", "optimal-tau", "welfare", "model-choice", "ex-ante", "gen-data", "sweep"):
        a, b = tmp_path / f"{cmd}-a", tmp_path / f"{cmd}-b"
        assert cli.run([cmd, "--config", cfg, "--out", str(a)]) == 0
        assert cli.run([cmd, "--config", cfg, "--out", str(b)]) == 0
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
        assert not mismatch and not errors, (cmd, mismatch, errors)


def test_train_evaluate_round_trip(tmp_path):
    doc = {
        **FAST,
        "generator": {"n_investors": 40, "n_panel_assets": 20, "n_periods": 6, "holdings_density": 0.2, "crisis_periods": [5]},
        "train": {"max_epochs": 3},
        "gnn": {"d_h": 8, "d_e": 8, "L": 1, "heads": 2, "d_c": 4},
    }
    cfg, out = write(tmp_path, doc), tmp_path / "o"
    assert cli.run(["train", "--config", cfg, "--out", str(out)]) == 0
    assert cli.run(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    trained = {(r["period"], r["slice"], r["task"]): r["correlation"] for r in rows(out / "gnn" / "metrics.csv")}
    again = {(r["period"], r["slice"], r["task"]): r["correlation"] for r in rows(out / "gnn" / "evaluation.csv")}
    assert trained == again
    manifest = json.loads((out / "gnn" / "checkpoint" / "manifest.json").read_text())
    assert manifest["meta"]["config_hash"] == load_config(cfg).config_hash()


def test_gen_data_panel_reads_back(tmp_path):
    from firesale_lab.graph_net import read_panel_csv
    from firesale_lab.synth import gen_panel

    doc = {**FAST, "generator": {"n_investors": 30, "n_panel_assets": 15, "n_periods": 4, "holdings_density": 0.2, "crisis_periods": [3]}}
    cfg, out = write(tmp_path, doc), tmp_path / "o"
    assert cli.run(["gen-data", "--config", cfg, "--out", str(out)]) == 0
    graphs = read_panel_csv(out / "gnn" / "panel")
    ref = gen_panel(load_config(cfg).generator_spec())
    assert len(graphs) == len(ref.graphs)
    for g, r in zip(graphs, ref.graphs):
        assert np.array_equal(g.weight, r.weight) and np.array_equal(g.numeric, r.numeric)
        assert np.array_equal(g.categorical, r.categorical)
