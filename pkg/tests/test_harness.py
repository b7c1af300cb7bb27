import math
import os

import numpy as np
import pytest

from riskmeta import cli, data, harness, learned, models, risk

SMALL = """
[experiment]
kind = label_noise
rho = ev
methods = {methods}
seeds = 0,1

[data]
n = 300
test_n = 120
classes = 3
dim = 4
noise = {noise}

[model]
hidden = 6

[trainer]
total_steps = 30
batch_size = 8
meta_val_batch = 16
inner_steps = 2
early_stopping = false
{extra}
"""


def _cfg(methods="ev,learned", noise=0.2, extra=""):
    return harness.build_config(harness.read_sections(SMALL.format(methods=methods, noise=noise, extra=extra)))


def _row(method, acc, risk_value, seed=0, status="ok"):
    return harness.ResultRow(method, "ev", seed, status, risk_value, acc, 10, 0.0, {"ev": risk_value})


# --------------------------------------------------------------------------- config

def test_config_parses_sections():
    cfg = _cfg()
    assert cfg.kind == "label_noise" and cfg.methods == ["ev", "learned"] and cfg.seeds == [0, 1]
    assert cfg.dataset.n == 300 and cfg.dataset.noise == 0.2 and cfg.hidden == [6]
    assert cfg.train_cfg.total_steps == 30 and cfg.train_cfg.early_stopping is False


def test_config_errors_enumerate_every_field():
    text = """
[experiment]
kind = sweep
rho = cvar:2
methods = ev,magic,oracle
seeds =
[data]
noise = 1.5
colour = red
[trainer]
total_steps = -1
momentum = fast
"""
    with pytest.raises(harness.ConfigError) as e:
        harness.build_config(harness.read_sections(text))
    joined = "\n".join(e.value.problems)
    for needle in ("experiment.kind", "experiment.rho", "magic", "oracle is only valid",
                   "experiment.seeds", "data.noise", "data.colour", "trainer.momentum", "total_steps"):
        assert needle in joined


def test_grid_expands_comma_lists():
    sec = harness.read_sections(SMALL.format(methods="ev,learned", noise="0.0,0.4", extra="max_lr = 0.1,0.05"))
    points = harness.expand_grid(sec)
    assert len(points) == 4
    tags = sorted(t for t, _ in points)
    assert tags[0] == "noise=0.0_max_lr=0.05"
    for _, s in points:
        assert s["experiment"]["methods"] == "ev,learned"
        harness.build_config(s)


# --------------------------------------------------------------------------- evaluation

def test_evaluate_all_orderings_and_determinism():
    ds = data.gen_blobs(0, 200, 3, 4, 1.0)
    spec = models.MlpSpec([4, 5, 3], init_seed=1)
    theta = models.init_params(spec)
    a = harness.evaluate_all(spec, theta, ds)
    b = harness.evaluate_all(spec, theta, ds)
    assert a == b
    assert a["icvar:0.1"] <= a["ev"] <= a["cvar:0.1"]
    c0 = harness.evaluate_all(spec, theta, ds, [risk.parse_risk("meanvar:0"), risk.parse_risk("ev")])
    assert c0["meanvar:0"] == c0["ev"]
    assert 0.0 <= a["accuracy"] <= 1.0


def test_build_data_splits_and_clean_fraction():
    cfg = _cfg(noise=0.5)
    view, test, clean = harness.build_data(cfg, 3)
    assert len(view.train) + len(view.val) + len(view.hyper_val) == 300
    assert len(test) == 120 and test.noise_mask is None
    assert 0.55 < clean < 0.85  # about 1 - 0.5 * (1 - 1/3)
    assert view.val.noise_mask.any()
    text = SMALL.format(methods="ev", noise=0.5, extra="").replace("noise = 0.5", "noise = 0.5\nclean_val = true")
    cfg_clean = harness.build_config(harness.read_sections(text))
    view2, _, _ = harness.build_data(cfg_clean, 3)
    assert len(view2.val) == 6  # floor(0.02 * 300)
    assert view2.val.noise_mask is None or not view2.val.noise_mask.any()


# --------------------------------------------------------------------------- summary

def test_summary_format_and_best_markers(tmp_path):
    rows = [_row("ev", 0.9125, 0.3), _row("ev", 0.9125, 0.3, seed=1),
            _row("learned", 0.90, 0.2), _row("learned", 0.92, 0.2, seed=1)]
    text = harness.compare_report(rows, tmp_path)
    assert "91.25 (0.000) *" in text  # identical values: std 0; ev has the best accuracy
    assert "0.2000 (0.0000) *" in text
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "method,metric,mean,std,n,best"
    assert "learned,test_accuracy,0.91,0.014142135623730963,2,0" in lines


def test_summary_ties_and_single_method(tmp_path):
    _, _, _, best = harness.summarize([_row("a", 0.5, 1.0)])
    assert best["test_accuracy"] == {"a"} and best["test_risk"] == {"a"}
    _, _, _, best = harness.summarize([_row("a", 0.5, 1.0), _row("b", 0.5, 1.0 + 1e-13)])
    assert best["test_risk"] == {"a", "b"}
    with pytest.raises(ValueError):
        harness.summarize([])


def test_failed_rows_are_excluded_from_summary():
    rows = [_row("ev", 0.8, 0.5), harness.ResultRow("ev", "ev", 1, "failed", math.nan, math.nan, 0, 0.0,
                                                    {"ev": math.nan})]
    _, _, table, _ = harness.summarize(rows)
    assert table["ev"]["test_accuracy"] == (0.8, 0.0, 1)


# --------------------------------------------------------------------------- runs

def test_run_is_byte_deterministic(tmp_path):
    cfg = _cfg(methods="ev,batch_rho_warm,learned,oracle")
    rows, rc = harness.run(cfg, str(tmp_path / "a"))
    assert rc == harness.EXIT_OK
    harness.run(cfg, str(tmp_path / "b"))
    names = ["results.csv", "phi_0.csv", "phi_1.csv", "train_learned_1.csv", "train_oracle_0.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert {(r.method, r.seed) for r in rows} == {(m, s) for m in cfg.methods for s in (0, 1)}
    snaps = learned.read_snapshots(tmp_path / "a" / "phi_0.csv")
    assert len(snaps) >= 7
    assert all(abs(s.weights.sum() - 1) < 1e-9 for s in snaps)
    assert snaps[0].entropy == pytest.approx(math.log(8), abs=1e-12)


def test_frozen_learned_matches_ev_test_risk(tmp_path):
    rows, _ = harness.run(_cfg(extra="freeze_phi = true"), str(tmp_path))
    ev = np.mean([r.test_risk for r in rows if r.method == "ev"])
    lr = np.mean([r.test_risk for r in rows if r.method == "learned"])
    assert abs(ev - lr) <= 1e-9 * abs(ev)


def test_oracle_uses_measured_clean_fraction(monkeypatch, tmp_path):
    seen = []
    real = harness.trainer.warm_start_then

    def spy(spec, theta, view, objective, cfg, monitor=None):
        seen.append((objective.alpha, cfg.warm_start_steps))
        return real(spec, theta, view, objective, cfg, monitor=monitor)

    monkeypatch.setattr(harness.trainer, "warm_start_then", spy)
    cfg = _cfg(methods="oracle")
    harness.run(cfg, str(tmp_path), seeds=[0])
    _, _, clean = harness.build_data(cfg, 0)
    assert seen == [(clean, 15)]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_seed_gives_partial_exit(tmp_path):
    rows, rc = harness.run(_cfg(methods="ev", extra="start_lr = 1e30\nmax_lr = 1e30"), str(tmp_path))
    assert rc == harness.EXIT_PARTIAL
    assert all(r.status == "failed" for r in rows)
    assert (tmp_path / "results.csv").exists()


# --------------------------------------------------------------------------- cli

def test_cli_exit_codes_and_report(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nkind = nope\n")
    assert cli.main(["run", str(bad)]) == harness.EXIT_CONFIG
    assert "experiment.kind" in capsys.readouterr().err
    good = tmp_path / "good.ini"
    good.write_text(SMALL.format(methods="ev", noise=0.0, extra=""))
    out = tmp_path / "out"
    assert cli.main(["run", str(good), "--out", str(out), "--seeds", "4"]) == 0
    assert "4" in (out / "results.csv").read_text().splitlines()[1].split(",")[2]
    (out / "summary.txt").unlink()
    assert cli.main(["report", str(out)]) == 0
    assert (out / "summary.txt").exists()
    assert cli.main(["report", str(tmp_path / "missing")]) == 1


def test_cli_grid_writes_one_directory_per_point(tmp_path):
    cfg = tmp_path / "g.ini"
    cfg.write_text(SMALL.format(methods="ev", noise="0.0,0.3", extra=""))
    assert cli.main(["run", str(cfg), "--grid", "--out", str(tmp_path / "o"), "--seeds", "0"]) == 0
    assert sorted(os.listdir(tmp_path / "o")) == ["noise=0.0", "noise=0.3"]
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "p")]) == harness.EXIT_CONFIG


def test_cli_check_passes(capsys):
    assert cli.main(["check"]) == 0
    assert capsys.readouterr().out.count("PASS") == 5
