import csv
import json
import os

import pytest
import yaml

from deepmartnet.cli import apply_overrides, build_parser, main
from deepmartnet.config import PRESETS, load_config, preset


def tiny(tmp_path, **train):
    cfg = {
        "name": "tiny",
        "problem": {"name": "pbe-cube", "params": {"d": 4}},
        "sde": {"M": 300, "N": 40, "dt": 0.01, "T": 0.4, "seed": 0},
        "network": {"layers": [4, 8, 1], "activations": ["tanh"], "seed": 0},
        "train": {"epochs": 6, "batch_size": 100, "metric_every": 2, "n_bdry": 50,
                  "weights": {"alpha_bdry": 1.0, "alpha_fk": 1.0}, "eval": {"n": 200}, **train},
        "output": str(tmp_path / "runs"),
        "cache_dir": str(tmp_path / "cache"),
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def tiny_eigen(tmp_path):
    cfg = {
        "name": "tiny-eig",
        "problem": {"name": "laplace-eig", "params": {"d": 3}},
        "sde": {"M": 300, "N": 20, "dt": 0.01, "T": 0.2, "seed": 0},
        "network": {"layers": [3, 6, 1], "activations": ["gelu_tanh"], "seed": 0, "eigen": {"kind": "scalar", "init": 1.0}},
        "train": {"epochs": 5, "batch_size": 100, "metric_every": 1, "n_bdry": 50,
                  "weights": {"alpha_bdry": 10.0, "alpha_normal": 1.0}, "eval": {"n": 200}},
    }
    path = tmp_path / "eig.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.mark.filterwarnings("ignore:.*censored")
def test_run_writes_layout(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(tiny(tmp_path)), "--out", str(out)]) == 0
    for rel in ("config.yaml", "metrics.csv", "final.ckpt", "summary.json", "curves/diagonal.csv", "curves/axis.csv",
                "curves/e_prime.csv", "curves/e_double_prime.csv", "curves/loss_history.csv", "curves/error_history.csv"):
        assert (out / rel).exists(), rel
    headline = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert "rel_l2" in headline


@pytest.mark.filterwarnings("ignore:.*censored")
def test_summary_config_echo_reparses(tmp_path):
    out = tmp_path / "run"
    main(["run", "--config", str(tiny(tmp_path)), "--out", str(out)])
    echo = json.loads((out / "summary.json").read_text())["config"]
    from deepmartnet.config import parse_config

    assert parse_config(echo) == load_config(out / "config.yaml")


@pytest.mark.filterwarnings("ignore:.*censored")
def test_curves_geometry(tmp_path):
    out = tmp_path / "run"
    main(["run", "--config", str(tiny(tmp_path)), "--out", str(out)])
    with open(out / "curves" / "diagonal.csv") as fh:
        rows = list(csv.DictReader(fh))
    xs = [float(r["x"]) for r in rows]
    # the unit diagonal reaches the cube corner at sqrt(d) * L
    assert xs[0] == pytest.approx(-2.0) and xs[-1] == pytest.approx(2.0)
    with open(out / "curves" / "axis.csv") as fh:
        mid = [r for r in csv.DictReader(fh) if float(r["x"]) == 0.0]
    assert float(mid[0]["u_true"]) == pytest.approx(4.0)


def test_eigen_run_exports_lambda_column(tmp_path):
    out = tmp_path / "eig"
    assert main(["run", "--config", str(tiny_eigen(tmp_path)), "--out", str(out)]) == 0
    with open(out / "metrics.csv") as fh:
        metric = [r["lambda"] for r in csv.DictReader(fh)]
    with open(out / "curves" / "lambda_history.csv") as fh:
        curve = [r["lambda"] for r in csv.DictReader(fh)]
    assert metric == curve and len(curve) == 5


@pytest.mark.filterwarnings("ignore:.*censored")
def test_deterministic_runs_identical(tmp_path):
    cfg = str(tiny(tmp_path))
    for name in ("a", "b"):
        assert main(["--deterministic", "run", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


@pytest.mark.filterwarnings("ignore:.*censored")
def test_sample_then_run_uses_cache(tmp_path, capsys):
    cfg = str(tiny(tmp_path))
    assert main(["sample", "--config", cfg]) == 0
    assert len(list((tmp_path / "cache").glob("ensemble-*.npz"))) == 1
    data = yaml.safe_load(open(cfg))
    data["cache"] = True
    with open(cfg, "w") as fh:
        yaml.safe_dump(data, fh)
    capsys.readouterr()
    main(["run", "--config", cfg, "--out", str(tmp_path / "r")])
    assert "loaded 300 paths" in capsys.readouterr().out


def test_seed_override_changes_all_streams():
    cfg = apply_overrides(preset("pbe-sinh-d10"), seed=7)
    assert (cfg.sde.seed, cfg.network.seed, cfg.train.seed_batch) == (7, 8, 9)


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    data = yaml.safe_load(tiny(tmp_path).read_text())
    data["sde"]["T"] = 1.0
    bad.write_text(yaml.safe_dump(data))
    assert main(["run", "--config", str(bad)]) == 2
    assert "sde.T" in capsys.readouterr().err


def test_needs_exactly_one_source(capsys):
    assert main(["run"]) == 2
    assert main(["run", "--preset", "pbe-cube-d20", "--config", "x.yaml"]) == 2


def test_export_incomplete_run(tmp_path, capsys):
    (tmp_path / "half").mkdir()
    assert main(["export-curves", str(tmp_path / "half")]) == 2
    assert "incomplete run" in capsys.readouterr().err


def test_unknown_suite_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["verify", "nonsense"])


def test_verify_grad_check_is_pure(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["verify", "grad-check"]) == 0
    assert "[PASS] grad-check" in capsys.readouterr().out
    assert os.listdir(tmp_path) == []


def test_verify_sampler(capsys):
    assert main(["verify", "sampler"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] sampler-variance" in out and "[PASS] sampler-exit" in out


def test_presets_listed_in_help():
    text = build_parser().format_help()
    assert "verify" in text and "export-curves" in text
    assert set(PRESETS) >= {"pbe-cube-d20", "pbe-ball-d100", "fp-eig-d200"}
