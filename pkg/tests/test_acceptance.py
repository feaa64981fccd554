"""Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned below.

The training criteria (4-8) run the built-in presets end to end and take tens of
minutes each on one core; select the quick ones with ``-m "not slow"``.
"""

import json
import math
import time

import pytest

from deepmartnet.cli import main
from deepmartnet.verify import (
    fk_pbe_ball,
    fk_sign_check,
    gradient_check_random,
    martingale_batch_slope,
    martingale_oracle,
    sampler_statistics,
)

GRAD_TOL = 1e-6
Z_MAX = 4.0
SLOPE, SLOPE_TOL = -1.0, 0.3
LAPLACE_LAMBDA_TOL = 0.05
FP_LAMBDA_TOL = 5e-2
FP_L2_TOL = 1e-1
PBE_L2_TOL = 0.1
BOUNDARY_TOL = 1e-12
MINUTES = 60.0


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return report


def run_preset(name, out, *extra):
    t0 = time.perf_counter()
    code = main(["--deterministic", "run", "--preset", name, "--out", str(out), *extra])
    secs = time.perf_counter() - t0
    assert code == 0, f"{name} exited with {code}"
    return json.loads((out / "summary.json").read_text()), secs


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    worst = gradient_check_random(200, seed=0)
    secs = time.perf_counter() - t0
    verdict(1, worst <= GRAD_TOL and secs <= 1 * MINUTES, f"worst relative error {worst:.2e} (<= {GRAD_TOL:g}) in {secs:.0f}s (<= 60s)")


def test_criterion_2_martingale_oracle(verdict):
    t0 = time.perf_counter()
    r = martingale_oracle(d=5, M=100_000, N=300, dt=0.01, seed=0)
    s = martingale_batch_slope(r["problem"], r["ensemble"], sizes=(250, 1000, 4000))
    secs = time.perf_counter() - t0
    ok = r["max_abs_z"] <= Z_MAX and abs(s["slope"] - SLOPE) <= SLOPE_TOL and secs <= 5 * MINUTES
    verdict(2, ok, f"max |z| {r['max_abs_z']:.2f} over {r['windows']} indices, slope {s['slope']:.3f}, {secs:.0f}s")


def test_criterion_3_feynman_kac(verdict):
    t0 = time.perf_counter()
    ball = fk_pbe_ball(d=10, M=100_000)
    line = fk_sign_check(M=100_000)
    secs = time.perf_counter() - t0
    ok = abs(ball["z"]) <= Z_MAX and abs(line["z"]) <= Z_MAX and secs <= 5 * MINUTES
    verdict(
        3, ok,
        f"ball {ball['estimate']:.4f}+-{ball['stderr']:.4f} vs {ball['exact']} (z {ball['z']:+.2f}); "
        f"1-d {line['estimate']:.4f}+-{line['stderr']:.4f} vs {line['exact']} (z {line['z']:+.2f}, "
        f"opposite sign z {line['z_opposite']:+.1f}); {secs:.0f}s",
    )


@pytest.mark.slow
def test_criterion_4_laplace_eigenvalue(verdict, tmp_path):
    s, secs = run_preset("laplace-eig-d10", tmp_path / "run")
    ok = s["lambda_rel_err"] <= LAPLACE_LAMBDA_TOL and secs <= 30 * MINUTES
    verdict(4, ok, f"lambda {s['lambda_headline']:.3f} vs {s['lambda_exact']:.3f}, rel err {s['lambda_rel_err']:.3e}, {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_5_fokker_planck(verdict, tmp_path):
    s5, secs = run_preset("fp-eig-d5", tmp_path / "d5")
    s20, secs20 = run_preset("fp-eig-d20", tmp_path / "d20")
    ok = (s5["lambda_rel_err"] <= FP_LAMBDA_TOL and s5["rel_l2"] <= FP_L2_TOL and secs <= 40 * MINUTES
          and s20["lambda_rel_err"] <= FP_LAMBDA_TOL)
    verdict(
        5, ok,
        f"d=5 lambda rel err {s5['lambda_rel_err']:.3e}, diagonal L2 {s5['rel_l2']:.3e}, {secs / 60:.1f} min; "
        f"d=20 lambda rel err {s20['lambda_rel_err']:.3e}, {secs20 / 60:.1f} min",
    )


@pytest.fixture(scope="module")
def pbe_runs(tmp_path_factory):
    """Criterion 6's run, computed once and shared with criterion 8."""
    return {"root": tmp_path_factory.mktemp("pbe")}


@pytest.mark.slow
def test_criterion_6_linear_pbe(verdict, pbe_runs):
    s, secs = run_preset("pbe-cube-d20", pbe_runs["root"] / "first")
    pbe_runs["first"] = pbe_runs["root"] / "first" / "metrics.csv"
    ok = s["rel_l2"] <= PBE_L2_TOL and secs <= 15 * MINUTES
    verdict(6, ok, f"relative L2 {s['rel_l2']:.3e}, {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_sinh_pbe(verdict, tmp_path):
    s, secs = run_preset("pbe-sinh-d10", tmp_path / "run")
    ok = s["rel_l2"] <= PBE_L2_TOL and s["epochs"] == 3000 and secs <= 30 * MINUTES
    verdict(7, ok, f"relative L2 {s['rel_l2']:.3e} after {s['epochs']} epochs, {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_determinism(verdict, pbe_runs):
    first = pbe_runs.get("first")
    if first is None:
        run_preset("pbe-cube-d20", pbe_runs["root"] / "first")
        first = pbe_runs["root"] / "first" / "metrics.csv"
    run_preset("pbe-cube-d20", pbe_runs["root"] / "second")
    a, b = first.read_bytes(), (pbe_runs["root"] / "second" / "metrics.csv").read_bytes()
    verdict(8, a == b, f"metrics CSVs {'identical' if a == b else 'differ'} ({len(a)} bytes)")


def test_criterion_9_sampler(verdict):
    r = sampler_statistics(M=100_000, d=10, N=100, dt=0.01, seed=0)
    ok = abs(r["z"]) <= Z_MAX and r["boundary_residual"] <= BOUNDARY_TOL and math.isfinite(r["mean"])
    verdict(9, ok, f"E|X_N|^2 {r['mean']:.4f} vs {r['expected']:.4f} (z {r['z']:+.2f}), boundary residual {r['boundary_residual']:.1e}")
