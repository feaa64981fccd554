"""Command-line front end: run, verify, export-curves, sample."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import tempfile
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as _config
from .errors import InvalidInput, SimulationError, TrainingDivergence
from .losses import feynman_kac_streaming
from .nn import load_checkpoint
from .problems import ProblemSpec
from .sde import load_ensemble, sample_ensemble, save_ensemble
from .trainer import EnsembleSource, train


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def apply_overrides(cfg: _config.RunConfig, seed: int | None = None, deterministic: bool = False, epochs: int | None = None) -> _config.RunConfig:
    if seed is not None:
        cfg.sde.seed = seed
        cfg.network.seed = seed + 1
        cfg.train.seed_batch = seed + 2
        cfg.train.seed_boundary = seed + 3
        cfg.train.seed_metrics = seed + 4
    if deterministic:
        cfg.train.deterministic = True
    if epochs is not None:
        cfg.train.epochs = epochs
    return cfg.validate()


def _coefficients(cfg: _config.RunConfig, pb: ProblemSpec):
    return pb.coefficients if cfg.sde.drift_in_paths else pb.coefficients.without_drift()


def _cache_path(cfg: _config.RunConfig, pb: ProblemSpec, x0: np.ndarray, M: int, offset: int) -> Path:
    key = json.dumps(
        {"problem": _config.to_dict(cfg.problem), "x0": x0.tolist(), "M": M, "N": cfg.sde.N, "dt": cfg.sde.dt,
         "seed": cfg.sde.seed, "offset": offset, "drift": cfg.sde.drift_in_paths},
        sort_keys=True,
    )
    return Path(cfg.cache_dir) / f"ensemble-{hashlib.sha256(key.encode()).hexdigest()[:16]}.npz"


def _log(msg: str) -> None:
    print(msg, flush=True)


def build_ensembles(cfg: _config.RunConfig, pb: ProblemSpec, log=_log) -> EnsembleSource:
    coeffs = _coefficients(cfg, pb)
    starts, counts = cfg.sde.start_points(pb.d)
    ensembles = []
    offset = 0
    for x0, M in zip(starts, counts):
        ens = None
        path = _cache_path(cfg, pb, x0, M, offset) if cfg.cache else None
        if path is not None and path.exists():
            ens = load_ensemble(path)
            if ens.M != M or ens.N != cfg.sde.N or ens.seed != cfg.sde.seed or not np.array_equal(ens.x0, x0):
                raise InvalidInput(f"{path}: cached ensemble does not match the configuration")
            log(f"loaded {M} paths from {path}")
        if ens is None:
            ens = sample_ensemble(coeffs, pb.domain, x0, M, cfg.sde.N, cfg.sde.dt, cfg.sde.seed, path_offset=offset)
            log(f"sampled {M} paths from x0={np.round(x0, 4).tolist()} (censored {ens.censored_fraction:.2%})")
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_ensemble(ens, path)
        ensembles.append(ens)
        offset += M
    return EnsembleSource(coeffs, pb, starts, counts, cfg.sde.N, cfg.sde.dt, cfg.sde.seed, cfg.sde.regenerate_every, ensembles)


def run_pipeline(cfg: _config.RunConfig, out_dir, log=_log) -> dict:
    """Sample, train and export; returns the run summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(_config.dump_config(cfg))
    pb = cfg.build_problem()
    source = build_ensembles(cfg, pb, log)
    fk = None
    if cfg.train.weights.alpha_fk > 0 and cfg.fk is not None:
        fk = [feynman_kac_streaming(pb, x0, cfg.fk.M, cfg.fk.N, cfg.fk.dt, cfg.fk.seed, continuity_correction=cfg.fk.continuity_correction) for x0 in source.starts]
    net = cfg.network.build()

    def progress(r):
        lam = "" if math.isnan(r.lambda_) else f" lambda={r.lambda_:.5g}"
        log(f"epoch {r.epoch:6d} loss={r.loss_total:.4e} rel_l2={r.rel_l2:.4g}{lam} lr={r.lr:.3g}")

    res = train(pb, net, source, cfg.train, out_dir=out, fk_estimates=fk, echo=_config.to_dict(cfg), progress=progress)
    export_curves(out)
    return res.summary


# -- curves ------------------------------------------------------------------------------


def _directions(d: int) -> dict[str, np.ndarray]:
    def ones(k):
        e = np.zeros(d)
        e[: min(k, d)] = 1.0
        return e / np.linalg.norm(e)

    return {"diagonal": ones(d), "axis": ones(1), "e_prime": ones(2), "e_double_prime": ones(10)}


def _line_extent(pb: ProblemSpec, e: np.ndarray, fallback: float) -> float:
    dom = pb.domain
    if dom.kind == "cube":
        return dom.L / float(np.abs(e).max())
    if dom.kind == "ball":
        return dom.L
    return fallback


def export_curves(run_dir, n: int = 201) -> list[Path]:
    """Write solution profiles along several lines plus loss/error/lambda histories."""
    run = Path(run_dir)
    needed = [run / "config.yaml", run / "final.ckpt", run / "metrics.csv"]
    missing = [p.name for p in needed if not p.exists()]
    if missing:
        raise InvalidInput(f"{run}: incomplete run (missing {', '.join(missing)})")
    cfg = _config.load_config(run / "config.yaml")
    pb = cfg.build_problem()
    net = load_checkpoint(run / "final.ckpt")
    curves = run / "curves"
    curves.mkdir(exist_ok=True)
    written = []
    scale = 1.0
    if pb.is_eigen and pb.exact_solution is not None:
        x = np.zeros((1, pb.d))
        pts = x + np.linspace(-1, 1, 101)[:, None] * _directions(pb.d)["diagonal"]
        v, u = pb.evaluate(net, pts).data, pb.exact_solution(pts)
        scale = float(v @ u) / float(v @ v) if float(v @ v) > 0 else 1.0
    for label, e in _directions(pb.d).items():
        half = _line_extent(pb, e, cfg.train.eval.extent)
        t = np.linspace(-half, half, n)
        pts = pb.domain.c + t[:, None] * e[None, :]
        pred = pb.evaluate(net, pts).data * scale
        true = pb.exact_solution(pts) if pb.exact_solution is not None else np.full(n, np.nan)
        path = curves / f"{label}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "u_true", "u_pred"])
            w.writerows(zip(t.tolist(), true.tolist(), pred.tolist()))
        written.append(path)
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    for name, cols in (("loss_history", ["loss_total", "loss_mart", "loss_bdry", "loss_fk", "loss_normal"]),
                       ("error_history", ["rel_l2"]), ("lambda_history", ["lambda", "lambda_rel_err"])):
        if name == "lambda_history" and not pb.is_eigen:
            continue
        path = curves / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + cols)
            w.writerows([[r["epoch"]] + [r[c] for c in cols] for r in rows])
        written.append(path)
    return written


# -- verify suites ---------------------------------------------------------------------------


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def verify_grad_check(n_configs: int = 50) -> bool:
    from .verify import gradient_check_random

    worst = gradient_check_random(n_configs, seed=0)
    return _report("grad-check", worst <= 1e-6, f"worst relative error {worst:.2e} over {n_configs} random networks")


def verify_martingale_oracle(M: int = 20_000) -> bool:
    from .verify import martingale_oracle

    r = martingale_oracle(d=5, M=M, N=100, dt=0.01, seed=0)
    ok = _report("martingale-oracle", r["max_abs_z"] <= 4.0, f"max |z| = {r['max_abs_z']:.2f} over {r['windows']} time indices (M={M})")
    for i in range(0, len(r["z"]), max(1, len(r["z"]) // 10)):
        print(f"    t_{i}: z = {r['z'][i]:+.2f}")
    return ok


def verify_fk_sign(M: int = 20_000) -> bool:
    from .verify import fk_sign_check

    r = fk_sign_check(M=M)
    print(f"    source-term sign: {r['sign']} (estimate {r['estimate']:.4f} +- {r['stderr']:.4f}, exact {r['exact']})")
    print(f"    opposite sign would give {r['opposite']:.4f}")
    return _report("fk-sign", abs(r["z"]) <= 4.0, f"z = {r['z']:+.2f} with the validated sign")


def verify_sampler(M: int = 20_000) -> bool:
    from .verify import sampler_statistics

    r = sampler_statistics(M=M)
    ok1 = _report("sampler-variance", abs(r["z"]) <= 4.0, f"E|X_N-x0|^2 = {r['mean']:.4f} vs {r['expected']:.4f} (z = {r['z']:+.2f})")
    ok2 = _report("sampler-exit", r["boundary_residual"] <= 1e-12, f"max boundary residual {r['boundary_residual']:.1e}")
    return ok1 and ok2


SUITES = {
    "grad-check": verify_grad_check,
    "martingale-oracle": verify_martingale_oracle,
    "fk-sign": verify_fk_sign,
    "sampler": verify_sampler,
}


# -- entry point ------------------------------------------------------------------------------


def _load(args) -> _config.RunConfig:
    if bool(args.config) == bool(args.preset):
        raise InvalidInput("give exactly one of --config or --preset")
    return _config.load_config(args.config) if args.config else _config.preset(args.preset)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepmartnet", description="Martingale-loss neural PDE solver")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    p.add_argument("--deterministic", action="store_true", help="bitwise-reproducible metrics (wall clock recorded as 0)")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="sample paths, train, write metrics/checkpoints/curves")
    r.add_argument("--config", help="YAML run configuration")
    r.add_argument("--preset", help=f"built-in configuration ({', '.join(_config.PRESETS)})")
    r.add_argument("--out", help="run directory (default: <output>/<name>)")
    r.add_argument("--seed-override", type=int, default=None)
    r.add_argument("--epochs", type=int, default=None, help="override the epoch count")

    v = sub.add_parser("verify", help="run an oracle/property suite")
    v.add_argument("suite", choices=sorted(SUITES) + ["all"])

    e = sub.add_parser("export-curves", help="write plot-ready CSVs for a finished run")
    e.add_argument("run_dir")

    s = sub.add_parser("sample", help="generate the path ensemble(s) into the cache")
    s.add_argument("--config")
    s.add_argument("--preset")
    s.add_argument("--seed-override", type=int, default=None)
    s.add_argument("--out", help="cache directory (default: the config's cache_dir)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic and not args.threads else args.threads
    try:
        with _threads(threads):
            if args.cmd == "run":
                cfg = apply_overrides(_load(args), args.seed_override, args.deterministic, args.epochs)
                out = Path(args.out) if args.out else Path(cfg.output) / cfg.name
                summary = run_pipeline(cfg, out)
                keys = [k for k in ("rel_l2", "lambda_headline", "lambda_rel_err") if k in summary]
                print(json.dumps({k: summary[k] for k in keys}))
                return 0
            if args.cmd == "verify":
                names = sorted(SUITES) if args.suite == "all" else [args.suite]
                with tempfile.TemporaryDirectory():
                    results = [SUITES[n]() for n in names]
                return 0 if all(results) else 1
            if args.cmd == "export-curves":
                for path in export_curves(args.run_dir):
                    print(path)
                return 0
            if args.cmd == "sample":
                cfg = apply_overrides(_load(args), args.seed_override)
                cfg.cache = True
                if args.out:
                    cfg.cache_dir = args.out
                build_ensembles(cfg, cfg.build_problem())
                return 0
    except (InvalidInput, SimulationError, TrainingDivergence, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
