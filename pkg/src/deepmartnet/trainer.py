"""Training loop, metrics and run summaries."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng as _rng
from .errors import InvalidInput, TrainingDivergence
from .losses import (
    FkEstimate,
    LossWeights,
    feynman_kac_estimate,
    loss_bdry,
    loss_eig_stabilization,
    loss_fk,
    loss_mart_bvp,
    loss_mart_eig,
    loss_normal,
    select_minibatch,
    total_loss_bvp,
    total_loss_eig,
    trapezoid_weights,
)
from .nn import AdamaxState, LrSchedule, MlpParams, adamax_step, lr_at, save_checkpoint
from .problems import ProblemSpec, sample_boundary
from .sde import PathEnsemble, SdeCoefficients, sample_ensemble

EVAL_KINDS = ("uniform", "diagonal", "axis")


@dataclass
class EvalSpec:
    """Where relative L2 is measured; ``extent`` bounds lines/boxes on unbounded domains."""

    kind: str = "uniform"
    n: int = 10_000
    extent: float = 2.0

    def __post_init__(self):
        if self.kind not in EVAL_KINDS:
            raise InvalidInput(f"eval kind must be one of {EVAL_KINDS}, got {self.kind!r}")
        if self.n < 2:
            raise InvalidInput(f"eval needs n >= 2 points, got {self.n}")


@dataclass
class TrainConfig:
    epochs: int
    k: int = 1
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(0.05))
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int | None = None
    m1: float | None = None
    m2: float | None = None
    batch_mode: str = "shared"
    n_bdry: int = 2000
    metric_every: int = 25
    checkpoint_every: int = 0
    eval: EvalSpec = field(default_factory=EvalSpec)
    seed_batch: int = 1
    seed_boundary: int = 2
    seed_metrics: int = 3
    headline_window: int = 500
    divergence_factor: float = 1e6
    deterministic: bool = False
    fk_censored_threshold: float = 0.01

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInput(f"epochs must be >= 0, got {self.epochs}")
        if self.metric_every < 1:
            raise InvalidInput(f"metric_every must be >= 1, got {self.metric_every}")
        if self.checkpoint_every < 0:
            raise InvalidInput(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        trapezoid_weights(self.k)
        if self.batch_size is None and (self.m1 is None or self.m2 is None):
            raise InvalidInput("set batch_size, or both batch bounds m1 and m2")
        if self.batch_mode not in ("shared", "per-time-index"):
            raise InvalidInput(f"unknown batch_mode {self.batch_mode!r}")


@dataclass
class MetricsRow:
    epoch: int
    loss_total: float
    loss_mart: float
    loss_bdry: float
    loss_fk: float
    loss_normal: float
    # float('nan') for BVP runs
    lambda_: float
    lambda_rel_err: float
    rel_l2: float
    lr: float
    seconds: float

    @staticmethod
    def header() -> list[str]:
        return [f.name.rstrip("_") for f in fields(MetricsRow)]

    def values(self) -> list:
        return [getattr(self, f.name) for f in fields(MetricsRow)]


@dataclass
class TrainResult:
    params: MlpParams
    metrics: list[MetricsRow]
    checkpoints: list[Path]
    summary: dict
    lambda_history: list[float]


# -- evaluation ----------------------------------------------------------------------


def evaluation_points(problem: ProblemSpec, spec: EvalSpec, seed: int) -> np.ndarray:
    dom, d, n = problem.domain, problem.d, spec.n
    if spec.kind == "uniform":
        gen = _rng.generator(seed, _rng.STREAM_METRICS)
        if dom.kind == "cube":
            return dom.c + gen.uniform(-dom.L, dom.L, size=(n, d))
        if dom.kind == "ball":
            z = gen.standard_normal((n, d))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            return dom.c + dom.L * z * gen.uniform(size=(n, 1)) ** (1.0 / d)
        return gen.uniform(-spec.extent, spec.extent, size=(n, d))
    if spec.kind == "diagonal":
        e = np.full(d, 1.0 / math.sqrt(d))
        half = {"cube": dom.L * math.sqrt(d), "ball": dom.L}.get(dom.kind, spec.extent)
    else:
        e = np.zeros(d)
        e[0] = 1.0
        half = dom.L if dom.bounded else spec.extent
    t = np.linspace(-half, half, n)
    return dom.c + t[:, None] * e[None, :]


def relative_l2_error(net: MlpParams, problem: ProblemSpec, eval_spec: EvalSpec | None = None, seed: int = 0, points: np.ndarray | None = None) -> float:
    """sqrt(sum (u_theta - u)^2 / sum u^2); eigenproblems first fit u_theta to u by least squares."""
    if problem.exact_solution is None:
        raise InvalidInput(f"{problem.name}: relative L2 needs an exact solution")
    x = evaluation_points(problem, eval_spec or EvalSpec(), seed) if points is None else points
    u = problem.exact_solution(x)
    v = problem.evaluate(net, x).data
    if problem.is_eigen:
        vv = float(v @ v)
        v = v * (float(v @ u) / vv if vv > 0 else 0.0)
    return math.sqrt(float(np.sum((v - u) ** 2)) / float(np.sum(u * u)))


def lambda_trajectory(metrics: list[MetricsRow], window: int = 500) -> dict:
    """(epoch, lambda) pairs plus the mean/std over the trailing ``window`` epochs."""
    pairs = [(r.epoch, r.lambda_) for r in metrics]
    if not pairs or all(math.isnan(l) for _, l in pairs):
        raise InvalidInput("no eigenvalue in these metrics (boundary-value run?)")
    last = pairs[-1][0]
    tail = np.array([l for e, l in pairs if e > last - window])
    return {"trajectory": pairs, "mean": float(tail.mean()), "std": float(tail.std())}


# -- ensembles -----------------------------------------------------------------------


@dataclass
class EnsembleSource:
    """One ensemble per starting point, visited round-robin by epoch.

    With ``regenerate_every`` > 0 each ensemble is redrawn (fresh noise) every
    that many visits instead of being reused for the whole run.
    """

    coefficients: SdeCoefficients
    problem: ProblemSpec
    starts: list[np.ndarray]
    counts: list[int]
    N: int
    dt: float
    seed: int
    regenerate_every: int = 0
    ensembles: list[PathEnsemble] = field(default_factory=list)
    _cycle: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ensembles:
            self.ensembles = [self._draw(j, 0) for j in range(len(self.starts))]
        self._cycle = [0] * len(self.ensembles)

    def _draw(self, j: int, cycle: int) -> PathEnsemble:
        offset = sum(self.counts) * cycle + sum(self.counts[:j])
        return sample_ensemble(self.coefficients, self.problem.domain, self.starts[j], self.counts[j], self.N, self.dt, self.seed, path_offset=offset)

    def for_epoch(self, epoch: int) -> tuple[int, PathEnsemble]:
        n = len(self.ensembles)
        j = epoch % n
        if self.regenerate_every:
            cycle = (epoch // n) // self.regenerate_every
            if cycle != self._cycle[j]:
                self.ensembles[j] = self._draw(j, cycle)
                self._cycle[j] = cycle
        return j, self.ensembles[j]


# -- training ------------------------------------------------------------------------


def _param_norms(net: MlpParams) -> list[float]:
    return [float(np.linalg.norm(p.data)) for p in net.parameters()]


def _scalar(t) -> float:
    return float(np.asarray(getattr(t, "data", t)))


def train(
    problem: ProblemSpec,
    net: MlpParams,
    ensembles: list[PathEnsemble] | EnsembleSource | PathEnsemble,
    config: TrainConfig,
    out_dir=None,
    fk_estimates: list[FkEstimate | None] | None = None,
    echo: dict | None = None,
    progress: Callable[[MetricsRow], None] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` Adamax epochs on the total loss; parameters update in place."""
    if isinstance(ensembles, PathEnsemble):
        ensembles = [ensembles]
    pool = ensembles if isinstance(ensembles, EnsembleSource) else None
    ens_list = pool.ensembles if pool else list(ensembles)
    if not ens_list:
        raise InvalidInput("train needs at least one path ensemble")
    if net.layer_sizes[0] != problem.d:
        raise InvalidInput(f"network input width {net.layer_sizes[0]} != problem dimension {problem.d}")
    if problem.is_eigen and not net.has_eigenvalue:
        raise InvalidInput("eigenproblem needs a network carrying an eigenvalue")
    w = config.weights
    if not problem.is_eigen and w.alpha_fk > 0 and fk_estimates is None:
        fk_estimates = [feynman_kac_estimate(problem, e, config.fk_censored_threshold) for e in ens_list]
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRow.header())
        if config.checkpoint_every:
            ckpt_dir = out / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)

    eval_pts = evaluation_points(problem, config.eval, config.seed_metrics) if problem.exact_solution else None
    norm_pts = w.normalization_points(problem.d)
    params = net.parameters()
    state = AdamaxState()
    metrics: list[MetricsRow] = []
    checkpoints: list[Path] = []
    lam_hist: list[float] = []
    ref_loss = None
    t0 = time.perf_counter()

    def row(epoch, comps, total, lr, lam_value) -> MetricsRow:
        rel = relative_l2_error(net, problem, points=eval_pts) if eval_pts is not None else float("nan")
        ex = problem.exact_eigenvalue
        lre = abs(lam_value - ex) / abs(ex) if (ex is not None and not math.isnan(lam_value)) else float("nan")
        secs = 0.0 if config.deterministic else round(time.perf_counter() - t0, 3)
        return MetricsRow(
            epoch, total, comps.get("mart", 0.0), comps.get("bdry", 0.0), comps.get("fk", 0.0), comps.get("normal", 0.0),
            lam_value, lre, rel, lr, secs,
        )

    try:
        for epoch in range(config.epochs):
            j, ens = pool.for_epoch(epoch) if pool else (epoch % len(ens_list), ens_list[epoch % len(ens_list)])
            span = trapezoid_weights(config.k).span
            batch = select_minibatch(
                ens.M, config.m1, config.m2, epoch, config.seed_batch, config.batch_mode,
                config.batch_size, ens.N - span + 1,
            )
            comps = {}
            lam_value = float("nan")
            if problem.is_eigen:
                lam = net.lam()
                lam_value = _scalar(lam)
                lam_hist.append(lam_value)
                comps["mart"] = loss_mart_eig(net, lam, problem, ens, batch, config.k, w)
                if w.alpha_normal > 0:
                    comps["normal"] = loss_normal(net, norm_pts, w.p_norm, w.c_norm, problem)
                if w.alpha_bdry > 0 and problem.domain.bounded:
                    comps["bdry"] = loss_bdry(net, problem, sample_boundary(problem.domain, config.n_bdry, config.seed_boundary, epoch))
                if w.alpha_eig > 0 and epoch >= 100:
                    comps["eig"] = loss_eig_stabilization(lam_hist, epoch, w.alpha_eig, lam)
                total = total_loss_eig(comps, w)
            else:
                comps["mart"] = loss_mart_bvp(net, problem, ens, batch, config.k, w)
                if w.alpha_fk > 0:
                    comps["fk"] = loss_fk(net, ens.x0, fk_estimates[j].estimate, problem)
                if w.alpha_bdry > 0:
                    comps["bdry"] = loss_bdry(net, problem, sample_boundary(problem.domain, config.n_bdry, config.seed_boundary, epoch))
                total = total_loss_bvp(comps, w)
            total_value = _scalar(total)
            values = {k: _scalar(v) for k, v in comps.items()}
            if not math.isfinite(total_value):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "components": values, "param_norms": _param_norms(net)},
                )
            if epoch == 10:
                ref_loss = total_value
            if ref_loss is not None and ref_loss > 0 and total_value > config.divergence_factor * ref_loss:
                raise TrainingDivergence(
                    f"loss {total_value:.3e} at epoch {epoch} exceeds {config.divergence_factor:g} x the epoch-10 loss",
                    {"epoch": epoch, "components": values, "param_norms": _param_norms(net)},
                )
            lr = lr_at(config.schedule, epoch)
            last = epoch == config.epochs - 1
            if epoch % config.metric_every == 0 or last:
                r = row(epoch, values, total_value, lr, lam_value)
                metrics.append(r)
                if writer is not None:
                    writer.writerow(r.values())
                    fh.flush()
                if progress is not None:
                    progress(r)
            net.zero_grad()
            total.backward()
            adamax_step(params, [p.grad for p in params], state, lr)
            if ckpt_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
                path = ckpt_dir / f"epoch_{epoch + 1:06d}.ckpt"
                save_checkpoint(net, path)
                checkpoints.append(path)
    finally:
        if fh is not None:
            fh.close()

    summary = _summary(problem, net, ens_list, config, metrics, lam_hist, fk_estimates, eval_pts, echo)
    if out is not None:
        final = out / "final.ckpt"
        save_checkpoint(net, final)
        checkpoints.append(final)
        if lam_hist:
            np.savetxt(out / "lambda.csv", np.column_stack([np.arange(len(lam_hist)), lam_hist]), delimiter=",", header="epoch,lambda", comments="", fmt=["%d", "%.17g"])
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    return TrainResult(net, metrics, checkpoints, summary, lam_hist)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _summary(problem, net, ens_list, config, metrics, lam_hist, fk_estimates, eval_pts, echo) -> dict:
    s: dict = {
        "problem": problem.name,
        "epochs": config.epochs,
        "censored_fraction": [e.censored_fraction for e in ens_list],
    }
    if eval_pts is not None:
        s["rel_l2"] = relative_l2_error(net, problem, points=eval_pts)
        s["eval"] = asdict(config.eval)
    if fk_estimates:
        s["fk"] = [None if f is None else {"estimate": f.estimate, "stderr": f.stderr, "censored_fraction": f.censored_fraction} for f in fk_estimates]
    if lam_hist:
        tail = np.array(lam_hist[-config.headline_window :])
        s["lambda_final"] = lam_hist[-1]
        s["lambda_headline"] = float(tail.mean())
        s["lambda_headline_std"] = float(tail.std())
        s["lambda_window"] = len(tail)
        if problem.exact_eigenvalue is not None:
            ex = problem.exact_eigenvalue
            s["lambda_exact"] = ex
            s["lambda_rel_err"] = abs(float(tail.mean()) - ex) / abs(ex)
    if metrics:
        s["final_loss"] = metrics[-1].loss_total
    if echo is not None:
        s["config"] = echo
    return s
