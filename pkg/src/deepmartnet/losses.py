"""Martingale, Feynman-Kac, boundary and normalisation losses.

The discrete Martingale increment over the window [t_i, t_{i+s}] is

    u(X_{i+s}) - u(X_i) - dt * sum_l w_l * F(X_{i+l})

with F the integrand the problem prescribes for L u and w the trapezoid
weights.  It is assembled per segment, so the exit indicator acts on each
quadrature segment separately and increments past a path's exit are exactly 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as _rng
from .errors import InvalidInput
from .nn import MlpParams, Tensor, as_tensor, take
from .problems import ProblemSpec
from .sde import PathEnsemble, iterate_paths

FRACTIONAL_FLOOR = 1e-12
STRADDLE_MODES = ("overshoot", "boundary")


@dataclass
class LossWeights:
    alpha_bdry: float = 0.0
    alpha_fk: float = 0.0
    alpha_normal: float = 0.0
    alpha_eig: float = 0.0
    fractional: bool = False
    p: float = 1.0
    q: float = 1.0
    r: float = 1.0
    c_norm: float = 1.0
    p_norm: int = 1
    norm_points: list | None = None  # None -> the origin only
    dt_prefactor: bool = False
    drift_in_loss: bool = False
    straddle: str = "overshoot"

    def __post_init__(self):
        for name in ("alpha_bdry", "alpha_fk", "alpha_normal", "alpha_eig"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInput(f"{name} must be finite and >= 0, got {v}")
        for name in ("p", "q", "r"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInput(f"exponent {name} must be > 0, got {v}")
        if self.c_norm == 0 or not math.isfinite(self.c_norm):
            raise InvalidInput(f"c_norm must be finite and nonzero, got {self.c_norm}")
        if self.p_norm not in (1, 2):
            raise InvalidInput(f"p_norm must be 1 or 2, got {self.p_norm}")
        if self.straddle not in STRADDLE_MODES:
            raise InvalidInput(f"straddle must be one of {STRADDLE_MODES}, got {self.straddle!r}")

    def normalization_points(self, d: int) -> np.ndarray:
        if self.norm_points is None:
            return np.zeros((1, d))
        pts = np.asarray(self.norm_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != d or len(pts) < 1:
            raise InvalidInput(f"norm_points must be an (m, {d}) array with m >= 1")
        return pts


@dataclass(frozen=True)
class TrapezoidWeights:
    k: int
    weights: tuple[float, ...]

    @property
    def span(self) -> int:
        """Number of time steps a window covers (k=0 is a one-step left-point rule)."""
        return max(self.k, 1)


def trapezoid_weights(k: int) -> TrapezoidWeights:
    if k < 0:
        raise InvalidInput(f"k must be >= 0, got {k}")
    if k == 0:
        return TrapezoidWeights(0, (1.0,))
    w = [1.0] * (k + 1)
    w[0] = w[-1] = 0.5
    return TrapezoidWeights(k, tuple(w))


@dataclass
class MiniBatch:
    """Path indices for one epoch: shape (B,) shared by all windows, or (W, B)."""

    epoch: int
    indices: np.ndarray
    m1: float | None = None
    m2: float | None = None
    mode: str = "shared"
    full_batch: bool = False

    @property
    def size(self) -> int:
        return self.indices.shape[-1]


def batch_bounds(M: int, m1: float, m2: float) -> tuple[int, int]:
    """Integer range of admissible batch sizes M/m1 <= |A| <= M/m2."""
    lo = max(1, math.ceil(M / m1 - 1e-9))
    hi = math.floor(M / m2 + 1e-9)
    return lo, hi


def select_minibatch(
    M: int,
    m1: float | None = None,
    m2: float | None = None,
    epoch: int = 0,
    seed: int = 0,
    mode: str = "shared",
    fixed_size: int | None = None,
    n_windows: int = 1,
) -> MiniBatch:
    """Sample paths without replacement from a stream keyed by (seed, epoch)."""
    if mode not in ("shared", "per-time-index"):
        raise InvalidInput(f"unknown batch mode {mode!r}")
    if M < 1:
        raise InvalidInput(f"need M >= 1, got {M}")
    gen = _rng.generator(seed, _rng.STREAM_BATCH, epoch)
    if fixed_size is not None:
        if not 1 <= fixed_size <= M:
            raise InvalidInput(f"batch size {fixed_size} outside [1, {M}]")
        size = int(fixed_size)
    else:
        if m1 is None or m2 is None or not m1 > m2 >= 1:
            raise InvalidInput(f"batch bounds need m1 > m2 >= 1, got m1={m1}, m2={m2}")
        lo, hi = batch_bounds(M, m1, m2)
        if hi > M or lo > hi:
            raise InvalidInput(f"batch bounds M/m1={M / m1:g}, M/m2={M / m2:g} are not attainable with M={M}")
        size = int(gen.integers(lo, hi + 1))
    if mode == "shared":
        idx = np.sort(gen.choice(M, size=size, replace=False))
    else:
        idx = np.stack([np.sort(gen.choice(M, size=size, replace=False)) for _ in range(n_windows)])
    full = size == M
    if full:
        warnings.warn("mini-batch covers every path: the gradient has no sampling noise", stacklevel=2)
    return MiniBatch(epoch, idx, m1, m2, mode, full)


# -- Martingale increments -----------------------------------------------------------


def martingale_increment(u_vals, drift_vals, dt: float, k: int, active=None):
    """Per-path increment over one window from node values.

    ``u_vals`` and ``drift_vals`` are (paths, span+1); ``active`` optionally
    marks which of the ``span`` segments lie before the path's exit.
    """
    tw = trapezoid_weights(k)
    u = as_tensor(u_vals)
    f = as_tensor(drift_vals)
    s = tw.span
    if u.shape[-1] != s + 1 or f.shape[-1] != s + 1:
        raise InvalidInput(f"k={k} needs {s + 1} node values per path")
    seg = _segment_quadrature(f, dt, k)
    if active is not None:
        seg = seg * np.asarray(active, dtype=np.float64)
    return u[..., s] - u[..., 0] - seg.sum(axis=-1)


def _segment_quadrature(f: Tensor, dt: float, k: int) -> Tensor:
    if k == 0:
        return f[..., :-1] * dt
    return (f[..., :-1] + f[..., 1:]) * (0.5 * dt)


Evaluator = Callable[[np.ndarray], Tensor]


def _node_values(net, problem: ProblemSpec, pts: np.ndarray, lam, weights: LossWeights) -> tuple[Tensor, Tensor]:
    """u and the integrand at the given points."""
    if weights.drift_in_loss:
        if not isinstance(net, MlpParams):
            raise InvalidInput("drift_in_loss needs a network (directional derivative)")
        mu = problem.coefficients.mu(pts)
        u, du = problem.evaluate_with_directional(net, pts, mu)
        return u, problem.integrand(pts, u, lam) - du
    u = problem.evaluate(net, pts) if isinstance(net, MlpParams) else as_tensor(net(pts)).reshape(-1)
    return u, problem.integrand(pts, u, lam)


def path_increments(
    net,
    problem: ProblemSpec,
    ensemble: PathEnsemble,
    batch: MiniBatch,
    k: int,
    weights: LossWeights | None = None,
    lam=None,
) -> Tensor:
    """Martingale increments for every window and batch path, shape (W, B).

    ``net`` is an :class:`MlpParams` or any callable x -> u(x) (for oracle
    injection).  Window i covers [t_i, t_{i+span}], i = 0..N-span.
    """
    inc, W = _increments(net, problem, ensemble, batch, k, weights or LossWeights(), lam)
    if inc.shape[0] < W:
        pad = np.zeros((W - inc.shape[0], inc.shape[1]))
        inc = Tensor(np.concatenate([inc.data, pad])) if not inc.requires_grad else _pad_rows(inc, W)
    return inc


def _pad_rows(t: Tensor, n: int) -> Tensor:
    rows = t.shape[0]
    out = np.zeros((n,) + t.shape[1:])
    out[:rows] = t.data
    return Tensor._make(out, (t,), lambda g: (g[:rows],))


def _increments(net, problem, ensemble, batch, k, weights, lam) -> tuple[Tensor, int]:
    """Increments for the leading windows that can be nonzero, and the full window count."""
    idx = np.asarray(batch.indices)
    if idx.size == 0:
        raise InvalidInput("empty mini-batch")
    if idx.min() < 0 or idx.max() >= ensemble.M:
        raise InvalidInput(f"batch indices outside [0, {ensemble.M})")
    span = trapezoid_weights(k).span
    if span > ensemble.N:
        raise InvalidInput(f"k={k} spans more than the {ensemble.N} available steps")
    W = ensemble.N - span + 1
    if idx.ndim == 1:
        return _shared_increments(net, problem, ensemble, idx, k, span, weights, lam), W
    if idx.shape[0] != W:
        raise InvalidInput(f"per-time-index batch needs {W} rows, got {idx.shape[0]}")
    return _per_window_increments(net, problem, ensemble, idx, k, span, weights, lam), W


def _tail(ensemble: PathEnsemble, straddle: str) -> np.ndarray:
    return ensemble.overshoot_point if straddle == "overshoot" else ensemble.exit_point


def _shared_increments(net, problem, ens: PathEnsemble, paths, k, span, weights, lam) -> Tensor:
    N = ens.N
    e = ens.effective_exit(paths)  # N+1 for censored
    n_stored = np.minimum(e, N + 1)
    exited = e <= N
    cnt = n_stored + exited  # stored nodes plus one tail node
    starts = np.zeros(len(paths), dtype=np.int64)
    np.cumsum(cnt[:-1], out=starts[1:])
    pts = np.empty((int(cnt.sum()), ens.d))
    first = np.zeros(len(paths), dtype=np.int64)
    np.cumsum(n_stored[:-1], out=first[1:])
    local = np.arange(int(n_stored.sum())) - np.repeat(first, n_stored)
    pts[np.repeat(starts, n_stored) + local] = ens.stored[np.repeat(ens.offsets[paths], n_stored) + local]
    pts[(starts + n_stored)[exited]] = _tail(ens, weights.straddle)[paths[exited]]

    u, f = _node_values(net, problem, pts, lam, weights)
    # segments at or past the last exit in the batch are identically zero
    J = min(N, int(e.max()))
    n_seg = min(N, J + span - 1)
    j = np.arange(n_seg + 1)
    gather = starts[:, None] + np.minimum(j[None, :], (cnt - 1)[:, None])
    U = take(u, gather)
    F = take(f, gather)
    active = (j[None, :n_seg] < e[:, None]).astype(np.float64)
    delta = U[:, 1:] - U[:, :-1] - _segment_quadrature(F, ens.dt, k) * active
    Wc = min(N - span + 1, J)
    inc = delta[:, 0:Wc]
    for l in range(1, span):
        inc = inc + delta[:, l : l + Wc]
    return inc.T


def _per_window_increments(net, problem, ens: PathEnsemble, idx, k, span, weights, lam) -> Tensor:
    N = ens.N
    W, B = idx.shape
    e = ens.effective_exit()
    steps = np.arange(W)[:, None, None] + np.arange(span + 1)[None, None, :]
    m = np.broadcast_to(idx[:, :, None], (W, B, span + 1))
    node = np.minimum(steps, e[m])
    keys, inv = np.unique(m.astype(np.int64) * (N + 2) + node, return_inverse=True)
    pts = ens.points(keys // (N + 2), keys % (N + 2), frozen=weights.straddle)
    u, f = _node_values(net, problem, pts, lam, weights)
    inv = inv.reshape(W, B, span + 1)
    U = take(u, inv)
    F = take(f, inv)
    active = (steps[..., :-1] < e[m[..., :-1]]).astype(np.float64)
    seg = _segment_quadrature(F, ens.dt, k) * active
    return U[..., span] - U[..., 0] - seg.sum(axis=-1)


def _mart_from_increments(inc: Tensor, n_windows: int, dt: float, weights: LossWeights) -> Tensor:
    means = inc.mean(axis=1)
    loss = means.square().sum() * (1.0 / n_windows)
    return loss * (1.0 / dt) if weights.dt_prefactor else loss


def loss_mart_bvp(net, problem: ProblemSpec, ensemble: PathEnsemble, batch: MiniBatch, k: int, weights: LossWeights | None = None) -> Tensor:
    """Average over windows of the squared batch-mean increment."""
    if problem.is_eigen:
        raise InvalidInput("loss_mart_bvp needs a boundary-value problem")
    weights = weights or LossWeights()
    inc, W = _increments(net, problem, ensemble, batch, k, weights, None)
    return _mart_from_increments(inc, W, ensemble.dt, weights)


def loss_mart_eig(net, lam, problem: ProblemSpec, ensemble: PathEnsemble, batch: MiniBatch, k: int, weights: LossWeights | None = None) -> Tensor:
    """Eigenproblem Martingale loss; ``lam`` (scalar or tensor) stays in the graph."""
    if not problem.is_eigen:
        raise InvalidInput("loss_mart_eig needs an eigenproblem")
    weights = weights or LossWeights()
    inc, W = _increments(net, problem, ensemble, batch, k, weights, as_tensor(lam))
    return _mart_from_increments(inc, W, ensemble.dt, weights)


# -- Feynman-Kac ---------------------------------------------------------------------


@dataclass
class FkEstimate:
    estimate: float
    stderr: float
    censored_fraction: float
    n_paths: int
    warning: str | None = None
    per_path: np.ndarray | None = field(default=None, repr=False)


def _fk_finish(problem: ProblemSpec, contrib: np.ndarray, censored: np.ndarray, threshold: float) -> FkEstimate:
    used = contrib[~censored]
    frac = float(censored.mean())
    if len(used) == 0:
        raise InvalidInput("no path exited the domain; the Feynman-Kac estimate is undefined")
    msg = None
    if frac > threshold:
        msg = f"{frac:.2%} of paths are censored (threshold {threshold:.2%}); the estimate uses exited paths only"
        warnings.warn(msg, stacklevel=3)
    se = float(used.std(ddof=1) / math.sqrt(len(used))) if len(used) > 1 else float("nan")
    return FkEstimate(float(used.mean()), se, frac, len(used), msg, contrib)


def _check_fk(problem: ProblemSpec) -> None:
    if problem.feynman_kac is None or problem.is_eigen:
        raise InvalidInput(f"{problem.name}: no Feynman-Kac representation (needs a linear BVP)")
    if not problem.domain.bounded:
        raise InvalidInput("Feynman-Kac estimate needs a bounded domain")


def feynman_kac_estimate(problem: ProblemSpec, ensemble: PathEnsemble, censored_threshold: float = 0.01) -> FkEstimate:
    """u(x0) = E[g(X_tau) e^{r tau} - sum_{i < e} s(X_i) e^{r t_i} dt] over exited paths."""
    _check_fk(problem)
    fk = problem.feynman_kac
    M, dt = ensemble.M, ensemble.dt
    counts = np.diff(ensemble.offsets)
    path_of = np.repeat(np.arange(M), counts)
    local = np.arange(len(ensemble.stored)) - np.repeat(ensemble.offsets[:-1], counts)
    src = np.zeros(M)
    chunk = 1 << 20
    for a in range(0, len(ensemble.stored), chunk):
        sl = slice(a, a + chunk)
        vals = fk.source(ensemble.stored[sl].astype(np.float64)) * np.exp(fk.rate * local[sl] * dt) * dt
        src += np.bincount(path_of[sl], weights=vals, minlength=M)
    censored = ensemble.censored
    tau = np.where(censored, 0.0, ensemble.exit_index * dt)
    g = np.zeros(M)
    if (~censored).any():
        g[~censored] = problem.g(ensemble.exit_point[~censored])
    contrib = g * np.exp(fk.rate * tau) - src
    return _fk_finish(problem, contrib, censored, censored_threshold)


# discrete monitoring sees exits late; pulling the boundary in by this many sigma*sqrt(dt)
# cancels the leading sqrt(dt) bias (zeta(1/2) / sqrt(2 pi), Broadie-Glasserman-Kou)
CONTINUITY_BETA = 0.5825971579390106


def _scalar_sigma(coeffs) -> float:
    s = coeffs.diffusion
    if isinstance(s, str) and s == "identity":
        return 1.0
    a = np.asarray(s, dtype=np.float64) if not callable(s) else None
    if a is None or a.ndim != 0:
        raise InvalidInput("the continuity correction needs a scalar diffusion")
    return abs(float(a))


def feynman_kac_streaming(
    problem: ProblemSpec, x0, M: int, N: int, dt: float, seed: int,
    censored_threshold: float = 0.01, continuity_correction: bool = False,
) -> FkEstimate:
    """Same estimator as :func:`feynman_kac_estimate` without storing the paths.

    With ``continuity_correction`` exits are detected against a boundary pulled in
    by CONTINUITY_BETA * sigma * sqrt(dt), which removes the leading discrete-monitoring bias.
    """
    _check_fk(problem)
    fk = problem.feynman_kac
    shift = CONTINUITY_BETA * _scalar_sigma(problem.coefficients) * math.sqrt(dt) if continuity_correction else 0.0
    src = np.zeros(M)
    contrib = np.zeros(M)
    censored = np.zeros(M, dtype=bool)
    for rec in iterate_paths(problem.coefficients, problem.domain, x0, M, N, dt, seed, exit_shift=shift):
        if rec.i == N:
            censored[rec.alive] = True
            break
        src[rec.alive] += fk.source(rec.x) * (math.exp(fk.rate * rec.i * dt) * dt)
        if len(rec.exited):
            tau = (rec.i + 1) * dt
            contrib[rec.exited] = problem.g(rec.exit_point) * math.exp(fk.rate * tau)
    return _fk_finish(problem, contrib - src, censored, censored_threshold)


# -- point losses ----------------------------------------------------------------------


def loss_fk(net, x0, fk_estimate: float, problem: ProblemSpec | None = None) -> Tensor:
    x = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    u = problem.evaluate(net, x) if problem is not None else _raw(net, x)
    return (u - float(fk_estimate)).square().sum()


def _raw(net, x) -> Tensor:
    from .nn import forward

    return forward(net, x).reshape(-1)


def loss_bdry(net, problem: ProblemSpec, boundary_points: np.ndarray) -> Tensor:
    pts = np.asarray(boundary_points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise InvalidInput("boundary loss needs a nonempty (n, d) point set")
    u = problem.evaluate(net, pts)
    return (u - problem.g(pts)).square().mean()


def loss_normal(net, points: np.ndarray, p_norm: int = 1, c_norm: float = 1.0, problem: ProblemSpec | None = None) -> Tensor:
    """((1/m) sum |u(x_i)|^p - c)^2."""
    if c_norm == 0:
        raise InvalidInput("c_norm must be nonzero")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u = problem.evaluate(net, pts) if problem is not None else _raw(net, pts)
    mag = u.abs() if p_norm == 1 else u.square()
    return (mag.mean() - c_norm).square()


def loss_eig_stabilization(lambda_history, epoch: int, alpha_eig: float, lam=None) -> Tensor:
    """alpha_eig (lambda_now - lambda_{epoch-100})^2; the lagged value is a constant.

    ``lam`` is the current (differentiable) eigenvalue; when omitted the value
    recorded for ``epoch`` in the history is used.
    """
    if epoch < 100 or alpha_eig == 0:
        return Tensor(0.0)
    lagged = float(lambda_history[epoch - 100])
    now = as_tensor(lambda_history[epoch] if lam is None else lam)
    return (now - lagged).square() * alpha_eig


# -- combinators -----------------------------------------------------------------------


def total_loss_bvp(components: dict, weights: LossWeights) -> Tensor:
    total = as_tensor(components.get("mart", 0.0))
    if weights.alpha_fk and "fk" in components:
        total = total + components["fk"] * weights.alpha_fk
    if weights.alpha_bdry and "bdry" in components:
        total = total + components["bdry"] * weights.alpha_bdry
    return total


def _frac(x: Tensor, power: float) -> Tensor:
    if power == 1.0:
        return x
    if np.any(x.data < 0):
        raise ArithmeticError("fractional power of a negative loss; component losses must be non-negative")
    # floor keeps the derivative of x^p finite at x = 0
    return (x + FRACTIONAL_FLOOR) ** power


def total_loss_eig(components: dict, weights: LossWeights) -> Tensor:
    mart = as_tensor(components.get("mart", 0.0))
    normal = as_tensor(components.get("normal", 0.0))
    if weights.fractional:
        total = _frac(_frac(mart, weights.p) + _frac(normal, weights.q) * weights.alpha_normal, weights.r)
    else:
        total = mart + normal * weights.alpha_normal
    if weights.alpha_bdry and "bdry" in components:
        total = total + components["bdry"] * weights.alpha_bdry
    if "eig" in components:
        total = total + components["eig"]
    return total
