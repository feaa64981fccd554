"""Oracle and property checks shared by the CLI ``verify`` suites and the tests.

Each function is pure: it builds its own data from explicit seeds, returns a
plain dict or number and writes nothing to disk.
"""

from __future__ import annotations

import numpy as np

from . import rng as _rng
from .losses import MiniBatch, feynman_kac_streaming, loss_mart_bvp, path_increments, select_minibatch
from .nn import forward, init_mlp
from .nn.mlp import mlp_apply
from .problems import linear_bvp, make_linear_pbe
from .sde import Domain, SdeCoefficients, sample_ensemble

FD_STEP = 1e-5
# central differences carry ~eps*|loss|/h of rounding noise, so components smaller than
# this fraction of max(|grad|, |loss|) are compared against that floor instead of themselves
FD_FLOOR = 1e-4


# -- gradients -------------------------------------------------------------------------------


def _numpy_forward(Ws, bs, acts, x):
    """Reference forward on raw arrays; a leading stack axis on any W or b broadcasts."""
    from .nn.mlp import _act_forward, parse_activation

    h = x
    for l, (W, b) in enumerate(zip(Ws, bs)):
        h = h @ np.swapaxes(W, -1, -2) + b[..., None, :]
        if l < len(Ws) - 1:
            h = _act_forward(*parse_activation(acts[l]), h)
    return h


def _mean_square(out):
    return np.mean(out * out, axis=(-2, -1))


def random_mlp_config(gen: np.random.Generator) -> tuple[list[int], list[str]]:
    depth = int(gen.integers(1, 4))
    sizes = [int(gen.integers(1, 11))] + [int(gen.integers(1, 65)) for _ in range(depth)] + [1]
    acts = []
    for _ in range(depth):
        kind = gen.choice(["tanh", "gelu", "relu_pow"])
        acts.append(f"relu_pow:{int(gen.integers(2, 10))}" if kind == "relu_pow" else str(kind))
    return sizes, acts


def gradient_check(sizes, acts, seed: int, n_rows: int = 5, fused: bool = False) -> float:
    """Worst per-component relative error between reverse mode and central differences.

    The loss is the mean of squared outputs on ``n_rows`` random inputs.
    """
    net = init_mlp(sizes, acts, seed=seed)
    gen = _rng.generator(seed, _rng.STREAM_METRICS, 1)
    for b in net.biases:
        b.data[:] = gen.uniform(-0.5, 0.5, size=b.data.shape)
    x = gen.uniform(-1.0, 1.0, size=(n_rows, sizes[0]))
    out = mlp_apply(net, x, chunk=2) if fused else forward(net, x, fused=False)
    loss = out.square().mean()
    loss.backward()
    Ws = [w.data for w in net.weights]
    bs = [b.data for b in net.biases]
    analytic = [t.grad for pair in zip(net.weights, net.biases) for t in pair]
    worst = 0.0
    g_max = max(float(np.abs(g).max()) for g in analytic)
    for j, g in enumerate(analytic):
        l, is_bias = divmod(j, 2)
        base = (bs if is_bias else Ws)[l]
        P = base.size
        # every component of this tensor perturbed at once along a stack axis
        eye = np.eye(P).reshape((P,) + base.shape) * FD_STEP
        fd = np.empty(P)
        for sign in (1, -1):
            pert = base[None] + sign * eye
            Ws2 = [w if (i != l or is_bias) else pert for i, w in enumerate(Ws)]
            bs2 = [b if (i != l or not is_bias) else pert for i, b in enumerate(bs)]
            val = _mean_square(_numpy_forward(Ws2, bs2, acts, x))
            fd = val if sign == 1 else (fd - val) / (2 * FD_STEP)
        a = g.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), FD_FLOOR * max(g_max, abs(loss.item())))
        worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst


def gradient_check_random(n: int = 200, seed: int = 0) -> float:
    """Worst relative error over ``n`` random networks (depth <= 3, width <= 64)."""
    gen = _rng.generator(seed, _rng.STREAM_METRICS, 0)
    worst = 0.0
    for i in range(n):
        sizes, acts = random_mlp_config(gen)
        worst = max(worst, gradient_check(sizes, acts, seed=seed * 100_003 + i, fused=i % 4 == 3))
    return worst


# -- Martingale oracle -----------------------------------------------------------------------


def increment_z_scores(inc: np.ndarray) -> np.ndarray:
    """Per-window z-score of the path-mean increment; windows with no spread score 0."""
    n = inc.shape[1]
    mean = inc.mean(axis=1)
    se = inc.std(axis=1, ddof=1) / np.sqrt(n)
    z = np.zeros_like(mean)
    ok = se > 0
    z[ok] = mean[ok] / se[ok]
    return z


def martingale_oracle(d: int = 5, M: int = 100_000, N: int = 300, dt: float = 0.01, seed: int = 0, k: int = 1) -> dict:
    """Exact linear-PBE solution injected into the increment on a cube ensemble."""
    pb = make_linear_pbe(d, "cube")
    ens = sample_ensemble(pb.coefficients, pb.domain, np.zeros(d), M, N, dt, seed=seed)
    inc = path_increments(pb.exact_solution, pb, ens, MiniBatch(0, np.arange(M)), k).data
    z = increment_z_scores(inc)
    return {"z": z, "max_abs_z": float(np.abs(z).max()), "windows": len(z), "ensemble": ens, "problem": pb}


def martingale_batch_slope(pb, ens, sizes=(250, 1000, 4000), repeats: int = 40, seed: int = 1, k: int = 1) -> dict:
    """Mean exact-solution Loss_mart per batch size and the log-log slope against size."""
    means = []
    for B in sizes:
        vals = [loss_mart_bvp(pb.exact_solution, pb, ens, select_minibatch(ens.M, epoch=e, seed=seed, fixed_size=B), k).item() for e in range(repeats)]
        means.append(float(np.mean(vals)))
    slope = float(np.polyfit(np.log(sizes), np.log(means), 1)[0])
    return {"sizes": list(sizes), "loss": means, "slope": slope}


# -- Feynman-Kac ------------------------------------------------------------------------------


def fk_pbe_ball(d: int = 10, M: int = 100_000, dt: float = 2.5e-4, seed: int = 5, continuity_correction: bool = True) -> dict:
    """FK estimate of the linear PBE at the centre of the unit ball (exact value d)."""
    pb = make_linear_pbe(d, "ball")
    N = int(round(2.0 / dt))
    est = feynman_kac_streaming(pb, np.zeros(d), M, N, dt, seed, continuity_correction=continuity_correction)
    exact = float(pb.exact_solution(np.zeros((1, d)))[0])
    return {"estimate": est.estimate, "stderr": est.stderr, "exact": exact, "z": (est.estimate - exact) / est.stderr, "censored": est.censored_fraction}


def poisson_1d(f: float):
    """u'' = f on [-1, 1] with u(+-1) = 0, exact u = f (x^2 - 1) / 2."""
    return linear_bvp(
        "poisson-1d",
        Domain("cube", 1),
        0.0,
        lambda x: np.full(len(x), f),
        lambda x: np.zeros(len(x)),
        exact=lambda x: 0.5 * f * (np.atleast_2d(x)[:, 0] ** 2 - 1.0),
        params={"f": f},
    )


def fk_sign_check(M: int = 100_000, f: float = 1.0, dt: float = 1e-3, seed: int = 7, continuity_correction: bool = True) -> dict:
    """FK at the origin for u'' = f on [-1, 1] with both signs of the source term.

    The estimator subtracts the accumulated source; flipping that sign moves the
    estimate to the mirror image of the exact value.
    """
    pb = poisson_1d(f)
    N = int(round(8.0 / dt))
    est = feynman_kac_streaming(pb, np.zeros(1), M, N, dt, seed, continuity_correction=continuity_correction)
    exact = float(pb.exact_solution(np.zeros((1, 1)))[0])
    # g = 0 here, so the estimate is minus the source integral and the other sign is its negation
    opposite = -est.estimate
    return {
        "sign": "minus",
        "estimate": est.estimate,
        "stderr": est.stderr,
        "exact": exact,
        "opposite": opposite,
        "z": (est.estimate - exact) / est.stderr,
        "z_opposite": (opposite - exact) / est.stderr,
    }


# -- sampler ----------------------------------------------------------------------------------


def sampler_statistics(M: int = 100_000, d: int = 10, N: int = 100, dt: float = 0.01, seed: int = 0) -> dict:
    """Variance identity for free Brownian motion and exit-point placement for a killed one."""
    coeffs = SdeCoefficients()
    free = sample_ensemble(coeffs, Domain("unbounded", d), np.zeros(d), M, N, dt, seed=seed)
    end = free.points(np.arange(M), np.full(M, N))
    sq = np.einsum("ij,ij->i", end, end)
    mean = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(M))
    expected = d * N * dt
    residual = 0.0
    for dom in (Domain("ball", d), Domain("cube", d)):
        killed = sample_ensemble(coeffs, dom, np.zeros(d), min(M, 20_000), N, dt, seed=seed + 1)
        ex = killed.exit_point[~killed.censored]
        if len(ex):
            residual = max(residual, float(np.abs(dom.boundary_residual(ex)).max()))
    return {"mean": mean, "stderr": se, "expected": expected, "z": (mean - expected) / se, "boundary_residual": residual}
