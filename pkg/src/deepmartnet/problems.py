"""Benchmark PDE problems in the form the losses consume.

Every problem is written against the generator of its diffusion.  For a BVP
the PDE is rearranged as ``L u = source(x) - potential(x, u)``; for an
eigenproblem as ``L u = -(zeroth_order(x) + lambda/2) u``.  Both right-hand
sides are the Martingale integrands, so the losses never need to know which
PDE they are solving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as _rng
from .errors import InvalidInput
from .nn import MlpParams, Tensor, as_tensor, forward, forward_with_directional
from .sde import Domain, SdeCoefficients

BVP = "bvp"
EIGEN = "eigen"


@dataclass(frozen=True)
class Mollifier:
    """rho(x) = 1 / (1 + (|x|/alpha)^2)."""

    alpha: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        r2 = np.einsum("ij,ij->i", x, x) / self.alpha**2
        return 1.0 / (1.0 + r2)

    def grad(self, x: np.ndarray) -> np.ndarray:
        rho = self(x)
        return (-2.0 / self.alpha**2) * (rho * rho)[:, None] * x


@dataclass(frozen=True)
class FeynmanKacData:
    """u(x0) = E[g(X_tau) e^{rate tau} - int_0^tau source(X_s) e^{rate s} ds]."""

    rate: float
    source: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    domain: Domain
    coefficients: SdeCoefficients
    kind: str
    source: Callable[[np.ndarray], np.ndarray] | None = None
    potential: Callable[[np.ndarray, Tensor], Tensor] | None = None
    boundary: Callable[[np.ndarray], np.ndarray] | None = None
    zeroth_order: Callable[[np.ndarray], np.ndarray] | None = None
    exact_solution: Callable[[np.ndarray], np.ndarray] | None = None
    exact_eigenvalue: float | None = None
    mollifier: Mollifier | None = None
    feynman_kac: FeynmanKacData | None = None
    rhs: Callable[[np.ndarray], np.ndarray] | None = None  # f in the PDE's own normalisation
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (BVP, EIGEN):
            raise InvalidInput(f"problem kind must be 'bvp' or 'eigen', got {self.kind!r}")
        if self.mollifier is not None and (self.kind != EIGEN or self.domain.bounded):
            raise InvalidInput("a mollifier is only meaningful for eigenproblems on unbounded domains")

    @property
    def is_eigen(self) -> bool:
        return self.kind == EIGEN

    def g(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.zeros(len(x)) if self.boundary is None else self.boundary(x)

    def zeroth_order_coefficient(self, x: np.ndarray, lam):
        """q(x) + lambda/2; ``lam`` may be a tensor so lambda stays in the graph."""
        q = np.zeros(len(x)) if self.zeroth_order is None else self.zeroth_order(x)
        return as_tensor(lam) * 0.5 + q

    def integrand(self, x: np.ndarray, u: Tensor, lam=None) -> Tensor:
        """The value of (L u)(x) the PDE prescribes, given u at x (and lambda)."""
        if self.is_eigen:
            if lam is None:
                raise InvalidInput(f"{self.name}: eigen integrand needs lambda")
            return -(self.zeroth_order_coefficient(x, lam) * u)
        out = as_tensor(np.zeros(len(x)) if self.source is None else self.source(x))
        if self.potential is not None:
            out = out - self.potential(x, u)
        return out

    def evaluate(self, net: MlpParams, x: np.ndarray) -> Tensor:
        """u_theta(x) as a 1-D tensor, including the mollifier when present.

        ``net`` may also be a plain callable mapping (n, d) points to n values.
        """
        if isinstance(net, MlpParams):
            raw = forward(net, x).reshape(-1)
        else:
            raw = as_tensor(np.asarray(net(x), dtype=np.float64)).reshape(-1)
        if self.mollifier is None:
            return raw
        return raw * self.mollifier(x)

    def evaluate_with_directional(self, net: MlpParams, x: np.ndarray, direction: np.ndarray) -> tuple[Tensor, Tensor]:
        u, du = forward_with_directional(net, x, direction)
        u, du = u.reshape(-1), du.reshape(-1)
        if self.mollifier is None:
            return u, du
        rho = self.mollifier(x)
        drho = np.einsum("ij,ij->i", self.mollifier.grad(x), direction)
        return u * rho, du * rho + u * drho


def mollify(u_raw: Callable, rho: Callable) -> Callable:
    """x -> rho(x) * u_raw(x); works on arrays and on tensors."""

    def u(x):
        return u_raw(x) * rho(x)

    return u


def _sq(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def linear_bvp(
    name: str,
    domain: Domain,
    c: float,
    f: Callable[[np.ndarray], np.ndarray],
    g: Callable[[np.ndarray], np.ndarray],
    exact: Callable[[np.ndarray], np.ndarray] | None = None,
    params: dict | None = None,
) -> ProblemSpec:
    """Delta u + c u = f with Brownian paths (generator Delta/2); no sign check on c."""
    return ProblemSpec(
        name=name,
        d=domain.d,
        domain=domain,
        coefficients=SdeCoefficients(tag="brownian"),
        kind=BVP,
        source=lambda x: 0.5 * f(x),
        potential=(lambda x, u: (0.5 * c) * u) if c != 0 else None,
        boundary=g,
        exact_solution=exact,
        feynman_kac=FeynmanKacData(rate=0.5 * c, source=lambda x: 0.5 * f(x)),
        rhs=f,
        params={"c": c, **(params or {})},
    )


def make_linear_pbe(d: int, domain: Domain | str = "cube", c: float = -1.0, omega: float = 2.0, L: float = 1.0) -> ProblemSpec:
    """Delta u + c u = f with u = sum_i cos(omega x_i) on a cube or ball."""
    if not c < 0:
        raise InvalidInput(f"linear PBE needs c < 0 for the Feynman-Kac weight to decay, got c={c}")
    if isinstance(domain, str):
        domain = Domain(domain, d, L)
    if domain.d != d or not domain.bounded:
        raise InvalidInput("linear PBE needs a bounded domain of matching dimension")

    def exact(x):
        return np.cos(omega * np.atleast_2d(x)).sum(axis=1)

    def f(x):
        return (c - omega**2) * exact(x)

    name = "pbe-cube" if domain.kind == "cube" else "pbe-ball"
    return linear_bvp(name, domain, c, f, exact, exact, {"d": d, "omega": omega, "L": domain.L})


def make_nonlinear_pbe(d: int, L: float = 1.0, alpha: float = 2.0) -> ProblemSpec:
    """-Delta u + sinh u = f in the ball of radius L with u = alpha |x|^2."""
    if d < 1 or not L > 0:
        raise InvalidInput(f"need d >= 1 and L > 0, got d={d}, L={L}")
    domain = Domain("ball", d, L)

    def exact(x):
        return alpha * _sq(np.atleast_2d(x))

    def f(x):
        return -2.0 * alpha * d + np.sinh(alpha * _sq(np.atleast_2d(x)))

    return ProblemSpec(
        name="pbe-sinh",
        d=d,
        domain=domain,
        coefficients=SdeCoefficients(tag="brownian"),
        kind=BVP,
        # Delta u / 2 = (sinh u - f) / 2
        source=lambda x: -0.5 * f(x),
        potential=lambda x, u: -0.5 * u.sinh(),
        boundary=lambda x: np.full(len(np.atleast_2d(x)), alpha * L * L),
        exact_solution=exact,
        rhs=f,
        params={"d": d, "L": L, "alpha": alpha},
    )


def make_laplace_eigen(d: int, L: float = 1.0) -> ProblemSpec:
    """-Delta u = lambda u, u = 0 on the boundary of the centred cube of side L.

    Ground state prod_i cos(pi x_i / L) with lambda_1 = d (pi/L)^2.
    """
    if d < 1 or not L > 0:
        raise InvalidInput(f"need d >= 1 and L > 0, got d={d}, L={L}")
    domain = Domain("cube", d, 0.5 * L)

    def exact(x):
        return np.prod(np.cos(math.pi * np.atleast_2d(x) / L), axis=1)

    return ProblemSpec(
        name="laplace-eig",
        d=d,
        domain=domain,
        coefficients=SdeCoefficients(tag="brownian"),
        kind=EIGEN,
        zeroth_order=None,
        exact_solution=exact,
        exact_eigenvalue=d * (math.pi / L) ** 2,
        params={"d": d, "L": L},
    )


def make_fokker_planck_eigen(d: int, c: float | None = None, alpha_mollifier: float = 5.0 / 11.0) -> ProblemSpec:
    """-Delta psi - div(psi grad W) + c psi = lambda psi on R^d with W = |x|^2.

    Paths carry the drift grad W / 2 = x; the ground state is exp(-|x|^2)
    with lambda = c (c defaults to d).
    """
    if d < 1:
        raise InvalidInput(f"need d >= 1, got {d}")
    c = float(d if c is None else c)
    domain = Domain("unbounded", d)

    def exact(x):
        return np.exp(-_sq(np.atleast_2d(x)))

    # Delta W / 2 - c / 2 with W = |x|^2
    q = d - 0.5 * c
    return ProblemSpec(
        name="fokker-planck-eig",
        d=d,
        domain=domain,
        coefficients=SdeCoefficients(drift=lambda x: x, tag="drift=x"),
        kind=EIGEN,
        zeroth_order=lambda x: np.full(len(x), q),
        exact_solution=exact,
        exact_eigenvalue=c,
        mollifier=Mollifier(alpha_mollifier),
        params={"d": d, "c": c, "alpha_mollifier": alpha_mollifier},
    )


def sample_boundary(domain: Domain, n: int, seed: int, epoch: int = 0) -> np.ndarray:
    """n points uniform on the boundary surface; stream keyed by (seed, epoch)."""
    if not domain.bounded:
        raise InvalidInput("cannot sample the boundary of an unbounded domain")
    if n < 1:
        raise InvalidInput(f"need n >= 1 boundary points, got {n}")
    gen = _rng.generator(seed, _rng.STREAM_BOUNDARY, epoch)
    d, L = domain.d, domain.L
    if domain.kind == "ball":
        z = gen.standard_normal((n, d))
        z *= L / np.linalg.norm(z, axis=1, keepdims=True)
        return z + domain.c
    # every face of a cube has the same area, so pick one uniformly
    pts = gen.uniform(-L, L, size=(n, d))
    face = gen.integers(0, 2 * d, size=n)
    pts[np.arange(n), face // 2] = np.where(face % 2 == 0, -L, L)
    return pts + domain.c


PROBLEM_DEFAULTS: dict[str, dict] = {
    "pbe-cube": {"d": 20, "L": 1.0, "c": -1.0, "omega": 2.0},
    "pbe-ball": {"d": 100, "L": 1.0, "c": -1.0, "omega": 2.0},
    "pbe-sinh": {"d": 10, "L": 1.0, "alpha": 2.0},
    "laplace-eig": {"d": 10, "L": 1.0},
    "fokker-planck-eig": {"d": 5, "c": None, "alpha_mollifier": 5.0 / 11.0},
}


def build_problem(name: str, **params) -> ProblemSpec:
    """Construct a registered problem by name; unknown keys are rejected."""
    if name not in PROBLEM_DEFAULTS:
        raise InvalidInput(f"unknown problem {name!r}; known: {', '.join(PROBLEM_DEFAULTS)}")
    allowed = PROBLEM_DEFAULTS[name]
    extra = set(params) - set(allowed)
    if extra:
        raise InvalidInput(f"problem {name!r} has no parameter(s) {sorted(extra)}")
    p = {**allowed, **params}
    if name in ("pbe-cube", "pbe-ball"):
        kind = "cube" if name == "pbe-cube" else "ball"
        return make_linear_pbe(int(p["d"]), kind, float(p["c"]), float(p["omega"]), float(p["L"]))
    if name == "pbe-sinh":
        return make_nonlinear_pbe(int(p["d"]), float(p["L"]), float(p["alpha"]))
    if name == "laplace-eig":
        return make_laplace_eigen(int(p["d"]), float(p["L"]))
    return make_fokker_planck_eigen(int(p["d"]), p["c"], float(p["alpha_mollifier"]))
