"""Euler-Maruyama path ensembles, killed at the first exit from a domain.

A path is advanced only while it is inside the closed domain.  The first step
that lands outside marks ``exit_index``; the recorded ``exit_point`` is the
intersection of that last segment with the boundary, and every later
position is frozen there.  The raw outside point is kept as
``overshoot_point`` because the unbiased discrete Martingale needs it.

Storage is ragged: only positions strictly before the exit are stored, in
path-major order with CSR offsets.  Dense ``(M, N+1, d)`` views are built on
request.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng as _rng
from .errors import InvalidInput, SimulationError

CENSORED = -1
ENSEMBLE_FORMAT_VERSION = 1
DEFAULT_MEMORY_BUDGET = 2 * 1024**3  # bytes of double-precision positions


@dataclass(frozen=True)
class Domain:
    """``cube`` (half width L), ``ball`` (radius L) or ``unbounded``."""

    kind: str
    d: int
    L: float = 1.0
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("cube", "ball", "unbounded"):
            raise InvalidInput(f"unknown domain kind {self.kind!r}")
        if self.d < 1:
            raise InvalidInput(f"dimension must be >= 1, got {self.d}")
        if self.bounded and not self.L > 0:
            raise InvalidInput(f"domain size L must be > 0, got {self.L}")
        if self.center is not None and len(self.center) != self.d:
            raise InvalidInput("center has the wrong dimension")

    @property
    def bounded(self) -> bool:
        return self.kind != "unbounded"

    @property
    def c(self) -> np.ndarray:
        return np.zeros(self.d) if self.center is None else np.asarray(self.center, dtype=np.float64)

    def margin(self, x: np.ndarray) -> np.ndarray:
        """Distance-like slack to the boundary: >= 0 inside the closure."""
        x = np.atleast_2d(x) - self.c
        if self.kind == "cube":
            return self.L - np.abs(x).max(axis=1)
        if self.kind == "ball":
            return self.L - np.linalg.norm(x, axis=1)
        return np.full(len(x), np.inf)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Membership in the closed domain."""
        return self.margin(x) >= 0

    def interior(self, x: np.ndarray) -> np.ndarray:
        return self.margin(x) > 0

    def boundary_residual(self, x: np.ndarray) -> np.ndarray:
        """|margin|: zero exactly on the boundary."""
        return np.abs(self.margin(x))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "d": self.d, "L": self.L, "center": None if self.center is None else list(self.center)}


def exit_fraction(prev: np.ndarray, nxt: np.ndarray, domain: Domain) -> np.ndarray:
    """Segment parameter s in [0, 1] where prev + s (nxt - prev) meets the boundary.

    Rows must have ``prev`` in the closure and ``nxt`` outside.
    """
    c = domain.c
    p, q = prev - c, nxt - c
    v = q - p
    if domain.kind == "cube":
        L = domain.L
        with np.errstate(divide="ignore", invalid="ignore"):
            hi = np.where(q > L, (L - p) / v, np.inf)
            lo = np.where(q < -L, (-L - p) / v, np.inf)
        return np.clip(np.minimum(hi, lo).min(axis=1), 0.0, 1.0)
    # ball: |p + s v|^2 = L^2, the root in [0, 1]
    a = np.einsum("ij,ij->i", v, v)
    b = 2.0 * np.einsum("ij,ij->i", p, v)
    cc = np.einsum("ij,ij->i", p, p) - domain.L**2
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * cc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(b >= 0, -2.0 * cc / (b + disc), (-b + disc) / (2.0 * a))
    return np.clip(np.nan_to_num(s, nan=0.0), 0.0, 1.0)


def project_to_boundary(x: np.ndarray, domain: Domain) -> np.ndarray:
    """Snap points that are within rounding of the boundary exactly onto it."""
    c = domain.c
    y = np.atleast_2d(x) - c
    if domain.kind == "ball":
        r = np.linalg.norm(y, axis=1, keepdims=True)
        y = y * (domain.L / np.where(r > 0, r, 1.0))
    elif domain.kind == "cube":
        L = domain.L
        y = np.clip(y, -L, L)
        j = np.argmax(np.abs(y), axis=1)
        rows = np.arange(len(y))
        y[rows, j] = np.where(y[rows, j] >= 0, L, -L)
    return y + c


def detect_exit(prev, nxt, domain: Domain) -> tuple[bool, np.ndarray | None]:
    """Whether the step prev -> nxt leaves the closed domain, and where it crosses."""
    prev = np.asarray(prev, dtype=np.float64).reshape(1, -1)
    nxt = np.asarray(nxt, dtype=np.float64).reshape(1, -1)
    if not domain.bounded or domain.contains(nxt)[0]:
        return False, None
    s = exit_fraction(prev, nxt, domain)
    pt = project_to_boundary(prev + s[:, None] * (nxt - prev), domain)
    return True, pt[0]


@dataclass
class SdeCoefficients:
    """Drift ``mu(x)`` (rows -> rows) and diffusion.

    ``diffusion`` is ``"identity"``, a scalar multiple of the identity, a
    constant (d, d) matrix, or a callable returning (n, d, d).
    """

    drift: Callable[[np.ndarray], np.ndarray] | None = None
    diffusion: object = "identity"
    tag: str = "brownian"

    def mu(self, x: np.ndarray) -> np.ndarray:
        if self.drift is None:
            return np.zeros_like(x)
        return self.drift(x)

    def apply_sigma(self, x: np.ndarray, db: np.ndarray) -> np.ndarray:
        s = self.diffusion
        if isinstance(s, str):
            if s != "identity":
                raise InvalidInput(f"unknown diffusion {s!r}")
            return db
        if callable(s):
            return np.einsum("nij,nj->ni", s(x), db)
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 0:
            return float(s) * db
        return db @ s.T

    def without_drift(self) -> SdeCoefficients:
        return SdeCoefficients(None, self.diffusion, self.tag + "/nodrift")


@dataclass
class PathEnsemble:
    """M paths of N Euler-Maruyama steps from a common start ``x0``."""

    x0: np.ndarray
    dt: float
    n_steps: int
    seed: int
    domain: Domain
    offsets: np.ndarray  # (M+1,) CSR offsets into ``stored``
    stored: np.ndarray  # pre-exit positions, path-major
    exit_index: np.ndarray  # (M,), CENSORED for paths still inside at T
    exit_point: np.ndarray  # (M, d), nan rows when censored
    overshoot_point: np.ndarray  # (M, d), first outside Euler point; nan when censored
    coeff_tag: str = "brownian"
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.exit_index)

    @property
    def N(self) -> int:
        return self.n_steps

    @property
    def d(self) -> int:
        return len(self.x0)

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def censored(self) -> np.ndarray:
        return self.exit_index == CENSORED

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(self.censored))

    def effective_exit(self, idx=None) -> np.ndarray:
        """Exit index with censored paths mapped to N+1 (never exit on the grid)."""
        e = self.exit_index if idx is None else self.exit_index[idx]
        return np.where(e == CENSORED, self.n_steps + 1, e)

    def points(self, paths, steps, frozen: str = "boundary") -> np.ndarray:
        """positions[paths, steps] with the killed-path convention.

        ``frozen='boundary'`` returns ``exit_point`` at and after the exit
        index; ``frozen='overshoot'`` returns the first outside Euler point.
        """
        paths = np.asarray(paths, dtype=np.int64)
        steps = np.asarray(steps, dtype=np.int64)
        paths, steps = np.broadcast_arrays(paths, steps)
        e = self.effective_exit(paths)
        inside = steps < e
        out = np.empty(paths.shape + (self.d,), dtype=np.float64)
        out[inside] = self.stored[self.offsets[paths[inside]] + steps[inside]]
        tail = self.exit_point if frozen == "boundary" else self.overshoot_point
        out[~inside] = tail[paths[~inside]]
        return out

    def path(self, m: int) -> np.ndarray:
        """Dense (N+1, d) trajectory of one path, frozen after exit."""
        return self.points(np.full(self.N + 1, m), np.arange(self.N + 1))

    @property
    def positions(self) -> np.ndarray:
        """Dense (M, N+1, d) array (materialised; mind the memory)."""
        M, N = self.M, self.N
        return self.points(np.repeat(np.arange(M), N + 1).reshape(M, N + 1), np.tile(np.arange(N + 1), (M, 1)))

    def header(self) -> dict:
        return {
            "version": ENSEMBLE_FORMAT_VERSION,
            "d": self.d,
            "M": self.M,
            "N": self.N,
            "dt": self.dt,
            "seed": self.seed,
            "x0": [float(v) for v in self.x0],
            "domain": self.domain.descriptor(),
            "coefficients": self.coeff_tag,
        }


@dataclass
class StepRecord:
    """Alive paths at grid index ``i`` and the ones that leave on the next step."""

    i: int
    alive: np.ndarray
    x: np.ndarray
    exited: np.ndarray
    exit_point: np.ndarray
    overshoot: np.ndarray


def _check_request(domain: Domain, x0, M: int, N: int, dt: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if len(x0) != domain.d:
        raise InvalidInput(f"x0 has dimension {len(x0)}, domain has {domain.d}")
    if M < 1 or N < 1:
        raise InvalidInput(f"need M >= 1 and N >= 1, got M={M}, N={N}")
    if not dt > 0:
        raise InvalidInput(f"dt must be > 0, got {dt}")
    if domain.bounded and not domain.interior(x0[None])[0]:
        raise InvalidInput(f"x0 = {x0.tolist()} is not inside the domain")
    return x0


def iterate_paths(coeffs: SdeCoefficients, domain: Domain, x0, M: int, N: int, dt: float, seed: int, path_offset: int = 0, exit_shift: float = 0.0):
    """Advance M killed Euler-Maruyama paths, yielding one :class:`StepRecord` per step.

    The final record has ``i == N`` and lists the paths still alive at T.
    Noise for (path, step) is keyed by (seed, path + path_offset, step) only.
    ``exit_shift`` > 0 detects exits against the boundary pulled inward by that
    distance (exit points are still placed on the true boundary).
    """
    x0 = _check_request(domain, x0, M, N, dt)
    watch = domain
    if exit_shift > 0 and domain.bounded:
        if exit_shift >= domain.L:
            raise InvalidInput(f"exit_shift {exit_shift} swallows the domain (L={domain.L})")
        watch = Domain(domain.kind, domain.d, domain.L - exit_shift, domain.center)
    d = domain.d
    sq = np.sqrt(dt)
    alive = np.arange(M, dtype=np.int64)
    x = np.repeat(x0[None, :], M, axis=0)
    empty_i = np.empty(0, dtype=np.int64)
    empty_x = np.empty((0, d))
    for i in range(N):
        if len(alive) == 0:
            return
        db = sq * _rng.normals(seed, _rng.STREAM_PATHS, alive + path_offset, np.uint64(i), d)
        nxt = x + coeffs.mu(x) * dt + coeffs.apply_sigma(x, db)
        bad = ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise SimulationError(f"non-finite state on path {int(alive[j])} at step {i + 1}")
        rec = StepRecord(i, alive, x, empty_i, empty_x, empty_x)
        if domain.bounded:
            out = ~watch.contains(nxt)
            if out.any():
                s = exit_fraction(x[out], nxt[out], watch)
                rec.exited = alive[out]
                rec.exit_point = project_to_boundary(x[out] + s[:, None] * (nxt[out] - x[out]), domain)
                rec.overshoot = nxt[out]
                keep = ~out
                alive, nxt = alive[keep], nxt[keep]
        yield rec
        x = nxt
    if len(alive):
        yield StepRecord(N, alive, x, empty_i, empty_x, empty_x)


def sample_ensemble(
    coeffs: SdeCoefficients,
    domain: Domain,
    x0,
    M: int,
    N: int,
    dt: float,
    seed: int,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    path_offset: int = 0,
) -> PathEnsemble:
    """Simulate and store M paths; see :func:`iterate_paths` for the dynamics.

    ``path_offset`` shifts the path labels used for noise addressing, so a
    slice of a larger ensemble can be regenerated exactly.
    """
    x0 = _check_request(domain, x0, M, N, dt)
    d = domain.d
    store_dtype = np.float64
    if M * (N + 1) * d * 8 > memory_budget:
        store_dtype = np.float32
    exit_index = np.full(M, CENSORED, dtype=np.int64)
    exit_point = np.full((M, d), np.nan)
    overshoot = np.full((M, d), np.nan)
    chunks_idx: list[np.ndarray] = []
    chunks_pos: list[np.ndarray] = []
    for rec in iterate_paths(coeffs, domain, x0, M, N, dt, seed, path_offset):
        chunks_idx.append(rec.alive)
        chunks_pos.append(rec.x.astype(store_dtype, copy=True))
        if len(rec.exited):
            exit_index[rec.exited] = rec.i + 1
            exit_point[rec.exited] = rec.exit_point
            overshoot[rec.exited] = rec.overshoot

    counts = np.where(exit_index == CENSORED, N + 1, exit_index)
    offsets = np.zeros(M + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    stored = np.empty((int(offsets[-1]), d), dtype=store_dtype)
    for step, (ids, pos) in enumerate(zip(chunks_idx, chunks_pos)):
        stored[offsets[ids] + step] = pos
    del chunks_pos
    return PathEnsemble(
        x0=x0,
        dt=float(dt),
        n_steps=int(N),
        seed=int(seed),
        domain=domain,
        offsets=offsets,
        stored=stored,
        exit_index=exit_index,
        exit_point=exit_point,
        overshoot_point=overshoot,
        coeff_tag=coeffs.tag,
    )


def drifted_brownian_indicator(ensemble: PathEnsemble, i: int) -> np.ndarray:
    """I(t_i <= tau_D) per path, with tau_D taken at the exit grid index."""
    if not 0 <= i <= ensemble.N:
        raise InvalidInput(f"time index {i} outside [0, {ensemble.N}]")
    e = ensemble.exit_index
    return ((e == CENSORED) | (i <= e)).astype(np.float64)


# -- cache -------------------------------------------------------------------------


def save_ensemble(ensemble: PathEnsemble, path) -> None:
    path = Path(path)
    np.savez(
        path,
        header=np.frombuffer(json.dumps(ensemble.header(), sort_keys=True).encode(), dtype=np.uint8),
        offsets=ensemble.offsets,
        stored=ensemble.stored,
        exit_index=ensemble.exit_index,
        exit_point=ensemble.exit_point,
        overshoot_point=ensemble.overshoot_point,
    )


def load_ensemble(path, expect: dict | None = None) -> PathEnsemble:
    """Read a cached ensemble; ``expect`` (a header dict) must match exactly."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != ENSEMBLE_FORMAT_VERSION:
            raise InvalidInput(f"{path}: unsupported ensemble cache version {header.get('version')}")
        if expect is not None:
            diff = {k for k in set(expect) | set(header) if expect.get(k) != header.get(k)}
            if diff:
                raise InvalidInput(f"{path}: cached ensemble does not match the request ({sorted(diff)})")
        dom = header["domain"]
        domain = Domain(dom["kind"], dom["d"], dom["L"], None if dom["center"] is None else tuple(dom["center"]))
        return PathEnsemble(
            x0=np.asarray(header["x0"], dtype=np.float64),
            dt=header["dt"],
            n_steps=header["N"],
            seed=header["seed"],
            domain=domain,
            offsets=z["offsets"],
            stored=z["stored"],
            exit_index=z["exit_index"],
            exit_point=z["exit_point"],
            overshoot_point=z["overshoot_point"],
            coeff_tag=header["coefficients"],
        )
