import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepmartnet.errors import InvalidInput
from deepmartnet.nn import init_mlp
from deepmartnet.problems import (
    Mollifier,
    build_problem,
    make_fokker_planck_eigen,
    make_laplace_eigen,
    make_linear_pbe,
    make_nonlinear_pbe,
    sample_boundary,
)
from deepmartnet.sde import Domain


def fd_laplacian(u, x, h=1e-4):
    x = np.atleast_2d(x)
    out = -2 * x.shape[1] * u(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        out = out + u(x + e) + u(x - e)
    return out / h**2


def test_linear_pbe_values():
    pb = make_linear_pbe(20, "cube")
    assert pb.exact_solution(np.zeros((1, 20)))[0] == 20.0
    assert pb.rhs(np.zeros((1, 20)))[0] == pytest.approx(-100.0)
    assert pb.g(np.ones((1, 20)))[0] == pytest.approx(-8.3229, abs=1e-4)
    e = np.full(20, 20**-0.5)
    for s in (-1.0, 0.3, 2.0):
        assert pb.exact_solution((s * e)[None])[0] == pytest.approx(20 * math.cos(2 * s / math.sqrt(20)))


def test_linear_pbe_residual():
    pb = make_linear_pbe(4, "ball")
    x = np.random.default_rng(0).uniform(-0.4, 0.4, (5, 4))
    lhs = fd_laplacian(pb.exact_solution, x) + pb.params["c"] * pb.exact_solution(x)
    assert np.allclose(lhs, pb.rhs(x), atol=1e-5)


def test_linear_pbe_rejects_nonnegative_c():
    with pytest.raises(InvalidInput):
        make_linear_pbe(3, "cube", c=0.5)


def test_nonlinear_pbe_values():
    pb = make_nonlinear_pbe(10)
    assert np.all(pb.g(np.eye(10)) == 2.0)
    assert pb.rhs(np.zeros((1, 10)))[0] == -40.0
    assert pb.exact_solution(np.zeros((1, 10)))[0] == 0.0
    x = np.random.default_rng(1).uniform(-0.3, 0.3, (4, 10))
    lhs = -fd_laplacian(pb.exact_solution, x) + np.sinh(pb.exact_solution(x))
    assert np.allclose(lhs, pb.rhs(x), atol=1e-5)


def test_laplace_eigenvalue():
    assert make_laplace_eigen(10).exact_eigenvalue == pytest.approx(10 * math.pi**2)
    assert make_laplace_eigen(1, L=math.pi).exact_eigenvalue == pytest.approx(1.0)


def test_laplace_eigenfunction_residual_and_boundary():
    pb = make_laplace_eigen(3)
    x = np.random.default_rng(2).uniform(-0.4, 0.4, (5, 3))
    lhs = -fd_laplacian(pb.exact_solution, x, h=1e-3)
    assert np.allclose(lhs, pb.exact_eigenvalue * pb.exact_solution(x), rtol=1e-5, atol=1e-5)
    face = sample_boundary(pb.domain, 100, seed=0)
    assert np.allclose(pb.exact_solution(face), 0.0, atol=1e-15)


def test_fokker_planck_coefficients():
    pb = make_fokker_planck_eigen(5, c=5)
    assert pb.exact_eigenvalue == 5
    e1 = np.eye(5)[:1]
    assert np.array_equal(pb.coefficients.mu(e1), e1)
    x = np.random.default_rng(3).normal(size=(7, 5))
    assert np.allclose(pb.zeroth_order_coefficient(x, 5.0).data, 5.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 6))
def test_fokker_planck_operator_annihilates_ground_state(seed, d):
    # -Delta psi - div(psi grad W) = 0 with W = |x|^2
    x = np.random.default_rng(seed).normal(size=(3, d)) * 0.7
    psi = lambda y: np.exp(-np.einsum("ij,ij->i", y, y))
    r2 = np.einsum("ij,ij->i", x, x)
    lap = (4 * r2 - 2 * d) * psi(x)
    div = (2 * d - 4 * r2) * psi(x)
    assert np.allclose(-lap - div, 0.0, atol=1e-12)
    assert np.allclose(fd_laplacian(psi, x, h=1e-3), lap, atol=1e-5)


def test_mollifier_values():
    rho = Mollifier(5 / 11)
    assert rho(np.zeros((1, 3)))[0] == 1.0
    assert rho(np.array([[5 / 11, 0, 0]]))[0] == pytest.approx(0.5)
    assert rho(np.array([[1.0, 0, 0]]))[0] == pytest.approx(25 / 146)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mollifier_bounds_and_monotone(seed):
    rho = Mollifier(5 / 11)
    x = np.random.default_rng(seed).normal(size=(10, 4))
    r = rho(x)
    assert np.all((r > 0) & (r <= 1))
    assert np.all(rho(2 * x) <= r)


def test_mollified_directional_derivative():
    pb = make_fokker_planck_eigen(3)
    net = init_mlp([3, 6, 1], ["tanh"], seed=0)
    for b in net.biases:
        b.data[:] = 0.3
    x = np.random.default_rng(4).normal(size=(4, 3))
    e = np.array([0.0, 1.0, 0.0])
    _, du = pb.evaluate_with_directional(net, x, np.tile(e, (4, 1)))
    h = 1e-6
    fd = (pb.evaluate(net, x + h * e).data - pb.evaluate(net, x - h * e).data) / (2 * h)
    assert np.allclose(du.data, fd, atol=1e-8)


def test_boundary_sampler_cube_1d():
    pts = sample_boundary(Domain("cube", 1), 10_000, seed=1)
    assert set(np.unique(pts)) == {-1.0, 1.0}
    p = np.mean(pts == 1.0)
    assert abs(p - 0.5) <= 4 * 0.5 / 100


def test_boundary_sampler_cube_2d_faces():
    pts = sample_boundary(Domain("cube", 2), 10_000, seed=2)
    frac = np.mean(np.abs(pts[:, 0]) == 1.0)
    assert abs(frac - 0.5) <= 4 * 0.5 / 100


def test_boundary_sampler_ball():
    pts = sample_boundary(Domain("ball", 7, L=2.0), 500, seed=3)
    assert np.abs(np.linalg.norm(pts, axis=1) - 2.0).max() <= 1e-12


def test_boundary_sampler_epochs_differ():
    dom = Domain("ball", 3)
    assert not np.array_equal(sample_boundary(dom, 5, 1, epoch=0), sample_boundary(dom, 5, 1, epoch=1))
    assert np.array_equal(sample_boundary(dom, 5, 1, epoch=2), sample_boundary(dom, 5, 1, epoch=2))


def test_registry():
    assert build_problem("pbe-cube").d == 20
    assert build_problem("pbe-ball", d=7).domain.kind == "ball"
    assert build_problem("fokker-planck-eig", d=4).exact_eigenvalue == 4
    with pytest.raises(InvalidInput):
        build_problem("heat")
    with pytest.raises(InvalidInput):
        build_problem("pbe-cube", omega2=3)
