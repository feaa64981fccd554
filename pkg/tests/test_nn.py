import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepmartnet.errors import InvalidInput, TrainingDivergence
from deepmartnet.nn import (
    AdamaxState,
    LrSchedule,
    Tensor,
    activation_eval,
    adamax_step,
    forward,
    forward_with_directional,
    init_mlp,
    load_checkpoint,
    lr_at,
    parameter,
    save_checkpoint,
    take,
)
from deepmartnet.nn.mlp import mlp_apply
from deepmartnet.verify import gradient_check


def test_zero_network_outputs_zero():
    net = init_mlp([3, 4, 1], ["tanh"])
    for p in net.parameters():
        p.data[...] = 0.0
    out = forward(net, np.random.default_rng(0).normal(size=(6, 3)))
    assert np.array_equal(out.data, np.zeros((6, 1)))


def test_affine_layer_by_hand():
    net = init_mlp([1, 1], [])
    net.weights[0].data[...] = 2.0
    net.biases[0].data[...] = 1.0
    assert forward(net, np.array([[3.0]])).data[0, 0] == 7.0


def test_output_shape_and_finite():
    net = init_mlp([10, 16, 8, 1], ["tanh", "gelu"], seed=3)
    out = forward(net, np.random.default_rng(1).normal(size=(5, 10)))
    assert out.shape == (5, 1)
    assert np.all(np.isfinite(out.data))


def test_bad_input_width():
    net = init_mlp([3, 1], [])
    with pytest.raises(InvalidInput):
        forward(net, np.zeros((2, 4)))


def test_simple_derivatives():
    w = parameter(3.0)
    grads = (w * w).backward()
    assert grads[w] == pytest.approx(6.0)
    w = parameter(0.0)
    assert w.tanh().backward()[w] == pytest.approx(1.0)


def test_activation_values():
    assert activation_eval("gelu", 0.0)[0] == 0.0
    assert activation_eval("relu_pow:9", -1.0)[0] == 0.0
    assert activation_eval("relu_pow:9", 2.0)[0] == 512.0
    assert activation_eval("gelu", 10.0)[0] == pytest.approx(10.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["tanh", "gelu", "relu_pow:3", "relu_pow:9"]), fused=st.booleans())
def test_gradient_matches_finite_differences(seed, act, fused):
    gen = np.random.default_rng(seed)
    sizes = [int(gen.integers(1, 6)), int(gen.integers(1, 20)), int(gen.integers(1, 20)), 1]
    assert gradient_check(sizes, [act, "tanh"], seed=seed, fused=fused) <= 1e-6


def test_fused_matches_layered():
    net = init_mlp([4, 12, 7, 1], ["gelu", "relu_pow:3"], seed=2)
    x = np.random.default_rng(0).normal(size=(9, 4))
    a = forward(net, x, fused=False)
    b = mlp_apply(net, x, chunk=4)
    assert np.allclose(a.data, b.data, rtol=0, atol=1e-14)
    ga = {p: g.copy() for p, g in (a * a).sum().backward().items()}
    net.zero_grad()
    gb = (b * b).sum().backward()
    for p in net.parameters():
        assert np.allclose(ga[p], gb[p], rtol=1e-12, atol=1e-14)


def test_directional_derivative_matches_finite_difference():
    net = init_mlp([3, 10, 1], ["tanh"], seed=1)
    x = np.random.default_rng(3).normal(size=(4, 3))
    e = np.array([1.0, -2.0, 0.5])
    _, du = forward_with_directional(net, x, np.tile(e, (4, 1)))
    h = 1e-6
    fd = (forward(net, x + h * e).data - forward(net, x - h * e).data) / (2 * h)
    assert np.allclose(du.data, fd, atol=1e-8)


def test_take_scatter_adds_duplicates():
    t = parameter(np.arange(4.0))
    g = take(t, np.array([1, 1, 3])).sum().backward()
    assert np.array_equal(g[t], [0.0, 2.0, 0.0, 1.0])


def test_adamax_first_step():
    p = parameter(np.array([1.0]))
    st_ = AdamaxState(epsilon=0.0)
    adamax_step([p], [np.array([4.0])], st_, lr=0.1)
    assert p.data[0] == pytest.approx(0.9)


def test_adamax_zero_gradient_noop():
    p = parameter(np.array([1.0, -2.0]))
    adamax_step([p], [np.zeros(2)], AdamaxState(), lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamax_constant_gradient_two_steps():
    p = parameter(np.array([0.0]))
    s = AdamaxState(epsilon=0.0)
    adamax_step([p], [np.array([3.0])], s, lr=0.1)
    adamax_step([p], [np.array([3.0])], s, lr=0.1)
    assert s.u[0][0] == pytest.approx(3.0)
    assert s.m[0][0] == pytest.approx((1 - 0.9**2) * 3.0)
    assert p.data[0] == pytest.approx(-0.2)


def test_adamax_rejects_non_finite():
    p = parameter(np.zeros(3))
    with pytest.raises(TrainingDivergence) as exc:
        adamax_step([p], [np.array([0.0, np.nan, 0.0])], AdamaxState(), lr=0.1)
    assert exc.value.snapshot["flat_index"] == 1


def test_lr_schedule_examples():
    assert lr_at(LrSchedule(0.01, 0.99, 100), 250) == pytest.approx(0.009801)
    assert lr_at(LrSchedule(0.01, 0.99, 100), 0) == 0.01
    assert lr_at(LrSchedule(1 / 150, 0.5, 500), 1200) == pytest.approx(1 / 150 * 0.25)
    assert lr_at(LrSchedule(1 / 150, 0.5, 500, [(7500, 0.25)]), 7500) == pytest.approx(1 / 150 * 0.5**15 * 0.25)


@pytest.mark.parametrize("eigen", [None, "scalar", "network"])
def test_checkpoint_roundtrip(tmp_path, eigen):
    kw = {"eigenvalue": 2.5} if eigen == "scalar" else {"eigen_net_width": 4} if eigen == "network" else {}
    net = init_mlp([3, 5, 1], ["gelu"], seed=4, **kw)
    save_checkpoint(net, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert np.array_equal(net.flat(), back.flat())
    assert back.activations == net.activations
    if eigen:
        assert back.lam().item() == net.lam().item()


def test_checkpoint_truncated(tmp_path):
    net = init_mlp([3, 5, 1], ["tanh"])
    save_checkpoint(net, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "b.ckpt").write_bytes(raw[:-8])
    with pytest.raises(InvalidInput):
        load_checkpoint(tmp_path / "b.ckpt")


def test_broadcast_gradients():
    a = parameter(np.ones((3, 2)))
    b = parameter(np.array([1.0, 2.0]))
    g = ((a * b) + b).sum().backward()
    assert np.array_equal(g[b], [6.0, 6.0])
    assert np.array_equal(g[a], np.tile([1.0, 2.0], (3, 1)))


def test_pow_and_division():
    x = parameter(2.0)
    g = (x**3 / (x + 1.0)).backward()[x]
    assert g == pytest.approx((3 * 4 * 3 - 8) / 9)
    assert math.isfinite(Tensor(1.0).item())
