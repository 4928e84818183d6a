import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metacam import diffcore as dc
from metacam.diffcore import Layout, ParamVector
from metacam.encoder import EncoderConfig, forward, init_params
from metacam.memloss import combined_loss, LossConfig

from conftest import central_fd, rel_err, scalar_of, unit_rows


def scalar_theta(*vals):
    return ParamVector(np.array(vals, dtype=float), Layout.from_shapes([("theta", (len(vals),))]))


def test_quadratic_identity():
    res = dc.grad(lambda b: 0.5 * dc.tsum(b["theta"] * b["theta"]), scalar_theta(3.0, 4.0))
    assert res.loss == 12.5
    np.testing.assert_array_equal(res.gradient.values, [3.0, 4.0])


def test_product_rule():
    def f(b):
        t = b["theta"]
        return dc.tsum(t[0:1] * t[1:2])

    res = dc.grad(f, scalar_theta(2.0, 5.0))
    np.testing.assert_array_equal(res.gradient.values, [5.0, 2.0])


def test_gradient_layout_matches_params():
    theta = init_params(EncoderConfig(input_dim=3, hidden_dims=(4,), feature_dim=2), 0)
    res = dc.grad(lambda b: dc.tsum(b["layer0.weight"] * b["layer0.weight"]), theta)
    assert res.gradient.layout == theta.layout
    g = res.gradient.blocks()
    np.testing.assert_allclose(g["layer0.weight"], 2 * theta.blocks()["layer0.weight"])
    assert not g["layer1.bias"].any()


def _encoder_problem(rng, n=6, n_c=4, tau=0.3):
    cfg = EncoderConfig(input_dim=5, hidden_dims=(7,), feature_dim=4)
    theta = init_params(cfg, int(rng.integers(1 << 30)))
    X = rng.normal(size=(n, 5))
    C = unit_rows(rng, n_c, 4)
    y = rng.integers(0, n_c, size=n)

    def loss(blocks):
        return dc.mean(combined_loss(forward(blocks, X, cfg), y, C, LossConfig(tau)))

    return theta, loss


def test_encoder_loss_gradient_matches_fd(rng):
    theta, loss = _encoder_problem(rng)
    res = dc.grad(loss, theta)
    fd = central_fd(scalar_of(loss, theta.layout), theta.values, 1e-5)
    assert rel_err(res.gradient.values, fd, floor=1e-6) <= 1e-5


def test_nonfinite_loss_names_phase():
    with pytest.raises(dc.NonFiniteError) as exc:
        dc.grad(lambda b: dc.tsum(dc.log(b["theta"] * 0.0)), scalar_theta(1.0))
    assert exc.value.phase == "forward"


def test_nonfinite_gradient_names_block():
    theta = ParamVector.from_blocks({"a": np.array([1.0]), "b": np.array([0.0])})
    with pytest.raises(dc.NonFiniteError) as exc:
        dc.grad(lambda bl: dc.tsum(bl["a"]) + dc.tsum(dc.sqrt(bl["b"])), theta)
    assert exc.value.block == "b"


# --- second order ---------------------------------------------------------


def quad(c):
    return lambda b: 0.5 * c * dc.tsum(b["theta"] * b["theta"])


def test_meta_gradient_quadratic_exact():
    # d/dθ [aθ²/2 + b(θ - γaθ)²/2] = aθ + b(1 - γa)²θ
    res = dc.grad_through_update(quad(1.0), quad(2.0), scalar_theta(1.0), 0.1, "exact")
    assert res.gradient.values[0] == pytest.approx(2.62, abs=1e-12)
    assert res.parts["mtr"] == pytest.approx(0.5)
    assert res.parts["mte"] == pytest.approx(0.5 * 2 * 0.81)


def test_meta_gradient_quadratic_first_order():
    exact = dc.grad_through_update(quad(1.0), quad(2.0), scalar_theta(1.0), 0.1, "exact")
    fo = dc.grad_through_update(quad(1.0), quad(2.0), scalar_theta(1.0), 0.1, "first_order")
    assert fo.gradient.values[0] == pytest.approx(2.8, abs=1e-12)
    # difference is γ a b (1 - γ a) θ
    assert fo.gradient.values[0] - exact.gradient.values[0] == pytest.approx(0.1 * 2 * 0.9, abs=1e-12)


def test_zero_inner_rate_is_plain_sum_gradient(rng):
    theta, l1 = _encoder_problem(rng)
    _, l2 = _encoder_problem(rng)
    res = dc.grad_through_update(l1, l2, theta, 0.0, "exact")
    plain = dc.grad(lambda b: l1(b) + l2(b), theta)
    np.testing.assert_allclose(res.gradient.values, plain.gradient.values, rtol=0, atol=1e-14)
    fo = dc.grad_through_update(l1, l2, theta, 0.0, "first_order")
    np.testing.assert_allclose(fo.gradient.values, res.gradient.values, rtol=0, atol=1e-12)


def test_meta_gradient_encoder_matches_fd(rng):
    theta, l1 = _encoder_problem(rng)
    _, l2 = _encoder_problem(rng)
    gamma = 0.5
    res = dc.grad_through_update(l1, l2, theta, gamma, "exact")
    f1, f2 = scalar_of(l1, theta.layout), scalar_of(l2, theta.layout)

    def composed(v):
        g = dc.grad(l1, theta.with_values(v)).gradient.values
        return f1(v) + f2(v - gamma * g)

    fd = central_fd(composed, theta.values, 1e-5)
    assert rel_err(res.gradient.values, fd, floor=1e-5) <= 1e-3


def test_inner_nonfinite_is_reported():
    with pytest.raises(dc.NonFiniteError) as exc:
        dc.grad_through_update(lambda b: dc.tsum(dc.log(b["theta"] * 0.0)), quad(1.0),
                               scalar_theta(1.0), 0.1)
    assert exc.value.phase == "inner"


def test_outer_nonfinite_is_reported():
    with pytest.raises(dc.NonFiniteError) as exc:
        dc.grad_through_update(quad(1.0), lambda b: dc.tsum(dc.log(b["theta"] - b["theta"])),
                               scalar_theta(1.0), 0.1)
    assert exc.value.phase == "outer"


# --- properties -------------------------------------------------------------

primitive_exprs = [
    lambda t: dc.tsum(dc.tanh(t) * t),
    lambda t: dc.tsum(dc.log_softmax(dc.reshape(t, (2, 3)), axis=1) * np.arange(6.0).reshape(2, 3)),
    lambda t: dc.tsum(dc.exp(t[0:3]) / (1.0 + dc.sqrt(dc.tsum(t * t)))),
    lambda t: dc.tsum(dc.matmul(dc.reshape(t, (2, 3)), dc.transpose(dc.reshape(t, (2, 3))))),
    lambda t: dc.tsum(dc.log(1.0 + t * t)) - dc.tsum(dc.softmax(dc.reshape(t, (3, 2))) * 2.0),
]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), which=st.integers(0, len(primitive_exprs) - 1))
def test_primitive_gradients_match_fd(seed, which):
    x = np.random.default_rng(seed).normal(size=6)
    theta = scalar_theta(*x)
    f = lambda b: primitive_exprs[which](b["theta"])
    res = dc.grad(f, theta)
    fd = central_fd(scalar_of(f, theta.layout), x, 1e-6)
    assert rel_err(res.gradient.values, fd, floor=1e-4) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(-3, 3, allow_nan=False))
def test_gradient_linearity(seed, c):
    x = np.random.default_rng(seed).normal(size=6)
    theta = scalar_theta(*x)
    f = lambda b: primitive_exprs[0](b["theta"])
    g = dc.grad(f, theta).gradient.values
    gc = dc.grad(lambda b: c * f(b), theta).gradient.values
    np.testing.assert_allclose(gc, c * g, rtol=1e-12, atol=1e-12)


def test_determinism(rng):
    theta, l1 = _encoder_problem(rng)
    _, l2 = _encoder_problem(rng)
    a = dc.grad_through_update(l1, l2, theta, 0.2)
    b = dc.grad_through_update(l1, l2, theta, 0.2)
    assert a.gradient == b.gradient and a.loss == b.loss


def test_layout_rejects_gaps():
    with pytest.raises(ValueError):
        Layout((dc.Segment("a", 0, 2, (2,)), dc.Segment("b", 3, 4, (1,))))


def test_param_vector_arithmetic():
    a = scalar_theta(1.0, 2.0)
    np.testing.assert_array_equal((a + a * 2.0).values, [3.0, 6.0])
    other = ParamVector(np.zeros(2), Layout.from_shapes([("x", (2,))]))
    with pytest.raises(ValueError):
        a + other
