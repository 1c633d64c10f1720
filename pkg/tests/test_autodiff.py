import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ckgan import autodiff as ad
from conftest import numeric_grad, rel_err

# (name, builder, input shape); inputs are drawn in (-2, 2) unless shifted
UNARY = [
    ("relu", ad.relu, (3, 4)),
    ("tanh", ad.tanh, (3, 4)),
    ("exp", ad.exp, (3, 4)),
    ("abs", ad.abs_, (3, 4)),
    ("square", ad.square, (3, 4)),
    ("sum", lambda a: ad.sum_(a), (3, 4)),
    ("sum_axis0", lambda a: ad.sum_(a, axis=0), (3, 4)),
    ("mean", lambda a: ad.mean(a), (3, 4)),
    ("mean_axis0_keep", lambda a: ad.mean(a, axis=0, keepdims=True), (3, 4)),
    ("softmax", ad.softmax, (6,)),
    ("softmax_rows", ad.softmax, (2, 6)),
    ("scale", lambda a: ad.scale(a, -2.5), (3, 4)),
    ("add_scalar", lambda a: ad.add_scalar(a, 0.7), (3, 4)),
    ("transpose", ad.transpose, (3, 4)),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), (3, 4)),
    ("broadcast", lambda a: ad.broadcast_to(a, (5, 4)), (1, 4)),
    ("index", lambda a: a[:, 1], (3, 4)),
]
POSITIVE = [("log", ad.log), ("sqrt", ad.sqrt)]
BINARY = [
    ("add", ad.add, (3, 4), (3, 4)),
    ("add_bcast", ad.add, (3, 4), (4,)),
    ("sub", ad.sub, (3, 4), (1, 4)),
    ("mul", ad.mul, (3, 4), (3, 4)),
    ("mul_bcast", ad.mul, (3, 1), (3, 4)),
    ("div", ad.div, (3, 4), (3, 4)),
    ("matmul", ad.matmul, (3, 4), (4, 2)),
    ("sqdist", ad.sqdist, (5, 2), (5, 2)),
    ("l1dist", ad.l1dist, (5, 2), (5, 2)),
    ("l2dist", ad.l2dist, (5, 2), (5, 2)),
]

# a fixed random weighting makes the scalar sensitive to every output entry
def _weighted(out: ad.Node, seed: int = 7) -> ad.Node:
    w = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    return ad.sum_(out * w) if out.shape else out


def _check_unary(fn, x):
    tape = ad.Tape()
    v = tape.variable(x, "x")
    got = ad.gradient(_weighted(fn(v)), [v])["x"]

    def f(xv):
        t = ad.Tape()
        return float(_weighted(fn(t.constant(xv))).value)

    return rel_err(got, numeric_grad(f, x))


@pytest.mark.parametrize("name,fn,shape", UNARY, ids=[u[0] for u in UNARY])
def test_unary_primitives_match_finite_differences(name, fn, shape, rng):
    x = rng.uniform(-2, 2, size=shape)
    if name in ("relu", "abs"):
        x[np.abs(x) < 1e-3] = 0.5   # keep away from the kink
    assert _check_unary(fn, x) < 1e-4


@pytest.mark.parametrize("name,fn", POSITIVE, ids=[p[0] for p in POSITIVE])
def test_positive_domain_primitives(name, fn, rng):
    x = rng.uniform(0.2, 2.0, size=(3, 4))
    assert _check_unary(fn, x) < 1e-4


@pytest.mark.parametrize("name,fn,sa,sb", BINARY, ids=[b[0] for b in BINARY])
def test_binary_primitives_match_finite_differences(name, fn, sa, sb, rng):
    a = rng.uniform(-2, 2, size=sa)
    b = rng.uniform(-2, 2, size=sb)
    if name == "div":
        b = np.sign(b) * (np.abs(b) + 0.5)
    if name == "l1dist":
        b = a + np.where(rng.random(sb) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, size=sb)
    tape = ad.Tape()
    va, vb = tape.variable(a, "a"), tape.variable(b, "b")
    grads = ad.gradient(_weighted(fn(va, vb)), [va, vb])

    def fa(av):
        t = ad.Tape()
        return float(_weighted(fn(t.constant(av), t.constant(b))).value)

    def fb(bv):
        t = ad.Tape()
        return float(_weighted(fn(t.constant(a), t.constant(bv))).value)

    assert rel_err(grads["a"], numeric_grad(fa, a)) < 1e-4
    assert rel_err(grads["b"], numeric_grad(fb, b)) < 1e-4


def test_evaluate_closed_forms():
    tape = ad.Tape()
    x = tape.variable(3.0, "x")
    y = x * x
    assert ad.evaluate(tape, {"x": 3.0}, y) == 9.0
    tape = ad.Tape()
    v = tape.variable([-1.0, 2.0], "v")
    np.testing.assert_array_equal(ad.evaluate(tape, {"v": [-1.0, 2.0]}, ad.relu(v)), [0.0, 2.0])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 1))
    tape = ad.Tape()
    va, vb = tape.variable(a, "a"), tape.variable(b, "b")
    out = ad.evaluate(tape, {"a": a, "b": b}, va @ vb)
    ref = np.zeros((2, 1))
    for i in range(2):
        for j in range(1):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(out, ref, rtol=1e-14, atol=1e-14)


def test_evaluate_rebinds_variables():
    tape = ad.Tape()
    x = tape.variable(1.0, "x")
    y = ad.tanh(x) * 2.0
    np.testing.assert_allclose(ad.evaluate(tape, {"x": 0.5}, y), 2 * np.tanh(0.5))


def test_evaluate_errors_name_nodes():
    tape = ad.Tape()
    x = tape.variable(np.ones(3), "x")
    y = ad.log(x)
    with pytest.raises(ad.NonFiniteError, match="log"):
        ad.evaluate(tape, {"x": -np.ones(3)}, y)
    with pytest.raises(ad.ShapeError, match="x"):
        ad.evaluate(tape, {"x": np.ones(4)}, y)
    with pytest.raises(ad.TapeError, match="not bound"):
        ad.evaluate(tape, {}, y)
    with pytest.raises(ad.TapeError, match="unknown"):
        ad.evaluate(tape, {"x": np.ones(3), "q": 1.0}, y)


def test_shape_error_names_node():
    tape = ad.Tape()
    a = tape.variable(np.ones((2, 3)), "a")
    b = tape.variable(np.ones((2, 3)), "b")
    with pytest.raises(ad.ShapeError, match="matmul"):
        a @ b


def test_simple_derivatives():
    tape = ad.Tape()
    x = tape.variable(3.0, "x")
    assert ad.gradient(x * x, [x])["x"] == pytest.approx(6.0)
    tape = ad.Tape()
    x = tape.variable(0.0, "x")
    assert ad.gradient(ad.tanh(x), [x])["x"] == pytest.approx(1.0)


def test_gradient_errors():
    tape = ad.Tape()
    x = tape.variable(np.ones(3), "x")
    with pytest.raises(ad.TapeError, match="scalar"):
        ad.gradient(x * 2.0, [x])
    other = ad.Tape().variable(1.0, "y")
    with pytest.raises(ad.TapeError):
        ad.gradient(ad.sum_(x), [other])


def test_unreached_variable_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.variable(np.ones(3), "x")
    y = tape.variable(np.ones((2, 2)), "y")
    g = ad.gradient(ad.sum_(x), [x, y])
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))


def test_subgradients_at_zero():
    tape = ad.Tape()
    x = tape.variable(np.zeros(2), "x")
    g = ad.gradient(ad.sum_(ad.relu(x) + ad.abs_(x)), [x])["x"]
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_second_derivative_of_cube():
    tape = ad.Tape()
    x = tape.variable(2.0, "x")
    dx = ad.gradient_as_nodes(x * x * x, [x])["x"]
    assert ad.gradient(dx, [x])["x"] == pytest.approx(12.0)


def test_penalty_on_linear_map():
    # d/dw ||d/dx (w x)||^2 = d/dw w^2 = 2w
    tape = ad.Tape()
    w = tape.variable(3.0, "w")
    x = tape.variable(2.0, "x")
    gx = ad.gradient_as_nodes(w * x, [x])["x"]
    assert ad.gradient(ad.square(gx), [w])["w"] == pytest.approx(6.0)


def _mlp(tape, params, x):
    h = ad.relu(x @ params["W1"] + params["b1"])
    return h @ params["W2"] + params["b2"]


def _mlp_params(rng, sizes=(2, 16, 2)):
    a, b, c = sizes
    return {"W1": rng.normal(size=(a, b)), "b1": rng.normal(size=b) * 0.1,
            "W2": rng.normal(size=(b, c)), "b2": rng.normal(size=c) * 0.1}


def test_mlp_loss_gradient_matches_finite_differences(rng):
    p = _mlp_params(rng, (2, 8, 2))
    x = rng.normal(size=(5, 2))
    y = rng.normal(size=(5, 2))

    def loss(tape, params):
        return ad.mean(ad.square(_mlp(tape, params, tape.constant(x)) - y))

    tape = ad.Tape()
    vs = {k: tape.variable(v, k) for k, v in p.items()}
    got = ad.gradient(loss(tape, vs), list(vs.values()))
    for name in p:
        def f(val, name=name):
            t = ad.Tape()
            q = {k: t.constant(val if k == name else v) for k, v in p.items()}
            return float(loss(t, q).value)
        assert rel_err(got[name], numeric_grad(f, p[name])) < 1e-4, name


def _penalty(tape, params, xhat):
    """mean_i ||d/dx sum(tanh(mlp(x)))_i||^2 at the rows of xhat."""
    xh = tape.constant(xhat, "xhat")
    out = ad.sum_(ad.tanh(_mlp(tape, params, xh)))
    g = ad.gradient_as_nodes(out, [xh])["xhat"]
    return ad.mean(ad.sum_(ad.square(g), axis=1))


def test_double_backprop_penalty_matches_finite_differences(rng):
    p = _mlp_params(rng)
    xhat = rng.normal(size=(4, 2))
    tape = ad.Tape()
    vs = {k: tape.variable(v, k) for k, v in p.items()}
    got = ad.gradient(_penalty(tape, vs, xhat), list(vs.values()))
    for name in p:
        def f(val, name=name):
            t = ad.Tape()
            q = {k: t.constant(val if k == name else v) for k, v in p.items()}
            return float(_penalty(t, q, xhat).value)
        assert rel_err(got[name], numeric_grad(f, p[name])) < 1e-3, name


def test_gradient_as_nodes_then_evaluate_equals_gradient(rng):
    p = _mlp_params(rng, (2, 6, 2))
    x = rng.normal(size=(4, 2))
    tape = ad.Tape()
    vs = {k: tape.variable(v, k) for k, v in p.items()}
    loss = ad.sum_(ad.tanh(_mlp(tape, vs, tape.constant(x))))
    direct = ad.gradient(loss, list(vs.values()))
    nodes = ad.gradient_as_nodes(loss, list(vs.values()))
    replayed = ad.evaluate(tape, p, [nodes[k] for k in p])
    for k, r in zip(p, replayed):
        np.testing.assert_array_equal(r, direct[k])
        np.testing.assert_array_equal(nodes[k].value, direct[k])


def test_replay_is_bitwise_deterministic(rng):
    p = _mlp_params(rng, (2, 6, 2))
    tape = ad.Tape()
    vs = {k: tape.variable(v, k) for k, v in p.items()}
    out = ad.sum_(ad.exp(ad.tanh(_mlp(tape, vs, tape.constant(rng.normal(size=(3, 2)))))))
    a = ad.evaluate(tape, p, out)
    b = ad.evaluate(tape, p, out)
    assert a.tobytes() == b.tobytes()


finite = dict(allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, (3,), elements=st.floats(-2, 2, **finite)),
       a=st.floats(-3, 3, **finite), b=st.floats(-3, 3, **finite))
def test_linearity_of_differentiation(x, a, b):
    def f(v):
        return ad.sum_(ad.tanh(v) * v)

    def g(v):
        return ad.sum_(ad.exp(v * 0.5))

    tape = ad.Tape()
    v = tape.variable(x, "x")
    combo = ad.gradient(f(v) * a + g(v) * b, [v])["x"]
    gf = ad.gradient(f(v), [v])["x"]
    gg = ad.gradient(g(v), [v])["x"]
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, (2, 3), elements=st.floats(-2, 2, **finite)))
def test_softmax_gradient_property(x):
    assert _check_unary(ad.softmax, x) < 1e-4


def test_duplicate_variable_names_rejected():
    tape = ad.Tape()
    tape.variable(1.0, "x")
    with pytest.raises(ad.TapeError, match="duplicate"):
        tape.variable(2.0, "x")


def test_non_finite_forward_raises():
    tape = ad.Tape()
    x = tape.variable(np.array([0.0]), "x")
    with pytest.raises(ad.NonFiniteError):
        ad.log(x)
