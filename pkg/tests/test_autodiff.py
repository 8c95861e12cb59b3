"""Gradient engine checks: hand values, finite-difference oracles, properties."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmdp.autodiff import (
    ParamVector,
    Tape,
    TapeError,
    backward_grad,
    finite_diff_grad,
    record_and_eval,
)


def rel_err(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


# -- forward hand values -------------------------------------------------


def test_softmax_symmetry():
    for beta in (0.1, 1.0, 7.3):
        tape = Tape()
        x = tape.param("x", [2.4, 2.4])
        p = tape.softmax(x, beta=beta)
        np.testing.assert_allclose(tape.value(p), [0.5, 0.5], atol=1e-15)


def test_affine_identity():
    tape = Tape()
    x = tape.param("x", [1.0, -2.0, 3.0])
    y = tape.affine(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(tape.value(y), [1.0, -2.0, 3.0])


def test_relu_definition():
    tape = Tape()
    x = tape.param("x", [-1.0, 2.0])
    np.testing.assert_array_equal(tape.value(tape.relu(x)), [0.0, 2.0])


def test_record_and_eval_matches_direct():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3))
    xv = rng.normal(size=4)

    def program(tape):
        x = tape.param_ref("x")
        return tape.reduce_sum(tape.relu(tape.affine(x, w)))

    _, _, val = record_and_eval(program, {"x": xv})
    assert val == pytest.approx(np.maximum(xv @ w, 0).sum())


# -- backward hand values ------------------------------------------------


def test_grad_sum_of_squares():
    tape = Tape()
    x = tape.param("x", [1.0, 2.0])
    out = tape.reduce_sum(tape.square(x))
    grads = backward_grad(tape, out)
    np.testing.assert_allclose(grads["x"], [2.0, 4.0], rtol=1e-12)


def test_grad_log_softmax_component():
    tape = Tape()
    x = tape.param("x", [0.0, 0.0])
    ls = tape.log_softmax(x)
    out = tape.reduce_sum(tape.mul(ls, np.array([1.0, 0.0])))
    grads = backward_grad(tape, out)
    np.testing.assert_allclose(grads["x"], [0.5, -0.5], rtol=1e-12)


def test_grad_two_layer_mlp_matches_fd():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(5, 4))
    b1 = rng.normal(size=4)
    w2 = rng.normal(size=(4, 1))
    xv = rng.normal(size=5)

    def build(tape):
        h = tape.relu(tape.affine(tape.param_ref("x"), tape.param_ref("w1"),
                                  tape.param_ref("b1")))
        return tape.reshape(tape.affine(h, tape.param_ref("w2")), ())

    tape, out, _ = record_and_eval(build, {"x": xv, "w1": w1, "b1": b1, "w2": w2})
    grads = backward_grad(tape, out)

    for name, base in (("x", xv), ("w1", w1), ("b1", b1), ("w2", w2)):
        def f(v, name=name):
            vals = {"x": xv, "w1": w1, "b1": b1, "w2": w2}
            vals[name] = v.reshape(vals[name].shape)
            _, _, out_val = record_and_eval(build, vals)
            return float(out_val)

        fd = finite_diff_grad(f, base.ravel().copy(), step=1e-5)
        assert rel_err(grads[name], fd.reshape(base.shape)) < 1e-4


# -- finite differences ----------------------------------------------------


def test_fd_constant_and_linear():
    a = np.array([3.0, -1.0, 0.5])
    np.testing.assert_allclose(
        finite_diff_grad(lambda x: 4.2, np.ones(3)), np.zeros(3), atol=1e-12)
    np.testing.assert_allclose(
        finite_diff_grad(lambda x: float(x @ a), np.ones(3)), a, atol=1e-9)


def test_fd_quadratic():
    g = finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]),
                         step=1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), step=0.0)
    with pytest.raises(FloatingPointError) as err:
        with np.errstate(divide="ignore"):
            finite_diff_grad(lambda x: float(np.log(x[1])), np.array([1.0, 0.0]))
    assert "coordinate" in str(err.value)


# -- per-primitive FD sweep ------------------------------------------------


def _primitive_cases(rng):
    """(name, program factory, input value) for every primitive."""
    v = rng.normal(size=6)
    m = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=6)
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    yield "affine", lambda t: t.reduce_sum(tape_sq(t, t.affine(t.param_ref("x"), w, b))), v
    yield "affine_identity", lambda t: t.reduce_sum(t.affine(t.param_ref("x"), None, b[0])), v
    yield "relu", lambda t: t.reduce_sum(t.relu(t.param_ref("x"))), v + 0.3
    yield "softmax", lambda t: t.reduce_sum(tape_sq(t, t.softmax(t.param_ref("x"), beta=1.7))), v
    yield "log_softmax", lambda t: t.reduce_sum(tape_sq(t, t.log_softmax(t.param_ref("x"), beta=0.6))), v
    yield "sigmoid", lambda t: t.reduce_sum(tape_sq(t, t.sigmoid(t.param_ref("x")))), v
    yield "log", lambda t: t.reduce_sum(t.log(t.param_ref("x"))), pos
    yield "exp", lambda t: t.reduce_sum(t.exp(t.param_ref("x"))), v
    yield "square", lambda t: t.reduce_sum(t.square(t.param_ref("x"))), v
    mul_const = rng.normal(size=6)
    yield "mul", lambda t: t.reduce_sum(t.mul(t.param_ref("x"), mul_const)), v
    yield "mul_scalar", lambda t: t.reduce_sum(t.mul(t.param_ref("x"), np.array(1.3))), v
    yield "div", lambda t: t.reduce_sum(t.div(t.param_ref("x"), pos)), v
    yield "reduce_sum_axis", lambda t: t.reduce_sum(tape_sq(t, t.reduce_sum(t.param_ref("x"), axis=0))), m
    yield "clip", lambda t: t.reduce_sum(t.clip(t.param_ref("x"), -0.5, 0.5)), v
    yield "reshape", lambda t: t.reduce_sum(t.square(t.reshape(t.param_ref("x"), (2, 3)))), v


def tape_sq(t, ref):
    return t.square(ref)


def test_every_primitive_matches_fd():
    rng = np.random.default_rng(11)
    for name, program, x0 in _primitive_cases(rng):
        tape, out, _ = record_and_eval(program, {"x": x0})
        grads = backward_grad(tape, out)

        def f(v):
            _, _, val = record_and_eval(program, {"x": v.reshape(x0.shape)})
            return float(val)

        fd = finite_diff_grad(f, x0.ravel().copy(), step=1e-5)
        # kink-sensitive primitives: keep FD points away from the kink
        assert rel_err(grads["x"], fd.reshape(x0.shape)) < 1e-4, name


def test_clip_zero_gradient_outside_range():
    tape = Tape()
    x = tape.param("x", [-2.0, 0.0, 2.0])
    out = tape.reduce_sum(tape.clip(x, -1.0, 1.0))
    grads = backward_grad(tape, out)
    np.testing.assert_array_equal(grads["x"], [0.0, 1.0, 0.0])


# -- properties ------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_linearity_of_gradients(dim, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=dim)
    a = rng.normal(size=(dim, dim))

    def prog_f(t):
        return t.reduce_sum(t.square(t.affine(t.param_ref("x"), a)))

    def prog_g(t):
        return t.reduce_sum(t.exp(t.mul(t.param_ref("x"), np.array(0.5))))

    def prog_sum(t):
        return t.affine(prog_f(t), None, prog_g(t))

    gf = backward_grad(*record_and_eval(prog_f, {"x": x0})[:2])["x"]
    gg = backward_grad(*record_and_eval(prog_g, {"x": x0})[:2])["x"]
    gs = backward_grad(*record_and_eval(prog_sum, {"x": x0})[:2])["x"]
    np.testing.assert_allclose(gs, gf + gg, rtol=1e-10, atol=1e-12)


def test_reeval_bit_identical():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(5, 5))
    x0 = rng.normal(size=5)

    def program(t):
        return t.reduce_sum(t.softmax(t.affine(t.param_ref("x"), w), beta=2.0))

    _, _, v1 = record_and_eval(program, {"x": x0})
    _, _, v2 = record_and_eval(program, {"x": x0})
    assert float(v1) == float(v2)


# -- errors ----------------------------------------------------------------


def test_shape_mismatch_names_primitive():
    tape = Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(TapeError, match="affine"):
        tape.affine(x, np.ones((4, 2)))
    with pytest.raises(TapeError, match="mul"):
        tape.mul(x, np.ones(4))


def test_backward_requires_scalar_output():
    tape = Tape()
    x = tape.param("x", np.ones(3))
    y = tape.square(x)
    with pytest.raises(TapeError):
        backward_grad(tape, y)


def test_duplicate_param_rejected():
    tape = Tape()
    tape.param("x", np.ones(2))
    with pytest.raises(TapeError):
        tape.param("x", np.ones(2))


# -- ParamVector -----------------------------------------------------------


def test_paramvector_roundtrip_identity():
    rng = np.random.default_rng(5)
    segs = {"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4),
            "w2": rng.normal(size=(4, 2))}
    pv = ParamVector(segs)
    assert pv.size == 3 * 4 + 4 + 4 * 2
    rebuilt = pv.with_flat(pv.flat.copy())
    for name in segs:
        np.testing.assert_array_equal(rebuilt.get(name), segs[name])
    # flat order is segment order
    np.testing.assert_array_equal(pv.flat[:12], segs["w1"].ravel())


def test_paramvector_grad_packing():
    pv = ParamVector({"a": np.zeros(2), "b": np.zeros((2, 2))})
    flat = pv.grads_to_flat({"b": np.ones((2, 2))})
    np.testing.assert_array_equal(flat, [0, 0, 1, 1, 1, 1])
