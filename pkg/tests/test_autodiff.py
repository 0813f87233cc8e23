import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffplan import autodiff as ad


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def test_identity_program_has_empty_adjoint_record():
    out, tape, (v,) = ad.forward(lambda v: v, [[1.0, 2.0]])
    np.testing.assert_array_equal(out.value, [1.0, 2.0])
    assert len(tape) == 1
    np.testing.assert_array_equal(tape.backward(out, [1.0, 1.0])[v], [1.0, 1.0])


def test_hand_matrix_product():
    out, _, _ = ad.forward(lambda W, x: ad.matmul(W, x), [[[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0]])
    np.testing.assert_array_equal(out.value, [3.0, 7.0])


def test_tanh_at_origin():
    out, _, _ = ad.forward(ad.tanh, [[0.0]])
    assert out.value[0] == 0.0


def test_constant_output_has_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    y = tape.constant([5.0])
    grads = tape.backward(y, [1.0])
    np.testing.assert_array_equal(grads[x], [0.0, 0.0])


def test_power_rule():
    tape = ad.Tape()
    x = tape.leaf([3.0])
    assert tape.backward(x * x, [1.0])[x][0] == 6.0


def three_layer(W1, W2, W3, x):
    h = ad.tanh(ad.matmul(W1, x))
    h = ad.silu(ad.matmul(W2, h))
    return ad.sum_squares(ad.matmul(W3, h))


def test_three_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(0)
    vals = [rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, 4)]
    out, tape, leaves = ad.forward(three_layer, vals)
    grads = tape.backward(out, [1.0])
    for k in range(4):
        def f(v, k=k):
            args = list(vals)
            args[k] = v
            return ad.forward(three_layer, args)[0].value[0]
        assert rel_err(grads[leaves[k]], central_diff(f, vals[k])) < 1e-6


def test_mlp_zero_weights_give_zero_output():
    tape = ad.Tape()
    params = {"W1": np.zeros((3, 4)), "b1": np.zeros(4), "W2": np.zeros((4, 2)), "b2": np.zeros(2)}
    out = ad.mlp_apply(params, tape.leaf(np.random.default_rng(1).normal(size=(5, 3))))
    np.testing.assert_array_equal(out.value, 0.0)


def test_mlp_closed_form():
    tape = ad.Tape()
    params = {"W1": np.eye(1), "b1": np.zeros(1), "W2": np.eye(1), "b2": np.zeros(1)}
    out = ad.mlp_apply(params, tape.leaf([0.5]))
    assert out.value[0] == pytest.approx(0.46212, abs=1e-5)


@pytest.mark.parametrize("activation", ["tanh", "silu"])
def test_mlp_input_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(2)
    params = {"W1": rng.normal(size=(6, 8)), "b1": rng.normal(size=8), "W2": rng.normal(size=(8, 3)),
              "b2": rng.normal(size=3)}
    x0 = rng.uniform(-1, 1, 6)

    def f(x):
        t = ad.Tape()
        return ad.mlp_apply(params, t.leaf(x), activation).value.sum()

    tape = ad.Tape()
    x = tape.leaf(x0)
    out = ad.mlp_apply(params, x, activation)
    g = tape.backward(out, np.ones(3))[x]
    assert rel_err(g, central_diff(f, x0)) < 1e-6


def test_mlp_width_mismatch():
    tape = ad.Tape()
    params = {"W1": np.zeros((3, 4)), "b1": np.zeros(4), "W2": np.zeros((4, 2)), "b2": np.zeros(2)}
    with pytest.raises(ad.ShapeError, match="mlp_apply"):
        ad.mlp_apply(params, tape.leaf(np.zeros(5)))


@pytest.mark.parametrize("op,shapes", [
    (ad.matmul, [(2, 3), (4, 2)]),
    (ad.add, [(2, 3), (3, 2)]),
    (ad.mul, [(2,), (3,)]),
    (ad.sub, [(2,), (3,)]),
])
def test_shape_errors_name_the_primitive(op, shapes):
    tape = ad.Tape()
    a, b = (tape.leaf(np.zeros(s)) for s in shapes)
    with pytest.raises(ad.ShapeError, match=op.__name__):
        op(a, b)


def test_seed_shape_must_match():
    tape = ad.Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        tape.backward(ad.tanh(x), [1.0])


def test_nan_adjoint_names_the_node():
    tape = ad.Tape()
    x = tape.leaf([1.0])
    y = ad.tanh(x)
    with pytest.raises(ad.NonFiniteAdjointError, match="tanh"):
        tape.backward(y, [np.nan])


def test_released_tape_refuses_backward():
    tape = ad.Tape()
    x = tape.leaf([1.0])
    y = ad.tanh(x)
    tape.release()
    with pytest.raises(ad.TapeReleasedError):
        tape.backward(y, [1.0])


def test_floor_zero_uses_zero_subgradient():
    tape = ad.Tape()
    x = tape.leaf([-1.0, 0.0, 2.0])
    g = tape.backward(ad.floor_zero(x), np.ones(3))[x]
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


# --- properties -------------------------------------------------------------------

unit = st.floats(-1.0, 1.0, allow_nan=False)


def _prim_cases():
    return {
        "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
        "matvec": (lambda a, b: ad.matmul(a, b), [(3, 4), (4,)]),
        "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
        "add_row": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
        "sub": (lambda a, b: ad.sub(a, b), [(2, 3), (2, 3)]),
        "mul": (lambda a, b: ad.mul(a, b), [(2, 3), (2, 3)]),
        "scale": (lambda a: ad.scale(a, -1.7), [(2, 3)]),
        "tanh": (ad.tanh, [(2, 3)]),
        "silu": (ad.silu, [(2, 3)]),
        "concat": (lambda a, b: ad.concat([a, b]), [(2, 3), (2, 2)]),
        "concat0": (lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (1, 3)]),
        "slice": (lambda a: ad.slice_cols(a, 1, 3), [(2, 4)]),
        "sum_squares": (lambda a: ad.sum_squares(a, 0.5), [(2, 3)]),
    }


@pytest.mark.parametrize("name", sorted(_prim_cases()))
@settings(max_examples=20, deadline=None)
@given(data=st.data())
def test_primitive_vjp_matches_finite_differences(name, data):
    fn, shapes = _prim_cases()[name]
    vals = [data.draw(arrays(np.float64, s, elements=unit)) for s in shapes]
    out, tape, leaves = ad.forward(fn, vals)
    seed = data.draw(arrays(np.float64, out.shape, elements=unit))
    grads = tape.backward(out, seed)
    for k in range(len(vals)):
        def f(v, k=k):
            args = list(vals)
            args[k] = v
            return float(np.sum(ad.forward(fn, args)[0].value * seed))
        fd = central_diff(f, vals[k])
        assert np.all(np.abs(grads[leaves[k]] - fd) <= 1e-5 * np.maximum(np.abs(fd), 1.0))


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=unit), s1=arrays(np.float64, (3, 2), elements=unit),
       s2=arrays(np.float64, (3, 2), elements=unit), a=unit, b=unit)
def test_backward_is_linear_in_seed(x, s1, s2, a, b):
    W = np.linspace(-1, 1, 8).reshape(4, 2)
    out, tape, (xl, wl) = ad.forward(lambda x, w: ad.tanh(ad.matmul(x, w)), [x, W])
    g1 = tape.backward(out, s1)
    g2 = tape.backward(out, s2)
    g = tape.backward(out, a * s1 + b * s2)
    for leaf in (xl, wl):
        np.testing.assert_allclose(g[leaf], a * g1[leaf] + b * g2[leaf], atol=1e-12, rtol=0)


@settings(max_examples=20, deadline=None)
@given(x=arrays(np.float64, (2, 4), elements=unit))
def test_forward_replay_is_bitwise_deterministic(x):
    rng = np.random.default_rng(3)
    params = {"W1": rng.normal(size=(4, 5)), "b1": rng.normal(size=5), "W2": rng.normal(size=(5, 2)),
              "b2": rng.normal(size=2)}
    prog = lambda v: ad.mlp_apply(params, v)
    a, ta, la = ad.forward(prog, [x])
    b, tb, lb = ad.forward(prog, [x])
    assert a.value.tobytes() == b.value.tobytes()
    assert ta.backward(a, np.ones((2, 2)))[la[0]].tobytes() == tb.backward(b, np.ones((2, 2)))[lb[0]].tobytes()
