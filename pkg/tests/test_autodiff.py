import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssrec import autodiff
from ssrec.autodiff import ShapeError, Tape, forward_record, grad_check, value_and_grad

RNG = np.random.default_rng(0)


def check(program, params, inputs=None, tol=1e-6):
    r = grad_check(program, params, inputs, eps=1e-5, tol=tol)
    assert r["passed"], r
    return r


# --- one grad check per primitive ------------------------------------------

def test_matmul_grad():
    check(lambda t, p, _: t.sum(t.matmul(p["a"], p["b"])),
          {"a": RNG.standard_normal((3, 4)), "b": RNG.standard_normal((4, 2))})


def test_matmul_batched_left_operand():
    check(lambda t, p, _: t.sqnorm(t.matmul(p["a"], p["b"])),
          {"a": RNG.standard_normal((2, 3, 4)), "b": RNG.standard_normal((4, 2))})


def test_add_mul_broadcast_grad():
    check(lambda t, p, _: t.sqnorm(t.mul(t.add(p["x"], p["b"]), p["s"])),
          {"x": RNG.standard_normal((4, 3)), "b": RNG.standard_normal(3), "s": RNG.standard_normal((4, 1))})


def test_sigmoid_softmax_grad():
    w = RNG.standard_normal((3, 5))
    check(lambda t, p, _: t.sum(t.mul(t.softmax(t.sigmoid(p["x"]), axis=1), w)),
          {"x": RNG.standard_normal((3, 5))})
    check(lambda t, p, _: t.sum(t.mul(t.softmax(p["x"], axis=0), w)), {"x": RNG.standard_normal((3, 5))})


def test_leaky_relu_grad_away_from_kink():
    x = RNG.standard_normal((4, 4))
    x[np.abs(x) < 0.05] = 0.3
    check(lambda t, p, _: t.sqnorm(t.leaky_relu(p["x"], 0.1)), {"x": x})


def test_leaky_relu_right_derivative_at_zero():
    t = Tape()
    x = t.param("x", np.array([0.0, -1.0, 2.0]))
    g = t.backward(t.sum(t.leaky_relu(x, 0.2)))["x"]
    np.testing.assert_array_equal(g, [1.0, 0.2, 1.0])


def test_sqnorm_axis_and_logsumexp_grad():
    check(lambda t, p, _: t.sum(t.sqnorm(p["x"], axis=1)), {"x": RNG.standard_normal((3, 4))})
    w = RNG.standard_normal(3)
    check(lambda t, p, _: t.sum(t.mul(t.logsumexp(p["x"], axis=1), w)), {"x": RNG.standard_normal((3, 4))})


def test_gather_repeated_and_tuple_index():
    idx = np.array([0, 2, 2, 1])
    check(lambda t, p, _: t.sqnorm(t.gather(p["x"], idx)), {"x": RNG.standard_normal((3, 2))})
    rows, cols = np.array([[0, 1], [1, 1]]), np.array([[2, 0], [2, 2]])
    check(lambda t, p, _: t.sqnorm(t.gather(p["x"], (rows, cols))), {"x": RNG.standard_normal((2, 3, 4))})


@pytest.mark.parametrize("subs,sa,sb", [
    ("ij,jk->ik", (3, 4), (4, 2)),
    ("nbd,br->nrd", (2, 3, 4), (3, 5)),
    ("nrd,red->nre", (2, 3, 4), (3, 4, 4)),
    ("nbd,nb->nd", (2, 3, 4), (2, 3)),
    ("n,b->nb", (3,), (4,)),
    ("pd,pd->p", (5, 3), (5, 3)),
    ("mnc,cd->nmd", (2, 3, 4), (4, 5)),
])
def test_contract_grad(subs, sa, sb):
    out_shape = np.einsum(subs, np.ones(sa), np.ones(sb)).shape
    w = RNG.standard_normal(out_shape)
    check(lambda t, p, _: t.sum(t.mul(t.contract(subs, p["a"], p["b"]), w)),
          {"a": RNG.standard_normal(sa), "b": RNG.standard_normal(sb)})


def test_contract_with_summed_out_index():
    # index k appears only in the first operand: its gradient is a broadcast
    check(lambda t, p, _: t.sqnorm(t.contract("ik,j->ij", p["a"], p["b"])),
          {"a": RNG.standard_normal((3, 4)), "b": RNG.standard_normal(2)})


def test_normalize_grad_and_zero_rows():
    w = RNG.standard_normal((4, 3))
    check(lambda t, p, _: t.sum(t.mul(t.normalize(p["x"]), w)), {"x": RNG.standard_normal((4, 3))})
    check(lambda t, p, _: t.sum(t.mul(t.normalize(p["x"], axis=0), w)), {"x": RNG.standard_normal((4, 3))})
    t = Tape()
    x = t.param("x", np.array([[0.0, 0.0], [3.0, 4.0]]))
    y = t.normalize(x)
    np.testing.assert_allclose(y.value, [[0, 0], [0.6, 0.8]])
    g = t.backward(t.sum(y))["x"]
    assert np.all(g[0] == 0) and np.all(np.isfinite(g))


def test_concat_grad_both_modes():
    w = RNG.standard_normal((2, 5))
    check(lambda t, p, _: t.sum(t.mul(t.concat([p["a"], p["b"]], axis=1), w)),
          {"a": RNG.standard_normal((2, 2)), "b": RNG.standard_normal((2, 3))})
    w3 = RNG.standard_normal((2, 3, 4))
    check(lambda t, p, _: t.sum(t.mul(t.concat([p["a"], p["b"], p["c"]], axis=1, new_axis=True), w3)),
          {k: RNG.standard_normal((2, 4)) for k in "abc"})


# --- examples and properties -------------------------------------------------

def test_identity_matmul_single_node():
    x = RNG.standard_normal(3)
    out, tape = forward_record(lambda t, p, _: t.matmul(x, p["W"]), {"W": np.eye(3)})
    np.testing.assert_array_equal(out.value, x)
    assert [n.op for n in tape.nodes] == ["matmul"]


def test_nested_composition_records_in_order():
    x = RNG.standard_normal(3)
    _, tape = forward_record(lambda t, p, _: t.sigmoid(t.add(t.matmul(x, p["W"]), p["b"])),
                             {"W": RNG.standard_normal((3, 2)), "b": np.zeros(2)})
    assert [n.op for n in tape.nodes] == ["matmul", "add", "sigmoid"]


def test_sqnorm_gradient_is_2x():
    x = RNG.standard_normal(5)
    _, g = value_and_grad(lambda t, p, _: t.sqnorm(p["x"]), {"x": x})
    np.testing.assert_allclose(g["x"], 2 * x)


def test_sigmoid_at_zero_weight():
    x = RNG.standard_normal(4)
    _, g = value_and_grad(lambda t, p, _: t.sigmoid(t.contract("i,i->", x, p["w"])), {"w": np.zeros(4)})
    np.testing.assert_allclose(g["w"], 0.25 * x, rtol=0, atol=1e-15)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_linearity_of_gradients(a, b, seed):
    rng = np.random.default_rng(seed)
    params = {"W": rng.standard_normal((3, 3)), "v": rng.standard_normal(3)}
    x = rng.standard_normal(3)
    L1 = lambda t, p: t.sqnorm(t.matmul(t.sigmoid(t.matmul(x, p["W"])), p["W"]))  # noqa: E731
    L2 = lambda t, p: t.logsumexp(t.mul(p["v"], t.matmul(x, p["W"])))  # noqa: E731
    _, g1 = value_and_grad(lambda t, p, _: L1(t, p), params)
    _, g2 = value_and_grad(lambda t, p, _: L2(t, p), params)
    _, g = value_and_grad(lambda t, p, _: t.add(t.mul(L1(t, p), a), t.mul(L2(t, p), b)), params)
    for k in params:
        np.testing.assert_allclose(g[k], a * g1[k] + b * g2[k], atol=1e-10)


def test_batch_gradient_is_sum_of_per_element():
    X = RNG.standard_normal((5, 3))
    W = RNG.standard_normal((3, 2))
    prog = lambda rows: (lambda t, p, _: t.sum(t.sigmoid(t.matmul(X[rows], p["W"]))))  # noqa: E731
    _, whole = value_and_grad(prog(np.arange(5)), {"W": W})
    parts = sum(value_and_grad(prog(np.array([i])), {"W": W})[1]["W"] for i in range(5))
    np.testing.assert_allclose(whole["W"], parts, atol=1e-12)


def test_recorded_equals_plain_and_backward_deterministic():
    params = {"W": RNG.standard_normal((4, 4))}
    x = RNG.standard_normal((2, 4))
    prog = lambda t, p, _: t.sum(t.softmax(t.leaky_relu(t.matmul(x, p["W"])), axis=1))  # noqa: E731
    a, tape = forward_record(prog, params)
    b, _ = forward_record(prog, params, record=False)
    assert a.value == b.value
    g1, g2 = tape.backward(a), tape.backward(a)
    np.testing.assert_array_equal(g1["W"], g2["W"])


def test_unused_param_gets_zero_and_keys_mirror_params():
    params = {"a": RNG.standard_normal(3), "b": RNG.standard_normal((2, 2))}
    _, g = value_and_grad(lambda t, p, _: t.sqnorm(p["a"]), params)
    assert set(g) == set(params) and g["b"].shape == (2, 2) and not g["b"].any()


def test_shape_errors_name_the_primitive():
    t = Tape()
    with pytest.raises(ShapeError, match="matmul"):
        t.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        t.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError, match="contract"):
        t.contract("ij,jk->ik", np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError, match="concat"):
        t.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)
    out = t.sqnorm(t.param("x", np.ones(3)), axis=None)
    with pytest.raises(ShapeError, match="seed"):
        t.backward(out, seed=np.ones(2))
    with pytest.raises(ShapeError):
        t.backward(t.mul(t.param("y", np.ones(3)), 2.0))
    with pytest.raises(RuntimeError):
        Tape(record=False).backward(out)


def test_quadratic_grad_check_is_tight():
    A = RNG.standard_normal((4, 4))
    r = grad_check(lambda t, p, _: t.sqnorm(t.contract("ij,j->i", A, p["x"])), {"x": RNG.standard_normal(4)})
    assert r["tensors"]["x"]["max_rel_error"] <= 1e-7


def test_corrupted_backward_rule_fails(monkeypatch):
    def bad_sigmoid(self, x):
        x = self._wrap(x)
        s = autodiff._sigmoid(x.value)
        return self._emit("sigmoid", (x,), s, lambda g: (g * s,))   # missing (1 - s)
    monkeypatch.setattr(Tape, "sigmoid", bad_sigmoid)
    r = grad_check(lambda t, p, _: t.sum(t.sigmoid(p["x"])), {"x": RNG.standard_normal(5)})
    assert not r["passed"]


def test_grad_check_samples_at_least_200_coords():
    r = grad_check(lambda t, p, _: t.sqnorm(p["x"]), {"x": RNG.standard_normal((30, 30))})
    assert r["tensors"]["x"]["n_coords"] == 200


def test_grad_check_steps_around_kinks():
    # pre-activation within eps of the kink: the check must shrink its step
    x = np.array([3e-5, -2e-5, 0.5])
    r = grad_check(lambda t, p, _: t.sum(t.leaky_relu(p["x"], 0.01)), {"x": x})
    assert r["passed"] and r["tensors"]["x"]["n_kink_skipped"] == 0
