import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rad import nncore as nn
from conftest import max_fd_error, tape_grads

TOL = 1e-6


def param(rng, *shape, name="p"):
    return nn.Parameter(rng.normal(size=shape), name=name)


# ---------------------------------------------------------------- embeddings


def test_embedding_identity_row():
    table = nn.Parameter(np.eye(3))
    np.testing.assert_array_equal(nn.embedding_lookup(table, 1).data, [0.0, 1.0, 0.0])


def test_embedding_backward_touches_only_its_row(rng):
    table = param(rng, 4, 3)
    g = np.array([1.0, -2.0, 0.5])
    with nn.Tape() as tape:
        out = nn.embedding_lookup(table, 1)
        tape.backward(nn.sum_(nn.mul(out, g)))
    expected = np.zeros((4, 3))
    expected[1] = g
    np.testing.assert_array_equal(table.grad, expected)


def test_embedding_out_of_range():
    with pytest.raises(nn.LookupRangeError):
        nn.embedding_lookup(nn.Parameter(np.zeros((3, 2))), 3)


def test_embedding_fd(rng):
    table = param(rng, 5, 4)
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    w = rng.normal(size=(2, 3, 4))
    assert max_fd_error(lambda: nn.sum_(nn.mul(nn.embedding_lookup(table, idx), w)), [table]) < TOL


# ---------------------------------------------------------------- linear


def test_linear_identity(rng):
    x = rng.normal(size=4)
    out = nn.linear(nn.Tensor(x), nn.Parameter(np.eye(4)), nn.Parameter(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_hand_case():
    out = nn.linear(nn.Tensor([1.0, 2.0]), nn.Parameter([[1.0, 1.0], [0.0, 1.0]]), nn.Parameter([0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [3.0, 3.0])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(nn.ShapeError, match=r"\(3,\).*\(2, 2\)"):
        nn.linear(nn.Tensor(np.ones(3)), nn.Parameter(np.ones((2, 2))))


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_linear_fd_random_shapes(m, n, seed):
    r = np.random.default_rng(seed)
    x, w, b = nn.Tensor(r.normal(size=n)), param(r, m, n), param(r, m)
    c = r.normal(size=m)
    assert max_fd_error(lambda: nn.sum_(nn.mul(nn.linear(x, w, b), c)), [x, w, b]) < TOL


# ---------------------------------------------------------------- activations


def test_sigmoid_values():
    assert nn.sigmoid(nn.Tensor(0.0)).data == 0.5
    low = float(nn.sigmoid(nn.Tensor(-50.0)).data)
    assert 0.0 < low and math.isfinite(low)


def test_sigmoid_no_overflow_at_700():
    with np.errstate(over="raise"):
        out = nn.sigmoid(nn.Tensor([-700.0, 700.0])).data
    assert np.all(np.isfinite(out))


def test_sigmoid_derivative_matches_formula_and_fd(rng):
    x = nn.Tensor(rng.normal(size=6) * 3)
    (g,) = tape_grads(lambda: nn.sum_(nn.sigmoid(x)), [x])
    s = 1.0 / (1.0 + np.exp(-x.data))
    np.testing.assert_allclose(g, s * (1 - s), atol=1e-12)
    assert max_fd_error(lambda: nn.sum_(nn.sigmoid(x)), [x]) < TOL


def test_relu_fd_away_from_kink(rng):
    x = nn.Tensor(rng.choice([-1, 1], size=7) * rng.uniform(0.1, 2.0, size=7))
    assert max_fd_error(lambda: nn.sum_(nn.mul(nn.relu(x), np.arange(7.0))), [x]) < TOL


# ---------------------------------------------------------------- attention


def test_attention_zero_w_is_uniform_mean(rng):
    keys = rng.normal(size=(4, 3))
    w, pooled = nn.attention_pool(nn.Tensor(rng.normal(size=3)), nn.Tensor(keys), nn.Parameter(np.zeros((3, 3))))
    np.testing.assert_allclose(w.data, 0.25)
    np.testing.assert_allclose(pooled.data, keys.mean(axis=0), atol=1e-15)


def test_attention_identical_keys_split_evenly(rng):
    key = rng.normal(size=3)
    w, _ = nn.attention_pool(nn.Tensor(rng.normal(size=3)), nn.Tensor(np.stack([key, key])), param(rng, 3, 3))
    np.testing.assert_allclose(w.data, [0.5, 0.5])


def test_softmax_shift_invariance(rng):
    s = rng.normal(size=5)
    np.testing.assert_allclose(nn.softmax(nn.Tensor(s)).data, nn.softmax(nn.Tensor(s + 123.4)).data, atol=1e-15)


def test_attention_empty_keys():
    with pytest.raises(nn.EmptyRetrievalError):
        nn.attention_pool(nn.Tensor(np.ones(2)), nn.Tensor(np.zeros((0, 2))), nn.Parameter(np.eye(2)))


def test_attention_fd_all_inputs(rng):
    q, keys, W = nn.Tensor(rng.normal(size=4)), nn.Tensor(rng.normal(size=(3, 4))), param(rng, 4, 4)
    c = rng.normal(size=4)

    def f():
        w, pooled = nn.attention_pool(q, keys, W)
        return nn.add(nn.sum_(nn.mul(pooled, c)), nn.sum_(nn.mul(w, np.array([0.3, -1.0, 2.0]))))

    assert max_fd_error(f, [q, keys, W]) < TOL


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 6), e=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_attention_weights_are_a_distribution(k, e, seed):
    r = np.random.default_rng(seed)
    w, _ = nn.attention_pool(nn.Tensor(r.normal(size=e)), nn.Tensor(r.normal(size=(k, e)) * 3),
                             nn.Parameter(r.normal(size=(e, e))))
    assert abs(w.data.sum() - 1.0) < 1e-12
    assert np.all((w.data >= 0) & (w.data <= 1))


# ---------------------------------------------------------------- FM


def brute_fm(v):
    return sum(float(v[i] @ v[j]) for i in range(len(v)) for j in range(i + 1, len(v)))


def test_fm_orthogonal_pair():
    assert nn.fm_second_order(nn.Tensor([[1.0, 0.0], [0.0, 1.0]])).data == 0.0


def test_fm_three_equal_fields():
    assert nn.fm_second_order(nn.Tensor([[1.0, 0.0]] * 3)).data == pytest.approx(3.0)


def test_fm_matches_pairwise_loop(rng):
    for _ in range(20):
        v = rng.normal(size=(5, 4))
        assert abs(float(nn.fm_second_order(nn.Tensor(v)).data) - brute_fm(v)) < 1e-12


def test_fm_needs_two_fields():
    with pytest.raises(ValueError):
        nn.fm_second_order(nn.Tensor(np.ones((1, 3))))


def test_fm_fd(rng):
    v = nn.Tensor(rng.normal(size=(4, 3)))
    assert max_fd_error(lambda: nn.fm_second_order(v), [v]) < TOL


# ---------------------------------------------------------------- losses


def test_bce_half():
    assert float(nn.bce_loss(nn.Tensor([0.5]), [1.0]).data) == pytest.approx(math.log(2), abs=1e-12)


def test_mse_self_is_zero(rng):
    a = rng.normal(size=5)
    assert float(nn.mse_loss(nn.Tensor(a), nn.Tensor(a.copy())).data) == 0.0


def test_mse_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.mse_loss(nn.Tensor(np.ones(3)), nn.Tensor(np.ones(4)))


def test_bce_logit_gradient_is_p_minus_y(rng):
    z = nn.Tensor(rng.normal(size=6))
    y = rng.integers(0, 2, size=6).astype(float)
    (g,) = tape_grads(lambda: nn.bce_loss(nn.sigmoid(z), y), [z])
    p = 1.0 / (1.0 + np.exp(-z.data))
    np.testing.assert_allclose(g, (p - y) / 6, atol=1e-12)
    assert max_fd_error(lambda: nn.bce_loss(nn.sigmoid(z), y), [z]) < TOL


def test_bce_clamps_saturated_probabilities():
    loss = nn.bce_loss(nn.Tensor([0.0, 1.0]), [1.0, 0.0])
    assert float(loss.data) == pytest.approx(-math.log(1e-7))


def test_mse_fd(rng):
    a, b = nn.Tensor(rng.normal(size=(3, 2))), nn.Tensor(rng.normal(size=(3, 2)))
    assert max_fd_error(lambda: nn.mse_loss(a, b), [a, b]) < TOL


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_keeps_params():
    p = nn.Parameter(np.array([1.0, -2.0]))
    nn.Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_hand_trace():
    # m1 = 0.1, v1 = 0.001, m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    p = nn.Parameter(np.array([0.0]))
    opt = nn.Adam([p], lr=0.1)
    p.grad[:] = 1.0
    nn.adam_step(opt)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert p.grad[0] == 0.0


def test_adam_quadratic_bowl():
    w = nn.Parameter(np.array([3.0]))
    opt = nn.Adam([w], lr=0.05)
    for _ in range(500):
        with nn.Tape() as tape:
            tape.backward(nn.sum_(nn.square(w)))
        opt.step()
    assert abs(w.data[0]) < 0.1


def test_adam_skips_frozen():
    p = nn.Parameter(np.array([1.0]))
    opt = nn.Adam([p], lr=0.1)
    p.requires_grad = False
    p.grad[:] = 5.0
    opt.step()
    assert p.data[0] == 1.0


# ---------------------------------------------------------------- grad_check harness


def test_grad_check_linear_function_exact(rng):
    x = nn.Tensor(rng.normal(size=4))
    assert nn.grad_check(lambda: nn.sum_(nn.mul(x, np.arange(4.0))), [x]) < 1e-9


def test_grad_check_sigmoid_linear(rng):
    x, w, b = nn.Tensor(rng.normal(size=3)), param(rng, 2, 3), param(rng, 2)
    assert nn.grad_check(lambda: nn.sum_(nn.sigmoid(nn.linear(x, w, b))), [x, w, b]) < TOL


def test_grad_check_catches_wrong_backward(rng, monkeypatch):
    x = nn.Tensor(rng.normal(size=3) + 2.0)

    def bad_square(t):
        return nn._result(t.data ** 2, (t,), lambda g: nn._push_grad(t, g * t.data))  # missing factor 2

    assert nn.grad_check(lambda: nn.sum_(bad_square(x)), [x]) > 1e-2


# ---------------------------------------------------------------- misc ops and tape


@pytest.mark.parametrize("op", ["add", "sub", "mul", "square", "mean", "concat", "stack", "reshape", "matmul"])
def test_elementary_ops_fd(rng, op):
    a, b = nn.Tensor(rng.normal(size=(2, 3))), nn.Tensor(rng.normal(size=(2, 3)))
    c = rng.normal(size=(2, 3))
    build = {
        "add": lambda: nn.sum_(nn.mul(nn.add(a, b), c)),
        "sub": lambda: nn.sum_(nn.mul(nn.sub(a, b), c)),
        "mul": lambda: nn.sum_(nn.mul(a, b)),
        "square": lambda: nn.sum_(nn.mul(nn.square(a), c)),
        "mean": lambda: nn.sum_(nn.mul(nn.mean(a, axis=0), c[0])),
        "concat": lambda: nn.sum_(nn.mul(nn.concat([a, b], axis=1), np.hstack([c, c]))),
        "stack": lambda: nn.sum_(nn.mul(nn.stack([a, b], axis=0), np.stack([c, -c]))),
        "reshape": lambda: nn.sum_(nn.mul(nn.reshape(a, (3, 2)), c.reshape(3, 2))),
        "matmul": lambda: nn.sum_(nn.matmul(a, nn.reshape(b, (3, 2)))),
    }[op]
    assert max_fd_error(build, [a, b]) < TOL


def test_backward_visits_shared_node_once(rng):
    x = nn.Tensor(rng.normal(size=3))
    (g,) = tape_grads(lambda: nn.sum_(nn.add(nn.mul(x, 2.0), nn.mul(x, 3.0))), [x])
    np.testing.assert_allclose(g, 5.0)


def test_backward_needs_scalar():
    with nn.Tape() as tape, pytest.raises(nn.ShapeError):
        tape.backward(nn.add(nn.Tensor(np.ones(2)), 1.0))


def test_forward_is_deterministic(rng):
    w = rng.normal(size=(4, 4))
    x = rng.normal(size=(10, 4))
    a = nn.sigmoid(nn.linear(nn.Tensor(x), nn.Parameter(w.copy()))).data
    b = nn.sigmoid(nn.linear(nn.Tensor(x), nn.Parameter(w.copy()))).data
    assert a.tobytes() == b.tobytes()


def test_parameter_checkpoint_roundtrip(tmp_path, rng):
    params = [param(rng, 3, 2, name="a"), param(rng, 4, name="b"), nn.Parameter(np.array(1.5), name="c")]
    nn.save_parameters(params, tmp_path / "w.radw")
    assert (tmp_path / "w.radw").read_bytes()[:4] == b"RADW"
    loaded = nn.load_parameters(tmp_path / "w.radw")
    for p in params:
        assert loaded[p.name].tobytes() == p.data.tobytes()
