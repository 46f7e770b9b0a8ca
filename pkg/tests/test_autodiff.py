import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffppo import autodiff as ad
from diffppo.autodiff import Adam, Tensor, adam_step, global_norm_clip
from diffppo.errors import NonFiniteValue, ShapeError

from conftest import fd_check, leaf


def test_forward_square():
    x = Tensor(3.0, requires_grad=True)
    assert float(ad.square(x).value) == 9.0


def test_forward_exp_zero():
    assert float(ad.exp(Tensor(0.0)).value) == 1.0


def test_forward_mlp_matches_straightline():
    rng = np.random.default_rng(0)
    w1, b1 = rng.standard_normal((3, 4)), rng.standard_normal(4)
    w2, b2 = rng.standard_normal((4, 2)), rng.standard_normal(2)
    x = rng.standard_normal((5, 3))
    out = ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(Tensor(x), Tensor(w1)), Tensor(b1))), Tensor(w2)), Tensor(b2))
    expected = np.tanh(x @ w1 + b1) @ w2 + b2
    np.testing.assert_allclose(out.value, expected, rtol=1e-14)


def test_backward_square_at_3():
    x = Tensor(3.0, requires_grad=True)
    ad.square(x).backward()
    assert float(x.grad) == pytest.approx(6.0)


def test_backward_log_at_1():
    x = Tensor(1.0, requires_grad=True)
    ad.log(x).backward()
    assert float(x.grad) == pytest.approx(1.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.square(x).backward()


def test_nonfinite_raises():
    with pytest.raises(NonFiniteValue):
        ad.log(Tensor(-1.0))


def test_gaussian_logprob_grad_matches_fd():
    from diffppo.nn import gaussian_log_prob

    rng = np.random.default_rng(1)
    for _ in range(20):
        mean = leaf(rng, (4, 3))
        logstd = Tensor(0.3 * rng.standard_normal((4, 3)), requires_grad=True)
        a = rng.standard_normal((4, 3))
        fd_check(lambda: ad.vmean(gaussian_log_prob(mean, logstd, a)), [mean, logstd])


# ---------------------------------------------------------------------------
# per-op finite differences, 100 random instances each


def _away_from(x, points, margin=1e-3):
    for p in points:
        x = np.where(np.abs(x - p) < margin, x + 2 * margin, x)
    return x


OP_CASES = {
    "add": lambda x, y: ad.vsum(ad.mul(ad.add(x, y), 1.3)),
    "mul": lambda x, y: ad.vsum(ad.mul(x, y)),
    "sub": lambda x, y: ad.vsum(ad.square(ad.sub(x, y))),
    "div": lambda x, y: ad.vsum(ad.div(x, ad.add(ad.square(y), 1.0))),
    "matmul": lambda x, y: ad.vsum(ad.matmul(x, y)),
    "tanh": lambda x, y: ad.vsum(ad.tanh(ad.add(x, y))),
    "sigmoid": lambda x, y: ad.vsum(ad.sigmoid(ad.add(x, y))),
    "exp": lambda x, y: ad.vsum(ad.exp(ad.mul(ad.add(x, y), 0.3))),
    "log": lambda x, y: ad.vsum(ad.log(ad.add(ad.square(ad.add(x, y)), 0.5))),
    "square": lambda x, y: ad.vsum(ad.square(ad.add(x, y))),
    "sqrt": lambda x, y: ad.vsum(ad.sqrt(ad.add(ad.square(ad.add(x, y)), 0.5))),
    "softmax": lambda x, y: ad.vsum(ad.mul(ad.softmax(x, axis=1), y)),
    "sum_axis": lambda x, y: ad.vsum(ad.square(ad.vsum(ad.mul(x, y), axis=1))),
    "mean": lambda x, y: ad.square(ad.vmean(ad.mul(x, y))),
    "mean_axis": lambda x, y: ad.vsum(ad.square(ad.vmean(ad.mul(x, y), axis=0))),
    "concat": lambda x, y: ad.vsum(ad.square(ad.concat([x, y], axis=1))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        x = leaf(rng, (3, 3))
        y = leaf(rng, (3, 3))
        fd_check(lambda: OP_CASES[name](x, y), [x, y])


def test_clip_gradient_matches_fd_away_from_kinks():
    rng = np.random.default_rng(5)
    for _ in range(100):
        vals = _away_from(2.0 * rng.standard_normal((3, 3)), [-1.0, 1.0], margin=1e-2)
        x = Tensor(vals, requires_grad=True)
        fd_check(lambda: ad.vsum(ad.square(ad.clip(x, -1.0, 1.0))), [x])


def test_minimum_gradient_matches_fd_away_from_ties():
    rng = np.random.default_rng(6)
    for _ in range(100):
        xv = rng.standard_normal((3, 3))
        yv = xv + _away_from(rng.standard_normal((3, 3)), [0.0], margin=1e-2)
        x, y = Tensor(xv, requires_grad=True), Tensor(yv, requires_grad=True)
        fd_check(lambda: ad.vsum(ad.minimum(x, y)), [x, y])


def test_backward_is_linear():
    rng = np.random.default_rng(2)
    x = leaf(rng, (4,))

    def grad_of(fn):
        x.grad = None
        fn().backward()
        return x.grad.copy()

    f = lambda: ad.vsum(ad.square(x))
    g = lambda: ad.vsum(ad.tanh(x))
    combo = lambda: ad.add(ad.mul(f(), 2.5), ad.mul(g(), -1.5))
    np.testing.assert_allclose(grad_of(combo), 2.5 * grad_of(f) - 1.5 * grad_of(g), rtol=1e-12)


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(3)
    x = leaf(rng, (3, 3))
    y = leaf(rng, (3, 3))
    xv, yv = x.value.copy(), y.value.copy()
    for fn in OP_CASES.values():
        loss = fn(x, y)
        loss.backward()
        np.testing.assert_array_equal(x.value, xv)
        np.testing.assert_array_equal(y.value, yv)


def test_grad_accumulates_over_reuse():
    x = Tensor(2.0, requires_grad=True)
    ad.add(ad.square(x), ad.square(x)).backward()
    assert float(x.grad) == pytest.approx(8.0)


def test_off_path_gradient_is_none():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(3.0, requires_grad=True)
    ad.square(x).backward()
    assert y.grad is None


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_no_change():
    params = [np.ones((2, 2))]
    grads = [np.zeros((2, 2))]
    out, state = adam_step(params, grads, None, lr=0.1)
    np.testing.assert_array_equal(out[0], params[0])


def test_adam_one_step_matches_closed_form():
    # fresh state, constant gradient g: m_hat = g, v_hat = g^2,
    # update = -lr * g / (|g| + eps)
    g = np.array([[0.7, -0.3]])
    p = np.zeros((1, 2))
    lr = 0.01
    out, _ = adam_step([p], [g], None, lr=lr)
    expected = -lr * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(out[0], expected, rtol=1e-10)


def test_adam_deterministic():
    rng = np.random.default_rng(4)
    p = rng.standard_normal((3,))
    g = rng.standard_normal((3,))
    out1, _ = adam_step([p.copy()], [g.copy()], None, lr=0.05)
    out2, _ = adam_step([p.copy()], [g.copy()], None, lr=0.05)
    np.testing.assert_array_equal(out1[0], out2[0])


def test_adam_skips_nonfinite_grads():
    p = np.ones(2)
    with pytest.warns(RuntimeWarning):
        out, state = adam_step([p], [np.array([np.nan, 1.0])], None, lr=0.1)
    np.testing.assert_array_equal(out[0], p)
    assert state["t"] == 0


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.ones(2)], [np.ones(3)], None, lr=0.1)


def test_global_norm_clip():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, norm = global_norm_clip(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float((g**2).sum()) for g in clipped))
    assert total == pytest.approx(1.0)
    same, _ = global_norm_clip(grads, 10.0)
    np.testing.assert_array_equal(same[0], grads[0])


def test_adam_wrapper_updates_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    opt.zero_grad()
    ad.vsum(ad.square(x)).backward()
    before = x.value.copy()
    opt.step()
    assert not np.array_equal(x.value, before)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(vals):
    out = ad.softmax(Tensor(np.array(vals).reshape(1, -1)), axis=1)
    assert float(out.value.sum()) == pytest.approx(1.0, abs=1e-12)
