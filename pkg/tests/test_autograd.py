import numpy as np
import pytest

from hiermuse.autograd import Tensor, check_gradients, concat, no_grad
from hiermuse.nn import ParameterStore, linear


def test_sum_gradient_is_ones():
    w = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    loss = w.sum()
    loss.backward()
    assert np.array_equal(w.grad, np.ones((3, 4)))


def test_quadratic_gradient_is_identity():
    w = Tensor(np.random.default_rng(1).normal(size=(5,)), requires_grad=True)
    loss = (w * w).sum() * 0.5
    loss.backward()
    np.testing.assert_allclose(w.grad, w.data, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = ParameterStore(seed=seed)
    x = Tensor(rng.normal(size=(4, 6)))

    def build_loss():
        h = linear(params, "l1", x, 6, 8).relu()
        h = linear(params, "l2", h, 8, 8).relu()
        h = linear(params, "l3", h, 8, 3)
        return (h * h).mean()

    worst = check_gradients(build_loss, params, eps=1e-5, rel_tol=1e-4)
    assert worst <= 1e-4


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(6, 9)) * 3)
    s = x.softmax()
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(6), atol=1e-9)


def test_masked_softmax_masked_entries_exactly_zero():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 7)))
    mask = rng.random((5, 7)) > 0.4
    mask[:, 0] = True  # keep every row nonempty
    s = x.softmax(mask=mask)
    assert np.all(s.data[~mask] == 0.0)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(5), atol=1e-9)


def test_masked_softmax_gradient():
    rng = np.random.default_rng(4)
    params = ParameterStore(seed=4)
    w = params.create("w", (4, 5))
    mask = rng.random((4, 5)) > 0.3
    mask[:, 2] = True
    coeff = Tensor(rng.normal(size=(4, 5)))

    def build_loss():
        return (w.softmax(mask=mask) * coeff).sum()

    check_gradients(build_loss, params)


def test_log_softmax_gradient_and_value():
    rng = np.random.default_rng(5)
    params = ParameterStore(seed=5)
    w = params.create("w", (3, 6))
    np.testing.assert_allclose(np.exp(w.log_softmax().data).sum(axis=-1), np.ones(3), atol=1e-12)

    def build_loss():
        return -w.log_softmax()[np.arange(3), [1, 4, 2]].mean()

    check_gradients(build_loss, params)


def test_gather_take_bin_gradients():
    rng = np.random.default_rng(6)
    params = ParameterStore(seed=6)
    table = params.create("table", (7, 3))
    mat = params.create("mat", (4, 5))
    idx_rows = np.array([0, 3, 3, 6])
    flat_idx = rng.integers(0, 21, size=(2, 4))
    col_bins = rng.integers(0, 3, size=(4, 5))
    coeff_a = Tensor(rng.normal(size=(4, 3)))
    coeff_b = Tensor(rng.normal(size=(2, 4)))
    coeff_c = Tensor(rng.normal(size=(4, 3)))

    def build_loss():
        a = (table.gather_rows(idx_rows) * coeff_a).sum()
        b = (table.take_flat(flat_idx) * coeff_b).sum()
        c = (mat.bin_rows_by_index(col_bins, 3) * coeff_c).sum()
        return a + b + c

    check_gradients(build_loss, params)


def test_concat_slice_div_pow_gradients():
    rng = np.random.default_rng(7)
    params = ParameterStore(seed=7)
    a = params.create("a", (3, 4))
    b = params.create("b", (2, 4))

    def build_loss():
        joined = concat([a, b], axis=0)
        top = joined[:2, 1:3]
        return ((top.pow(3.0) / 2.0).exp() * 0.01).sum() + joined.tanh().mean()

    check_gradients(build_loss, params)


def test_backward_rejects_non_scalar_and_nan():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (w * 2).backward()
    bad = Tensor(np.array(np.nan), requires_grad=True, name="bad-node")
    with pytest.raises(FloatingPointError, match="bad-node"):
        bad.backward()


def test_no_grad_suspends_taping():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (w * 2).sum()
    assert not out.requires_grad
    assert out._parents == ()


def test_forward_determinism():
    def run(seed):
        params = ParameterStore(seed=seed)
        x = Tensor(np.random.default_rng(99).normal(size=(5, 8)))
        return linear(params, "l", x, 8, 8).softmax().data

    assert np.array_equal(run(42), run(42))
