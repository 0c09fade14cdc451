import numpy as np
import pytest

from hiermuse.autograd import Tensor, check_gradients
from hiermuse.nn import (
    AdamW,
    ParameterStore,
    dropout,
    ffn,
    layer_norm,
    linear,
    load_checkpoint,
    save_checkpoint,
)


def _ln(x, gain=None, bias=None):
    d = x.shape[-1]
    gain = gain if gain is not None else Tensor(np.ones(d))
    bias = bias if bias is not None else Tensor(np.zeros(d))
    return layer_norm(Tensor(x) if not isinstance(x, Tensor) else x, gain, bias)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = _ln(np.full((2, 5), 3.7))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-3)

    def test_two_point_row(self):
        out = _ln(np.array([[1.0, 3.0]]))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_row_moments(self):
        rng = np.random.default_rng(0)
        out = _ln(rng.normal(size=(6, 16)) * 5 + 2).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_affine_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 8))
        base = _ln(x).data
        scaled = _ln(x, gain=Tensor(np.full(8, 2.0)), bias=Tensor(np.ones(8))).data
        np.testing.assert_allclose(scaled, 2 * base + 1, rtol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        params = ParameterStore(seed=2)
        x = params.create("x", (3, 6))
        gain = params.create("gain", (6,))
        bias = params.create("bias", (6,))
        coeff = Tensor(rng.normal(size=(3, 6)))

        def build_loss():
            return (layer_norm(x, gain, bias) * coeff).sum()

        check_gradients(build_loss, params)


class TestFfn:
    def test_zero_weights_give_zero_output(self):
        params = ParameterStore(seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
        out = ffn(params, "f", x, 6)
        for name, t in params.items():
            t.data[:] = 0.0
        out = ffn(params, "f", x, 6)
        assert np.all(out.data == 0.0)

    def test_position_wise_permutation(self):
        params = ParameterStore(seed=3)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 6))
        perm = rng.permutation(5)
        out = ffn(params, "f", Tensor(x), 6).data
        out_perm = ffn(params, "f", Tensor(x[perm]), 6).data
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-12)

    def test_gradient(self):
        params = ParameterStore(seed=4)
        x = Tensor(np.random.default_rng(4).normal(size=(3, 5)))

        def build_loss():
            return (ffn(params, "f", x, 5) ** 2).mean()

        check_gradients(build_loss, params)


class TestAdamW:
    def test_quadratic_reaches_closed_form_minimum(self):
        params = ParameterStore(seed=0)
        w = params.create_const("w", np.array(1.0))
        target = 0.25
        opt = AdamW(params, learning_rate=0.1, weight_decay=0.0, beta1=0.5)
        losses = []
        for _ in range(100):
            opt.zero_grad()
            loss = (w - target) ** 2 * 0.5
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert abs(w.item() - target) < 1e-3
        assert losses[-1] < losses[0]

    def test_zero_grad_zero_decay_is_identity(self):
        params = ParameterStore(seed=1)
        w = params.create("w", (4, 4))
        before = w.data.copy()
        opt = AdamW(params, learning_rate=0.5, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(w.data, before)

    def test_zero_grad_decay_only_update(self):
        params = ParameterStore(seed=2)
        w = params.create("w", (3,))
        before = w.data.copy()
        lr, wd = 0.1, 0.5
        opt = AdamW(params, learning_rate=lr, weight_decay=wd)
        opt.step()
        np.testing.assert_allclose(w.data, before * (1 - lr * wd), rtol=1e-12)

    def test_weight_decay_shrinks_unused_weight(self):
        params = ParameterStore(seed=3)
        used = params.create_const("used", np.array(2.0))
        unused = params.create_const("unused", np.array(2.0))
        opt = AdamW(params, learning_rate=0.05, weight_decay=0.1)
        for _ in range(50):
            opt.zero_grad()
            loss = (used - 1.0) ** 2
            loss.backward()
            opt.step()
        assert abs(unused.item()) < 2.0 * (1 - 0.05 * 0.1) ** 45


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((200, 10)))
    assert np.array_equal(dropout(x, 0.2, None).data, x.data)
    rng = np.random.default_rng(0)
    out = dropout(x, 0.2, rng).data
    kept = out > 0
    assert 0.7 < kept.mean() < 0.9
    np.testing.assert_allclose(out[kept], 1.0 / 0.8)


def test_checkpoint_round_trip(tmp_path):
    params = ParameterStore(seed=7)
    params.create("enc.w", (3, 4))
    params.create("enc.b", (4,))
    path = tmp_path / "weights.json"
    save_checkpoint(path, params, meta={"dim": 4})
    weights, meta = load_checkpoint(path)
    assert meta == {"dim": 4}
    for name, t in params.items():
        np.testing.assert_array_equal(weights[name], t.data)

    fresh = ParameterStore(seed=0)
    fresh.load_values(weights)
    assert np.array_equal(fresh["enc.w"].data, params["enc.w"].data)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.json"
    path.write_text('{"something": 1}')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_init_determinism():
    a = ParameterStore(seed=11).create("w", (6, 6)).data
    b = ParameterStore(seed=11).create("w", (6, 6)).data
    assert np.array_equal(a, b)
