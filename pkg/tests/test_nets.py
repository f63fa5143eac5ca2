"""MLP, SGD, and checkpoint behavior."""
import numpy as np
import pytest

from cfcde import autodiff as ad
from cfcde import jsonlines, nets


class TestMlp:
    def test_shapes_and_init_bounds(self):
        net = nets.Mlp([5, 16, 3], rng=np.random.default_rng(0))
        assert net.weights[0].data.shape == (5, 16)
        assert net.weights[1].data.shape == (16, 3)
        bound = np.sqrt(6.0 / (5 + 16))
        assert np.abs(net.weights[0].data).max() <= bound
        assert (net.biases[0].data == 0).all()

    def test_zero_weights_zero_output(self):
        net = nets.Mlp([4, 8, 2], rng=np.random.default_rng(1))
        for p in net.parameters():
            p.data[:] = 0.0
        out = net(np.ones((3, 4)), frozen=True)
        np.testing.assert_array_equal(out, np.zeros((3, 2)))

    def test_dropout_rate_zero_is_noop(self):
        net = nets.Mlp([4, 8, 2], dropout_rate=0.0, rng=np.random.default_rng(2))
        assert net.sample_masks(np.random.default_rng(0)) is None
        x = np.random.default_rng(3).normal(size=(5, 4))
        np.testing.assert_array_equal(net(x, None, frozen=True),
                                      net(x, frozen=True))

    def test_dropout_masks_scale_survivors(self):
        net = nets.Mlp([4, 1000, 2], dropout_rate=0.1, rng=np.random.default_rng(4))
        masks = net.sample_masks(np.random.default_rng(5))
        vals = np.unique(masks[0])
        assert set(np.round(vals, 12)) <= {0.0, np.round(1 / 0.9, 12)}
        assert masks[0].mean() == pytest.approx(1.0, abs=0.05)

    def test_unit_weight_sum_probe(self):
        net = nets.Mlp([4, 1], rng=np.random.default_rng(6))
        net.weights[0].data[:] = 1.0
        net.biases[0].data[:] = 0.0
        e1 = np.zeros((1, 4))
        e1[0, 0] = 1.0
        assert net(e1, frozen=True)[0, 0] == 1.0

    def test_dimension_mismatch(self):
        net = nets.Mlp([4, 8, 2], rng=np.random.default_rng(7))
        with pytest.raises(ValueError):
            net(np.ones(4))
        with pytest.raises(ValueError):
            net(np.ones((2, 5)), frozen=True)


class TestSgd:
    def test_zero_lr_keeps_params(self):
        p = ad.Var(np.array([1.0, 2.0]))
        p.grad = np.array([5.0, -3.0])
        nets.sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_scalar_arithmetic(self):
        p = ad.Var(np.array([1.0]))
        p.grad = np.array([2.0])
        nets.sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(0.8)

    def test_quadratic_bowl_descends_monotonically(self):
        p = ad.Var(np.array([3.0, -2.0]))
        losses = []
        for _ in range(100):
            p.zero_grad()
            loss = ad.sum_(ad.mul(p, p))
            losses.append(float(ad.value(loss)))
            ad.backward(loss)
            nets.sgd_step([p], 0.05)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_nonfinite_gradient_rejected(self):
        p = ad.Var(np.array([1.0]))
        p.grad = np.array([np.nan])
        with pytest.raises(nets.TrainingError):
            nets.sgd_step([p], 0.1)


class TestOptState:
    def test_patience_counter_bounded(self):
        opt = nets.OptState(patience=5)
        assert opt.update(1.0)
        for i in range(5):
            assert not opt.update(2.0)
            assert opt.epochs_since_best == i + 1
        assert opt.should_stop
        assert opt.epochs_since_best <= 5


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        arrays = {"a.w0": rng.normal(size=(3, 4)), "b.b1": rng.normal(size=(7,))}
        path = tmp_path / "ckpt.json"
        nets.save_checkpoint(path, arrays, meta={"k": 1})
        meta, loaded = nets.load_checkpoint(path)
        assert meta == {"k": 1}
        for name in arrays:
            np.testing.assert_array_equal(loaded[name], arrays[name])

    def test_wrong_schema_rejected(self, tmp_path):
        path = tmp_path / "ckpt.json"
        path.write_text('{"schema":"other-1","meta":{}}\n', encoding="utf-8")
        with pytest.raises(jsonlines.FormatError):
            nets.load_checkpoint(path)

    def test_float_formatting_is_17_digits(self, tmp_path):
        path = tmp_path / "ckpt.json"
        nets.save_checkpoint(path, {"x": np.array([1.0 / 3.0])})
        assert "0.33333333333333331" in path.read_text(encoding="utf-8")
