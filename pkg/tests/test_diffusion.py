import numpy as np
import pytest

from maskdiff.denoiser import DenoiserNet, sinusoidal_embedding
from maskdiff.diffusion import (
    TrainConfig,
    forward_sample,
    predict_mean,
    reverse_step,
    sample,
    train_model,
    train_step,
    tweedie_x0,
)
from maskdiff.rng import stream
from maskdiff.schedule import make_schedule, respace
from maskdiff.tensor import NonFiniteError


@pytest.fixture(scope="module")
def sched():
    return make_schedule("linear", 10, 0.02, 0.2)


def make_image(seed=0, shape=(1, 4, 8, 8)):
    return stream(seed, "img").uniform(-1, 1, size=shape).astype(np.float32)


class TestForwardSample:
    def test_t0_is_identity(self, sched):
        x0 = make_image()
        eps = np.ones_like(x0)
        assert np.array_equal(forward_sample(x0, 0, eps, sched), x0)

    def test_zero_image_pure_noise_scaling(self, sched):
        eps = make_image(1)
        out = forward_sample(np.zeros_like(eps), 4, eps, sched)
        assert np.allclose(out, np.sqrt(1 - sched.alpha_bar(4)) * eps, atol=1e-6)

    def test_scalar_hand_value(self):
        s = make_schedule("linear", 2, 0.1, 0.2)  # abar_2 = 0.72
        x0 = np.full((1, 1, 1, 1), 1.0, dtype=np.float32)
        eps = np.full((1, 1, 1, 1), 1.0, dtype=np.float32)
        out = forward_sample(x0, 2, eps, s)
        assert out[0, 0, 0, 0] == pytest.approx(np.sqrt(0.72) + np.sqrt(0.28), abs=1e-4)

    def test_shape_mismatch(self, sched):
        with pytest.raises(ValueError):
            forward_sample(np.zeros((1, 4, 8, 8)), 1, np.zeros((1, 4, 4, 4)), sched)


class TestPredictMean:
    def test_zero_prediction_rescales(self, sched):
        x = make_image(2)
        out = predict_mean(x, 3, np.zeros_like(x), sched)
        assert np.allclose(out, x / np.sqrt(sched.alpha(3)), atol=1e-6)

    def test_no_noise_step_identity(self):
        s = make_schedule("linear", 3, 1e-12, 1e-12)  # alpha ~ 1
        x = make_image(3)
        assert np.allclose(predict_mean(x, 2, np.zeros_like(x), s), x, atol=1e-5)

    def test_out_of_range_t(self, sched):
        x = make_image(4)
        with pytest.raises(ValueError):
            predict_mean(x, 11, np.zeros_like(x), sched)


class TestTweedie:
    def test_exact_inverse_of_forward(self, sched):
        x0 = make_image(5)
        eps = stream(5, "e").standard_normal(x0.shape, dtype=np.float32)
        xt = forward_sample(x0, 6, eps, sched)
        rec = tweedie_x0(xt, 6, eps, sched, clamp=None)
        assert np.abs(rec - x0).max() < 1e-5

    def test_zero_prediction(self, sched):
        x = make_image(6)
        out = tweedie_x0(x, 2, np.zeros_like(x), sched, clamp=None)
        assert np.allclose(out, x / np.sqrt(sched.alpha_bar(2)), atol=1e-6)

    def test_roundtrip_through_forward(self, sched):
        rng = stream(7, "r")
        xt = rng.standard_normal((1, 4, 8, 8), dtype=np.float32)
        eps = rng.standard_normal((1, 4, 8, 8), dtype=np.float32)
        x0 = tweedie_x0(xt, 5, eps, sched, clamp=None)
        back = forward_sample(x0, 5, eps, sched)
        assert np.abs(back - xt).max() < 1e-5

    def test_clamped_by_default(self, sched):
        xt = np.full((1, 4, 4, 4), 10.0, dtype=np.float32)
        out = tweedie_x0(xt, 9, np.zeros_like(xt), sched)
        assert out.max() <= 1.5


class TestReverseStep:
    def test_deterministic_with_zero_net(self, sched):
        zero_net = lambda x, t: np.zeros_like(x)
        x = make_image(8)
        out = reverse_step(zero_net, x, 4, sched, stream(0, "z"), variance_mode="none")
        assert np.allclose(out, x / np.sqrt(sched.alpha(4)), atol=1e-6)

    def test_closed_form_denoiser_recovers_image(self):
        s = make_schedule("cosine", 60)
        xstar = make_image(9)

        def oracle(x, ts):
            ab = s.alpha_bar(int(ts[0]))
            return (x - np.sqrt(ab) * xstar) / np.sqrt(1.0 - ab)

        for seed in range(3):
            x = stream(seed, "init").standard_normal(xstar.shape, dtype=np.float32)
            for t in range(s.steps, 0, -1):
                x = reverse_step(oracle, x, t, s, stream(0, "z"), variance_mode="none")
            assert np.abs(x - xstar).max() < 1e-3

    def test_no_noise_at_final_step(self, sched):
        zero_net = lambda x, t: np.zeros_like(x)
        x = make_image(10)
        a = reverse_step(zero_net, x, 1, sched, stream(1, "a"), variance_mode="fixed-large")
        b = reverse_step(zero_net, x, 1, sched, stream(2, "b"), variance_mode="fixed-large")
        assert np.array_equal(a, b)


class TestSample:
    def test_zero_net_telescopes(self):
        s = make_schedule("linear", 6, 0.05, 0.1)
        r = respace(s, 6, 0)
        zero_net = lambda x, t: np.zeros_like(x)
        out_rng = stream(3, "s")
        x_top = stream(3, "s").standard_normal((2, 4, 8, 8), dtype=np.float32)
        factor = np.prod([1.0 / np.sqrt(s.alpha(t)) for t in range(1, 7)])
        got = sample(zero_net, r, 2, out_rng, size=8, variance_mode="none")
        assert np.allclose(got, np.clip(x_top * factor, -1, 1), atol=1e-5)

    def test_same_seed_identical(self):
        s = respace(make_schedule("cosine", 20), 10)
        net = DenoiserNet.create(stream(0, "n"), base=8)
        a = sample(net, s, 3, stream(9, "x"), size=16)
        b = sample(net, s, 3, stream(9, "x"), size=16)
        assert np.array_equal(a, b)

    def test_count_validation(self):
        s = respace(make_schedule("cosine", 4), 4)
        with pytest.raises(ValueError):
            sample(lambda x, t: x, s, 0, stream(0, "r"))


class TestTrainStep:
    def test_oracle_injection_gives_zero_loss(self, sched):
        # a net that exactly reproduces the drawn noise: loss must be 0
        batch = make_image(11, (4, 4, 8, 8))
        rng_used = stream(12, "t")
        planned = stream(12, "t")
        n = batch.shape[0]
        ts = planned.integers(1, sched.steps + 1, size=n)
        eps = planned.standard_normal(batch.shape, dtype=np.float32)

        class Oracle(DenoiserNet):
            def __init__(self):
                from maskdiff.optim import ParamSet

                self.params = ParamSet({"w": np.zeros(1, np.float32)})

            def forward(self, g, x, t, train=False):
                w = g.tensor(np.zeros((1,), np.float32), requires_grad=train)
                pred = g.tensor(eps) + td_concat_scalar(g, w, eps.shape)
                return pred, {}, {"w": w}

        def td_concat_scalar(g, w, shape):
            # broadcast the scalar parameter into the prediction so its
            # gradient exists and must come out exactly zero
            flat = w.reshape(1, 1)
            import maskdiff.tensor as td

            rows = td.take_rows(flat, np.zeros(int(np.prod(shape)), dtype=np.int64))
            return rows.reshape(shape)

        net = Oracle()
        loss = train_step(net, batch, sched, rng_used, lr=1e-3)
        assert loss == 0.0
        assert np.array_equal(net.params["w"], np.zeros(1, np.float32))

    def test_initial_loss_near_one_with_zero_head(self, sched):
        net = DenoiserNet.create(stream(13, "n"), base=8)
        losses = [
            train_step(net, make_image(i, (8, 4, 8, 8)), sched, stream(i, "s"), lr=0.0)
            for i in range(6)
        ]
        assert abs(np.mean(losses) - 1.0) < 0.1

    def test_loss_decreases_over_200_steps(self):
        s = make_schedule("cosine", 50)
        data = make_image(14, (16, 4, 8, 8))
        net = DenoiserNet.create(stream(14, "n"), base=8)
        rng = stream(14, "train")
        losses = [train_step(net, data, s, rng, lr=3e-3) for _ in range(200)]
        head = np.mean(losses[:20])
        tail = np.mean(losses[-20:])
        assert tail < head * 0.7

    def test_empty_batch_rejected(self, sched):
        net = DenoiserNet.create(stream(15, "n"), base=8)
        with pytest.raises(ValueError):
            train_step(net, np.zeros((0, 4, 8, 8), np.float32), sched, stream(0, "r"), lr=1e-3)


class TestDenoiserNet:
    def test_output_shape_matches_input(self):
        net = DenoiserNet.create(stream(16, "n"))
        x = make_image(16, (2, 4, 32, 32))
        out = net.predict(x, np.array([3, 7]))
        assert out.shape == x.shape

    def test_fresh_net_predicts_zero(self):
        net = DenoiserNet.create(stream(17, "n"))
        out = net.predict(make_image(17, (1, 4, 32, 32)), np.array([5]))
        assert np.abs(out).max() == 0.0

    def test_taps_available(self):
        from maskdiff.tensor import Graph

        net = DenoiserNet.create(stream(18, "n"), base=8)
        g = Graph()
        _, taps, _ = net.forward(g, g.tensor(make_image(18, (2, 4, 16, 16))), np.array([1, 2]))
        assert set(taps) == {"enc0", "enc1", "enc2", "token"}
        assert taps["enc0"].shape == (2, 8, 16, 16)
        assert taps["enc1"].shape == (2, 16, 8, 8)
        assert taps["token"].shape == (2, 16)

    def test_checkpoint_roundtrip(self, tmp_path):
        net = DenoiserNet.create(stream(19, "n"), base=8)
        x = make_image(19, (1, 4, 16, 16))
        before = net.predict(x, np.array([4]))
        net.save(tmp_path / "m.ckpt", config={"train.iterations": 3})
        loaded, cfg = DenoiserNet.load(tmp_path / "m.ckpt")
        assert cfg["train.iterations"] == "3"
        assert np.array_equal(loaded.predict(x, np.array([4])), before)

    def test_sinusoidal_embedding_shape_and_determinism(self):
        e = sinusoidal_embedding(np.array([1, 50, 100]), 64)
        assert e.shape == (3, 64)
        assert np.array_equal(e, sinusoidal_embedding(np.array([1, 50, 100]), 64))
        assert not np.allclose(e[0], e[1])


class TestTrainModel:
    def test_reproducible_losses(self):
        data = make_image(20, (12, 4, 8, 8))
        cfg = TrainConfig(iterations=8, batch_size=4, timesteps=20, respaced_len=10, skip=2, base_width=8)
        _, l1 = train_model(data, cfg, rng=stream(1, "t"))
        _, l2 = train_model(data, cfg, rng=stream(1, "t"))
        assert l1 == l2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
