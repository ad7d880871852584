import numpy as np
import pytest

from dpadapt import dp, nn
from dpadapt.accountant import PrivacyLedger
from dpadapt.errors import ConfigError
from dpadapt.rng import substream

from helpers import random_mlp


def make_grads(rng, mlp, n):
    rows = nn.forward(mlp, rng.normal(size=(n, mlp.input_dim))).outputs
    return nn.backward_per_example(
        mlp, rng.normal(size=(n, mlp.input_dim)), rows
    )


def example_norm(grads, i):
    """Norm oracle: plain loop over one example's gradient arrays."""
    total = 0.0
    for w, b in grads.example(i):
        total += float((w**2).sum()) + float((b**2).sum())
    return np.sqrt(total)


def blob_data(rng, n_per_class=60, dim=4, sep=4.0):
    x = np.vstack(
        [
            rng.normal(loc=-sep / 2, size=(n_per_class, dim)),
            rng.normal(loc=sep / 2, size=(n_per_class, dim)),
        ]
    )
    y = nn.one_hot(np.repeat([0, 1], n_per_class), 2)
    return x, y


class TestClipPerExample:
    def test_norm_two_halved_to_one(self):
        net = nn.Mlp([nn.Layer(np.zeros((2, 2)), np.zeros(2), "identity")])
        g = nn.PerExampleGrads(
            [np.array([[[2.0, 0.0], [0.0, 0.0]]])], [np.zeros((1, 2))]
        )
        clipped = dp.clip_per_example(g, 1.0)
        assert example_norm(clipped, 0) == pytest.approx(1.0, abs=1e-12)
        assert clipped.dw[0][0, 0, 0] == pytest.approx(1.0)
        del net

    def test_below_threshold_unchanged(self):
        g = nn.PerExampleGrads(
            [np.array([[[0.5, 0.0], [0.0, 0.0]]])], [np.zeros((1, 2))]
        )
        clipped = dp.clip_per_example(g, 1.0)
        assert np.array_equal(clipped.dw[0], g.dw[0])

    def test_random_grads_all_bounded(self):
        rng = np.random.default_rng(0)
        mlp = random_mlp(rng, n_layers=3)
        grads = make_grads(rng, mlp, 8)
        clip = 0.7
        clipped = dp.clip_per_example(grads, clip)
        for i in range(8):
            assert example_norm(clipped, i) <= clip + 1e-9

    def test_masked_layers_untouched(self):
        rng = np.random.default_rng(1)
        mlp = random_mlp(rng, n_layers=2)
        grads = make_grads(rng, mlp, 4)
        mask = dp.privacy_mask(mlp, "last-layer")
        clipped = dp.clip_per_example(grads, 1e-3, mask)
        assert np.array_equal(clipped.dw[0], grads.dw[0])
        for i in range(4):
            last = clipped.example(i)[-1]
            norm = np.sqrt((last[0] ** 2).sum() + (last[1] ** 2).sum())
            assert norm <= 1e-3 + 1e-12


class TestNoiseAndAverage:
    def cfg(self, sigma, n=4, clip=1.0):
        return dp.DpConfig(
            clip_norm=clip,
            noise_multiplier=sigma,
            batch_size=n,
            dataset_size=100,
            total_iterations=1,
        )

    def test_sigma_zero_exact_mean(self):
        rng = np.random.default_rng(2)
        mlp = random_mlp(rng)
        grads = make_grads(rng, mlp, 4)
        noisy, event = dp.noise_and_average(grads, self.cfg(0.0), substream(0, "x"))
        for (gw, gb), (mw, mb) in zip(noisy, grads.mean()):
            assert np.array_equal(gw, mw)
            assert np.array_equal(gb, mb)
        assert event == (0.04, 0.0)

    def test_identical_gradients_recovered(self):
        g = np.array([[[1.0, -2.0]]])
        grads = nn.PerExampleGrads(
            [np.repeat(g, 3, axis=0)], [np.zeros((3, 2))]
        )
        noisy, _ = dp.noise_and_average(grads, self.cfg(0.0, n=3), substream(0, "x"))
        assert np.allclose(noisy[0][0], g[0])

    def test_summed_noise_variance(self):
        # Empirical variance of the summed noise within 5% of (sigma C)^2;
        # 1e5 draws put 5 standard errors at ~2.2%.
        sigma, clip, n_draws = 1.0, 1.0, 100_000
        cfg = dp.DpConfig(
            clip_norm=clip,
            noise_multiplier=sigma,
            batch_size=2,
            dataset_size=10,
            total_iterations=1,
        )
        base = nn.PerExampleGrads([np.zeros((2, 1, 2))], [np.zeros((2, 1))])
        samples = np.empty((n_draws, 2))
        for t in range(n_draws):
            noisy, _ = dp.noise_and_average(base, cfg, substream(0, "dp-noise", t))
            samples[t] = noisy[0][0][0] * 2  # undo the 1/batch averaging
        var = samples.var(axis=0)
        assert np.all(np.abs(var - sigma**2 * clip**2) < 0.05 * sigma**2 * clip**2)


class TestDpTrain:
    def loss_head(self):
        return nn.ce_softmax_loss

    def test_degenerate_dp_equals_plain(self):
        rng = np.random.default_rng(3)
        x, y = blob_data(rng)
        mlp_dp = nn.init_mlp([4, 6, 2], ["relu", "identity"], substream(5, "init"))
        mlp_plain = mlp_dp.copy()
        cfg = dp.DpConfig(
            clip_norm=1e9,
            noise_multiplier=0.0,
            batch_size=16,
            dataset_size=x.shape[0],
            total_iterations=100,
            seed=11,
        )
        dp.dp_train(mlp_dp, x, y, nn.ce_softmax_loss, cfg,
                    optimizer=nn.AdamW(learning_rate=1e-3))
        dp.train_plain(mlp_plain, x, y, nn.ce_softmax_loss, 100, 16, 11,
                       optimizer=nn.AdamW(learning_rate=1e-3))
        for a, b in zip(mlp_dp.layers, mlp_plain.layers):
            assert np.array_equal(a.w, b.w)
            assert np.array_equal(a.b, b.b)

    def test_zero_iterations_noop(self):
        rng = np.random.default_rng(4)
        x, y = blob_data(rng, n_per_class=10)
        mlp = nn.init_mlp([4, 3, 2], ["relu", "identity"], rng)
        before = [l.w.copy() for l in mlp.layers]
        cfg = dp.DpConfig(
            clip_norm=1.0, noise_multiplier=1.0, batch_size=4,
            dataset_size=x.shape[0], total_iterations=0,
        )
        result = dp.dp_train(mlp, x, y, nn.ce_softmax_loss, cfg)
        assert result.ledger.total_events() == 0
        for w0, layer in zip(before, mlp.layers):
            assert np.array_equal(w0, layer.w)

    def test_private_training_reduces_loss(self):
        rng = np.random.default_rng(6)
        x, y = blob_data(rng, n_per_class=100)
        mlp = nn.init_mlp([4, 8, 2], ["relu", "identity"], substream(7, "init"))
        first = nn.cross_entropy(
            nn.softmax_rows(nn.forward(mlp, x).outputs), y
        )
        cfg = dp.DpConfig(
            clip_norm=1.0, noise_multiplier=1.0, batch_size=32,
            dataset_size=x.shape[0], total_iterations=200, seed=7,
        )
        result = dp.dp_train(mlp, x, y, nn.ce_softmax_loss, cfg,
                             optimizer=nn.AdamW(learning_rate=5e-3))
        final = nn.cross_entropy(nn.softmax_rows(nn.forward(mlp, x).outputs), y)
        assert final < first
        assert result.ledger.total_events() == 200

    def test_one_event_per_microbatch_with_accumulation(self):
        rng = np.random.default_rng(8)
        x, y = blob_data(rng, n_per_class=20)
        mlp = nn.init_mlp([4, 2], ["identity"], rng)
        cfg = dp.DpConfig(
            clip_norm=1.0, noise_multiplier=0.5, batch_size=8,
            dataset_size=x.shape[0], total_iterations=12,
            accumulation_steps=3, seed=1,
        )
        result = dp.dp_train(mlp, x, y, nn.ce_softmax_loss, cfg)
        assert result.ledger.total_events() == 12
        assert len(result.log) == 4  # one optimizer step per 3 micro-batches
        assert result.log[-1][0] == 4

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(9)
        x, y = blob_data(rng, n_per_class=15)

        def run():
            mlp = nn.init_mlp([4, 5, 2], ["relu", "identity"], substream(3, "init"))
            cfg = dp.DpConfig(
                clip_norm=1.0, noise_multiplier=1.0, batch_size=8,
                dataset_size=x.shape[0], total_iterations=30, seed=3,
            )
            dp.dp_train(mlp, x, y, nn.ce_softmax_loss, cfg)
            return mlp

        a, b = run(), run()
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.w, lb.w)

    def test_last_layer_mask_leaves_first_layer_noiseless(self):
        rng = np.random.default_rng(10)
        x, y = blob_data(rng, n_per_class=10)
        mlp = nn.init_mlp([4, 3, 2], ["relu", "identity"], rng)
        grads = nn.backward_per_example(
            mlp, x[:8], nn.ce_softmax_loss(nn.forward(mlp, x[:8]).outputs, y[:8])[1]
        )
        cfg = dp.DpConfig(
            clip_norm=1e9, noise_multiplier=50.0, batch_size=8,
            dataset_size=20, total_iterations=1,
        )
        mask = dp.privacy_mask(mlp, "last-layer")
        noisy, _ = dp.noise_and_average(grads, cfg, substream(0, "n"), mask)
        mean = grads.mean()
        assert np.array_equal(noisy[0][0], mean[0][0])  # first layer: exact mean
        assert not np.allclose(noisy[1][0], mean[1][0])  # last layer: noised

    def test_empty_dataset_rejected(self):
        mlp = nn.init_mlp([2, 2], ["identity"], np.random.default_rng(0))
        cfg = dp.DpConfig(
            clip_norm=1.0, noise_multiplier=0.0, batch_size=1,
            dataset_size=1, total_iterations=1,
        )
        with pytest.raises(ConfigError):
            dp.dp_train(mlp, np.zeros((0, 2)), np.zeros((0, 2)),
                        nn.ce_softmax_loss, cfg)


class TestDpConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            dp.DpConfig(clip_norm=0.0, noise_multiplier=1.0, batch_size=1,
                        dataset_size=10, total_iterations=1)
        with pytest.raises(ConfigError):
            dp.DpConfig(clip_norm=1.0, noise_multiplier=1.0, batch_size=11,
                        dataset_size=10, total_iterations=1)
        with pytest.raises(ConfigError):
            dp.DpConfig(clip_norm=1.0, noise_multiplier=1.0, batch_size=2,
                        dataset_size=10, total_iterations=5,
                        accumulation_steps=2)

    def test_sampling_rate(self):
        cfg = dp.DpConfig(clip_norm=1.0, noise_multiplier=1.0, batch_size=25,
                          dataset_size=1000, total_iterations=4)
        assert cfg.sampling_rate == 0.025
