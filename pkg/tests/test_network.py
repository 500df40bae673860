"""Feed-forward engine: forward semantics, exact gradients, Adam, fit loop,
grid search and checkpoint round-trips."""

import math

import numpy as np
import pytest

from censura.dataset import CensoredDataset
from censura.errors import NumericError, SearchError, TrainingError
from censura.losses import BatchTargets
from censura.network import (
    AdamState,
    NetworkSpec,
    NetworkState,
    TrainConfig,
    adam_init,
    adam_step,
    backward,
    checkpoint_dict,
    checkpoint_from_dict,
    fit,
    forward,
    grid_search,
    init_state,
    network_kl,
    resolve_loss,
)
from censura.numerics import VARIANCE_FLOOR
from censura.rng import derive_rng

from test_losses import assert_grads_close


def toy_dataset(n, input_dim, fn, noise=0.0, masks=None, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, input_dim))
    y = fn(x) + noise * rng.normal(size=n)
    return CensoredDataset(
        features=x,
        labels=y,
        masks=np.zeros(n, dtype=int) if masks is None else masks,
        dates=np.datetime64("2020-01-01") + np.arange(n),
        ids=np.array([f"t{i}" for i in range(n)]),
    )


def flatten(state):
    return np.concatenate([state.params[k].ravel() for k in sorted(state.params)])


def unflatten(template, flat):
    params = {}
    pos = 0
    for k in sorted(template.params):
        shape = template.params[k].shape
        size = int(np.prod(shape))
        params[k] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    return NetworkState(params)


def grads_as_flat(template, grads):
    return np.concatenate([grads[k].ravel() for k in sorted(template.params)])


class TestNetworkSpec:
    def test_decreasing_widths(self):
        spec = NetworkSpec(input_dim=4, hidden_layers=4, hidden_dim=512,
                           decreasing_dim=True)
        assert spec.hidden_widths == [512, 256, 128, 64]

    def test_decreasing_width_floor(self):
        spec = NetworkSpec(input_dim=4, hidden_layers=4, hidden_dim=4,
                           decreasing_dim=True)
        assert spec.hidden_widths == [4, 2, 1, 1]

    def test_head_widths(self):
        for head, width in (("scalar", 1), ("gaussian", 2), ("evidential", 4)):
            assert NetworkSpec(input_dim=3, head=head).head_width == width

    def test_parameter_count(self):
        spec = NetworkSpec(input_dim=4, hidden_layers=2, hidden_dim=8)
        # (4*8+8) + (8*8+8) + (8*1+1)
        assert spec.n_parameters == 40 + 72 + 9

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            NetworkSpec(input_dim=0)
        with pytest.raises(ValueError):
            NetworkSpec(input_dim=2, dropout_rate=1.0)
        with pytest.raises(ValueError):
            NetworkSpec(input_dim=2, head="softmax")


class TestForward:
    def test_zero_weights_zero_output(self):
        spec = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8)
        state = init_state(spec, derive_rng(0))
        for k in state.params:
            state.params[k][:] = 0.0
        out, _ = forward(spec, state, np.random.default_rng(1).normal(size=(5, 3)),
                         "eval")
        np.testing.assert_allclose(out, 0.0)

    def test_eval_ignores_dropout(self):
        spec = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8,
                           dropout_rate=0.5)
        bare = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8)
        state = init_state(spec, derive_rng(0))
        x = np.random.default_rng(2).normal(size=(7, 3))
        with_do, _ = forward(spec, state, x, "eval")
        without, _ = forward(bare, state, x, "eval")
        np.testing.assert_array_equal(with_do, without)

    def test_gaussian_head_variance_floor(self):
        spec = NetworkSpec(input_dim=2, hidden_layers=1, hidden_dim=4,
                           head="gaussian")
        state = init_state(spec, derive_rng(0))
        for k in state.params:
            state.params[k][:] = 0.0
        state.params["layers.1.b"][:] = [0.0, -100.0]
        out, _ = forward(spec, state, np.zeros((3, 2)), "eval")
        np.testing.assert_allclose(out[:, 1], VARIANCE_FLOOR)

    def test_evidential_head_constraints(self):
        spec = NetworkSpec(input_dim=2, hidden_layers=1, hidden_dim=4,
                           head="evidential")
        state = init_state(spec, derive_rng(3))
        out, _ = forward(spec, state,
                         np.random.default_rng(4).normal(size=(20, 2)), "eval")
        assert np.all(out[:, 1] > 0)  # nu
        assert np.all(out[:, 2] > 1)  # alpha
        assert np.all(out[:, 3] > 0)  # beta

    def test_shape_mismatch_rejected(self):
        spec = NetworkSpec(input_dim=3)
        state = init_state(spec, derive_rng(0))
        with pytest.raises(ValueError):
            forward(spec, state, np.zeros((4, 2)), "eval")

    def test_stochastic_mode_requires_rng(self):
        spec = NetworkSpec(input_dim=3, dropout_rate=0.5)
        state = init_state(spec, derive_rng(0))
        with pytest.raises(ValueError):
            forward(spec, state, np.zeros((2, 3)), "train")

    def test_deterministic_under_fixed_rng(self):
        spec = NetworkSpec(input_dim=3, dropout_rate=0.25, variational=True)
        state = init_state(spec, derive_rng(0))
        x = np.random.default_rng(5).normal(size=(6, 3))
        a, _ = forward(spec, state, x, "train", derive_rng(42))
        b, _ = forward(spec, state, x, "train", derive_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_variational_eval_uses_means(self):
        spec = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8,
                           variational=True)
        state = init_state(spec, derive_rng(0))
        det = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8)
        det_state = NetworkState(
            {
                k.replace("_mu", ""): v.copy()
                for k, v in state.params.items()
                if k.endswith("_mu")
            }
        )
        x = np.random.default_rng(6).normal(size=(5, 3))
        out_var, _ = forward(spec, state, x, "eval")
        out_det, _ = forward(det, det_state, x, "eval")
        np.testing.assert_array_equal(out_var, out_det)

    def test_tiny_posterior_std_matches_deterministic(self):
        # rho -> -inf collapses sampling onto the means
        spec = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8,
                           variational=True)
        state = init_state(spec, derive_rng(1))
        for k in state.params:
            if k.endswith("_rho"):
                state.params[k][:] = -45.0
        x = np.random.default_rng(7).normal(size=(5, 3))
        sampled, _ = forward(spec, state, x, "train", derive_rng(8))
        det, _ = forward(spec, state, x, "eval")
        np.testing.assert_allclose(sampled, det, atol=1e-10)


class _FixedRngLoss:
    """Helper: full loss of the flat parameter vector with a frozen rng, so
    finite differences see the same dropout masks and weight noise."""

    def __init__(self, spec, template, x, targets, loss, mode="train",
                 kl_weight=0.0, prior_std=1.0, rng_seed=99):
        self.spec, self.template, self.x = spec, template, x
        self.targets, self.mode = targets, mode
        self.loss_fn = resolve_loss(loss)
        self.kl_weight, self.prior_std = kl_weight, prior_std
        self.rng_seed = rng_seed

    def value(self, flat):
        state = unflatten(self.template, flat)
        rng = derive_rng(self.rng_seed)
        out, _ = forward(self.spec, state, self.x, self.mode, rng)
        value, _ = self.loss_fn(out, self.targets)
        if self.kl_weight:
            kl, _ = network_kl(self.spec, state, self.prior_std)
            value += self.kl_weight * kl
        return value

    def analytic(self, flat):
        state = unflatten(self.template, flat)
        rng = derive_rng(self.rng_seed)
        out, cache = forward(self.spec, state, self.x, self.mode, rng)
        _, d_out = self.loss_fn(out, self.targets)
        grads = backward(self.spec, state, cache, d_out)
        if self.kl_weight:
            _, kl_grads = network_kl(self.spec, state, self.prior_std)
            for k, g in kl_grads.items():
                grads[k] = grads[k] + self.kl_weight * g
        return grads_as_flat(self.template, grads)


def fd_flat(f, x0, h=1e-5):
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestBackward:
    def _random_case(self, head, variational=False, dropout=0.0, seed=0):
        spec = NetworkSpec(input_dim=4, hidden_layers=2, hidden_dim=8, head=head,
                           dropout_rate=dropout, variational=variational)
        state = init_state(spec, derive_rng(seed))
        rng = np.random.default_rng(seed + 1)
        x = rng.normal(size=(6, 4))
        return spec, state, x, rng

    def test_linear_functional_gradients(self):
        # loss = sum(c * outputs): exact gradients vs finite differences
        for head in ("scalar", "gaussian", "evidential"):
            spec, state, x, rng = self._random_case(head, seed=11)
            c = rng.normal(size=(6, spec.head_width))

            def loss(outputs, targets, c=c):
                return float(np.sum(c * outputs)), c

            harness = _FixedRngLoss(spec, state, x, None, loss, mode="eval")
            flat = flatten(state)
            assert_grads_close(harness.analytic(flat), fd_flat(harness.value, flat))

    def test_zero_output_gradient_gives_zero_grads(self):
        spec, state, x, _ = self._random_case("scalar")
        out, cache = forward(spec, state, x, "eval")
        grads = backward(spec, state, cache, np.zeros_like(out))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_linearity_in_output_gradient(self):
        spec, state, x, rng = self._random_case("scalar", seed=3)
        out, cache = forward(spec, state, x, "eval")
        d = rng.normal(size=out.shape)
        g1 = backward(spec, state, cache, d)
        out2, cache2 = forward(spec, state, x, "eval")
        g2 = backward(spec, state, cache2, 2.0 * d)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-12)

    def test_missing_cache_rejected(self):
        spec, state, x, _ = self._random_case("scalar")
        with pytest.raises(RuntimeError):
            backward(spec, state, None, np.zeros((6, 1)))

    def test_gradients_through_dropout(self):
        spec, state, x, rng = self._random_case("scalar", dropout=0.5, seed=21)
        targets = BatchTargets(rng.normal(size=6), np.zeros(6, dtype=int))
        harness = _FixedRngLoss(spec, state, x, targets, "censored_mse")
        flat = flatten(state)
        assert_grads_close(harness.analytic(flat), fd_flat(harness.value, flat))

    def test_gradients_through_variational_sampling_and_kl(self):
        spec, state, x, rng = self._random_case("scalar", variational=True, seed=33)
        targets = BatchTargets(rng.normal(size=6), np.zeros(6, dtype=int))
        harness = _FixedRngLoss(spec, state, x, targets, "censored_mse",
                                kl_weight=0.125, prior_std=1.0)
        flat = flatten(state)
        assert_grads_close(harness.analytic(flat), fd_flat(harness.value, flat))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        spec = NetworkSpec(input_dim=2, hidden_layers=1, hidden_dim=2)
        state = init_state(spec, derive_rng(0))
        before = {k: v.copy() for k, v in state.params.items()}
        grads = {k: np.where(np.arange(v.size).reshape(v.shape) % 2 == 0, 1.0, -3.0)
                 for k, v in state.params.items()}
        adam_step(state, grads, adam_init(state), lr=0.1)
        for k in before:
            delta = state.params[k] - before[k]
            np.testing.assert_allclose(delta, -0.1 * np.sign(grads[k]), rtol=1e-6)

    def test_zero_gradient_no_change(self):
        spec = NetworkSpec(input_dim=2, hidden_layers=1, hidden_dim=2)
        state = init_state(spec, derive_rng(0))
        before = {k: v.copy() for k, v in state.params.items()}
        grads = {k: np.zeros_like(v) for k, v in state.params.items()}
        adam_step(state, grads, adam_init(state), lr=0.1, weight_decay=0.0)
        for k in before:
            np.testing.assert_array_equal(state.params[k], before[k])

    def test_equal_gradients_equal_updates(self):
        spec = NetworkSpec(input_dim=2, hidden_layers=1, hidden_dim=4)
        state = init_state(spec, derive_rng(0))
        state.params["layers.0.b"][:] = 0.0
        grads = {k: np.zeros_like(v) for k, v in state.params.items()}
        grads["layers.0.b"][:] = 0.7
        adam_step(state, grads, adam_init(state), lr=0.05)
        updates = state.params["layers.0.b"]
        np.testing.assert_allclose(updates, updates[0])

    def test_weight_decay_pulls_toward_zero(self):
        spec = NetworkSpec(input_dim=2, hidden_layers=1, hidden_dim=2)
        state = init_state(spec, derive_rng(1))
        state.params["layers.0.W"][:] = 5.0
        grads = {k: np.zeros_like(v) for k, v in state.params.items()}
        adam_step(state, grads, adam_init(state), lr=0.1, weight_decay=1e-2)
        assert np.all(state.params["layers.0.W"] < 5.0)


class TestFit:
    def _linear_toy(self, n=256, seed=0):
        return toy_dataset(n, 1, lambda x: 2.0 * x[:, 0] - 1.0, seed=seed)

    def test_noise_free_regression_converges(self):
        train = self._linear_toy(256, seed=0)
        val = self._linear_toy(64, seed=1)
        spec = NetworkSpec(input_dim=1, hidden_layers=2, hidden_dim=16)
        config = TrainConfig(learning_rate=1e-2, max_epochs=500, batch_size=64,
                             weight_decay=0.0, seed=0)
        _, log = fit(spec, config, "censored_mse", train, val)
        assert min(log.val_loss) < 1e-3

    def test_constant_labels_reach_zero_loss(self):
        train = toy_dataset(128, 2, lambda x: np.full(x.shape[0], 3.0), seed=2)
        val = toy_dataset(32, 2, lambda x: np.full(x.shape[0], 3.0), seed=3)
        spec = NetworkSpec(input_dim=2, hidden_layers=2, hidden_dim=8)
        config = TrainConfig(learning_rate=1e-2, max_epochs=500, batch_size=64,
                             weight_decay=0.0, seed=0)
        _, log = fit(spec, config, "censored_mse", train, val)
        assert min(log.val_loss) < 1e-3  # label variance is exactly 0

    def test_fixed_seed_bitwise_reproducible(self):
        train = self._linear_toy(100, seed=4)
        val = self._linear_toy(30, seed=5)
        spec = NetworkSpec(input_dim=1, hidden_layers=2, hidden_dim=8,
                           dropout_rate=0.25)
        config = TrainConfig(learning_rate=1e-3, max_epochs=40, batch_size=32,
                             seed=7)
        state_a, log_a = fit(spec, config, "censored_mse", train, val)
        state_b, log_b = fit(spec, config, "censored_mse", train, val)
        assert log_a.to_dict() == log_b.to_dict()
        for k in state_a.params:
            np.testing.assert_array_equal(state_a.params[k], state_b.params[k])

    def test_returns_best_validation_state(self):
        train = self._linear_toy(100, seed=6)
        val = self._linear_toy(30, seed=7)
        spec = NetworkSpec(input_dim=1, hidden_layers=2, hidden_dim=8)
        config = TrainConfig(learning_rate=5e-3, max_epochs=60, batch_size=32,
                             weight_decay=0.0, seed=1)
        state, log = fit(spec, config, "censored_mse", train, val)
        out, _ = forward(spec, state, val.features, "eval")
        restored, _ = resolve_loss("censored_mse")(out, val.targets)
        assert restored == pytest.approx(min(log.val_loss), abs=1e-12)

    @staticmethod
    def _stuck_loss(outputs, targets):
        # validation can never improve after the first epoch
        return 1.0, np.zeros_like(outputs)

    def test_plateau_reduces_learning_rate(self):
        train = self._linear_toy(64, seed=8)
        val = self._linear_toy(16, seed=9)
        spec = NetworkSpec(input_dim=1, hidden_layers=1, hidden_dim=4)
        config = TrainConfig(learning_rate=1e-3, scheduler_factor=0.5,
                             scheduler_patience=5, early_stop_patience=1000,
                             max_epochs=17, batch_size=64, seed=2)
        _, log = fit(spec, config, self._stuck_loss, train, val)
        # reductions land after 5, 10 and 15 stuck epochs
        assert log.lr[6] == pytest.approx(5e-4)
        assert log.lr[11] == pytest.approx(2.5e-4)
        assert log.lr[16] == pytest.approx(1.25e-4)

    def test_early_stopping_halts(self):
        train = self._linear_toy(64, seed=10)
        val = self._linear_toy(16, seed=11)
        spec = NetworkSpec(input_dim=1, hidden_layers=1, hidden_dim=4)
        config = TrainConfig(learning_rate=1e-5, scheduler_patience=3,
                             early_stop_patience=6, max_epochs=5000,
                             batch_size=64, seed=3)
        _, log = fit(spec, config, self._stuck_loss, train, val)
        assert log.stopped_epoch == 6
        assert log.best_epoch == 0

    def test_non_finite_loss_aborts_with_location(self):
        train = self._linear_toy(32, seed=12)
        val = self._linear_toy(8, seed=13)
        spec = NetworkSpec(input_dim=1, hidden_layers=1, hidden_dim=4)
        config = TrainConfig(learning_rate=1e-3, max_epochs=5, batch_size=32,
                             seed=0)

        def exploding(outputs, targets):
            return math.inf, np.zeros_like(outputs)

        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            fit(spec, config, exploding, train, val)

    def test_empty_sets_rejected(self):
        ds = self._linear_toy(10)
        empty = ds.take(np.array([], dtype=int))
        spec = NetworkSpec(input_dim=1)
        config = TrainConfig(max_epochs=1)
        with pytest.raises(TrainingError):
            fit(spec, config, "censored_mse", empty, ds)
        with pytest.raises(TrainingError):
            fit(spec, config, "censored_mse", ds, empty)


class TestGridSearch:
    def test_single_point_grid(self):
        train = toy_dataset(64, 1, lambda x: x[:, 0], seed=0)
        val = toy_dataset(16, 1, lambda x: x[:, 0], seed=1)
        spec = NetworkSpec(input_dim=1, hidden_layers=1, hidden_dim=4)
        config = TrainConfig(learning_rate=1e-3, max_epochs=5, batch_size=64)
        best_spec, best_config = grid_search([(spec, config)], "censored_mse",
                                             train, val)
        assert best_spec == spec and best_config == config

    def test_selects_near_known_good_config(self):
        train = toy_dataset(128, 1, lambda x: 2 * x[:, 0], seed=2)
        val = toy_dataset(48, 1, lambda x: 2 * x[:, 0], seed=3)
        good = (NetworkSpec(input_dim=1, hidden_layers=2, hidden_dim=16),
                TrainConfig(learning_rate=1e-2, max_epochs=100, batch_size=64,
                            weight_decay=0.0))
        bad = (NetworkSpec(input_dim=1, hidden_layers=1, hidden_dim=1),
               TrainConfig(learning_rate=1e-6, max_epochs=100, batch_size=64))
        best_spec, best_config = grid_search([bad, good], "censored_mse",
                                             train, val)
        _, log = fit(best_spec, best_config, "censored_mse", train, val)
        _, good_log = fit(good[0], good[1], "censored_mse", train, val)
        assert min(log.val_loss) <= 1.1 * min(good_log.val_loss)

    def test_tie_broken_by_parameter_count_then_lr(self):
        train = toy_dataset(32, 1, lambda x: x[:, 0], seed=4)
        val = toy_dataset(8, 1, lambda x: x[:, 0], seed=5)

        def constant_loss(outputs, targets):
            return 1.0, np.zeros_like(outputs)

        small = NetworkSpec(input_dim=1, hidden_layers=1, hidden_dim=2)
        big = NetworkSpec(input_dim=1, hidden_layers=2, hidden_dim=8)
        cfg_hi = TrainConfig(learning_rate=1e-3, max_epochs=2, batch_size=32)
        cfg_lo = TrainConfig(learning_rate=1e-4, max_epochs=2, batch_size=32)
        best_spec, best_config = grid_search(
            [(big, cfg_lo), (small, cfg_hi), (small, cfg_lo)],
            constant_loss, train, val,
        )
        assert best_spec == small and best_config.learning_rate == 1e-4

    def test_all_divergent_raises_search_error(self):
        train = toy_dataset(32, 1, lambda x: x[:, 0], seed=6)
        val = toy_dataset(8, 1, lambda x: x[:, 0], seed=7)

        def exploding(outputs, targets):
            return math.nan, np.zeros_like(outputs)

        spec = NetworkSpec(input_dim=1)
        config = TrainConfig(max_epochs=2, batch_size=32)
        with pytest.raises(SearchError):
            grid_search([(spec, config)], exploding, train, val)


class TestCheckpoint:
    def test_bitwise_roundtrip(self):
        spec = NetworkSpec(input_dim=3, hidden_layers=2, hidden_dim=8,
                           head="gaussian", dropout_rate=0.25)
        state = init_state(spec, derive_rng(5))
        config = TrainConfig(learning_rate=5e-4, seed=11)
        doc = checkpoint_dict(spec, state, config, "censored_nll")
        spec2, state2, config2, loss2 = checkpoint_from_dict(doc)
        assert spec2 == spec and config2 == config and loss2 == "censored_nll"
        for k in state.params:
            np.testing.assert_array_equal(state.params[k], state2.params[k])

    def test_rejects_foreign_documents(self):
        with pytest.raises(ValueError):
            checkpoint_from_dict({"format": "something-else"})
