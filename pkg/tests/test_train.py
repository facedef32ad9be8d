"""Tests for the loss, reverse pass, gradient checking, fitting, iterative inference and checkpoints."""
import dataclasses
import json
from datetime import timedelta

import numpy as np
import pandas as pd
import pytest

from errors import CompatibilityError, ContractError, FormatError, InputError
from models import PICKUPS, WindowBatch
from net import (Conv1DParams, Network, causal_dilated_conv, forward, forward_batch, input_specs,
                 is_weight, parameter_count, predict_windows)
from panel import Normalizer, SynthConfig, build_windows, fit_normalizer, synth_panel
from train import (LossConfig, OptimizerConfig, backward, batch_gradients, check_gradients, fit, grad_check,
                   load_checkpoint, loss, predict_iterative, save_checkpoint)


def single_window_batch(window, target, columns):
    s = window.shape[0] - 1
    return WindowBatch(inputs=window[None], targets=np.array([float(target)]),
                       target_times=pd.DatetimeIndex([pd.Timestamp('2014-04-07 12:00')]),
                       input_times=np.zeros((1, s + 1)), columns=tuple(columns), s=s)


@pytest.fixture
def trained_setup(driver_panel, net_factory):
    """Driver panel, its normalizer, normalized windows and a matching untrained network."""
    split = driver_panel.times[384].to_pydatetime()
    normalizer = fit_normalizer(driver_panel, (driver_panel.grid.start, split))
    batch = build_windows(normalizer.apply(driver_panel), s=8, target_end=split)
    net = net_factory(k=4, s=8, inputs=input_specs(driver_panel))
    return driver_panel, normalizer, batch, net


class TestLoss:

    def test_mean_squared_error(self, net_factory):
        net = net_factory()
        assert loss([1.0, 1.0], [1.0, 3.0], net, LossConfig(lam=0.0)) == 2.0
        assert loss([2.5, -1.0], [2.5, -1.0], net, LossConfig(lam=0.0)) == 0.0

    def test_penalty_covers_weights_only(self, net_factory):
        net = net_factory()
        params = Network(net.config, {'head.out.weight': np.array([1.0, 1.0, 1.0]),
                                      'head.out.bias': np.array([5.0])})
        assert loss([0.0], [0.0], params, LossConfig(lam=2.0)) == 3.0

    def test_penalty_adds_half_lambda_sum_of_squares(self, net_factory):
        net = net_factory()
        squares = sum(float(np.sum(v * v)) for name, v in net.params.items() if is_weight(name))
        plain = loss([0.2, 0.4], [0.0, 1.0], net, LossConfig(lam=0.0))
        assert loss([0.2, 0.4], [0.0, 1.0], net, LossConfig(lam=1.0)) - plain == pytest.approx(squares / 2)

    def test_l1_penalty(self, net_factory):
        net = net_factory()
        params = Network(net.config, {'head.out.weight': np.array([1.0, -2.0])})
        assert loss([0.0], [0.0], params, LossConfig(lam=0.0, l1=0.5)) == 1.5

    def test_shape_mismatch(self, net_factory):
        with pytest.raises(ContractError):
            loss([1.0], [1.0, 2.0], net_factory(), LossConfig())
        with pytest.raises(ContractError):
            loss([], [], net_factory(), LossConfig())


class TestBackward:

    def test_zero_residual_gives_zero_gradients(self, net_factory, window_factory):
        net = net_factory()
        net.params['head.out.weight'][:] = 0.0
        value, grads = backward(net, window_factory(net.config), 0.0, LossConfig(lam=0.0))
        assert value == 0.0
        assert all(not g.any() for g in grads.values())

    def test_penalty_gradient_is_lambda_times_weight(self, net_factory, window_factory):
        net = net_factory()
        window = window_factory(net.config)
        _, plain = backward(net, window, 1.5, LossConfig(lam=0.0))
        _, penalized = backward(net, window, 1.5, LossConfig(lam=0.3))
        for name, value in net.params.items():
            expected = 0.3 * value if is_weight(name) else np.zeros_like(value)
            np.testing.assert_allclose(penalized[name] - plain[name], expected, rtol=1e-9, atol=1e-15)

    def test_batch_gradient_is_mean_of_window_gradients(self, net_factory, window_factory):
        net = net_factory()
        windows = window_factory(net.config, batch=3)
        targets = np.array([0.5, -1.0, 2.0])
        value, grads = batch_gradients(net, windows, targets, LossConfig(lam=0.0))
        singles = [backward(net, w, t, LossConfig(lam=0.0)) for w, t in zip(windows, targets)]
        assert value == pytest.approx(np.mean([v for v, _ in singles]))
        for name in grads:
            np.testing.assert_allclose(grads[name], np.mean([g[name] for _, g in singles], axis=0),
                                       rtol=1e-9, atol=1e-14)

    def test_worker_threads_do_not_change_result(self, net_factory, window_factory):
        net = net_factory()
        windows = window_factory(net.config, batch=150)
        targets = np.linspace(-1, 1, 150)
        one = batch_gradients(net, windows, targets, LossConfig(), jobs=1)
        many = batch_gradients(net, windows, targets, LossConfig(), jobs=3)
        assert one[0] == many[0]
        for name in one[1]:
            np.testing.assert_array_equal(one[1][name], many[1][name])


class TestGradCheck:

    def test_default_small_config(self, net_factory, window_factory):
        net = net_factory(k=8, s=16, dilations=(1, 2))
        window = window_factory(net.config, seed=1)
        target = forward(net, window)[0] + 1.0
        report = grad_check(net, window, target, LossConfig(lam=1e-3))
        assert report.checked == 200
        assert report.passed, report.to_dict()

    @pytest.mark.parametrize('trial', range(4))
    def test_random_configs(self, net_factory, window_factory, trial):
        rng = np.random.default_rng(100 + trial)
        dilations = tuple(int(d) for d in rng.choice([1, 2, 4], size=int(rng.integers(1, 3))))
        net = net_factory(k=int(rng.integers(2, 5)), s=int(rng.integers(4, 12)), dilations=dilations,
                          head=('regression', 'softmax')[trial % 2], max_pool=bool(trial == 2),
                          seed=trial)
        window = window_factory(net.config, seed=trial)
        report = grad_check(net, window, 0.3, LossConfig(lam=1e-3), seed=trial)
        assert report.passed, report.to_dict()

    def test_linear_toy_is_exact(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((20, 1))
        y = 3.0 * x[:, 0] + 1.0 + 0.1 * rng.standard_normal(20)
        params = {'w': np.array([[[0.5]]]), 'b': np.array([0.0])}

        def objective(p):
            prediction = causal_dilated_conv(x, Conv1DParams(p['w'], p['b']))[:, 0]
            return float(np.mean((prediction - y) ** 2))

        residual = params['w'][0, 0, 0] * x[:, 0] + params['b'][0] - y
        analytic = {'w': np.array([[[2.0 * np.mean(residual * x[:, 0])]]]),
                    'b': np.array([2.0 * np.mean(residual)])}
        report = check_gradients(params, objective, analytic, step=1e-3, full=True)
        assert report.checked == 2
        assert report.max_rel_err <= 1e-9

    def test_corrupted_gradient_is_located(self, net_factory, window_factory):
        net = net_factory(k=2, s=4, dilations=(1,))
        window = window_factory(net.config, seed=5)
        _, grads = backward(net, window, 2.0, LossConfig())
        name = 'block0.filter.kernel'
        index = int(np.argmax(np.abs(grads[name])))
        corrupted = {key: value.copy() for key, value in grads.items()}
        corrupted[name].reshape(-1)[index] *= 2.0
        report = grad_check(net, window, 2.0, LossConfig(), full=True, gradients=corrupted)
        assert not report.passed
        assert report.worst_parameter == name
        assert report.worst_index == index
        assert report.max_rel_err == pytest.approx(0.5, abs=1e-3)

    def test_step_must_be_positive(self, net_factory, window_factory):
        net = net_factory()
        with pytest.raises(ContractError):
            grad_check(net, window_factory(net.config), 0.0, step=0.0)

    @pytest.mark.slow
    def test_hundred_random_trials(self, net_factory, window_factory):
        net = net_factory(k=8, s=16, dilations=(1, 2))
        worst = 0.0
        for trial in range(100):
            trial_net = net_factory(k=8, s=16, dilations=(1, 2), seed=trial)
            window = window_factory(net.config, seed=1000 + trial)
            target = forward(trial_net, window)[0] + 1.0
            report = grad_check(trial_net, window, target, LossConfig(lam=1e-4), seed=trial)
            worst = max(worst, report.max_rel_err)
        assert worst <= 1e-4


class TestFit:

    def test_zero_learning_rate_keeps_parameters(self, trained_setup):
        _, _, batch, net = trained_setup
        trained, history = fit(net, batch, OptimizerConfig(learning_rate=0.0, iterations=3))
        for name in net.params:
            np.testing.assert_array_equal(trained.params[name], net.params[name])
        np.testing.assert_allclose(history, history[0], rtol=1e-12)

    def test_does_not_touch_the_input_network(self, trained_setup):
        _, _, batch, net = trained_setup
        before = {name: value.copy() for name, value in net.params.items()}
        fit(net, batch, OptimizerConfig(learning_rate=0.01, iterations=1))
        for name in before:
            np.testing.assert_array_equal(net.params[name], before[name])

    def test_same_seed_same_result(self, trained_setup):
        _, _, batch, net = trained_setup
        opt = OptimizerConfig(learning_rate=0.01, iterations=3, seed=4)
        a, history_a = fit(net, batch, opt)
        b, history_b = fit(net, batch, opt)
        assert history_a == history_b
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_jobs_do_not_change_training(self, trained_setup):
        _, _, batch, net = trained_setup
        a, history_a = fit(net, batch, OptimizerConfig(learning_rate=0.01, iterations=2, batch_size=200))
        b, history_b = fit(net, batch, OptimizerConfig(learning_rate=0.01, iterations=2, batch_size=200,
                                                       jobs=3))
        assert history_a == history_b
        np.testing.assert_array_equal(a.params['embed.mix'], b.params['embed.mix'])

    def test_loss_decreases(self, trained_setup):
        _, _, batch, net = trained_setup
        epochs = []
        _, history = fit(net, batch, OptimizerConfig(learning_rate=0.01, iterations=10),
                         on_epoch=lambda epoch, value: epochs.append(epoch))
        assert epochs == list(range(1, 11))
        assert history[-1] < history[0]

    def test_full_batch_head_steps_never_increase_loss(self, trained_setup):
        _, _, batch, net = trained_setup
        cfg = LossConfig(lam=1e-3)
        features = forward_batch(net, batch.inputs).head_in
        design = np.hstack([features, np.ones((len(features), 1))])
        lipschitz = 2.0 * np.linalg.eigvalsh(design.T @ design / len(design)).max() + cfg.lam
        step = 0.5 / lipschitz
        current = net.copy()
        previous, grads = batch_gradients(current, batch.inputs, batch.targets, cfg)
        for _ in range(40):
            for name in ('head.out.weight', 'head.out.bias'):
                current.params[name] = current.params[name] - step * grads[name]
            value, grads = batch_gradients(current, batch.inputs, batch.targets, cfg)
            assert value <= previous + 1e-12
            previous = value

    def test_overfits_one_window(self, net_factory, window_factory):
        net = net_factory(k=4, s=8)
        window = window_factory(net.config, seed=9)
        start = forward(net, window)[0]
        _, slope = backward(net, window, start + 1.0, LossConfig(lam=0.0))
        # slope holds -2 * d(prediction)/d(params)
        curvature = sum(float(np.sum(g * g)) for g in slope.values()) / 4.0
        batch = single_window_batch(window, start + 2.0, net.config.input_names)
        opt = OptimizerConfig(learning_rate=0.25 / curvature, iterations=500, batch_size=1, shuffle=False)
        _, history = fit(net, batch, opt, LossConfig(lam=0.0))
        assert history[0] == pytest.approx(4.0)
        assert history[-1] < 1e-6 * history[0]

    def test_rejects_self_fed_windows(self, trained_setup):
        _, _, batch, net = trained_setup
        fed = dataclasses.replace(batch, self_fed=np.ones(batch.inputs.shape, dtype=bool))
        with pytest.raises(ContractError):
            fit(net, fed, OptimizerConfig(iterations=1))

    def test_rejects_empty_batch(self, trained_setup):
        _, _, batch, net = trained_setup
        with pytest.raises(ContractError):
            fit(net, batch.subset(np.array([], dtype=np.int64)), OptimizerConfig(iterations=1))


class TestPredictIterative:

    def _history(self, panel, at=300):
        cut = panel.times[at].to_pydatetime()
        return cut, panel.slice(panel.grid.start, cut), panel.frame.loc[cut:].drop(columns=PICKUPS)

    def test_one_step_matches_teacher_forcing(self, trained_setup):
        panel, normalizer, _, net = trained_setup
        cut, history, future = self._history(panel)
        forecast = predict_iterative(net, history, 1, future, normalizer)

        windows = build_windows(normalizer.apply(panel), s=8, target_start=cut,
                                target_end=cut + timedelta(minutes=15))
        expected = normalizer.invert_values(PICKUPS, predict_windows(net, windows.inputs))
        np.testing.assert_allclose(forecast, np.maximum(expected, 0.0), rtol=1e-12)

    def test_predictions_feed_back_as_pickups(self, trained_setup):
        panel, normalizer, _, net = trained_setup
        _, history, future = self._history(panel)
        seen = []
        forecast = predict_iterative(net, history, 3, future, normalizer,
                                     on_step=lambda h, window, mask: seen.append((window, mask)))
        assert len(forecast) == 3
        assert (forecast >= 0).all()
        p = net.config.input_names.index(PICKUPS)
        g = net.config.input_names.index('g1')

        first_window, first_mask = seen[0]
        assert not first_mask.any()
        second_window, second_mask = seen[1]
        assert second_window[-1, p] == pytest.approx(float(normalizer.apply_values(PICKUPS, forecast[0])))
        assert second_mask[-1, p] and not second_mask[-1, g]
        assert second_window[-1, g] == pytest.approx(float(normalizer.apply_values('g1', future['g1'].iloc[0])))
        np.testing.assert_array_equal(second_window[:-1], first_window[1:])
        assert seen[2][1][-2:, p].all()

    def test_missing_future_slot(self, trained_setup):
        panel, normalizer, _, net = trained_setup
        _, history, future = self._history(panel)
        with pytest.raises(InputError):
            predict_iterative(net, history, 3, future.iloc[:1], normalizer)

    def test_missing_future_column(self, trained_setup):
        panel, normalizer, _, net = trained_setup
        _, history, future = self._history(panel)
        with pytest.raises(InputError, match='g1'):
            predict_iterative(net, history, 2, future.drop(columns='g1'), normalizer)

    def test_short_history(self, trained_setup):
        panel, normalizer, _, net = trained_setup
        _, _, future = self._history(panel)
        short = panel.slice(panel.grid.start, panel.times[5].to_pydatetime())
        with pytest.raises(ContractError):
            predict_iterative(net, short, 1, future, normalizer)

    @pytest.mark.slow
    def test_trained_net_follows_noiseless_series(self, net_factory):
        panel = synth_panel(SynthConfig(slots=960, drivers=0, noise_sigma=0.0, weekly_amplitude=0.0,
                                        diurnal_amplitude=10.0))
        split = panel.times[800].to_pydatetime()
        normalizer = fit_normalizer(panel, (panel.grid.start, split))
        batch = build_windows(normalizer.apply(panel), s=8, target_end=split)
        net = net_factory(k=4, s=8, inputs=input_specs(panel))
        trained, _ = fit(net, batch, OptimizerConfig(learning_rate=0.01, iterations=200, batch_size=64),
                         LossConfig(lam=0.0))
        future = panel.frame.loc[split:].drop(columns=PICKUPS)
        forecast = predict_iterative(trained, panel.slice(panel.grid.start, split), 5, future, normalizer)
        actual = panel.pickups[800:805]
        assert np.all(np.abs(forecast - actual) <= 0.05 * actual)


class TestCheckpoint:

    def test_round_trip_is_exact(self, tmp_path, trained_setup, window_factory):
        panel, normalizer, _, net = trained_setup
        path = str(tmp_path / 'checkpoint.json')
        save_checkpoint(net, normalizer, path, schema_sha=panel.schema.fingerprint())
        loaded = load_checkpoint(path, expected_schema_sha=panel.schema.fingerprint())
        assert loaded.network.config == net.config
        assert loaded.normalizer == normalizer
        for name in net.params:
            np.testing.assert_array_equal(loaded.network.params[name], net.params[name])
        window = window_factory(net.config, seed=2)
        assert forward(loaded.network, window)[0] == forward(net, window)[0]

    def test_same_network_same_bytes(self, tmp_path, trained_setup):
        _, normalizer, _, net = trained_setup
        a, b = tmp_path / 'a.json', tmp_path / 'b.json'
        save_checkpoint(net, normalizer, str(a))
        save_checkpoint(net.copy(), normalizer, str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_records_parameter_count(self, tmp_path, net_factory):
        net = net_factory(k=8)
        path = str(tmp_path / 'checkpoint.json')
        save_checkpoint(net, Normalizer(stats={PICKUPS: (10.0, 2.0)}), path)
        assert load_checkpoint(path).meta['parameter_count'] == parameter_count(net.config)

    def test_schema_mismatch(self, tmp_path, trained_setup):
        panel, normalizer, _, net = trained_setup
        path = str(tmp_path / 'checkpoint.json')
        save_checkpoint(net, normalizer, path, schema_sha=panel.schema.fingerprint())
        other = panel.schema.without('z1').fingerprint()
        with pytest.raises(CompatibilityError) as info:
            load_checkpoint(path, expected_schema_sha=other)
        assert info.value.exit_code == 5

    def test_truncated_file(self, tmp_path, trained_setup):
        _, normalizer, _, net = trained_setup
        path = tmp_path / 'checkpoint.json'
        save_checkpoint(net, normalizer, str(path))
        text = path.read_text()
        path.write_text(text[:len(text) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_shape_mismatch(self, tmp_path, trained_setup):
        _, normalizer, _, net = trained_setup
        path = tmp_path / 'checkpoint.json'
        save_checkpoint(net, normalizer, str(path))
        document = json.loads(path.read_text())
        entry = document['params']['head.out.bias']
        entry['shape'], entry['values'] = [2], [0.0, 0.0]
        path.write_text(json.dumps(document))
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_unknown_version(self, tmp_path, trained_setup):
        _, normalizer, _, net = trained_setup
        path = tmp_path / 'checkpoint.json'
        save_checkpoint(net, normalizer, str(path))
        document = json.loads(path.read_text())
        document['format_version'] = 99
        path.write_text(json.dumps(document))
        with pytest.raises(FormatError, match='version'):
            load_checkpoint(str(path))
