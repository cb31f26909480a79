#!/usr/bin/env python3
"""
Tests for losses, Adam, the training loop and the head switch
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import training
from datasets import half_moons
from nn_layers import Architecture, LayerSpec, ModelSpec, ModelSpecError, build_model, get_preset
from tensor_core import NumericalError, ShapeError
from training import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    data_term,
    loss,
    loss_and_grads,
    preset_train_defaults,
    switch_head,
    train,
)


def tiny_gp_model(seed=0, learn_beta=True):
    spec = ModelSpec(name="tiny-gp", input_shape=(3,), extractor=[LayerSpec.fc(4), LayerSpec.relu(), LayerSpec.fc(2)],
                     architecture="C", num_classes=2, num_inducing=3, learn_beta=learn_beta, beta=0.05)
    return build_model(spec, seed=seed)


def tiny_conv_gp_model(seed=0):
    spec = ModelSpec(name="tiny-conv-gp", input_shape=(5, 5, 1),
                     extractor=[LayerSpec.conv(3, 2), LayerSpec.relu(), LayerSpec.maxpool(), LayerSpec.flatten(),
                                LayerSpec.fc(3)],
                     architecture="C", num_classes=3, num_inducing=3, learn_beta=True, beta=0.05)
    return build_model(spec, seed=seed)


def with_random_head(model, seed=0):
    # fresh heads sit at the prior, where every class is 1/C and feature gradients vanish
    rng = np.random.default_rng(seed)
    C, M = model.params["gp.q_mu"].shape
    params = dict(model.params)
    params["gp.q_mu"] = rng.normal(scale=1.5, size=(C, M))
    params["gp.q_sqrt_raw"] = np.tril(rng.normal(scale=0.3, size=(C, M, M)))
    return model.with_params(params)


def tiny_data(n=8, seed=1, d=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.integers(0, 2, size=n)


def moons(n=40, seed=0):
    return half_moons(n, noise=0.1, seed=seed)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_uniform_softmax_loss_is_log_c():
    spec = ModelSpec(name="flat", input_shape=(2,), extractor=[LayerSpec.fc(3), LayerSpec.relu()],
                     architecture="A", num_classes=10)
    model = build_model(spec, seed=0)
    params = dict(model.params, **{"head.w": np.zeros((3, 10)), "head.b": np.zeros(10)})
    x, _ = tiny_data(5, d=2)
    value = loss(model.with_params(params), x, np.arange(5)).item()
    assert value == pytest.approx(np.log(10), abs=1e-12)


def test_full_batch_elbo_has_unit_scale():
    model = tiny_gp_model()
    x, y = tiny_data()
    tensors = model.bind()
    expected = -(data_term(model, tensors, x, y).item() - model.kl(tensors).item())
    value = loss(model, x, y, TrainConfig(batch_size=None, dataset_size=len(y))).item()
    assert value == pytest.approx(expected, rel=1e-12)


def test_minibatch_elbo_is_unbiased_over_a_partition():
    model = tiny_gp_model()
    x, y = tiny_data(12)
    config = TrainConfig(batch_size=4, dataset_size=12)
    full = loss(model, x, y, config).item()
    batches = [loss(model, x[i:i + 4], y[i:i + 4], config).item() for i in range(0, 12, 4)]
    assert np.mean(batches) == pytest.approx(full, rel=1e-10)


def test_empty_batch_is_rejected():
    model = tiny_gp_model()
    with pytest.raises(ValueError):
        loss(model, np.zeros((0, 3)), np.zeros(0, dtype=int))


@pytest.mark.parametrize("make_model,x_shape", [
    (tiny_gp_model, (4, 3)),
    (tiny_conv_gp_model, (3, 5, 5, 1)),
])
def test_elbo_gradients_match_finite_differences(make_model, x_shape):
    model = with_random_head(make_model(seed=2), seed=5)
    rng = np.random.default_rng(3)
    x = rng.normal(size=x_shape)
    y = rng.integers(0, model.spec.num_classes, size=x_shape[0])
    config = TrainConfig(batch_size=x_shape[0], dataset_size=20)
    value, grads = loss_and_grads(model, x, y, config)
    assert set(grads) == set(model.params)
    assert "lik.beta_logit" in grads and "gp.log_lengthscale" in grads
    for name in grads:
        if not name.startswith(("gp.q_", "gp.log_variance", "gp.log_noise", "lik.")):
            assert np.abs(grads[name]).max() > 1e-6, name

    h = 1e-6
    for name, base in model.params.items():
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            f_up = loss(model.with_params({**model.params, name: up}), x, y, config).item()
            f_down = loss(model.with_params({**model.params, name: down}), x, y, config).item()
            numeric[idx] = (f_up - f_down) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-7, err_msg=name)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(params, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.t == 1


def test_adam_first_step_is_sign_sized():
    params = {"w": np.zeros(3)}
    new, _ = adam_step(params, {"w": np.array([1e-3, -50.0, 7.0])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(new["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_converges_on_a_quadratic():
    params, state = {"w": np.array(0.0)}, AdamState()
    for _ in range(200):
        params, state = adam_step(params, {"w": 2.0 * (params["w"] - 3.0)}, state, lr=0.1)
    assert abs(float(params["w"]) - 3.0) < 0.05


def test_adam_per_parameter_rates_and_shape_check():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    grads = {"a": np.ones(2), "b": np.ones(2)}
    new, _ = adam_step(params, grads, AdamState(), lr={"a": 0.1, "b": 0.001})
    assert new["a"][0] == pytest.approx(-0.1, rel=1e-5)
    assert new["b"][0] == pytest.approx(-0.001, rel=1e-5)
    with pytest.raises(ShapeError):
        adam_step(params, {"a": np.ones(3)}, AdamState())


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_train_config_validation_and_rates():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=100, dataset_size=50)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    model = tiny_gp_model()
    rates = TrainConfig(learning_rate=1e-3, gp_learning_rate=1e-2).rates(model)
    assert rates["fc0.w"] == 1e-3 and rates["gp.Z"] == 1e-2 and rates["lik.beta_logit"] == 1e-2
    assert preset_train_defaults("halfmoon-nn")["batch_size"] is None
    assert preset_train_defaults("sc-c")["iterations"] == 6000


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def test_zero_iterations_returns_initial_model():
    model = build_model(get_preset("halfmoon-gpdnn-rbf"), seed=0)
    result = train(model, moons(), TrainConfig(batch_size=None, iterations=0))
    assert result.model is model
    assert len(result.trace) == 0
    assert list(result.trace.columns) == ["iter", "loss", "val_error", "val_ll"]


def test_training_is_deterministic():
    config = TrainConfig(batch_size=10, iterations=12, learning_rate=1e-2, val_interval=4, seed=5)
    runs = [train(build_model(get_preset("halfmoon-gpdnn-rbf"), seed=0), moons(), config) for _ in range(2)]
    pd.testing.assert_frame_equal(runs[0].trace, runs[1].trace)
    for name in runs[0].model.params:
        assert np.array_equal(runs[0].model.params[name], runs[1].model.params[name])
    assert list(runs[0].trace["iter"]) == [4, 8, 12]


def test_full_batch_steps_decrease_the_loss():
    ds = moons()
    model = build_model(get_preset("halfmoon-gpdnn-rbf"), seed=0)
    config = TrainConfig(batch_size=None, dataset_size=len(ds))
    state, values = AdamState(), []
    for _ in range(51):
        value, grads = loss_and_grads(model, ds.images, ds.labels, config)
        values.append(value)
        params, state = adam_step(model.params, grads, state, 5e-3)
        model = model.with_params(params)
    assert np.sum(np.diff(values) < 0) >= 45


def test_best_checkpoint_is_returned():
    ds = moons()
    config = TrainConfig(batch_size=None, iterations=30, learning_rate=1e-2, val_interval=10)
    result = train(build_model(get_preset("halfmoon-nn"), seed=0), ds, config, val=ds)
    best = result.trace["val_error"].min()
    assert result.best_val_error == best
    assert result.best_iteration == int(result.trace.loc[result.trace["val_error"] == best, "iter"].iloc[0])
    assert result.final_model is not None
    assert result.to_dict()["iterations"] == 30


def test_numerical_failure_reports_iteration(monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalError("exp")

    monkeypatch.setattr(training, "loss_and_grads", explode)
    model = build_model(get_preset("halfmoon-nn"), seed=0)
    with pytest.raises(TrainingError) as info:
        train(model, moons(), TrainConfig(batch_size=None, iterations=5))
    assert info.value.iteration == 1


def test_batch_larger_than_dataset():
    model = build_model(get_preset("halfmoon-nn"), seed=0)
    with pytest.raises(ValueError):
        train(model, moons(20), TrainConfig(batch_size=30, iterations=1))


# ---------------------------------------------------------------------------
# Head switch
# ---------------------------------------------------------------------------

def test_switch_head_keeps_extractor():
    ds = moons()
    model = build_model(get_preset("halfmoon-nn"), seed=0)
    switched = switch_head(model, num_inducing=8, kernel="rbf", sample_x=ds.images, seed=0)
    assert switched.architecture is Architecture.C
    assert not any(n.startswith("head.") for n in switched.params)
    np.testing.assert_array_equal(switched.predict_features(ds.images), model.predict_features(ds.images))
    assert switched.kl(switched.bind()).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ModelSpecError):
        switch_head(switched, 8, "rbf", ds.images)


def test_training_with_a_head_switch():
    ds = moons()
    config = TrainConfig(batch_size=None, iterations=10, learning_rate=1e-2, val_interval=5,
                         switch_at=4, switch_num_inducing=6)
    result = train(build_model(get_preset("halfmoon-nn"), seed=0), ds, config)
    assert result.final_model.architecture is Architecture.C
    assert result.model.architecture is Architecture.C
    assert result.final_model.params["gp.Z"].shape == (6, 10)


# ---------------------------------------------------------------------------
# Experiment reruns
# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("preset", ["halfmoon-nn", "halfmoon-gpdnn-rbf"])
def test_half_moons_are_separated(preset):
    ds = half_moons(200, noise=0.1, seed=0)
    config = TrainConfig(**preset_train_defaults(preset))
    result = train(build_model(get_preset(preset), seed=0, sample_x=ds.images), ds, config)
    accuracy = np.mean(result.model.predict(ds.images) == ds.labels)
    assert accuracy >= 0.95


@pytest.mark.slow
def test_switch_fine_tuning_keeps_accuracy():
    ds = half_moons(200, noise=0.1, seed=0)
    pre = train(build_model(get_preset("halfmoon-nn"), seed=0), ds,
                TrainConfig(batch_size=None, iterations=1000, learning_rate=1e-2, val_interval=100))
    before = np.mean(pre.model.predict(ds.images) == ds.labels)
    switched = switch_head(pre.model, 20, "rbf", ds.images, seed=0)
    post = train(switched, ds, TrainConfig(batch_size=None, iterations=500, learning_rate=1e-2, val_interval=100))
    after = np.mean(post.model.predict(ds.images) == ds.labels)
    assert after >= before


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
