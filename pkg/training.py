#!/usr/bin/env python3
"""
GPDNN Training
Negative ELBO / cross-entropy losses, Adam, the minibatch loop and the head switch.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

import tensor_core as tc
from datasets import Dataset
from nn_layers import Architecture, Head, Model, init_gp_params, switched_spec
from robustmax import variational_expectation, get_quadrature
from tensor_core import Graph, NumericalError, Tensor

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "loss", "val_error", "val_ll"]


class TrainingError(Exception):
    """Training diverged; carries the iteration at which it happened"""

    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


class TrainConfig(BaseModel):
    batch_size: Optional[int] = Field(250, ge=1)     # None trains full-batch
    iterations: int = Field(6000, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    gp_learning_rate: Optional[float] = Field(None, gt=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    val_interval: int = Field(500, ge=1)
    dataset_size: Optional[int] = Field(None, ge=1)  # N for ELBO scaling; defaults to the training set size
    switch_at: Optional[int] = Field(None, ge=0)
    switch_num_inducing: int = Field(100, ge=1)
    switch_kernel: str = "rbf"

    @model_validator(mode="after")
    def batch_fits(self):
        if self.batch_size and self.dataset_size and self.batch_size > self.dataset_size:
            raise ValueError(f"batch size {self.batch_size} exceeds dataset size {self.dataset_size}")
        return self

    def rates(self, model: Model) -> Dict[str, float]:
        groups = model.parameter_groups()
        gp_rate = self.gp_learning_rate or self.learning_rate
        rates = {n: self.learning_rate for n in groups["extractor"]}
        rates.update({n: gp_rate for n in groups["gp"]})
        return rates


def preset_train_defaults(preset: str) -> Dict[str, Any]:
    """Training settings that suit a preset family"""
    if preset.lower().startswith("halfmoon"):
        return {"batch_size": None, "iterations": 2000, "learning_rate": 1e-2, "val_interval": 100,
                "switch_num_inducing": 20}
    return {"batch_size": 250, "iterations": 6000, "learning_rate": 1e-3, "val_interval": 500}


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def data_term(model: Model, tensors: Mapping[str, Tensor], batch_x: Any, batch_y: Any,
              train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Σ over the batch of E_q[log p(y | f)]; GP head only"""
    feats = model.features(tensors, batch_x, train, rng)
    lm = model.latents(tensors, feats)
    quad = get_quadrature(model.spec.quadrature_points)
    return tc.reduce_sum(variational_expectation(lm, batch_y, model.likelihood(tensors), quad))


def loss(model: Model, batch_x: Any, batch_y: Any, config: Optional[TrainConfig] = None,
         tensors: Optional[Mapping[str, Tensor]] = None, train: bool = False,
         rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean cross-entropy (architectures A/B) or minibatch-scaled negative ELBO (C)"""
    batch_y = np.asarray(batch_y, dtype=np.int64)
    n_batch = len(batch_y)
    if n_batch == 0:
        raise ValueError("loss of an empty batch")
    if tensors is None:
        tensors = model.bind()

    if model.spec.head is Head.SOFTMAX:
        logp = model.log_proba(tensors, batch_x, train, rng)
        onehot = np.eye(model.num_classes)[batch_y]
        return tc.neg(tc.reduce_sum(logp * onehot)) / n_batch

    N = (config.dataset_size if config is not None else None) or n_batch
    scale = N / n_batch
    return tc.neg(scale * data_term(model, tensors, batch_x, batch_y, train, rng) - model.kl(tensors))


def loss_and_grads(model: Model, batch_x: Any, batch_y: Any, config: Optional[TrainConfig] = None,
                   rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    graph = Graph("train")
    tensors = model.bind(graph)
    value = loss(model, batch_x, batch_y, config, tensors, train=True, rng=rng)
    names = list(model.params)
    grads = graph.gradient(value, [tensors[n] for n in names])
    return value.item(), dict(zip(names, grads))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: Union[float, Mapping[str, float]] = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and a new state"""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(value):
            raise tc.ShapeError(f"adam: gradient of '{name}' has shape {g.shape}, parameter {np.shape(value)}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        new_params[name] = value - rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Head switch
# ---------------------------------------------------------------------------

def switch_head(model: Model, num_inducing: int, kernel: Any, sample_x: np.ndarray, seed: int = 0) -> Model:
    """Architecture B -> C: keep the extractor, replace the softmax layer by a fresh GP head"""
    spec = switched_spec(model.spec, num_inducing, kernel)
    params = {n: v for n, v in model.params.items() if not n.startswith("head.")}
    feats = model.predict_features(sample_x)
    params.update(init_gp_params(spec, feats, seed))
    logger.info(f"Switched '{model.spec.name}' to a GP head (M={num_inducing}, kernel={spec.kernel.value})")
    return Model(spec, params)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    trace: pd.DataFrame
    best_iteration: Optional[int] = None
    best_val_error: Optional[float] = None
    final_model: Optional[Model] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.spec.name,
            "iterations": int(self.trace["iter"].max()) if len(self.trace) else 0,
            "best_iteration": self.best_iteration,
            "best_val_error": self.best_val_error,
        }


class _BatchSampler:
    """Per-epoch permutations drawn from the run seed"""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def validation_metrics(model: Model, ds: Dataset) -> Tuple[float, float]:
    """(error rate, mean log likelihood) of `model` on `ds`"""
    logp = model.predict_log_proba(ds.images)
    labels = ds.labels
    error = float(np.mean(np.argmax(logp, axis=1) != labels))
    ll = float(np.mean(logp[np.arange(len(labels)), labels]))
    return error, ll


def train(model: Model, dataset: Dataset, config: TrainConfig, val: Optional[Dataset] = None) -> TrainResult:
    """Adam over minibatches; returns the parameters with the lowest validation error.

    Validation runs every `val_interval` iterations and after the last one,
    on `val` or on the training set when no validation set is given. Ties
    keep the earlier checkpoint.
    """
    log = logging.getLogger(f"training.{model.spec.name}")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training set")
    batch_size = config.batch_size or n
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds training set size {n}")
    config = config.model_copy(update={"dataset_size": config.dataset_size or n})
    val = val if val is not None and len(val) else dataset

    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng([config.seed, 1])
    sampler = _BatchSampler(n, batch_size, rng)
    state = AdamState()
    rates = config.rates(model)
    rows = []
    best: Optional[Tuple[float, int, Model]] = None

    for it in range(1, config.iterations + 1):
        if config.switch_at is not None and it == config.switch_at + 1 \
                and model.architecture is Architecture.B:
            sample_idx = rng.choice(n, size=min(n, max(1000, 2 * config.switch_num_inducing)), replace=False)
            model = switch_head(model, config.switch_num_inducing, config.switch_kernel,
                                dataset.images[np.sort(sample_idx)], config.seed)
            state, rates, best = AdamState(), config.rates(model), None
            log.info(f"Head switched at iteration {config.switch_at}; optimizer and best checkpoint reset")

        idx = sampler.next()
        try:
            value, grads = loss_and_grads(model, dataset.images[idx], dataset.labels[idx], config, dropout_rng)
        except NumericalError as e:
            raise TrainingError(it, f"non-finite value in '{e.op}'") from e
        if not np.isfinite(value):
            raise TrainingError(it, "loss is NaN")
        params, state = adam_step(model.params, grads, state, rates,
                                  config.adam_beta1, config.adam_beta2, config.adam_eps)
        model = model.with_params(params)

        if it % config.val_interval == 0 or it == config.iterations:
            val_error, val_ll = validation_metrics(model, val)
            rows.append({"iter": it, "loss": value, "val_error": val_error, "val_ll": val_ll})
            log.info(f"iter {it}: loss={value:.5g} val_error={val_error:.4f} val_ll={val_ll:.4f}")
            if best is None or val_error < best[0]:
                best = (val_error, it, model)

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    if best is None:
        return TrainResult(model, trace, final_model=model)
    log.info(f"Best validation error {best[0]:.4f} at iteration {best[1]}")
    return TrainResult(best[2], trace, best_iteration=best[1], best_val_error=best[0], final_model=model)
