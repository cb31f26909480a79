#!/usr/bin/env python3
"""
GPDNN Network Layers and Models
Layer stacks, softmax / GP heads and the built-in architecture presets.
"""

import copy as _copy
import logging
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.stats import truncnorm

import tensor_core as tc
from gp_layer import (DEFAULT_NOISE, GPLayerState, KernelKind, LatentMarginals,
                      init_gp_head, kl_to_prior, latent_marginals)
from robustmax import (BETA_PARAM, DEFAULT_BETA, DEFAULT_QUADRATURE_POINTS, RobustmaxParams,
                       argmax_probs, get_quadrature, normalize_rows, predictive_probs)
from tensor_core import Graph, Tensor

logger = logging.getLogger(__name__)

EVAL_BATCH = 500


class ModelSpecError(ValueError):
    """Malformed model spec or unknown preset"""


class LayerKind(str, Enum):
    CONV = "conv"
    MAXPOOL = "maxpool"
    FC = "fc"
    RELU = "relu"
    DROPOUT = "dropout"
    FLATTEN = "flatten"


class Padding(str, Enum):
    SAME = "SAME"
    VALID = "VALID"


class Head(str, Enum):
    SOFTMAX = "softmax"
    GP = "gp"


class Architecture(str, Enum):
    A = "A"
    B = "B"
    C = "C"


class InitScheme(str, Enum):
    TRUNCNORM = "truncnorm"   # N(0, 0.1^2) cut at two sigma, biases 0.1
    FAN_IN = "fan_in"         # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0


class LayerSpec(BaseModel):
    kind: LayerKind
    kernel: int = 0
    channels: int = 0
    units: int = 0
    padding: Padding = Padding.SAME
    window: int = 2
    rate: float = Field(0.0, ge=0.0, lt=1.0)

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if self.kind is LayerKind.CONV:
            if len(shape) != 3:
                raise ModelSpecError(f"conv expects an [H, W, C] input, got {shape}")
            h, w, _ = shape
            if self.padding is Padding.VALID:
                h, w = h - self.kernel + 1, w - self.kernel + 1
            if h <= 0 or w <= 0:
                raise ModelSpecError(f"conv {self.kernel}x{self.kernel} does not fit {shape}")
            return (h, w, self.channels)
        if self.kind is LayerKind.MAXPOOL:
            if len(shape) != 3:
                raise ModelSpecError(f"maxpool expects an [H, W, C] input, got {shape}")
            h, w, c = shape
            if self.padding is Padding.SAME:
                return (-(-h // self.window), -(-w // self.window), c)
            return ((h - self.window) // self.window + 1, (w - self.window) // self.window + 1, c)
        if self.kind is LayerKind.FC:
            if len(shape) != 1:
                raise ModelSpecError(f"fc expects a flat input, got {shape} (missing flatten?)")
            return (self.units,)
        if self.kind is LayerKind.FLATTEN:
            return (int(np.prod(shape)),)
        return shape

    @classmethod
    def conv(cls, kernel: int, channels: int, padding: str = "SAME") -> "LayerSpec":
        return cls(kind=LayerKind.CONV, kernel=kernel, channels=channels, padding=Padding(padding))

    @classmethod
    def maxpool(cls, window: int = 2, padding: str = "SAME") -> "LayerSpec":
        return cls(kind=LayerKind.MAXPOOL, window=window, padding=Padding(padding))

    @classmethod
    def fc(cls, units: int) -> "LayerSpec":
        return cls(kind=LayerKind.FC, units=units)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(kind=LayerKind.RELU)

    @classmethod
    def dropout(cls, rate: float) -> "LayerSpec":
        return cls(kind=LayerKind.DROPOUT, rate=rate)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(kind=LayerKind.FLATTEN)


class ModelSpec(BaseModel):
    """Extractor layer stack plus head.

    A: softmax straight on the extractor output. B: extractor ends in an
    FC layer to D units, softmax on top. C: same FC to D, GP head.
    """
    name: str
    input_shape: Tuple[int, ...]
    extractor: List[LayerSpec] = Field(default_factory=list)
    architecture: Architecture
    num_classes: int = Field(10, ge=2)
    init: InitScheme = InitScheme.FAN_IN
    kernel: KernelKind = KernelKind.RBF
    num_inducing: int = Field(100, ge=1)
    beta: float = Field(DEFAULT_BETA, gt=0.0, lt=0.5)
    learn_beta: bool = False
    noise: float = Field(DEFAULT_NOISE, ge=0.0)
    quadrature_points: int = Field(DEFAULT_QUADRATURE_POINTS, ge=1, le=100)

    @field_validator("input_shape")
    @classmethod
    def positive_shape(cls, v):
        if not v or any(n <= 0 for n in v):
            raise ValueError(f"input shape must be non-empty and positive, got {v}")
        return tuple(v)

    @model_validator(mode="after")
    def check_stack(self):
        self.feature_shape()
        fcs = [l for l in self.extractor if l.kind is LayerKind.FC]
        if self.architecture in (Architecture.B, Architecture.C) and self.extractor and not fcs:
            raise ValueError(f"architecture {self.architecture.value} needs an FC layer to D units")
        return self

    @property
    def head(self) -> Head:
        return Head.GP if self.architecture is Architecture.C else Head.SOFTMAX

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        shapes = [tuple(self.input_shape)]
        for layer in self.extractor:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def feature_shape(self) -> Tuple[int, ...]:
        return self.layer_shapes()[-1]

    @property
    def hidden_dim(self) -> int:
        """D, the width of the features handed to the head"""
        shape = self.feature_shape()
        if len(shape) != 1:
            raise ModelSpecError(f"extractor of '{self.name}' ends in {shape}; add flatten/fc layers")
        return shape[0]


# ---------------------------------------------------------------------------
# Heads and dropout
# ---------------------------------------------------------------------------

def log_softmax(logits: Tensor) -> Tensor:
    shift = np.max(logits.data, axis=1, keepdims=True)
    z = logits - shift
    return z - tc.log(tc.reduce_sum(tc.exp(z), axis=1, keepdims=True))


def softmax_head_forward(features: Any, W: Any, b: Any) -> Tensor:
    """Class probabilities of an FC-to-C softmax layer, shape [B, C]"""
    return tc.exp(log_softmax(tc._wrap(features) @ W + b))


def dropout(x: Any, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0"""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = tc._wrap(x)
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode '{mode}'")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """A ModelSpec with concrete parameter values.

    Parameters live as read-only numpy arrays keyed by name; a forward pass
    first binds them into a Graph (or as constants) and then runs
    `log_proba`. Snapshots are safe to evaluate from many threads.
    """

    def __init__(self, spec: ModelSpec, params: Mapping[str, np.ndarray]):
        self.spec = spec
        self.params: Dict[str, np.ndarray] = {}
        for name, value in params.items():
            arr = np.array(value, dtype=np.float64)
            arr.flags.writeable = False
            self.params[name] = arr
        self.logger = logging.getLogger(f"model.{spec.name}")

    @property
    def architecture(self) -> Architecture:
        return self.spec.architecture

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def bind(self, graph: Optional[Graph] = None) -> Dict[str, Tensor]:
        """Parameters as graph leaves, or as constants when graph is None"""
        if graph is None:
            return {name: Tensor(value) for name, value in self.params.items()}
        return {name: graph.leaf(value, name) for name, value in self.params.items()}

    def parameter_groups(self) -> Dict[str, List[str]]:
        head = [n for n in self.params if n.startswith("gp.") or n == BETA_PARAM]
        return {"extractor": [n for n in self.params if n not in head], "gp": head}

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.spec, params)

    def copy(self) -> "Model":
        return Model(self.spec.model_copy(deep=True), {n: v.copy() for n, v in self.params.items()})

    # -- graph forward ------------------------------------------------------

    def features(self, tensors: Mapping[str, Tensor], x: Any, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = tc._wrap(x)
        expected = tuple(self.spec.input_shape)
        if tuple(h.shape[1:]) != expected:
            raise tc.ShapeError(f"model '{self.spec.name}' expects inputs {expected}, got {h.shape[1:]}")
        for i, layer in enumerate(self.spec.extractor):
            kind = layer.kind
            if kind is LayerKind.CONV:
                h = tc.conv2d(h, tensors[f"conv{i}.w"], tensors[f"conv{i}.b"], layer.padding.value)
            elif kind is LayerKind.MAXPOOL:
                h = tc.maxpool2d(h, layer.window, layer.window, layer.padding.value)
            elif kind is LayerKind.FC:
                h = h @ tensors[f"fc{i}.w"] + tensors[f"fc{i}.b"]
            elif kind is LayerKind.RELU:
                h = tc.relu(h)
            elif kind is LayerKind.FLATTEN:
                h = tc.reshape(h, (h.shape[0], -1))
            elif kind is LayerKind.DROPOUT:
                h = dropout(h, layer.rate, "train" if train else "eval", rng)
        return h

    def gp_state(self, tensors: Mapping[str, Tensor]) -> GPLayerState:
        return GPLayerState.from_params(tensors, self.spec.kernel)

    def likelihood(self, tensors: Mapping[str, Tensor]) -> RobustmaxParams:
        return RobustmaxParams(self.num_classes, self.spec.beta, tensors.get(BETA_PARAM))

    def latents(self, tensors: Mapping[str, Tensor], feats: Tensor) -> LatentMarginals:
        return latent_marginals(self.gp_state(tensors), feats)

    def kl(self, tensors: Mapping[str, Tensor]) -> Tensor:
        return kl_to_prior(self.gp_state(tensors))

    def log_proba_from_features(self, tensors: Mapping[str, Tensor], feats: Tensor) -> Tensor:
        if self.spec.head is Head.SOFTMAX:
            return log_softmax(feats @ tensors["head.w"] + tensors["head.b"])
        quad = get_quadrature(self.spec.quadrature_points)
        P = normalize_rows(argmax_probs(self.latents(tensors, feats), quad))
        return tc.log(predictive_probs(P, self.likelihood(tensors)))

    def log_proba(self, tensors: Mapping[str, Tensor], x: Any, train: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
        """log p(y = c | x), shape [B, C]"""
        return self.log_proba_from_features(tensors, self.features(tensors, x, train, rng))

    # -- eval-mode numpy helpers -----------------------------------------------

    def predict_log_proba(self, x: Any, batch_size: int = EVAL_BATCH) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        tensors = self.bind()
        out = [self.log_proba(tensors, x[i:i + batch_size]).numpy()
               for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out, axis=0)

    def predict_proba(self, x: Any, batch_size: int = EVAL_BATCH) -> np.ndarray:
        return np.exp(self.predict_log_proba(x, batch_size))

    def predict(self, x: Any, batch_size: int = EVAL_BATCH) -> np.ndarray:
        # np.argmax resolves ties to the lowest class index
        return np.argmax(self.predict_log_proba(x, batch_size), axis=1)

    def predict_features(self, x: Any, batch_size: int = EVAL_BATCH) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        tensors = self.bind()
        return np.concatenate([self.features(tensors, x[i:i + batch_size]).numpy()
                               for i in range(0, len(x), batch_size)], axis=0)

    def nll_input_gradient(self, x: Any, labels: Any) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient of Σ_i −log p(y_i | x_i) with respect to the inputs, plus log p"""
        labels = np.asarray(labels, dtype=np.int64)
        graph = Graph("input_gradient")
        tensors = self.bind()
        xt = graph.leaf(x, "x")
        logp = self.log_proba(tensors, xt)
        onehot = np.eye(self.num_classes)[labels]
        nll = tc.neg(tc.reduce_sum(logp * onehot))
        (grad,) = graph.gradient(nll, [xt])
        return grad, logp.numpy()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.spec.name,
            "architecture": self.architecture.value,
            "num_parameters": int(sum(v.size for v in self.params.values())),
            "tensors": {n: list(v.shape) for n, v in self.params.items()},
        }


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _init_weights(scheme: InitScheme, shape: Tuple[int, ...], fan_in: int,
                  rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    if scheme is InitScheme.TRUNCNORM:
        w = truncnorm.rvs(-2.0, 2.0, scale=0.1, size=shape, random_state=rng)
        return np.asarray(w, dtype=np.float64), 0.1
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape), 0.0


def init_extractor(spec: ModelSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params: Dict[str, np.ndarray] = {}
    shapes = spec.layer_shapes()
    for i, layer in enumerate(spec.extractor):
        shape_in = shapes[i]
        if layer.kind is LayerKind.CONV:
            cin = shape_in[2]
            w, b = _init_weights(spec.init, (layer.kernel, layer.kernel, cin, layer.channels),
                                 layer.kernel * layer.kernel * cin, rng)
            params[f"conv{i}.w"], params[f"conv{i}.b"] = w, np.full(layer.channels, b)
        elif layer.kind is LayerKind.FC:
            w, b = _init_weights(spec.init, (shape_in[0], layer.units), shape_in[0], rng)
            params[f"fc{i}.w"], params[f"fc{i}.b"] = w, np.full(layer.units, b)
    return params


def init_softmax_head(spec: ModelSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    D = spec.hidden_dim
    w, b = _init_weights(spec.init, (D, spec.num_classes), D, rng)
    return {"head.w": w, "head.b": np.full(spec.num_classes, b)}


def init_gp_params(spec: ModelSpec, features_sample: np.ndarray, seed: int) -> Dict[str, np.ndarray]:
    state = init_gp_head(features_sample, spec.num_inducing, spec.kernel, spec.num_classes,
                         seed=seed, noise=spec.noise)
    params = state.to_arrays()
    if spec.learn_beta:
        params[BETA_PARAM] = RobustmaxParams.initial_logit(spec.beta)
    return params


def parameter_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every tensor a model built from `spec` carries"""
    shapes: Dict[str, Tuple[int, ...]] = {}
    layer_shapes = spec.layer_shapes()
    for i, layer in enumerate(spec.extractor):
        shape_in = layer_shapes[i]
        if layer.kind is LayerKind.CONV:
            shapes[f"conv{i}.w"] = (layer.kernel, layer.kernel, shape_in[2], layer.channels)
            shapes[f"conv{i}.b"] = (layer.channels,)
        elif layer.kind is LayerKind.FC:
            shapes[f"fc{i}.w"] = (shape_in[0], layer.units)
            shapes[f"fc{i}.b"] = (layer.units,)
    D, C, M = spec.hidden_dim, spec.num_classes, spec.num_inducing
    if spec.head is Head.SOFTMAX:
        shapes["head.w"], shapes["head.b"] = (D, C), (C,)
        return shapes
    shapes.update({"gp.Z": (M, D), "gp.q_mu": (C, M), "gp.q_sqrt_raw": (C, M, M), "gp.log_variance": ()})
    if spec.kernel is KernelKind.RBF:
        shapes["gp.log_lengthscale"] = ()
    if spec.noise > 0:
        shapes["gp.log_noise"] = ()
    if spec.learn_beta:
        shapes[BETA_PARAM] = ()
    return shapes


def _default_sample(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    n = max(2 * spec.num_inducing, 50)
    return rng.uniform(-1.0, 1.0, size=(n,) + tuple(spec.input_shape))


def build_model(spec: ModelSpec, seed: int = 0, sample_x: Optional[np.ndarray] = None) -> Model:
    """Initialize every parameter of `spec` deterministically from `seed`.

    For the GP head the inducing inputs are drawn from extractor features of
    `sample_x`; without a sample, uniform pseudo-inputs in [-1, 1] stand in.
    """
    rng = np.random.default_rng(seed)
    params = init_extractor(spec, rng)
    if spec.head is Head.SOFTMAX:
        params.update(init_softmax_head(spec, rng))
        model = Model(spec, params)
    else:
        extractor_only = Model(spec, params)
        if sample_x is None:
            sample_x = _default_sample(spec, rng)
        feats = extractor_only.predict_features(sample_x)
        params.update(init_gp_params(spec, feats, seed))
        model = Model(spec, params)
    logger.info(f"Built model '{spec.name}' (architecture {spec.architecture.value}, "
                f"D={spec.hidden_dim}, {sum(v.size for v in params.values())} parameters)")
    return model


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _sc_base() -> List[LayerSpec]:
    return [
        LayerSpec.conv(5, 32), LayerSpec.relu(), LayerSpec.maxpool(),
        LayerSpec.conv(5, 64), LayerSpec.relu(), LayerSpec.maxpool(),
        LayerSpec.flatten(), LayerSpec.fc(1024), LayerSpec.relu(),
    ]


def _dc_base() -> List[LayerSpec]:
    # 28 -> 26 -> 24 -> 12 -> 10 -> 8 -> 4; 4*4*64 = 1024 into the first FC
    return [
        LayerSpec.conv(3, 32, "VALID"), LayerSpec.relu(),
        LayerSpec.conv(3, 32, "VALID"), LayerSpec.relu(), LayerSpec.maxpool(padding="VALID"),
        LayerSpec.conv(3, 64, "VALID"), LayerSpec.relu(),
        LayerSpec.conv(3, 64, "VALID"), LayerSpec.relu(), LayerSpec.maxpool(padding="VALID"),
        LayerSpec.flatten(), LayerSpec.fc(200), LayerSpec.relu(), LayerSpec.dropout(0.5),
    ]


def _halfmoon_base() -> List[LayerSpec]:
    return [LayerSpec.fc(75), LayerSpec.relu()]


MNIST_SHAPE = (28, 28, 1)


def _presets() -> Dict[str, Dict[str, Any]]:
    sc = dict(input_shape=MNIST_SHAPE, init=InitScheme.TRUNCNORM)
    dc = dict(input_shape=MNIST_SHAPE, init=InitScheme.FAN_IN)
    moon = dict(input_shape=(2,), num_classes=2, init=InitScheme.FAN_IN, num_inducing=20)
    return {
        "sc-a": dict(sc, extractor=_sc_base(), architecture=Architecture.A),
        "sc-b": dict(sc, extractor=_sc_base() + [LayerSpec.fc(100), LayerSpec.relu()], architecture=Architecture.B),
        "sc-c": dict(sc, extractor=_sc_base() + [LayerSpec.fc(100)], architecture=Architecture.C),
        "sc-c-linear": dict(sc, extractor=_sc_base() + [LayerSpec.fc(100)], architecture=Architecture.C,
                            kernel=KernelKind.LINEAR),
        "dc-b": dict(dc, extractor=_dc_base() + [LayerSpec.fc(50), LayerSpec.relu()], architecture=Architecture.B),
        "dc-c": dict(dc, extractor=_dc_base() + [LayerSpec.fc(50)], architecture=Architecture.C),
        "halfmoon-nn": dict(moon, extractor=_halfmoon_base() + [LayerSpec.fc(10), LayerSpec.relu()],
                            architecture=Architecture.B),
        "halfmoon-gpdnn-rbf": dict(moon, extractor=_halfmoon_base() + [LayerSpec.fc(10)],
                                   architecture=Architecture.C),
        "halfmoon-gpdnn-linear": dict(moon, extractor=_halfmoon_base() + [LayerSpec.fc(10)],
                                      architecture=Architecture.C, kernel=KernelKind.LINEAR),
        "halfmoon-gp": dict(moon, extractor=[], architecture=Architecture.C),
    }


PRESET_NAMES = tuple(_presets())


def get_preset(name: str, **overrides: Any) -> ModelSpec:
    """Spec of a built-in preset (case-insensitive), with optional field overrides"""
    key = name.strip().lower()
    presets = _presets()
    if key not in presets:
        raise ModelSpecError(f"unknown preset '{name}'; choose from {', '.join(PRESET_NAMES)}")
    fields = dict(presets[key], name=key)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return ModelSpec(**fields)


def switched_spec(spec: ModelSpec, num_inducing: int, kernel: Any, name: Optional[str] = None) -> ModelSpec:
    """Architecture-C spec sharing `spec`'s extractor"""
    if spec.architecture is not Architecture.B:
        raise ModelSpecError(f"head switch needs an architecture B model, got {spec.architecture.value}")
    return spec.model_copy(update={
        "name": name or f"{spec.name}-gp",
        "extractor": _copy.deepcopy(spec.extractor),
        "architecture": Architecture.C,
        "num_inducing": num_inducing,
        "kernel": KernelKind(kernel),
    })
