#!/usr/bin/env python3
"""
GPDNN Adversarial Attacks
Non-targeted FGSM and Carlini-Wagner L2 against softmax and robustmax heads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, Field, model_validator

import tensor_core as tc
from nn_layers import Model
from tensor_core import Graph, NumericalError
from training import AdamState, adam_step

logger = logging.getLogger(__name__)

ATTACK_COLUMNS = ["index", "true_label", "clean_pred", "adv_pred", "success", "l2_dist"]
LARGE_CONST = 1e10
BRACKET_OPEN = 1e9
TANH_SHRINK = 0.999999
OTHER_MASK = 1e10

T = TypeVar("T")
R = TypeVar("R")


class AttackError(Exception):
    """Attack precondition violated or gradient unusable"""


class _Bounds(BaseModel):
    lo: float = -1.0
    hi: float = 1.0

    @model_validator(mode="after")
    def ordered(self):
        if not self.lo < self.hi:
            raise ValueError(f"data bounds need lo < hi, got [{self.lo}, {self.hi}]")
        return self


class FGSMConfig(_Bounds):
    epsilon: float = Field(0.1, ge=0.0)


class CWConfig(_Bounds):
    search_steps: int = Field(9, ge=1)
    initial_const: float = Field(1e-3, gt=0.0)
    iterations: int = Field(1000, ge=1)
    learning_rate: float = Field(1e-2, gt=0.0)
    confidence: float = Field(0.0, ge=0.0)
    const_growth: float = Field(2.0, gt=1.0)
    abort_early: bool = False


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    l2: float
    true_label: int
    clean_pred: int
    adv_pred: int
    clean_probs: np.ndarray
    adv_probs: np.ndarray
    index: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_row(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "true_label": self.true_label,
            "clean_pred": self.clean_pred,
            "adv_pred": self.adv_pred,
            "success": int(self.success),
            "l2_dist": self.l2,
        }


def run_parallel(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Map over items, results in input order"""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------

def fgsm_perturbation(model: Model, xs: np.ndarray, ys: np.ndarray, epsilon: float) -> np.ndarray:
    """ε·sign(∇x NLL) per image, before clipping; sign(0) = 0"""
    grad, _ = model.nll_input_gradient(xs, ys)
    if not np.all(np.isfinite(grad)):
        raise AttackError("FGSM input gradient is not finite")
    return epsilon * np.sign(grad)


def fgsm_batch(model: Model, xs: Any, ys: Any, cfg: FGSMConfig, batch_size: int = 500) -> np.ndarray:
    """Adversarial copies of xs; rows never interact, so batches share one backward pass"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if cfg.epsilon == 0.0:
        return xs.copy()
    out = np.empty_like(xs)
    for i in range(0, len(xs), batch_size):
        chunk = slice(i, i + batch_size)
        out[chunk] = np.clip(xs[chunk] + fgsm_perturbation(model, xs[chunk], ys[chunk], cfg.epsilon),
                             cfg.lo, cfg.hi)
    return out


def fgsm(model: Model, x: Any, y_true: int, cfg: FGSMConfig, index: int = 0) -> AttackResult:
    x = np.asarray(x, dtype=np.float64)
    x_adv = fgsm_batch(model, x[None], np.array([y_true]), cfg)[0]
    probs = model.predict_proba(np.stack([x, x_adv]))
    adv_pred = int(np.argmax(probs[1]))
    return AttackResult(
        adversarial=x_adv,
        success=adv_pred != int(y_true),
        l2=float(np.linalg.norm((x_adv - x).ravel())),
        true_label=int(y_true),
        clean_pred=int(np.argmax(probs[0])),
        adv_pred=adv_pred,
        clean_probs=probs[0],
        adv_probs=probs[1],
        index=index,
    )


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------

def pseudo_logits(class_probs: Any) -> np.ndarray:
    """log p: pre-softmax scores up to an additive constant"""
    probs = np.asarray(tc._as_array(class_probs), dtype=np.float64)
    if np.any(probs <= 0.0):
        raise AttackError("pseudo-logits need strictly positive class probabilities")
    return np.log(probs)


def margin(logits: np.ndarray, label: int) -> float:
    """f = Z_l − max_{i≠l} Z_i"""
    others = np.delete(logits, label)
    return float(logits[label] - others.max())


def _to_box(w, lo: float, hi: float):
    return lo + (hi - lo) * (tc.tanh(w) + 1.0) * 0.5


def _from_box(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    unit = (x - lo) / (hi - lo) * 2.0 - 1.0
    return np.arctanh(np.clip(unit, -1.0, 1.0) * TANH_SHRINK)


class _CWRound:
    """One inner optimization at a fixed trade-off constant"""

    def __init__(self, model: Model, x: np.ndarray, label: int, cfg: CWConfig):
        self.model, self.x, self.label, self.cfg = model, x, label, cfg
        self.tensors = model.bind()
        self.mask = np.zeros(model.num_classes)
        self.mask[label] = OTHER_MASK
        self.onehot = np.eye(model.num_classes)[label]

    def objective(self, w: np.ndarray, const: float) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
        graph = Graph("cw")
        wt = graph.leaf(w, "w")
        x_adv = _to_box(wt, self.cfg.lo, self.cfg.hi)
        dist = tc.reduce_sum(tc.square(x_adv - self.x))
        logits = self.model.log_proba(self.tensors, tc.reshape(x_adv, (1,) + self.x.shape))[0]
        own = tc.reduce_sum(logits * self.onehot)
        best_other = tc.reduce_max(logits - self.mask)
        f = own - best_other
        kappa = self.cfg.confidence
        obj = dist + const * (tc.relu(f + kappa) - kappa)
        (grad,) = graph.gradient(obj, [wt])
        return obj.item(), grad, x_adv.numpy(), logits.numpy()

    def run(self, const: float) -> Tuple[bool, float, Optional[np.ndarray]]:
        cfg = self.cfg
        params = {"w": _from_box(self.x, cfg.lo, cfg.hi)}
        state = AdamState()
        best_l2, best_x = np.inf, None
        prev = np.inf
        check_every = max(cfg.iterations // 10, 1)
        for step in range(cfg.iterations):
            obj, grad, x_adv, logits = self.objective(params["w"], const)
            if not np.all(np.isfinite(grad)):
                raise NumericalError("cw_gradient")
            pred = int(np.argmax(logits))
            if pred != self.label and margin(logits, self.label) <= -cfg.confidence:
                l2 = float(np.linalg.norm((x_adv - self.x).ravel()))
                if l2 < best_l2:
                    best_l2, best_x = l2, x_adv
            if cfg.abort_early and step % check_every == 0:
                if obj > prev * 0.9999:
                    break
                prev = obj
            params, state = adam_step(params, {"w": grad}, state, cfg.learning_rate)
        return best_x is not None, best_l2, best_x


def cw_l2(model: Model, x: Any, y_true: int, cfg: CWConfig, index: int = 0) -> AttackResult:
    """Minimal-L2 non-targeted attack with a bracketing search over c"""
    x = np.asarray(x, dtype=np.float64)
    y_true = int(y_true)
    if np.any(x < cfg.lo) or np.any(x > cfg.hi):
        raise AttackError(f"image {index} lies outside the data bounds [{cfg.lo}, {cfg.hi}]")
    clean_probs = model.predict_proba(x[None])[0]
    clean_pred = int(np.argmax(clean_probs))
    if clean_pred != y_true:
        raise AttackError(f"image {index} is already misclassified ({clean_pred} != {y_true})")

    log = logging.getLogger("attacks.cw")
    inner = _CWRound(model, x, y_true, cfg)
    lower, upper, const = 0.0, LARGE_CONST, cfg.initial_const
    best_l2, best_x = np.inf, None
    for step in range(cfg.search_steps):
        try:
            succeeded, l2, x_adv = inner.run(const)
        except NumericalError as e:
            log.warning(f"image {index}: round {step} at c={const:.4g} hit a non-finite value ({e}); "
                        f"counted as failed")
            succeeded, l2, x_adv = False, np.inf, None
        if succeeded and l2 < best_l2:
            best_l2, best_x = l2, x_adv
        if succeeded:
            upper = min(upper, const)
            const = (lower + upper) / 2.0
        else:
            lower = max(lower, const)
            const = (lower + upper) / 2.0 if upper < BRACKET_OPEN else const * cfg.const_growth
        log.debug(f"image {index}: round {step} success={succeeded} next c={const:.4g}")

    if best_x is None:
        log.debug(f"image {index}: attack failed")
        return AttackResult(x.copy(), False, float("inf"), y_true, clean_pred, clean_pred,
                            clean_probs, clean_probs, index)
    adv_probs = model.predict_proba(best_x[None])[0]
    adv_pred = int(np.argmax(adv_probs))
    log.debug(f"image {index}: success, l2={best_l2:.4f}, {clean_pred} -> {adv_pred}")
    return AttackResult(best_x, adv_pred != y_true, best_l2, y_true, clean_pred, adv_pred,
                        clean_probs, adv_probs, index)


def cw_batch(model: Model, xs: Any, ys: Any, cfg: CWConfig, threads: int = 1,
             indices: Optional[Sequence[int]] = None) -> List[AttackResult]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    indices = list(range(len(xs))) if indices is None else list(indices)
    results = run_parallel(lambda i: cw_l2(model, xs[i], ys[i], cfg, index=indices[i]),
                           list(range(len(xs))), threads)
    failed = sum(not r.success for r in results)
    logger.info(f"CW on '{model.spec.name}': {len(results) - failed}/{len(results)} succeeded")
    return results
