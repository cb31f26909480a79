#!/usr/bin/env python3
"""
GPDNN Evaluation
Error / log-likelihood / entropy reports, FGSM sweeps, CW studies and transfer tables.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.special import entr

import tensor_core as tc
from attacks import AttackResult, CWConfig, FGSMConfig, cw_batch, fgsm_batch
from datasets import Dataset

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ["dataset", "model", "n", "error", "ll", "entropy"]
SWEEP_COLUMNS = ["epsilon", "model", "error", "ll", "entropy"]
CW_COLUMNS = ["index", "model", "success", "l2", "clean_pred", "adv_pred"]
GRID_COLUMNS = ["x0", "x1", "p_class1", "entropy"]
HISTOGRAM_WIDTH = 0.25
FLOAT_FORMAT = "%.10g"


def write_csv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Byte-stable CSV: fixed float format, no index, LF line endings"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def model_name(model: Any) -> str:
    spec = getattr(model, "spec", None)
    return spec.name if spec is not None else getattr(model, "name", type(model).__name__)


class UniformPredictor:
    """Baseline that always predicts 1/C"""

    def __init__(self, num_classes: int = 10, name: str = "uniform"):
        self.num_classes = num_classes
        self.name = name

    def predict_log_proba(self, x: Any, batch_size: int = 0) -> np.ndarray:
        return np.full((len(x), self.num_classes), -np.log(self.num_classes))


@dataclass
class EvalReport:
    dataset: str
    model: str
    n: int
    error: float
    ll: float
    entropy: float

    def to_dict(self) -> Dict[str, Any]:
        return {"dataset": self.dataset, "model": self.model, "n": self.n,
                "error": self.error, "ll": self.ll, "entropy": self.entropy}


def report_from_log_proba(logp: np.ndarray, labels: Any, dataset: str = "data",
                          model: str = "model") -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty set")
    if logp.shape[0] != len(labels):
        raise tc.ShapeError(f"{logp.shape[0]} predictions for {len(labels)} labels")
    pred = np.argmax(logp, axis=1)
    ll = logp[np.arange(len(labels)), labels]
    entropy = entr(np.exp(logp)).sum(axis=1)
    return EvalReport(dataset, model, len(labels), float(np.mean(pred != labels)),
                      float(np.mean(ll)), float(np.mean(entropy)))


def evaluate(model: Any, xs: Any, ys: Any, dataset_name: str = "data") -> EvalReport:
    """Error rate, mean log p(y) and mean predictive entropy, in nats"""
    if len(ys) == 0:
        raise ValueError("cannot evaluate an empty set")
    return report_from_log_proba(model.predict_log_proba(xs), ys, dataset_name, model_name(model))


def evaluate_dataset(model: Any, ds: Dataset) -> EvalReport:
    return evaluate(model, ds.images, ds.labels, ds.name)


# ---------------------------------------------------------------------------
# FGSM sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    source: str
    rows: List[Tuple[float, EvalReport]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"epsilon": eps, "model": r.model, "error": r.error, "ll": r.ll, "entropy": r.entropy}
             for eps, r in self.rows],
            columns=SWEEP_COLUMNS,
        )

    def at(self, epsilon: float, model: str) -> EvalReport:
        for eps, report in self.rows:
            if eps == epsilon and report.model == model:
                return report
        raise KeyError(f"no row for epsilon={epsilon}, model={model}")


def epsilon_sweep(models: Sequence[Any], source_model: Any, xs: Any, ys: Any,
                  epsilons: Sequence[float], cfg: Optional[FGSMConfig] = None) -> SweepReport:
    """FGSM examples crafted on `source_model`, scored by every model in `models`"""
    epsilons = [float(e) for e in epsilons]
    if any(b <= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError(f"epsilons must be strictly increasing, got {epsilons}")
    shapes = {tuple(m.spec.input_shape) for m in list(models) + [source_model] if hasattr(m, "spec")}
    if len(shapes) > 1:
        raise tc.ShapeError(f"models disagree on input shape: {sorted(shapes)}")
    cfg = cfg or FGSMConfig()
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    report = SweepReport(model_name(source_model))
    for eps in epsilons:
        adv = fgsm_batch(source_model, xs, ys, cfg.model_copy(update={"epsilon": eps}))
        for m in models:
            r = evaluate(m, adv, ys, dataset_name=f"fgsm-{eps:g}")
            report.rows.append((eps, r))
            logger.info(f"eps={eps:g} source={report.source} model={r.model}: "
                        f"error={r.error:.4f} ll={r.ll:.4f} entropy={r.entropy:.4f}")
    return report


# ---------------------------------------------------------------------------
# CW study
# ---------------------------------------------------------------------------

@dataclass
class CWStudy:
    names: Tuple[str, str]
    attacks: Dict[str, List[AttackResult]]
    failures: Dict[str, int]
    table: pd.DataFrame
    paired: pd.DataFrame
    histogram: pd.DataFrame

    def per_image_frame(self) -> pd.DataFrame:
        rows = []
        for name in self.names:
            for r in self.attacks[name]:
                rows.append({"index": r.index, "model": name, "success": int(r.success), "l2": r.l2,
                             "clean_pred": r.clean_pred, "adv_pred": r.adv_pred})
        return pd.DataFrame(rows, columns=CW_COLUMNS)

    def mean_distance(self, name: str) -> float:
        """Mean L2 over successful attacks only"""
        d = [r.l2 for r in self.attacks[name] if r.success]
        return float(np.mean(d)) if d else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "models": list(self.names),
            "failures": dict(self.failures),
            "mean_l2": {n: self.mean_distance(n) for n in self.names},
            "paired": len(self.paired),
            "mean_paired_diff": float(self.paired["diff"].mean()) if len(self.paired) else float("nan"),
        }


def distance_histogram(values: np.ndarray, width: float = HISTOGRAM_WIDTH) -> pd.DataFrame:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return pd.DataFrame(columns=["bin_lo", "bin_hi", "count"])
    lo = np.floor(values.min() / width) * width
    hi = np.ceil(values.max() / width) * width
    if hi <= lo:
        hi = lo + width
    edges = lo + width * np.arange(int(round((hi - lo) / width)) + 1)
    counts, edges = np.histogram(values, bins=edges)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})


def cw_study(model_a: Any, model_b: Any, xs: Any, ys: Any, cfg: Optional[CWConfig] = None,
             threads: int = 1) -> CWStudy:
    """CW on both models over items both classify correctly, with transfer scoring"""
    cfg = cfg or CWConfig()
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    name_a, name_b = model_name(model_a), model_name(model_b)
    if name_b == name_a:
        name_b = f"{name_b}#2"
    keep = (model_a.predict(xs) == ys) & (model_b.predict(xs) == ys)
    idx = np.flatnonzero(keep)
    logger.info(f"CW study {name_a} vs {name_b}: {len(idx)}/{len(ys)} items correct under both")
    if len(idx) == 0:
        raise ValueError("no item is classified correctly by both models")

    models = {name_a: model_a, name_b: model_b}
    attacks = {name: cw_batch(m, xs[idx], ys[idx], cfg, threads, indices=idx)
               for name, m in models.items()}
    failures = {name: sum(not r.success for r in res) for name, res in attacks.items()}

    rows = []
    for attacked, results in attacks.items():
        ok = [r for r in results if r.success]
        if not ok:
            continue
        adv = np.stack([r.adversarial for r in ok])
        labels = np.array([r.true_label for r in ok])
        for scored, m in models.items():
            rep = evaluate(m, adv, labels, dataset_name=f"cw-{attacked}")
            rows.append({"attacked": attacked, "scored": scored, "n": rep.n, "error": rep.error, "ll": rep.ll})
    table = pd.DataFrame(rows, columns=["attacked", "scored", "n", "error", "ll"])

    both = [(ra, rb) for ra, rb in zip(attacks[name_a], attacks[name_b]) if ra.success and rb.success]
    paired = pd.DataFrame({
        "index": [ra.index for ra, _ in both],
        "l2_a": [ra.l2 for ra, _ in both],
        "l2_b": [rb.l2 for _, rb in both],
    }, columns=["index", "l2_a", "l2_b"])
    paired["diff"] = paired["l2_b"] - paired["l2_a"]
    histogram = distance_histogram(paired["diff"].to_numpy())
    study = CWStudy((name_a, name_b), attacks, failures, table, paired, histogram)
    logger.info(f"CW study summary: {study.to_dict()}")
    return study


# ---------------------------------------------------------------------------
# Transfer testing and 2-D grids
# ---------------------------------------------------------------------------

def transfer_test(models: Sequence[Any], datasets: Sequence[Dataset]) -> pd.DataFrame:
    """Every model on every dataset, one eval-schema row each"""
    rows = []
    for ds in datasets:
        for m in models:
            spec = getattr(m, "spec", None)
            if spec is not None and tuple(spec.input_shape) != ds.input_shape:
                raise tc.ShapeError(f"model '{spec.name}' expects {tuple(spec.input_shape)}, "
                                    f"dataset '{ds.name}' has {ds.input_shape}")
            r = evaluate_dataset(m, ds)
            logger.info(f"transfer {r.model} on {r.dataset}: error={r.error:.4f} ll={r.ll:.4f}")
            rows.append(r.to_dict())
    return pd.DataFrame(rows, columns=EVAL_COLUMNS)


def grid_points(x_range: Tuple[float, float] = (-3.0, 4.0), y_range: Tuple[float, float] = (-3.0, 3.0),
                resolution: int = 200) -> np.ndarray:
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    g0, g1 = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([g0.ravel(), g1.ravel()], axis=1)


def boundary_grid(model: Any, x_range: Tuple[float, float] = (-3.0, 4.0),
                  y_range: Tuple[float, float] = (-3.0, 3.0), resolution: int = 200) -> pd.DataFrame:
    """p(class 1) and predictive entropy over a regular 2-D grid"""
    spec = getattr(model, "spec", None)
    if spec is not None and tuple(spec.input_shape) != (2,):
        raise tc.ShapeError(f"boundary grid needs a 2-D input model, '{spec.name}' takes {tuple(spec.input_shape)}")
    points = grid_points(x_range, y_range, resolution)
    probs = np.exp(model.predict_log_proba(points))
    return pd.DataFrame({
        "x0": points[:, 0],
        "x1": points[:, 1],
        "p_class1": probs[:, 1],
        "entropy": entr(probs).sum(axis=1),
    }, columns=GRID_COLUMNS)


def far_field_confidence(model: Any, train_points: np.ndarray, points: np.ndarray,
                         min_distance: float = 3.0) -> Tuple[float, int]:
    """Mean max-class probability over points farther than min_distance from all training points"""
    dist, _ = cKDTree(np.asarray(train_points)).query(points)
    far = points[dist > min_distance]
    if len(far) == 0:
        return float("nan"), 0
    probs = np.exp(model.predict_log_proba(far))
    return float(probs.max(axis=1).mean()), len(far)
