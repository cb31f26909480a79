#!/usr/bin/env python3
"""
GPDNN - Gaussian process hybrid deep networks
Command line entry point: train, evaluate, attack, transfer and grid.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

import tensor_core as tc
from attacks import AttackError, CWConfig, FGSMConfig
from checkpoint import CheckpointError, load_model, save_model
from datasets import (Dataset, DatasetError, half_moons, load_idx, load_npy, load_semeion,
                      split, subset)
from evaluation import (boundary_grid, cw_study, epsilon_sweep, evaluate_dataset,
                        far_field_confidence, grid_points, transfer_test, write_csv)
from nn_layers import Head, ModelSpecError, build_model, get_preset
from training import TrainConfig, TrainingError, preset_train_defaults, train

# Load environment variables
load_dotenv()
LOG_LEVEL = os.getenv("GPDNN_LOG_LEVEL", "INFO")
THREADS = os.getenv("GPDNN_THREADS")
DATA_DIR = os.getenv("GPDNN_DATA_DIR")

logger = logging.getLogger("gpdnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class ConfigError(ValueError):
    """Inconsistent or incomplete run configuration"""


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class RunConfig(BaseModel):
    """Every knob of one CLI run; flags override the config file, which overrides the environment"""
    command: str
    out: str = "runs/latest"
    seed: int = 0
    threads: int = Field(1, ge=1)
    data_dir: Optional[str] = None
    log_level: str = "INFO"

    # data
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    semeion: Optional[str] = None
    npy_images: Optional[str] = None
    npy_labels: Optional[str] = None
    halfmoons: Optional[int] = Field(None, ge=2)
    moon_noise: float = Field(0.1, ge=0.0)
    val_size: int = Field(5000, ge=0)
    proportion: float = Field(1.0, gt=0.0, le=1.0)
    n: Optional[int] = Field(None, ge=1)

    # model and training
    preset: Optional[str] = None
    kernel: Optional[str] = None
    num_inducing: Optional[int] = Field(None, ge=1)
    beta: Optional[float] = Field(None, gt=0.0, lt=0.5)
    learn_beta: Optional[bool] = None
    iterations: Optional[int] = Field(None, ge=0)
    batch_size: Optional[int] = Field(None, ge=0)
    learning_rate: Optional[float] = Field(None, gt=0.0)
    gp_learning_rate: Optional[float] = Field(None, gt=0.0)
    val_interval: Optional[int] = Field(None, ge=1)
    switch_at: Optional[int] = Field(None, ge=0)

    # attacks / evaluation
    models: List[str] = Field(default_factory=list)
    source: Optional[str] = None
    attack: Optional[str] = None
    epsilons: List[float] = Field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    cw_search_steps: int = Field(9, ge=1)
    cw_initial_const: float = Field(1e-3, gt=0.0)
    cw_iterations: int = Field(1000, ge=1)
    cw_learning_rate: float = Field(1e-2, gt=0.0)
    cw_confidence: float = Field(0.0, ge=0.0)
    resolution: int = Field(200, ge=2)
    x_range: List[float] = Field(default_factory=lambda: [-3.0, 4.0])
    y_range: List[float] = Field(default_factory=lambda: [-3.0, 3.0])
    far_distance: float = Field(3.0, gt=0.0)

    @field_validator("models", "epsilons", "x_range", "y_range", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split_list(v)

    @field_validator("x_range", "y_range")
    @classmethod
    def check_pair(cls, v):
        if len(v) != 2 or not v[0] < v[1]:
            raise ValueError(f"range must be 'lo,hi' with lo < hi, got {v}")
        return v

    def train_config(self) -> TrainConfig:
        fields = preset_train_defaults(self.preset or "")
        fields["seed"] = self.seed
        for key in ("iterations", "learning_rate", "gp_learning_rate", "val_interval", "switch_at"):
            value = getattr(self, key)
            if value is not None:
                fields[key] = value
        if self.batch_size is not None:
            fields["batch_size"] = self.batch_size or None  # 0 means full batch
        if self.num_inducing is not None:
            fields["switch_num_inducing"] = self.num_inducing
        if self.kernel is not None:
            fields["switch_kernel"] = self.kernel
        return TrainConfig(**fields)

    def cw_config(self, lo: float, hi: float) -> CWConfig:
        return CWConfig(lo=lo, hi=hi, search_steps=self.cw_search_steps, initial_const=self.cw_initial_const,
                        iterations=self.cw_iterations, learning_rate=self.cw_learning_rate,
                        confidence=self.cw_confidence)

    def to_env(self) -> str:
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if value is None or value == []:
                continue
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < environment < config file < flags"""
    merged: Dict[str, Any] = {}
    if THREADS:
        merged["threads"] = THREADS
    if DATA_DIR:
        merged["data_dir"] = DATA_DIR
    merged["log_level"] = LOG_LEVEL
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            name = key.lower()
            if name.startswith("gpdnn_"):
                name = name[len("gpdnn_"):]
            if name not in RunConfig.model_fields:
                raise ConfigError(f"{path}: unknown setting '{key}'")
            merged[name] = value
    for key, value in vars(args).items():
        if key in ("config", "func") or value is None:
            continue
        merged[key] = value
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def _find(data_dir: Optional[str], stem: str) -> Optional[str]:
    if not data_dir:
        return None
    for candidate in (Path(data_dir) / stem, Path(data_dir) / f"{stem}.gz"):
        if candidate.is_file():
            return str(candidate)
    return None


def mnist_paths(cfg: RunConfig, part: str) -> Tuple[str, str]:
    if part == "train":
        images, labels = cfg.images, cfg.labels
    else:
        images, labels = cfg.test_images, cfg.test_labels
    images = images or _find(cfg.data_dir, MNIST_FILES[part][0])
    labels = labels or _find(cfg.data_dir, MNIST_FILES[part][1])
    if not images or not labels:
        raise DatasetError(f"no MNIST {part} files: pass --{'' if part == 'train' else 'test-'}images/labels "
                           f"or set GPDNN_DATA_DIR")
    return images, labels


def uses_halfmoons(cfg: RunConfig) -> bool:
    return cfg.halfmoons is not None or (cfg.preset or "").lower().startswith("halfmoon")


def moons(cfg: RunConfig, part: str) -> Dataset:
    n = cfg.halfmoons or 200
    ds = half_moons(n, cfg.moon_noise, cfg.seed if part == "train" else cfg.seed + 1)
    return ds if part == "train" else Dataset(ds.images, ds.labels, "halfmoons-test", ds.lo, ds.hi, 2)


def evaluation_sets(cfg: RunConfig) -> List[Dataset]:
    """Datasets named on the command line; MNIST test split when none is"""
    sets = []
    if uses_halfmoons(cfg):
        sets.append(moons(cfg, "test"))
    if cfg.semeion:
        sets.append(load_semeion(cfg.semeion))
    if cfg.npy_images or cfg.npy_labels:
        if not (cfg.npy_images and cfg.npy_labels):
            raise ConfigError("--npy-images and --npy-labels go together")
        sets.append(load_npy(cfg.npy_images, cfg.npy_labels))
    if not sets or cfg.test_images or (cfg.data_dir and not uses_halfmoons(cfg)):
        images, labels = mnist_paths(cfg, "test")
        sets.insert(0, load_idx(images, labels, name="mnist-test"))
    if cfg.n:
        sets = [subset(ds, cfg.n) for ds in sets]
    return sets


def _models(paths: Sequence[str]):
    if not paths:
        raise ConfigError("no model checkpoints given (--models)")
    return [load_model(p) for p in paths]


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.env").write_text(cfg.to_env())
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    if not cfg.preset:
        raise ConfigError("train needs --preset")
    spec = get_preset(cfg.preset, kernel=cfg.kernel, num_inducing=cfg.num_inducing,
                      beta=cfg.beta, learn_beta=cfg.learn_beta)
    train_cfg = cfg.train_config()

    # load everything before the first iteration so bad paths never leave partial output
    if uses_halfmoons(cfg):
        train_ds, val_ds, test_ds = moons(cfg, "train"), None, moons(cfg, "test")
    else:
        full = load_idx(*mnist_paths(cfg, "train"), name="mnist")
        train_ds, val_ds = split(full, cfg.val_size, cfg.proportion, cfg.seed)
        test_ds = load_idx(*mnist_paths(cfg, "test"), name="mnist-test")
        if cfg.n:
            test_ds = subset(test_ds, cfg.n)

    rng = np.random.default_rng(cfg.seed)
    sample = train_ds.images[np.sort(rng.choice(len(train_ds), size=min(len(train_ds), 1000), replace=False))]
    model = build_model(spec, cfg.seed, sample_x=sample if spec.head is Head.GP else None)
    result = train(model, train_ds, train_cfg, val_ds)

    out = _out(cfg)
    save_model(out / "model.ckpt", result.model)
    write_csv(result.trace, out / "trace.csv")
    reports = pd.DataFrame([evaluate_dataset(result.model, train_ds).to_dict(),
                            evaluate_dataset(result.model, test_ds).to_dict()])
    write_csv(reports, out / "eval.csv")
    print(f"✅ Trained {spec.name} -> {out / 'model.ckpt'}")
    print(reports.to_string(index=False))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    models = _models(cfg.models)
    table = transfer_test(models, evaluation_sets(cfg))
    out = _out(cfg)
    write_csv(table, out / "eval.csv")
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    (ds,) = evaluation_sets(cfg)[:1]
    out = _out(cfg)
    if cfg.attack == "fgsm":
        if not cfg.source:
            raise ConfigError("attack fgsm needs --source")
        source = load_model(cfg.source)
        models = _models(cfg.models) if cfg.models else [source]
        sweep = epsilon_sweep(models, source, ds.images, ds.labels, cfg.epsilons,
                              FGSMConfig(lo=ds.lo, hi=ds.hi))
        frame = sweep.to_frame()
        write_csv(frame, out / "sweep.csv")
        print(frame.to_string(index=False))
    elif cfg.attack == "cw":
        if len(cfg.models) != 2:
            raise ConfigError(f"attack cw needs exactly two --models, got {len(cfg.models)}")
        model_a, model_b = _models(cfg.models)
        study = cw_study(model_a, model_b, ds.images, ds.labels, cfg.cw_config(ds.lo, ds.hi), cfg.threads)
        write_csv(study.per_image_frame(), out / "cw.csv")
        write_csv(study.table, out / "cw_table.csv")
        write_csv(study.paired, out / "cw_paired.csv")
        write_csv(study.histogram, out / "cw_histogram.csv")
        summary = study.to_dict()
        print(f"✅ CW study: failures {summary['failures']}, mean L2 {summary['mean_l2']}")
        print(study.table.to_string(index=False))
    else:
        raise ConfigError(f"unknown attack '{cfg.attack}'")
    return EXIT_OK


def cmd_transfer(cfg: RunConfig) -> int:
    models = _models(cfg.models)
    table = transfer_test(models, evaluation_sets(cfg))
    out = _out(cfg)
    write_csv(table, out / "transfer.csv")
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_grid(cfg: RunConfig) -> int:
    if len(cfg.models) != 1:
        raise ConfigError("grid takes exactly one --models checkpoint")
    (model,) = _models(cfg.models)
    grid = boundary_grid(model, tuple(cfg.x_range), tuple(cfg.y_range), cfg.resolution)
    out = _out(cfg)
    write_csv(grid, out / "grid.csv")
    print(f"✅ Wrote {len(grid)} grid points to {out / 'grid.csv'}")
    if uses_halfmoons(cfg):
        points = grid_points(tuple(cfg.x_range), tuple(cfg.y_range), cfg.resolution)
        conf, count = far_field_confidence(model, moons(cfg, "train").images, points, cfg.far_distance)
        summary = pd.DataFrame([{"model": model.spec.name, "far_points": count, "mean_max_prob": conf}])
        write_csv(summary, out / "grid_summary.csv")
        print(summary.to_string(index=False))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", help="MNIST training images (IDX, optionally gzipped)")
    p.add_argument("--labels", help="MNIST training labels (IDX)")
    p.add_argument("--test-images", dest="test_images")
    p.add_argument("--test-labels", dest="test_labels")
    p.add_argument("--semeion", help="semeion.data file")
    p.add_argument("--npy-images", dest="npy_images", help="decoded external images (.npy, [N,H,W,C] in 0..255)")
    p.add_argument("--npy-labels", dest="npy_labels")
    p.add_argument("--halfmoons", type=int, help="use a half-moon dataset of this size")
    p.add_argument("--moon-noise", dest="moon_noise", type=float)
    p.add_argument("--n", type=int, help="limit evaluation sets to their first N items")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--data-dir", dest="data_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpdnn", description="GP hybrid deep networks")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--log-level", dest="log_level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a preset model")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--preset")
    p.add_argument("--kernel", choices=["rbf", "linear"])
    p.add_argument("--num-inducing", dest="num_inducing", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--learn-beta", dest="learn_beta", action="store_true", default=None)
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--batch", dest="batch_size", type=int, help="0 for full batch")
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--gp-lr", dest="gp_learning_rate", type=float)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--val-interval", dest="val_interval", type=int)
    p.add_argument("--proportion", type=float)
    p.add_argument("--switch-at", dest="switch_at", type=int, help="switch a B preset to a GP head here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="error / LL / entropy of checkpoints")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--models")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", help="adversarial attacks")
    attack_sub = p.add_subparsers(dest="attack", required=True)
    a = attack_sub.add_parser("fgsm")
    _common_flags(a)
    _data_flags(a)
    a.add_argument("--source", help="checkpoint the examples are crafted on")
    a.add_argument("--eval", dest="models", help="checkpoints scored on the examples")
    a.add_argument("--eps", dest="epsilons")
    a.set_defaults(func=cmd_attack)
    a = attack_sub.add_parser("cw")
    _common_flags(a)
    _data_flags(a)
    a.add_argument("--models", help="two checkpoints, comma separated")
    a.add_argument("--search-steps", dest="cw_search_steps", type=int)
    a.add_argument("--initial-const", dest="cw_initial_const", type=float)
    a.add_argument("--cw-iters", dest="cw_iterations", type=int)
    a.add_argument("--cw-lr", dest="cw_learning_rate", type=float)
    a.add_argument("--confidence", dest="cw_confidence", type=float)
    a.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", help="cross table of checkpoints and datasets")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--models")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("grid", help="decision-boundary grid of a 2-D model")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--models", help="checkpoint")
    p.add_argument("--resolution", type=int)
    p.add_argument("--x-range", dest="x_range")
    p.add_argument("--y-range", dest="y_range")
    p.add_argument("--far-distance", dest="far_distance", type=float)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = args.func
    try:
        cfg = build_run_config(args)
    except (ConfigError, ValidationError) as e:
        logging.basicConfig(level=LOG_LEVEL)
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE

    logging.basicConfig(level=cfg.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return func(cfg)
    except (ConfigError, ModelSpecError, ValidationError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError, tc.ShapeError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except (tc.NumericalError, tc.DomainError, TrainingError, AttackError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        # settings that validate alone but not against the data (too few rows for M, oversized batch, ...)
        logger.error(f"Invalid run: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
