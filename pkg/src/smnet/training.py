"""Training loop, evaluation and single-cloud inference for :class:`SMNet`."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .metrics import per_dimension_error, regression_metrics
from .model import CloudPlan, SMNet
from .params import sgd_momentum_step
from .pointcloud import PointCloud, TransformRecord
from .preprocess import PreprocessParams, preprocess_cloud

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_mse", "test_mse", "test_mae", "test_r2")
EVAL_BATCH = 16


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0   # epochs; 0 writes only the final checkpoint
    recalibrate: bool = True    # recompute normalization statistics before evaluating or saving

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class SampleSet:
    """Preprocessed clouds with their control vectors."""

    ids: list
    clouds: list                      # (N, 3) arrays, normalized
    controls: np.ndarray              # (n, control_dim)
    _plans: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=np.float64).reshape(len(self.clouds), -1)
        if len(self.ids) != len(self.clouds):
            raise ValueError("ids and clouds differ in length")

    def __len__(self) -> int:
        return len(self.clouds)

    def plans(self, model: SMNet) -> list[CloudPlan]:
        """Geometry plans for ``model``, computed once per architecture."""
        key = model.config.to_text()
        if key not in self._plans:
            self._plans[key] = [model.plan(c) for c in self.clouds]
        return self._plans[key]

    def subset(self, index) -> "SampleSet":
        index = list(index)
        return SampleSet([self.ids[i] for i in index], [self.clouds[i] for i in index], self.controls[index])


@dataclass
class EvalReport:
    mse: float
    mae: float
    r2: float
    per_dimension_mae: np.ndarray
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "r2": self.r2, "n_samples": len(self.predictions)}


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield start // size, order[start:start + size]


def predict_plans(model: SMNet, plans: Sequence[CloudPlan], batch_size: int = EVAL_BATCH) -> np.ndarray:
    out = [model.predict(plans[i:i + batch_size]) for i in range(0, len(plans), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.config.out_dim))


def recalibrate_norm_stats(model: SMNet, plans: Sequence[CloudPlan], batch_size: int) -> None:
    """Replace every running mean/variance by its average over train-mode passes of ``plans``.

    Pooled features differ only slightly between clouds, so the drift of
    momentum-averaged statistics while weights move can exceed that signal
    and wreck eval-mode predictions. Weights are left untouched.
    """
    with ad.cumulative_stats(), np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, len(plans), batch_size):
            model.forward(plans[start:start + batch_size], training=True)


def evaluate(model: SMNet, samples: SampleSet, per_dimension_r2: bool = False) -> EvalReport:
    """MSE, MAE and R^2 over every sample and output dimension (eval-mode statistics)."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = predict_plans(model, samples.plans(model))
    mse, mae, r2 = regression_metrics(pred, samples.controls, per_dimension_r2=per_dimension_r2)
    return EvalReport(mse, mae, r2, per_dimension_error(pred, samples.controls), pred)


def train(model: SMNet, train_set: SampleSet, cfg: TrainConfig, test_set: Optional[SampleSet] = None,
          checkpoint_dir=None, on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Mini-batch SGD with momentum on the MSE loss; returns one history row per epoch."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    plans = train_set.plans(model)
    targets = train_set.controls.astype(ad.DTYPE)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(plans))
        total, count = 0.0, 0
        for b, idx in _batches(len(plans), cfg.batch_size, order):
            # overflow shows up as a non-finite loss, reported below
            with GradTape() as tape, np.errstate(over="ignore", invalid="ignore"):
                pred = model.forward([plans[i] for i in idx], training=True)
                try:
                    loss = ad.mse_loss(pred, Tensor._wrap(targets[idx], False))
                except FloatingPointError:
                    raise TrainingDiverged(f"loss is not finite at epoch {epoch}, batch {b} "
                                           f"(lr={cfg.lr}); lower the learning rate") from None
            tape.backward(loss)
            sgd_momentum_step(model.store, cfg.lr, cfg.momentum)
            total += float(loss.data[0, 0]) * len(idx)
            count += len(idx)
        saving = checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0
        has_test = test_set is not None and len(test_set) > 0
        if cfg.recalibrate and (has_test or saving or epoch == cfg.epochs):
            recalibrate_norm_stats(model, plans, cfg.batch_size)
        row = {"epoch": epoch, "train_mse": total / count,
               "test_mse": None, "test_mae": None, "test_r2": None}
        if has_test:
            rep = evaluate(model, test_set)
            row.update(test_mse=rep.mse, test_mae=rep.mae, test_r2=rep.r2)
        history.append(row)
        log.info("epoch %d train_mse %.5f test_r2 %s (%.1fs)", epoch, row["train_mse"],
                 row["test_r2"], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
        if saving:
            model.save(Path(checkpoint_dir) / f"checkpoint_epoch{epoch:04d}.smn")
    return history


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow(["" if row[k] is None else repr(row[k]) for k in HISTORY_COLUMNS])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else (float(v) if v else None)) for k, v in r.items()} for r in rows]


def predict_control(model: SMNet, raw: PointCloud, params: PreprocessParams,
                    seed: int = 0) -> tuple[np.ndarray, TransformRecord, PointCloud]:
    """Preprocess a raw target cloud and predict its control vector (unclamped).

    Returns (prediction, transform record, processed cloud).
    """
    processed, record = preprocess_cloud(raw, params, seed)
    pred = model.forward_cloud(processed.points).astype(np.float64)
    return pred, record, processed
