"""Single-instance baselines: train a plain linear classifier on regions
picked by objectness (one per image, or one per positive image plus every
region of negative images) with the regularization strength chosen by
stratified cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bags import Dataset
from .errors import ConfigError, TrainingError
from .models import (
    Layout,
    LinearModel,
    LossConfig,
    data_loss,
    poly_bag_values,
    poly_gradient_arrays,
)
from .train import TrainConfig, TrainedClassModel

BASELINE_KINDS = ("max", "maxa")
DEFAULT_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "max"
    folds: int = 3
    grid: tuple[float, ...] = DEFAULT_GRID
    learning_rate: float = 0.05
    iterations: int = 500

    def __post_init__(self):
        if self.kind.lower() not in BASELINE_KINDS:
            raise ConfigError(f"baseline kind must be one of {BASELINE_KINDS}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not self.grid:
            raise ConfigError("regularization grid must be nonempty")


def select_training_instances(dataset: Dataset, class_name: str,
                              kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Pick baseline training vectors; returns (features, labels).

    ``max`` keeps the highest-objectness region of every image, labeled with
    the image's bag label. ``maxa`` keeps that region for positive images and
    every region of negative images. Objectness ties pick the lowest index.
    """
    kind = kind.lower()
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    c = dataset.class_index(class_name)
    feats = []
    labels = []
    for bag in dataset.bags:
        label = int(bag.labels[c])
        if kind == "maxa" and label == -1:
            feats.append(np.asarray(bag.features, dtype=np.float64))
            labels.extend([-1] * bag.num_regions)
        else:
            k = int(np.argmax(bag.objectness))
            feats.append(np.asarray(bag.features[k:k + 1], dtype=np.float64))
            labels.append(label)
    return np.concatenate(feats, axis=0), np.array(labels, dtype=np.int64)


def _fit_hinge(x: np.ndarray, y: np.ndarray, reg: float, lr: float,
               iterations: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch hinge-loss gradient descent; every instance is its own bag.

    Divergence (too-large regularization for the step size) ends the loop
    early and surfaces as non-finite parameters, which cross-validation then
    scores as zero accuracy.
    """
    n = x.shape[0]
    layout = Layout.from_arrays(x, np.ones(n), np.ones(n, dtype=np.int64))
    cfg = LossConfig(kind="hinge", use_score=False, epsilon=0.0, C=reg)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == -1))
    w = rng.normal(0.0, 0.01, (1, x.shape[1]))
    b = np.zeros(1)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(iterations):
            g_w, g_b = poly_gradient_arrays(layout.x, layout.objectness,
                                            layout.starts, layout.counts, y,
                                            n_pos, n_neg, w, b, cfg)
            w = w - lr * g_w
            b = b - lr * g_b
            if not np.isfinite(w).all():
                break
    return w, b


def _accuracy(w, b, x, y) -> float:
    pred = np.where(x @ w[0] + b[0] > 0.0, 1, -1)
    return float(np.mean(pred == y))


def _stratified_folds(y: np.ndarray, folds: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Fold id per instance, dealing shuffled positives and negatives in turn."""
    assignment = np.zeros(y.shape[0], dtype=np.int64)
    for sign in (1, -1):
        idx = np.flatnonzero(y == sign)
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def cross_validate(x: np.ndarray, y: np.ndarray, config: BaselineConfig,
                   seed: int) -> tuple[float, list[float]]:
    """Mean fold accuracy per grid value; returns (best C, accuracies)."""
    rng = np.random.default_rng(seed)
    assignment = _stratified_folds(y, config.folds, rng)
    accs = []
    for reg in config.grid:
        fold_scores = []
        for f in range(config.folds):
            train_mask = assignment != f
            if len(set(y[train_mask])) < 2 or not np.any(~train_mask):
                continue
            w, b = _fit_hinge(x[train_mask], y[train_mask], reg,
                              config.learning_rate, config.iterations,
                              np.random.default_rng(seed ^ 1))
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                fold_scores.append(0.0)
                continue
            fold_scores.append(_accuracy(w, b, x[~train_mask], y[~train_mask]))
        accs.append(float(np.mean(fold_scores)) if fold_scores else 0.0)
    best = config.grid[int(np.argmax(accs))]  # ties pick the earliest grid entry
    return best, accs


def train_baseline(dataset: Dataset, class_name: str, config: BaselineConfig,
                   seed: int = 0) -> TrainedClassModel:
    """Cross-validate the regularization strength, then fit on all instances.

    The returned model plugs into the standard detection and evaluation path.
    """
    x, y = select_training_instances(dataset, class_name, config.kind)
    if len(set(y.tolist())) < 2:
        raise TrainingError(
            f"baseline for {class_name!r} selected a single-label instance set")
    best_reg, _ = cross_validate(x, y, config, seed)
    w, b = _fit_hinge(x, y, best_reg, config.learning_rate, config.iterations,
                      np.random.default_rng(seed ^ 1))
    if not (np.isfinite(w).all() and np.isfinite(b).all()):
        raise TrainingError(
            f"baseline for {class_name!r} diverged at every grid value")
    layout = Layout.from_arrays(x, np.ones(len(y)), np.ones(len(y), dtype=np.int64))
    loss_cfg = LossConfig(kind="hinge", use_score=False, epsilon=0.0, C=best_reg)
    v, _, _ = poly_bag_values(layout.x, layout.objectness, layout.starts,
                              layout.counts, w, b, loss_cfg)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == -1))
    final = data_loss(v, y, n_pos, n_neg, "hinge") + best_reg * float(np.sum(w * w))
    snapshot = TrainConfig(variant="linear", loss="hinge", use_score=False,
                           learning_rate=config.learning_rate,
                           iterations=config.iterations, batch_bags=len(y),
                           restarts=1, C=best_reg, epsilon=0.0, seed=seed)
    return TrainedClassModel(
        class_name=class_name,
        model=LinearModel(w[0].copy(), float(b[0])),
        restart_losses=[final],
        selected_restart=1,
        config=snapshot,
    )
