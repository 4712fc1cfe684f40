"""Model variants, losses, gradients and the detection confidence score.

Three classifier shapes are supported for a single class:

* linear: w.x + b
* polyhedral: max_j (w_j.x + b_j), a concave piecewise-linear boundary
* hidden-layer: omega.tanh(Wx + b) + beta, one tanh hidden layer of width L

Training minimizes, over bags i with labels Y_i in {-1, +1},

    2 - sum_i (Y_i / n_{Y_i}) * tanh(max_k score_{i,k}) + C * ||W||^2

where score_{i,k} optionally weights the raw classifier output by the
region's objectness, score = (s + eps) * raw, and n_1 / n_-1 are the
positive / negative bag counts of the full training set. A weighted hinge
alternative replaces the tanh data term. All ties in a max (instances or
hyperplanes) break toward the lowest index, and the subgradient flows only
through the winning instance and hyperplane.

The linear variant is evaluated internally as a one-hyperplane polyhedral
stack, so the two produce bit-identical numbers when J = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bags import FeatureBag
from .errors import ConfigError, TrainingError, ValidationError

LOSS_KINDS = ("tanh", "hinge")


@dataclass
class LinearModel:
    """Single hyperplane w.x + b."""

    w: np.ndarray
    b: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.b = float(self.b)

    @property
    def feature_dim(self) -> int:
        return self.w.shape[0]


@dataclass
class PolyhedralModel:
    """J hyperplanes aggregated by max; rows of ``w`` are the hyperplanes."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise ValidationError("polyhedral weights must be a (J, M) matrix")
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.b.shape[0] != self.w.shape[0]:
            raise ValidationError("polyhedral bias count must match hyperplane count")

    @property
    def num_hyperplanes(self) -> int:
        return self.w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w.shape[1]

    @property
    def hyperplanes(self) -> list[LinearModel]:
        return [LinearModel(self.w[j].copy(), float(self.b[j]))
                for j in range(self.num_hyperplanes)]


@dataclass
class HiddenLayerModel:
    """One tanh hidden layer of width L feeding a linear read-out."""

    w: np.ndarray
    b: np.ndarray
    omega: np.ndarray
    beta: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise ValidationError("hidden weights must be a (L, M) matrix")
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(-1)
        self.beta = float(self.beta)
        l = self.w.shape[0]
        if self.b.shape[0] != l or self.omega.shape[0] != l:
            raise ValidationError("hidden layer parameter shapes are inconsistent")

    @property
    def hidden_width(self) -> int:
        return self.w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w.shape[1]

    @property
    def parameter_count(self) -> int:
        l, m = self.w.shape
        return l * (m + 2) + 1


ModelVariant = LinearModel | PolyhedralModel | HiddenLayerModel


@dataclass(frozen=True)
class LossConfig:
    kind: str = "tanh"
    use_score: bool = True
    epsilon: float = 0.01
    C: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.C < 0:
            raise ConfigError("C must be >= 0")


def as_stack(model) -> tuple[np.ndarray, np.ndarray]:
    """View a linear/polyhedral model as a ((J, M), (J,)) weight stack."""
    if isinstance(model, LinearModel):
        return model.w[None, :], np.array([model.b], dtype=np.float64)
    return model.w, model.b


def _check_dim(model, m: int) -> None:
    if model.feature_dim != m:
        raise ValidationError(
            f"feature dimension mismatch: model expects {model.feature_dim}, got {m}"
        )


# ---------------------------------------------------------------------------
# array-level kernels (shared by the public ops and the training loop)
# ---------------------------------------------------------------------------

def weighted_scores(raw: np.ndarray, objectness: np.ndarray,
                    cfg: LossConfig) -> np.ndarray:
    if cfg.use_score:
        return (objectness + cfg.epsilon) * raw
    return raw


def segment_max_argmax(values: np.ndarray, starts: np.ndarray,
                       counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment max and first argmax over a concatenated value vector."""
    seg_max = np.maximum.reduceat(values, starts)
    is_max = values == np.repeat(seg_max, counts)
    candidates = np.where(is_max, np.arange(values.shape[0]), values.shape[0])
    seg_arg = np.minimum.reduceat(candidates, starts)
    # NaN segments (diverged parameters) match nothing; fall back to the first
    # instance so callers can finish the step and fail on the loss check
    return seg_max, np.where(seg_arg == values.shape[0], starts, seg_arg)


def poly_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance max over hyperplanes; ties pick the lowest index."""
    scores = x @ w.T + b  # (T, J)
    active = np.argmax(scores, axis=1)
    raw = np.take_along_axis(scores, active[:, None], axis=1)[:, 0]
    return raw, active


def hidden_raw(x, w, b, omega, beta) -> tuple[np.ndarray, np.ndarray]:
    """Raw scores of the hidden-layer model plus the hidden activations."""
    h = np.tanh(x @ w.T + b)
    return h @ omega + beta, h


def data_loss(v: np.ndarray, y: np.ndarray, n_pos: int, n_neg: int, kind: str) -> float:
    # per-sign sums are divided by their full-training-set counts, which both
    # keeps duplicated bags neutral and pins the tanh loss inside [0, 4]
    pos = y == 1
    if kind == "tanh":
        t = np.tanh(v)
        return 2.0 - float(np.sum(t[pos])) / n_pos + float(np.sum(t[~pos])) / n_neg
    hinge = np.maximum(0.0, 1.0 - y * v)
    return float(np.sum(hinge[pos])) / n_pos + float(np.sum(hinge[~pos])) / n_neg


def dloss_dv(v: np.ndarray, y: np.ndarray, n_pos: int, n_neg: int,
             kind: str) -> np.ndarray:
    weight = np.where(y == 1, 1.0 / n_pos, 1.0 / n_neg)
    if kind == "tanh":
        return -y * weight * (1.0 - np.tanh(v) ** 2)
    return np.where(1.0 - y * v > 0.0, -y * weight, 0.0)


def poly_bag_values(x, objectness, starts, counts, w, b, cfg):
    """(v, chosen instance, active hyperplane) per bag for a stacked model."""
    raw, active = poly_raw(x, w, b)
    weighted = weighted_scores(raw, objectness, cfg)
    v, chosen = segment_max_argmax(weighted, starts, counts)
    return v, chosen, active[chosen]


def poly_gradient_arrays(x, objectness, starts, counts, y, n_pos, n_neg, w, b, cfg):
    """Gradient of the regularized bag loss for a (J, M) stack."""
    v, chosen, active = poly_bag_values(x, objectness, starts, counts, w, b, cfg)
    g_v = dloss_dv(v, y, n_pos, n_neg, cfg.kind)
    if cfg.use_score:
        g_v = g_v * (objectness[chosen] + cfg.epsilon)
    x_c = x[chosen]
    g_w = 2.0 * cfg.C * w
    g_b = np.zeros(w.shape[0])
    for j in range(w.shape[0]):
        rows = active == j
        if np.any(rows):
            g_w[j] += g_v[rows] @ x_c[rows]
            g_b[j] = np.sum(g_v[rows])
    return g_w, g_b


def hidden_bag_values(x, objectness, starts, counts, w, b, omega, beta, cfg):
    raw, h = hidden_raw(x, w, b, omega, beta)
    weighted = weighted_scores(raw, objectness, cfg)
    v, chosen = segment_max_argmax(weighted, starts, counts)
    return v, chosen, h


def hidden_gradient_arrays(x, objectness, starts, counts, y, n_pos, n_neg,
                           w, b, omega, beta, cfg):
    v, chosen, h = hidden_bag_values(x, objectness, starts, counts, w, b,
                                     omega, beta, cfg)
    g_v = dloss_dv(v, y, n_pos, n_neg, cfg.kind)
    if cfg.use_score:
        g_v = g_v * (objectness[chosen] + cfg.epsilon)
    x_c = x[chosen]
    h_c = h[chosen]
    g_omega = h_c.T @ g_v
    g_beta = float(np.sum(g_v))
    u = g_v[:, None] * (omega * (1.0 - h_c * h_c))
    g_w = u.T @ x_c + 2.0 * cfg.C * w
    g_b = np.sum(u, axis=0)
    return g_w, g_b, g_omega, g_beta


class Layout:
    """Concatenated instance arrays for a list of bags."""

    __slots__ = ("x", "objectness", "starts", "counts")

    def __init__(self, bags):
        self.x = np.concatenate([bag.features for bag in bags], axis=0).astype(np.float64)
        self.objectness = np.concatenate(
            [bag.objectness for bag in bags]).astype(np.float64)
        self.counts = np.array([bag.num_regions for bag in bags], dtype=np.int64)
        self.starts = np.concatenate(([0], np.cumsum(self.counts)[:-1]))

    @classmethod
    def from_arrays(cls, x: np.ndarray, objectness: np.ndarray,
                    counts: np.ndarray) -> "Layout":
        layout = cls.__new__(cls)
        layout.x = np.asarray(x, dtype=np.float64)
        layout.objectness = np.asarray(objectness, dtype=np.float64)
        layout.counts = np.asarray(counts, dtype=np.int64)
        layout.starts = np.concatenate(([0], np.cumsum(layout.counts)[:-1]))
        return layout


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def instance_raw_scores(model: ModelVariant, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw classifier output and active hyperplane index for (T, M) features."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(model, x.shape[1])
    if isinstance(model, HiddenLayerModel):
        raw, _ = hidden_raw(x, model.w, model.b, model.omega, model.beta)
        return raw, np.zeros(x.shape[0], dtype=np.int64)
    w, b = as_stack(model)
    return poly_raw(x, w, b)


def forward(model: ModelVariant, x: np.ndarray) -> tuple[float, int]:
    """Evaluate one feature vector; returns (value, active hyperplane index)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    raw, active = instance_raw_scores(model, x)
    return float(raw[0]), int(active[0])


def weighted_instance_score(raw: float, objectness: float, epsilon: float,
                            use_score: bool) -> float:
    """Objectness weighting of a raw score: (s + eps) * raw, or raw unchanged."""
    if use_score:
        return (objectness + epsilon) * raw
    return raw


def bag_score(model: ModelVariant, bag: FeatureBag,
              cfg: LossConfig) -> tuple[float, int, int]:
    """Max weighted instance score of a bag.

    Returns (value, winning instance index, active hyperplane index); ties on
    the instance break toward the lowest region index.
    """
    if bag.num_regions < 1:
        raise ValidationError(f"bag {bag.image_id!r} is empty")
    raw, active = instance_raw_scores(model, bag.features)
    weighted = weighted_scores(raw, bag.objectness.astype(np.float64), cfg)
    k = int(np.flatnonzero(weighted == weighted.max())[0])
    return float(weighted[k]), k, int(active[k])


def _split_batch(batch):
    bags = [bag for bag, _ in batch]
    y = np.array([label for _, label in batch], dtype=np.int64)
    if not np.all(np.isin(y, (-1, 1))):
        raise ValidationError("bag labels must be -1 or +1")
    return bags, y


def _class_counts(y: np.ndarray, n_pos, n_neg) -> tuple[int, int]:
    if n_pos is None:
        n_pos = int(np.sum(y == 1))
    if n_neg is None:
        n_neg = int(np.sum(y == -1))
    if n_pos < 1 or n_neg < 1:
        raise TrainingError("training set must contain bags of both signs for the class")
    return n_pos, n_neg


def regularizer(model: ModelVariant) -> float:
    """||W||^2 over hyperplane weights (or the hidden W matrix); biases excluded."""
    if isinstance(model, HiddenLayerModel):
        return float(np.sum(model.w * model.w))
    w, _ = as_stack(model)
    return float(np.sum(w * w))


def batch_loss(model: ModelVariant, batch, cfg: LossConfig,
               n_pos: int | None = None, n_neg: int | None = None) -> float:
    """Regularized bag loss over a batch of (bag, label) pairs.

    ``n_pos`` / ``n_neg`` are the class counts of the full training set; when
    omitted they are taken from the batch itself, which must then contain at
    least one bag of each sign.
    """
    bags, y = _split_batch(batch)
    n_pos, n_neg = _class_counts(y, n_pos, n_neg)
    layout = Layout(bags)
    _check_dim(model, layout.x.shape[1])
    if isinstance(model, HiddenLayerModel):
        v, _, _ = hidden_bag_values(layout.x, layout.objectness, layout.starts,
                                    layout.counts, model.w, model.b,
                                    model.omega, model.beta, cfg)
    else:
        w, b = as_stack(model)
        v, _, _ = poly_bag_values(layout.x, layout.objectness, layout.starts,
                                  layout.counts, w, b, cfg)
    return data_loss(v, y, n_pos, n_neg, cfg.kind) + cfg.C * regularizer(model)


def batch_gradient(model: ModelVariant, batch, cfg: LossConfig,
                   n_pos: int | None = None,
                   n_neg: int | None = None) -> dict[str, np.ndarray]:
    """Exact gradient of batch_loss with each bag's winner held fixed.

    The data term touches only the winning instance of each bag (and, for
    polyhedral models, only its active hyperplane); the regularizer adds 2CW.
    Keys mirror the model's fields.
    """
    bags, y = _split_batch(batch)
    n_pos, n_neg = _class_counts(y, n_pos, n_neg)
    layout = Layout(bags)
    _check_dim(model, layout.x.shape[1])
    if isinstance(model, HiddenLayerModel):
        g_w, g_b, g_omega, g_beta = hidden_gradient_arrays(
            layout.x, layout.objectness, layout.starts, layout.counts, y,
            n_pos, n_neg, model.w, model.b, model.omega, model.beta, cfg)
        return {"w": g_w, "b": g_b, "omega": g_omega, "beta": g_beta}
    w, b = as_stack(model)
    g_w, g_b = poly_gradient_arrays(layout.x, layout.objectness, layout.starts,
                                    layout.counts, y, n_pos, n_neg, w, b, cfg)
    if isinstance(model, LinearModel):
        return {"w": g_w[0], "b": np.float64(g_b[0])}
    return {"w": g_w, "b": g_b}


def detection_confidence(model: ModelVariant, x: np.ndarray, objectness: float,
                         cfg: LossConfig) -> float:
    """Detection score tanh((s + eps) * raw); the sign always matches raw."""
    raw, _ = forward(model, x)
    return float(np.tanh(weighted_instance_score(raw, objectness, cfg.epsilon,
                                                 cfg.use_score)))


def region_confidences(model: ModelVariant, bag: FeatureBag,
                       cfg: LossConfig) -> np.ndarray:
    """Detection confidence of every region of a bag (vectorized)."""
    raw, _ = instance_raw_scores(model, bag.features)
    return np.tanh(weighted_scores(raw, bag.objectness.astype(np.float64), cfg))
