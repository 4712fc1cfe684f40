"""Gradient-descent training with random restarts and model persistence.

Each class is trained independently: ``restarts`` runs of plain constant-rate
gradient descent from small Gaussian initializations, keeping the run with
the lowest full-training-set loss. Restart ``rho`` draws everything from
``default_rng(seed ^ rho)``, so results are reproducible and nested in the
number of restarts. Classes and restarts are free of shared mutable state
and may run concurrently without changing any number.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bags import Dataset
from .errors import ConfigError, FormatError, TrainingError
from .models import (
    HiddenLayerModel,
    Layout,
    LinearModel,
    LossConfig,
    PolyhedralModel,
    data_loss,
    hidden_bag_values,
    hidden_gradient_arrays,
    poly_bag_values,
    poly_gradient_arrays,
)

VARIANTS = ("linear", "polyhedral", "hidden")

MIMX_MAGIC = b"MIMX"
MIMX_VERSION = 1
_VARIANT_TAGS = {"linear": 0, "polyhedral": 1, "hidden": 2}


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters for one run.

    ``iterations`` and ``batch_bags`` default per variant (300 iterations and
    batches of 1000 bags for linear, 3000 iterations for the other variants,
    batches of 500 bags for hidden-layer); leave them None to use those.
    """

    variant: str = "linear"
    hyperplanes: int = 2
    hidden_width: int = 16
    learning_rate: float = 0.01
    iterations: int | None = None
    batch_bags: int | None = None
    restarts: int = 12
    C: float = 1.0
    epsilon: float = 0.01
    loss: str = "tanh"
    use_score: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_bags is not None and self.batch_bags < 1:
            raise ConfigError("batch_bags must be >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.hyperplanes < 1 or self.hidden_width < 1:
            raise ConfigError("hyperplanes and hidden_width must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        self.loss_config()  # validates loss kind, epsilon, C

    def loss_config(self) -> LossConfig:
        return LossConfig(kind=self.loss, use_score=self.use_score,
                          epsilon=self.epsilon, C=self.C)

    def resolved(self) -> "TrainConfig":
        """Fill variant-dependent defaults for iterations and batch size."""
        iters = self.iterations
        if iters is None:
            iters = 300 if self.variant == "linear" else 3000
        batch = self.batch_bags
        if batch is None:
            batch = 500 if self.variant == "hidden" else 1000
        return replace(self, iterations=iters, batch_bags=batch)


@dataclass
class TrainedClassModel:
    """Best-restart model for one class plus the restart record."""

    class_name: str
    model: object
    restart_losses: list[float]
    selected_restart: int  # 1-based restart index
    config: TrainConfig


@dataclass
class MulticlassResult:
    """Per-class models plus the classes that could not be trained."""

    models: dict[str, TrainedClassModel] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


class _BatchSampler:
    """Epoch-shuffled bag batches, sampled without replacement per epoch."""

    def __init__(self, n_bags: int, batch: int, rng: np.random.Generator):
        self.n = n_bags
        self.batch = batch
        self.rng = rng
        self.perm = None
        self.pos = 0

    def next_ids(self) -> np.ndarray:
        if self.perm is None or self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        ids = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return ids


def _gather(layout: Layout, idx_per_bag, ids):
    rows = np.concatenate([idx_per_bag[i] for i in ids])
    counts = layout.counts[ids]
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return layout.x[rows], layout.objectness[rows], starts, counts


def _run_restart(layout: Layout, y: np.ndarray, n_pos: int, n_neg: int,
                 cfg: TrainConfig, rng: np.random.Generator):
    """One gradient-descent run; returns the raw parameter arrays."""
    m = layout.x.shape[1]
    loss_cfg = cfg.loss_config()
    lr = cfg.learning_rate
    n_bags = y.shape[0]
    full_batch = n_bags <= cfg.batch_bags
    sampler = None
    idx_per_bag = None
    if not full_batch:
        sampler = _BatchSampler(n_bags, cfg.batch_bags, rng)
        idx_per_bag = [np.arange(s, s + c) for s, c in zip(layout.starts, layout.counts)]

    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.variant == "hidden":
            l = cfg.hidden_width
            w = rng.normal(0.0, 0.01, (l, m))
            b = np.zeros(l)
            omega = rng.normal(0.0, 0.01, l)
            beta = 0.0
            for _ in range(cfg.iterations):
                if full_batch:
                    bx, bo, bs, bc, by = (layout.x, layout.objectness,
                                          layout.starts, layout.counts, y)
                else:
                    ids = sampler.next_ids()
                    bx, bo, bs, bc = _gather(layout, idx_per_bag, ids)
                    by = y[ids]
                g_w, g_b, g_omega, g_beta = hidden_gradient_arrays(
                    bx, bo, bs, bc, by, n_pos, n_neg, w, b, omega, beta, loss_cfg)
                w = w - lr * g_w
                b = b - lr * g_b
                omega = omega - lr * g_omega
                beta = beta - lr * g_beta
                if not np.isfinite(w).all():  # diverged; the loss check rejects it
                    break
            return w, b, omega, beta

        j = 1 if cfg.variant == "linear" else cfg.hyperplanes
        w = rng.normal(0.0, 0.01, (j, m))
        b = np.zeros(j)
        for _ in range(cfg.iterations):
            if full_batch:
                bx, bo, bs, bc, by = (layout.x, layout.objectness,
                                      layout.starts, layout.counts, y)
            else:
                ids = sampler.next_ids()
                bx, bo, bs, bc = _gather(layout, idx_per_bag, ids)
                by = y[ids]
            g_w, g_b = poly_gradient_arrays(bx, bo, bs, bc, by, n_pos, n_neg,
                                            w, b, loss_cfg)
            w = w - lr * g_w
            b = b - lr * g_b
            if not np.isfinite(w).all():
                break
        return w, b


def _full_loss(layout: Layout, y, n_pos, n_neg, cfg: TrainConfig, params) -> float:
    loss_cfg = cfg.loss_config()
    if cfg.variant == "hidden":
        w, b, omega, beta = params
        v, _, _ = hidden_bag_values(layout.x, layout.objectness, layout.starts,
                                    layout.counts, w, b, omega, beta, loss_cfg)
        reg = float(np.sum(w * w))
    else:
        w, b = params
        v, _, _ = poly_bag_values(layout.x, layout.objectness, layout.starts,
                                  layout.counts, w, b, loss_cfg)
        reg = float(np.sum(w * w))
    return data_loss(v, y, n_pos, n_neg, cfg.loss) + cfg.C * reg


def _params_finite(params) -> bool:
    return all(np.all(np.isfinite(p)) for p in params)


def _to_model(cfg: TrainConfig, params):
    if cfg.variant == "hidden":
        w, b, omega, beta = params
        return HiddenLayerModel(w, b, omega, beta)
    w, b = params
    if cfg.variant == "linear":
        return LinearModel(w[0].copy(), float(b[0]))
    return PolyhedralModel(w.copy(), b.copy())


def _train_on_layout(layout: Layout, y: np.ndarray, class_name: str,
                     config: TrainConfig) -> TrainedClassModel:
    cfg = config.resolved()
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == -1))
    if n_pos < 1 or n_neg < 1:
        raise TrainingError(
            f"class {class_name!r} needs bags of both signs "
            f"(got {n_pos} positive, {n_neg} negative)")
    losses: list[float] = []
    best = None
    best_loss = np.inf
    best_rho = 0
    for rho in range(1, cfg.restarts + 1):
        rng = np.random.default_rng(cfg.seed ^ rho)
        params = _run_restart(layout, y, n_pos, n_neg, cfg, rng)
        if not _params_finite(params):
            losses.append(float("nan"))
            continue
        loss = _full_loss(layout, y, n_pos, n_neg, cfg, params)
        if not np.isfinite(loss):
            losses.append(float("nan"))
            continue
        losses.append(float(loss))
        if loss < best_loss:
            best_loss = loss
            best = params
            best_rho = rho
    if best is None:
        raise TrainingError(f"class {class_name!r}: every restart diverged")
    return TrainedClassModel(
        class_name=class_name,
        model=_to_model(cfg, best),
        restart_losses=losses,
        selected_restart=best_rho,
        config=cfg,
    )


def train_class(dataset: Dataset, class_name: str, config: TrainConfig) -> TrainedClassModel:
    """Train one class with random restarts; deterministic in (dataset, config)."""
    y = dataset.labels_for(class_name).astype(np.int64)
    return _train_on_layout(Layout(dataset.bags), y, class_name, config)


def train_multiclass(dataset: Dataset, config: TrainConfig,
                     jobs: int = 1) -> MulticlassResult:
    """Train every class independently; failing classes are reported, not fatal.

    The result is identical whatever ``jobs`` is: each class's training only
    reads shared immutable arrays.
    """
    layout = Layout(dataset.bags)
    per_class = {cls: dataset.labels_for(cls).astype(np.int64)
                 for cls in dataset.class_names}
    result = MulticlassResult()

    def work(cls: str):
        try:
            return cls, _train_on_layout(layout, per_class[cls], cls, config), None
        except TrainingError as exc:
            return cls, None, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, dataset.class_names))
    else:
        outcomes = [work(cls) for cls in dataset.class_names]
    for cls, trained, err in outcomes:
        if trained is not None:
            result.models[cls] = trained
        else:
            result.failures[cls] = err
    return result


# ---------------------------------------------------------------------------
# MIMX model sidecar
# ---------------------------------------------------------------------------

def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _model_arrays(model) -> tuple[int, int, int, list[np.ndarray]]:
    if isinstance(model, LinearModel):
        return _VARIANT_TAGS["linear"], 1, model.feature_dim, [model.w[None, :],
                                                               np.array([model.b])]
    if isinstance(model, PolyhedralModel):
        return (_VARIANT_TAGS["polyhedral"], model.num_hyperplanes,
                model.feature_dim, [model.w, model.b])
    return (_VARIANT_TAGS["hidden"], model.hidden_width, model.feature_dim,
            [model.w, model.b, model.omega, np.array([model.beta])])


def save_models(path, trained: dict[str, TrainedClassModel]) -> None:
    """Write a MIMX v1 bundle: f32 parameters plus a JSON metadata trailer."""
    parts = [MIMX_MAGIC, struct.pack("<II", MIMX_VERSION, len(trained))]
    meta = {"classes": {}}
    for name, tcm in trained.items():
        tag, rows, m, arrays = _model_arrays(tcm.model)
        parts.append(_encode_string(name))
        parts.append(struct.pack("<BII", tag, rows, m))
        for arr in arrays:
            parts.append(np.asarray(arr, dtype="<f4").tobytes())
        meta["classes"][name] = {
            "restart_losses": [None if np.isnan(v) else v for v in tcm.restart_losses],
            "selected_restart": tcm.selected_restart,
            "config": asdict(tcm.config),
        }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_models(path) -> dict[str, TrainedClassModel]:
    """Read a MIMX v1 bundle. Parameters come back float32-quantized."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MIMX_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MIMX_MAGIC!r}")
    pos = 4
    version, n_classes = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != MIMX_VERSION:
        raise FormatError(f"{path}: unsupported MIMX version {version}")

    entries = []
    for _ in range(n_classes):
        (slen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + slen].decode("utf-8")
        pos += slen
        tag, rows, m = struct.unpack_from("<BII", data, pos)
        pos += 9
        if tag == _VARIANT_TAGS["hidden"]:
            count = rows * m + rows + rows + 1
        else:
            count = rows * m + rows
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float64)
        pos += 4 * count
        if tag == _VARIANT_TAGS["linear"]:
            model = LinearModel(flat[:m], float(flat[m]))
        elif tag == _VARIANT_TAGS["polyhedral"]:
            model = PolyhedralModel(flat[:rows * m].reshape(rows, m), flat[rows * m:])
        elif tag == _VARIANT_TAGS["hidden"]:
            w = flat[:rows * m].reshape(rows, m)
            rest = flat[rows * m:]
            model = HiddenLayerModel(w, rest[:rows], rest[rows:2 * rows], float(rest[2 * rows]))
        else:
            raise FormatError(f"{path}: unknown variant tag {tag}")
        entries.append((name, model))

    (blob_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + blob_len].decode("utf-8"))

    out: dict[str, TrainedClassModel] = {}
    for name, model in entries:
        info = meta["classes"][name]
        cfg = TrainConfig(**info["config"])
        losses = [float("nan") if v is None else v for v in info["restart_losses"]]
        out[name] = TrainedClassModel(
            class_name=name,
            model=model,
            restart_losses=losses,
            selected_restart=info["selected_restart"],
            config=cfg,
        )
    return out
