"""Planted-model synthetic datasets for oracle-based verification.

The generator plants known separating hyperplanes per class: a single
zero-bias hyperplane for one-mode classes, or +/- pairs of orthonormal
directions sharing a negative bias for multi-mode classes (a category no
single hyperplane can cover). Witness instances sit in one hyperplane's
positive half-space by at least the configured margin; every other instance
sits at least the margin inside the negative side of all planted hyperplanes.
The planted classifier therefore separates bags exactly and instance labels
are known. Region boxes are laid out on a per-image grid so distinct boxes
never overlap, which keeps detection matching unambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bags import Dataset, FeatureBag
from .errors import ConfigError
from .models import LinearModel, PolyhedralModel

_CELL = 64.0  # grid cell side, in pixels


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the planted generator.

    ``modes`` is the number of planted hyperplanes per class. ``witness_rate``
    sets the fraction of regions in a positive bag that are true positives.
    ``objectness_correlation`` in [0, 1] shifts witness objectness up and
    non-witness objectness down; 0 makes both uniform on [0, 1].
    """

    feature_dim: int = 32
    num_pos: int = 100
    num_neg: int = 100
    k_min: int = 30
    k_max: int = 30
    margin: float = 1.0
    modes: int = 1
    witness_rate: float = 0.2
    objectness_correlation: float = 0.8
    noise_sigma: float = 1.0
    decoy_rate: float = 0.0
    class_names: tuple[str, ...] = ("object",)
    name: str = "synthetic"

    def validate(self) -> None:
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not self.class_names or any(not c for c in self.class_names):
            raise ConfigError("class_names must be non-empty names")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class_names must be distinct")
        if self.modes < 1:
            raise ConfigError("modes must be >= 1")
        if not 0.0 < self.witness_rate <= 1.0:
            raise ConfigError("witness_rate must lie in (0, 1]")
        if not 0.0 <= self.objectness_correlation <= 1.0:
            raise ConfigError("objectness_correlation must lie in [0, 1]")
        if self.num_pos < 1 or self.num_neg < 1:
            raise ConfigError("need at least one positive and one negative bag per class")
        if self.k_min < 1 or self.k_min > self.k_max:
            raise ConfigError("k range must satisfy 1 <= k_min <= k_max")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.decoy_rate < 1.0:
            raise ConfigError("decoy_rate must lie in [0, 1)")
        dirs = len(self.class_names) * self._dirs_per_class()
        if dirs > self.feature_dim:
            raise ConfigError(
                f"feature_dim={self.feature_dim} too small for "
                f"{len(self.class_names)} classes x {self.modes} modes ({dirs} directions)"
            )

    def _dirs_per_class(self) -> int:
        # one direction per +/- hyperplane pair, plus one decoy direction if used
        return (self.modes + 1) // 2 + (1 if self.decoy_rate > 0 else 0)


@dataclass
class PlantedTruth:
    """The generator's secret: separators per class and per-instance labels.

    ``instance_labels[class]`` is aligned with ``Dataset.bags``; each entry is
    an int8 vector over that bag's regions with +1 marking witnesses.
    """

    separators: dict[str, list[tuple[np.ndarray, float]]]
    instance_labels: dict[str, list[np.ndarray]] = field(default_factory=dict)
    decoy_directions: dict[str, np.ndarray] = field(default_factory=dict)

    def oracle_model(self, class_name: str) -> PolyhedralModel:
        """The planted classifier for one class, as a polyhedral model."""
        planes = self.separators[class_name]
        w = np.stack([p[0] for p in planes])
        b = np.array([p[1] for p in planes], dtype=np.float64)
        return PolyhedralModel(w, b)

    def single_hyperplane_model(self, class_name: str, index: int = 0) -> LinearModel:
        """One planted hyperplane used alone."""
        w, b = self.separators[class_name][index]
        return LinearModel(w.copy(), float(b))


def _grid_boxes(rng: np.random.Generator, k: int) -> np.ndarray:
    """k non-overlapping boxes, one per cell of a sqrt(k) x sqrt(k) grid."""
    g = math.ceil(math.sqrt(k))
    cols = np.arange(k) % g
    rows = np.arange(k) // g
    x1 = cols * _CELL + rng.uniform(2.0, 10.0, size=k)
    y1 = rows * _CELL + rng.uniform(2.0, 10.0, size=k)
    w = rng.uniform(30.0, 50.0, size=k)
    h = rng.uniform(30.0, 50.0, size=k)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def generate_synthetic(
    config: SyntheticConfig, seed: int, truth: PlantedTruth | None = None
) -> tuple[Dataset, PlantedTruth]:
    """Build a planted dataset; deterministic for fixed (config, seed).

    Pass ``truth`` from a previous call to draw a fresh dataset governed by
    the same planted separators (e.g. a transfer-evaluation target).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    m = config.feature_dim
    gamma = config.margin
    n_classes = len(config.class_names)
    dirs_per_class = config._dirs_per_class()
    sep_dirs = (config.modes + 1) // 2
    has_decoy = config.decoy_rate > 0
    n_dirs = n_classes * dirs_per_class

    # Single-mode classes use a zero-bias hyperplane with witness projections
    # in [1.05g, 3g] and everything else in [-3g, -1.05g]. Multi-mode classes
    # plant +/- pairs of hyperplanes with bias -2g: witnesses sit at
    # +/-[3.05g, 5g] along their mode's direction while everything else stays
    # inside the [-0.95g, 0.95g] middle band, which is a margin of at least g
    # on the negative side of every hyperplane simultaneously.
    bias = 0.0 if config.modes == 1 else -2.0 * gamma

    if truth is None:
        basis, _ = np.linalg.qr(rng.standard_normal((m, n_dirs)))
        basis = basis.T  # (n_dirs, m) orthonormal rows
        separators: dict[str, list[tuple[np.ndarray, float]]] = {}
        decoy_directions: dict[str, np.ndarray] = {}
        for c, cls in enumerate(config.class_names):
            planes = []
            for j in range(config.modes):
                u = basis[c * dirs_per_class + j // 2]
                sign = 1.0 if j % 2 == 0 else -1.0
                planes.append((sign * u, bias))
            separators[cls] = planes
            if has_decoy:
                decoy_directions[cls] = basis[c * dirs_per_class + sep_dirs]
    else:
        separators = truth.separators
        decoy_directions = truth.decoy_directions
        if sorted(separators) != sorted(config.class_names):
            raise ConfigError("provided truth does not cover the configured classes")
        if any(len(p) != config.modes for p in separators.values()):
            raise ConfigError("provided truth has a different number of modes")
        if has_decoy and sorted(decoy_directions) != sorted(config.class_names):
            raise ConfigError("provided truth carries no decoy directions")
        rows = []
        for c, cls in enumerate(config.class_names):
            rows.extend(separators[cls][2 * d][0] for d in range(sep_dirs))
            if has_decoy:
                rows.append(decoy_directions[cls])
        basis = np.stack(rows)

    # signed projection target for a witness of hyperplane j, in direction units
    def witness_proj(j: int, t: np.ndarray) -> np.ndarray:
        return t if j % 2 == 0 else -t

    bags: list[FeatureBag] = []
    ground_truth: dict[str, list] = {}
    instance_labels: dict[str, list[np.ndarray]] = {cls: [] for cls in config.class_names}

    if config.modes == 1:
        background_band = (-3.0 * gamma, -1.05 * gamma)
        witness_band = (1.05 * gamma, 3.0 * gamma)
    else:
        # bands stay well clear of the margin so float32 rounding cannot cross
        background_band = (-0.95 * gamma, 0.95 * gamma)
        witness_band = (3.05 * gamma, 5.0 * gamma)

    def emit_bag(image_id: str, positive_class: int | None, mode: int | None) -> None:
        k = int(rng.integers(config.k_min, config.k_max + 1))
        proj = rng.uniform(background_band[0], background_band[1], size=(k, n_dirs))
        witness_mask = np.zeros(k, dtype=bool)
        if positive_class is not None:
            n_wit = math.ceil(config.witness_rate * k)
            order = rng.permutation(k)
            slots = order[:n_wit]
            witness_mask[slots] = True
            t = rng.uniform(witness_band[0], witness_band[1], size=n_wit)
            d_col = positive_class * dirs_per_class + mode // 2
            proj[slots, d_col] = witness_proj(mode, t)
            if has_decoy:
                n_decoy = min(round(config.decoy_rate * k), k - n_wit)
                decoy_slots = order[n_wit:n_wit + n_decoy]
                decoy_col = positive_class * dirs_per_class + sep_dirs
                proj[decoy_slots, decoy_col] = rng.uniform(
                    witness_band[0], witness_band[1], size=n_decoy)
        noise = rng.standard_normal((k, m)) * config.noise_sigma
        noise -= (noise @ basis.T) @ basis  # keep noise orthogonal to planted dirs
        features = proj @ basis + noise

        corr = config.objectness_correlation
        objectness = rng.uniform(0.0, 1.0 - 0.5 * corr, size=k)
        if positive_class is not None and witness_mask.any():
            objectness[witness_mask] = rng.uniform(0.5 * corr, 1.0, size=int(witness_mask.sum()))

        boxes = _grid_boxes(rng, k).astype(np.float32)
        labels = np.full(n_classes, -1, dtype=np.int8)
        if positive_class is not None:
            labels[positive_class] = 1
        bags.append(FeatureBag(image_id, boxes, objectness.astype(np.float32),
                               features.astype(np.float32), labels))

        for c, cls in enumerate(config.class_names):
            inst = np.full(k, -1, dtype=np.int8)
            if c == positive_class:
                inst[witness_mask] = 1
            instance_labels[cls].append(inst)
        if positive_class is not None:
            cls = config.class_names[positive_class]
            recs = ground_truth.setdefault(image_id, [])
            for slot in np.flatnonzero(witness_mask):
                recs.append((cls, tuple(float(v) for v in boxes[slot])))

    for c, cls in enumerate(config.class_names):
        for i in range(config.num_pos):
            emit_bag(f"pos_{cls}_{i:04d}", c, i % config.modes)
    for i in range(config.num_neg):
        emit_bag(f"neg_{i:04d}", None, None)

    dataset = Dataset(
        name=config.name,
        feature_dim=m,
        class_names=list(config.class_names),
        bags=bags,
        ground_truth=ground_truth,
    )
    return dataset, PlantedTruth(separators=separators,
                                 instance_labels=instance_labels,
                                 decoy_directions=decoy_directions)
