"""Feature-bag data model and the FBAG v1 binary container.

A bag is one image: K candidate regions, each carrying box geometry, a
class-agnostic objectness score in [0, 1] and an M-dimensional feature
vector, plus per-class image-level labels in {-1, +1}. Datasets are
immutable after load and safe to share across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

FBAG_MAGIC = b"FBAG"
FBAG_VERSION = 1


@dataclass(frozen=True)
class RegionInstance:
    """One candidate region of an image."""

    box: tuple[float, float, float, float]
    objectness: float
    features: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, RegionInstance):
            return NotImplemented
        return (
            self.box == other.box
            and self.objectness == other.objectness
            and np.array_equal(self.features, other.features)
        )


class FeatureBag:
    """All regions of one image plus its per-class labels.

    Regions are stored as packed arrays: ``boxes`` is (K, 4) float32 with
    rows (x1, y1, x2, y2), ``objectness`` is (K,) float32 and ``features``
    is (K, M) float32. ``labels`` is (num_classes,) int8 aligned with the
    owning dataset's ``class_names``.
    """

    __slots__ = ("image_id", "boxes", "objectness", "features", "labels")

    def __init__(self, image_id, boxes, objectness, features, labels):
        self.image_id = str(image_id)
        self.boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
        self.objectness = np.asarray(objectness, dtype=np.float32).reshape(-1)
        self.features = np.asarray(features, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int8).reshape(-1)

    @property
    def num_regions(self) -> int:
        return self.boxes.shape[0]

    @property
    def regions(self) -> list[RegionInstance]:
        """Materialize the per-region view (convenience, not the hot path)."""
        return [
            RegionInstance(tuple(float(v) for v in self.boxes[k]),
                           float(self.objectness[k]), self.features[k])
            for k in range(self.num_regions)
        ]

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.objectness, other.objectness)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def __repr__(self):
        return f"FeatureBag({self.image_id!r}, K={self.num_regions})"


@dataclass
class Dataset:
    """A named collection of feature bags with optional box ground truth.

    ``ground_truth`` maps image id to a list of ``(class_name, box)`` pairs
    and is only needed for evaluation; training ignores it.
    """

    name: str
    feature_dim: int
    class_names: list[str]
    bags: list[FeatureBag]
    ground_truth: dict[str, list[tuple[str, tuple[float, float, float, float]]]] = field(
        default_factory=dict
    )

    def __post_init__(self):
        validate_dataset(self)

    @property
    def num_bags(self) -> int:
        return len(self.bags)

    def class_index(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise KeyError(f"unknown class {class_name!r}") from None

    def labels_for(self, class_name: str) -> np.ndarray:
        """Per-bag labels for one class, as an int8 vector of -1/+1."""
        c = self.class_index(class_name)
        return np.array([bag.labels[c] for bag in self.bags], dtype=np.int8)

    def class_counts(self, class_name: str) -> tuple[int, int]:
        """(positive, negative) bag counts for one class."""
        y = self.labels_for(class_name)
        return int(np.sum(y == 1)), int(np.sum(y == -1))

    def gt_boxes(self, class_name: str) -> dict[str, np.ndarray]:
        """Ground-truth boxes of one class, keyed by image id. (n, 4) float arrays."""
        out: dict[str, np.ndarray] = {}
        for image_id, records in self.ground_truth.items():
            boxes = [box for cls, box in records if cls == class_name]
            if boxes:
                out[image_id] = np.asarray(boxes, dtype=np.float64)
        return out

    def __eq__(self, other):
        # name is provenance (set from the source path on load), not content
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.class_names == other.class_names
            and self.bags == other.bags
            and self.ground_truth == other.ground_truth
        )


def validate_dataset(dataset: Dataset) -> None:
    """Check every structural invariant; raise ValidationError on the first hit."""
    if dataset.num_bags < 1:
        raise ValidationError("dataset must contain at least one bag")
    if not dataset.class_names:
        raise ValidationError("dataset must declare at least one class")
    if len(set(dataset.class_names)) != len(dataset.class_names):
        raise ValidationError("duplicate class names")
    m = int(dataset.feature_dim)
    if m < 1:
        raise ValidationError("feature dimension must be >= 1")
    n_classes = len(dataset.class_names)
    for bag in dataset.bags:
        k = bag.num_regions
        if k < 1:
            raise ValidationError(f"bag {bag.image_id!r} has no regions")
        if bag.features.shape != (k, m):
            raise ValidationError(
                f"bag {bag.image_id!r}: feature block has shape {bag.features.shape}, "
                f"expected ({k}, {m})"
            )
        if bag.objectness.shape != (k,) or bag.boxes.shape != (k, 4):
            raise ValidationError(f"bag {bag.image_id!r}: region arrays are inconsistent")
        if bag.labels.shape != (n_classes,):
            raise ValidationError(
                f"bag {bag.image_id!r}: expected {n_classes} labels, got {bag.labels.shape[0]}"
            )
        if not np.all(np.isin(bag.labels, (-1, 1))):
            raise ValidationError(f"bag {bag.image_id!r}: labels must be -1 or +1")
        if np.any(bag.objectness < 0.0) or np.any(bag.objectness > 1.0):
            raise ValidationError(f"bag {bag.image_id!r}: objectness outside [0, 1]")
        if np.any(bag.boxes[:, 0] >= bag.boxes[:, 2]) or np.any(bag.boxes[:, 1] >= bag.boxes[:, 3]):
            raise ValidationError(f"bag {bag.image_id!r}: degenerate box (needs x1<x2, y1<y2)")
    if len({bag.image_id for bag in dataset.bags}) != dataset.num_bags:
        raise ValidationError("duplicate image ids")
    known = set(dataset.class_names)
    for image_id, records in dataset.ground_truth.items():
        for cls, box in records:
            if cls not in known:
                raise ValidationError(f"ground truth references unknown class {cls!r}")
            x1, y1, x2, y2 = box
            if not (x1 < x2 and y1 < y2):
                raise ValidationError(f"ground truth box for {image_id!r} is degenerate")


class _Reader:
    """Cursor over a byte buffer with typed little-endian reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValidationError("file truncated: record extends past end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        n = self.u16()
        return self.take(n).decode("utf-8")

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()


def load_dataset(path) -> Dataset:
    """Read an FBAG v1 file and return a validated Dataset."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FBAG_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {FBAG_MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    version = r.u32()
    if version != FBAG_VERSION:
        raise FormatError(f"{path}: unsupported FBAG version {version}")
    m = r.u32()
    n_classes = r.u32()
    n_images = r.u32()
    has_gt = r.u8()
    if has_gt not in (0, 1):
        raise FormatError(f"{path}: has_ground_truth flag must be 0 or 1, got {has_gt}")
    class_names = [r.string() for _ in range(n_classes)]

    bags = []
    for _ in range(n_images):
        image_id = r.string()
        k = r.u32()
        labels = np.frombuffer(r.take(n_classes), dtype=np.int8).copy()
        block = r.f32_array(k * (4 + 1 + m)).reshape(k, 4 + 1 + m)
        bags.append(
            FeatureBag(
                image_id,
                boxes=block[:, 0:4],
                objectness=block[:, 4],
                features=np.ascontiguousarray(block[:, 5:]),
                labels=labels,
            )
        )

    ground_truth: dict[str, list] = {}
    if has_gt:
        n_gt = r.u32()
        for _ in range(n_gt):
            image_id = r.string()
            cls_idx = r.u16()
            if cls_idx >= n_classes:
                raise ValidationError(f"{path}: ground truth class index {cls_idx} out of range")
            box = tuple(float(v) for v in r.f32_array(4))
            ground_truth.setdefault(image_id, []).append((class_names[cls_idx], box))
    if r.pos != len(data):
        raise ValidationError(f"{path}: {len(data) - r.pos} trailing bytes after last record")

    return Dataset(
        name=str(path),
        feature_dim=m,
        class_names=class_names,
        bags=bags,
        ground_truth=ground_truth,
    )


def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"string too long for format: {s[:32]!r}...")
    return struct.pack("<H", len(raw)) + raw


def dataset_bytes(dataset: Dataset) -> bytes:
    """Serialize a dataset to FBAG v1 bytes."""
    validate_dataset(dataset)
    parts = [
        FBAG_MAGIC,
        struct.pack(
            "<IIIIB",
            FBAG_VERSION,
            dataset.feature_dim,
            len(dataset.class_names),
            dataset.num_bags,
            1 if dataset.ground_truth else 0,
        ),
    ]
    parts.extend(_encode_string(name) for name in dataset.class_names)
    for bag in dataset.bags:
        parts.append(_encode_string(bag.image_id))
        parts.append(struct.pack("<I", bag.num_regions))
        parts.append(bag.labels.astype("<i1").tobytes())
        block = np.concatenate(
            [bag.boxes, bag.objectness[:, None], bag.features], axis=1
        ).astype("<f4")
        parts.append(block.tobytes())
    if dataset.ground_truth:
        records = [
            (image_id, cls, box)
            for image_id, recs in dataset.ground_truth.items()
            for cls, box in recs
        ]
        parts.append(struct.pack("<I", len(records)))
        for image_id, cls, box in records:
            parts.append(_encode_string(image_id))
            parts.append(struct.pack("<H", dataset.class_index(cls)))
            parts.append(np.asarray(box, dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(dataset: Dataset, path) -> None:
    """Emit FBAG v1 such that load_dataset(path) reproduces the dataset."""
    payload = dataset_bytes(dataset)
    with open(path, "wb") as fh:
        fh.write(payload)
