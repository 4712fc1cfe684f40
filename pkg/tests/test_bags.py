"""FBAG container and synthetic generator tests."""

import struct

import numpy as np
import pytest

from maxmil.bags import (
    Dataset,
    FeatureBag,
    dataset_bytes,
    load_dataset,
    write_dataset,
)
from maxmil.errors import ConfigError, FormatError, ValidationError
from maxmil.synthetic import SyntheticConfig, generate_synthetic


def _bag(image_id="img0", k=1, m=2, labels=(1,), seed=0):
    rng = np.random.default_rng(seed)
    boxes = np.stack([
        np.full(k, 0.0), np.full(k, 0.0),
        rng.uniform(1.0, 9.0, k), rng.uniform(1.0, 9.0, k)], axis=1)
    return FeatureBag(image_id, boxes, rng.uniform(0, 1, k),
                      rng.standard_normal((k, m)), np.array(labels, dtype=np.int8))


def _tiny_dataset():
    return Dataset(name="tiny", feature_dim=2, class_names=["object"],
                   bags=[_bag()])


def test_minimal_file_roundtrip(tmp_path):
    path = tmp_path / "tiny.fbag"
    write_dataset(_tiny_dataset(), path)
    loaded = load_dataset(path)
    assert loaded.num_bags == 1
    assert loaded.bags[0].num_regions == 1
    assert loaded.feature_dim == 2


def test_header_counts():
    ds = Dataset(name="d", feature_dim=2, class_names=["a", "b"],
                 bags=[_bag(f"img{i}", labels=(1, -1), seed=i) for i in range(3)])
    raw = dataset_bytes(ds)
    version, m, n_classes, n_images, has_gt = struct.unpack_from("<IIIIB", raw, 4)
    assert (version, m, n_classes, n_images, has_gt) == (1, 2, 2, 3, 0)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.fbag"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_dataset(path)


def test_bad_version(tmp_path):
    raw = bytearray(dataset_bytes(_tiny_dataset()))
    struct.pack_into("<I", raw, 4, 9)
    path = tmp_path / "v9.fbag"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_dataset(path)


def test_truncated_feature_block_is_validation_error(tmp_path):
    # header declares M=2048 but the single region carries 2047 floats
    m = 2048
    parts = [b"FBAG", struct.pack("<IIIIB", 1, m, 1, 1, 0)]
    parts.append(struct.pack("<H", 3) + b"cls")
    parts.append(struct.pack("<H", 4) + b"img0")
    parts.append(struct.pack("<I", 1))
    parts.append(struct.pack("<b", 1))
    region = np.zeros(4 + 1 + m - 1, dtype="<f4")
    region[2] = 5.0
    region[3] = 5.0
    parts.append(region.tobytes())
    path = tmp_path / "short.fbag"
    path.write_bytes(b"".join(parts))
    with pytest.raises(ValidationError):
        load_dataset(path)


def test_objectness_out_of_range_rejected(tmp_path):
    ds = _tiny_dataset()
    raw = bytearray(dataset_bytes(ds))
    # objectness is the 5th f32 of the region record; patch it above 1
    offset = len(raw) - (4 + 1 + 2) * 4 + 4 * 4
    struct.pack_into("<f", raw, offset, 1.5)
    path = tmp_path / "bad_obj.fbag"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        load_dataset(path)


def test_bad_label_rejected():
    bag = _bag()
    bag.labels = np.array([0], dtype=np.int8)
    with pytest.raises(ValidationError):
        Dataset(name="d", feature_dim=2, class_names=["object"], bags=[bag])


def test_degenerate_box_rejected():
    bag = _bag()
    bag.boxes = np.array([[5.0, 0.0, 5.0, 3.0]], dtype=np.float32)
    with pytest.raises(ValidationError):
        Dataset(name="d", feature_dim=2, class_names=["object"], bags=[bag])


def test_feature_width_mismatch_rejected():
    bag = _bag(m=3)
    with pytest.raises(ValidationError):
        Dataset(name="d", feature_dim=2, class_names=["object"], bags=[bag])


def test_empty_ground_truth_writes_zero_records():
    raw = dataset_bytes(_tiny_dataset())
    has_gt = raw[4 + 16]
    assert has_gt == 0


def test_region_view_matches_arrays():
    bag = _bag(k=3, m=2, seed=5)
    regions = bag.regions
    assert len(regions) == 3
    for k, region in enumerate(regions):
        assert region.box == tuple(float(v) for v in bag.boxes[k])
        assert region.objectness == float(bag.objectness[k])
        assert np.array_equal(region.features, bag.features[k])
    assert regions[0] == regions[0]
    assert regions[0] != regions[1]


def test_unwritable_path_is_io_error(tmp_path):
    with pytest.raises(OSError):
        write_dataset(_tiny_dataset(), tmp_path / "missing_dir" / "out.fbag")


def test_synthetic_roundtrip_identity(tmp_path):
    cfg = SyntheticConfig(feature_dim=6, num_pos=4, num_neg=3, k_min=2, k_max=5)
    ds, _ = generate_synthetic(cfg, 7)
    path = tmp_path / "synth.fbag"
    write_dataset(ds, path)
    loaded = load_dataset(path)
    assert loaded == ds
    # byte-level: re-emission reproduces the file exactly
    assert dataset_bytes(loaded) == path.read_bytes()


def test_fuzzed_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    for trial in range(20):
        m = int(rng.integers(1, 7))
        n_classes = int(rng.integers(1, 4))
        names = [f"c{j}" for j in range(n_classes)]
        bags = []
        for i in range(int(rng.integers(1, 6))):
            k = int(rng.integers(1, 5))
            labels = rng.choice([-1, 1], size=n_classes)
            if trial % 2:
                labels[0] = 1
            bags.append(_bag(f"im{i}", k=k, m=m, labels=labels, seed=100 * trial + i))
        gt = {}
        if rng.random() < 0.5:
            box = tuple(float(np.float32(v)) for v in (1.0, 2.0, 3.5, 4.5))
            gt[bags[0].image_id] = [(names[0], box)]
        ds = Dataset(name="fuzz", feature_dim=m, class_names=names, bags=bags,
                     ground_truth=gt)
        payload = dataset_bytes(ds)
        path = tmp_path / f"fuzz{trial}.fbag"
        path.write_bytes(payload)
        loaded = load_dataset(path)
        assert dataset_bytes(loaded) == payload
        assert loaded == ds


class TestSyntheticGenerator:
    CFG = SyntheticConfig(feature_dim=10, num_pos=10, num_neg=10, k_min=4, k_max=8,
                          margin=1.0, modes=1, witness_rate=0.3)

    def test_deterministic_bytes(self):
        a, _ = generate_synthetic(self.CFG, 5)
        b, _ = generate_synthetic(self.CFG, 5)
        assert dataset_bytes(a) == dataset_bytes(b)

    def test_different_seed_differs(self):
        a, _ = generate_synthetic(self.CFG, 5)
        b, _ = generate_synthetic(self.CFG, 6)
        assert dataset_bytes(a) != dataset_bytes(b)

    def test_bag_label_matches_instance_labels(self):
        ds, truth = generate_synthetic(self.CFG, 3)
        for bag, inst in zip(ds.bags, truth.instance_labels["object"]):
            assert bag.labels[0] == (1 if np.any(inst == 1) else -1)

    def test_negative_bags_stay_below_margin(self):
        ds, truth = generate_synthetic(
            SyntheticConfig(feature_dim=8, num_pos=10, num_neg=10, k_min=3,
                            k_max=6, margin=1.0), 9)
        planes = truth.separators["object"]
        for bag in ds.bags:
            margins = np.max(
                np.stack([bag.features.astype(np.float64) @ w + b for w, b in planes]),
                axis=0)
            if bag.labels[0] == -1:
                assert np.all(margins <= -1.0)
            else:
                assert np.max(margins) >= 1.0

    def test_witness_count_respects_rate(self):
        ds, truth = generate_synthetic(self.CFG, 4)
        for bag, inst in zip(ds.bags, truth.instance_labels["object"]):
            if bag.labels[0] == 1:
                need = int(np.ceil(self.CFG.witness_rate * bag.num_regions))
                assert int(np.sum(inst == 1)) >= need

    def test_witness_rate_one_marks_every_instance(self):
        cfg = SyntheticConfig(feature_dim=6, num_pos=5, num_neg=5, k_min=3,
                              k_max=5, witness_rate=1.0)
        ds, truth = generate_synthetic(cfg, 2)
        for bag, inst in zip(ds.bags, truth.instance_labels["object"]):
            if bag.labels[0] == 1:
                assert np.all(inst == 1)

    def test_boxes_within_a_bag_never_overlap(self):
        from maxmil.detect import iou

        ds, _ = generate_synthetic(self.CFG, 8)
        for bag in ds.bags[:6]:
            boxes = [tuple(map(float, b)) for b in bag.boxes]
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert iou(boxes[i], boxes[j]) == 0.0

    def test_ground_truth_boxes_are_witness_boxes(self):
        ds, truth = generate_synthetic(self.CFG, 6)
        for bag, inst in zip(ds.bags, truth.instance_labels["object"]):
            expected = {tuple(map(float, bag.boxes[k]))
                        for k in np.flatnonzero(inst == 1)}
            actual = {box for cls, box in ds.ground_truth.get(bag.image_id, [])}
            assert actual == expected

    def test_objectness_correlation_shifts_distributions(self):
        cfg = SyntheticConfig(feature_dim=8, num_pos=30, num_neg=30, k_min=10,
                              k_max=10, objectness_correlation=1.0)
        ds, truth = generate_synthetic(cfg, 3)
        wit, other = [], []
        for bag, inst in zip(ds.bags, truth.instance_labels["object"]):
            wit.extend(bag.objectness[inst == 1])
            other.extend(bag.objectness[inst == -1])
        assert min(wit) >= 0.5
        assert max(other) <= 0.5

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            generate_synthetic(
                SyntheticConfig(margin=0.0), 0)
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticConfig(class_names=()), 0)
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticConfig(witness_rate=0.0), 0)
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticConfig(feature_dim=1, modes=4), 0)

    def test_shared_truth_reuses_separators(self):
        ds_a, truth = generate_synthetic(self.CFG, 1)
        ds_b, truth_b = generate_synthetic(self.CFG, 2, truth=truth)
        for (wa, ba), (wb, bb) in zip(truth.separators["object"],
                                      truth_b.separators["object"]):
            assert np.array_equal(wa, wb) and ba == bb
        assert dataset_bytes(ds_a) != dataset_bytes(ds_b)
