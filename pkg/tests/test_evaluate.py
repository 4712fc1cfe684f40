"""AP computation, recall, reports and transfer evaluation."""

import numpy as np
import pytest

from maxmil.bags import Dataset, FeatureBag
from maxmil.detect import DetectConfig, Detection
from maxmil.errors import ValidationError
from maxmil.evaluate import (
    classification_ap,
    detection_ap,
    evaluate_models,
    match_detections,
    proposal_recall,
    ranking_ap,
    transfer_evaluate,
    _ap_from_flags,
)
from maxmil.models import LinearModel
from maxmil.synthetic import SyntheticConfig, generate_synthetic
from maxmil.train import TrainConfig, train_class
from oracles import ap_oracle, detection_ap_oracle, ranking_ap_oracle


def _dataset_with_gt(gt, class_names=("object",), m=1):
    bags = []
    ids = sorted(gt) or ["img0"]
    for image_id in ids:
        bags.append(FeatureBag(
            image_id, np.array([[0.0, 0.0, 5.0, 5.0]]), np.array([0.5]),
            np.zeros((1, m)), np.array([1] * len(class_names), dtype=np.int8)))
    ground_truth = {img: [("object", box) for box in boxes]
                    for img, boxes in gt.items()}
    return Dataset(name="gt", feature_dim=m, class_names=list(class_names),
                   bags=bags, ground_truth=ground_truth)


class TestDetectionAp:
    def test_perfect_single_detection(self):
        ds = _dataset_with_gt({"img0": [(0.0, 0.0, 10.0, 10.0)]})
        dets = [Detection("img0", "object", (0.0, 0.0, 10.0, 10.0), 0.9)]
        assert detection_ap(dets, ds, "object", 0.5) == 1.0

    def test_low_iou_detection_scores_zero(self):
        ds = _dataset_with_gt({"img0": [(0.0, 0.0, 10.0, 10.0)]})
        dets = [Detection("img0", "object", (7.0, 0.0, 17.0, 10.0), 0.9)]
        assert detection_ap(dets, ds, "object", 0.5) == 0.0

    def test_zero_gt_is_undefined(self):
        ds = _dataset_with_gt({"img0": [(0.0, 0.0, 10.0, 10.0)]})
        ds.ground_truth.clear()
        assert detection_ap([], ds, "object", 0.5) is None

    def test_unknown_class_raises(self):
        ds = _dataset_with_gt({"img0": [(0.0, 0.0, 10.0, 10.0)]})
        with pytest.raises(KeyError):
            detection_ap([], ds, "nope", 0.5)

    def test_duplicate_detection_is_fp(self):
        ds = _dataset_with_gt({"img0": [(0.0, 0.0, 10.0, 10.0)]})
        dets = [Detection("img0", "object", (0.0, 0.0, 10.0, 10.0), 0.9),
                Detection("img0", "object", (0.0, 0.0, 10.0, 11.0), 0.8)]
        flags = match_detections(dets, ds.gt_boxes("object"), 0.5)
        assert list(flags) == [True, False]

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            images = [f"im{i}" for i in range(int(rng.integers(1, 4)))]
            gt = {}
            total_gt = 0
            for img in images:
                n = int(rng.integers(0, 4))
                if n:
                    gt[img] = [_grid_box(rng) for _ in range(n)]
                    total_gt += n
            if total_gt == 0:
                continue
            ds = _dataset_with_gt(gt)
            dets = [Detection(str(rng.choice(images)), "object", _grid_box(rng),
                              float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9])))
                    for _ in range(int(rng.integers(0, 15)))]
            fast = detection_ap(dets, ds, "object", 0.5)
            slow = detection_ap_oracle(dets, ds.gt_boxes("object"), 0.5)
            assert fast == slow

    def test_adding_bottom_fp_never_increases(self):
        rng = np.random.default_rng(8)
        gt = {"im0": [_grid_box(rng) for _ in range(3)]}
        ds = _dataset_with_gt(gt)
        dets = [Detection("im0", "object", box, 0.9 - 0.1 * i)
                for i, box in enumerate(gt["im0"])]
        base = detection_ap(dets, ds, "object", 0.5)
        worse = dets + [Detection("im0", "object", (900.0, 900.0, 910.0, 910.0), 0.01)]
        assert detection_ap(worse, ds, "object", 0.5) <= base

    def test_rank_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(21)
        boxes = [_grid_box(rng) for _ in range(4)]
        ds = _dataset_with_gt({"im0": boxes[:3]})
        dets = [Detection("im0", "object", boxes[int(rng.integers(0, 4))],
                          float(c)) for c in rng.uniform(0.1, 0.9, 12)]
        base = detection_ap(dets, ds, "object", 0.5)
        squashed = [Detection(d.image_id, d.class_name, d.box,
                              float(np.tanh(5 * d.confidence) + 2)) for d in dets]
        assert detection_ap(squashed, ds, "object", 0.5) == base

    def test_adding_top_tp_never_decreases(self):
        rng = np.random.default_rng(9)
        boxes = [_grid_box(rng) for _ in range(3)]
        ds = _dataset_with_gt({"im0": boxes})
        dets = [Detection("im0", "object", boxes[0], 0.5),
                Detection("im0", "object", (900.0, 900.0, 910.0, 910.0), 0.4)]
        base = detection_ap(dets, ds, "object", 0.5)
        better = dets + [Detection("im0", "object", boxes[1], 0.99)]
        assert detection_ap(better, ds, "object", 0.5) >= base


def _grid_box(rng):
    # disjoint 10x10 cells keep IoU semantics crisp s
    cell = int(rng.integers(0, 6))
    x = 20.0 * cell
    return (x, 0.0, x + 10.0 + float(rng.integers(0, 8)), 10.0)


class TestRankingAp:
    def test_perfect_ordering(self):
        assert ranking_ap([0.9, 0.8, 0.2, 0.1], [1, 1, -1, -1]) == 1.0

    def test_reversed_single_positive(self):
        n = 6
        scores = list(range(n, 0, -1))
        labels = [-1] * (n - 1) + [1]
        assert ranking_ap(scores, labels) == pytest.approx(1 / n)

    def test_single_sign_undefined(self):
        assert ranking_ap([0.4, 0.2], [1, 1]) is None
        assert ranking_ap([0.4, 0.2], [-1, -1]) is None

    def test_matches_oracle_small_instances(self):
        rng = np.random.default_rng(10)
        for _ in range(300):
            n = int(rng.integers(2, 13))
            labels = rng.choice([-1, 1], size=n)
            if len(set(labels.tolist())) < 2:
                continue
            scores = rng.choice([0.1, 0.25, 0.5, 0.75], size=n)
            assert ranking_ap(scores, labels) == ranking_ap_oracle(scores, labels)

    def test_rank_invariance(self):
        rng = np.random.default_rng(11)
        scores = rng.uniform(-1, 1, 10)
        labels = np.array([1, -1] * 5)
        base = ranking_ap(scores, labels)
        transformed = np.exp(3.0 * scores) + 7.0
        assert ranking_ap(transformed, labels) == base


class TestApFromFlags:
    def test_staircase_against_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            n = int(rng.integers(1, 20))
            flags = rng.random(n) < 0.4
            n_gt = int(flags.sum() + rng.integers(0, 4))
            if n_gt == 0:
                continue
            assert _ap_from_flags(flags, n_gt) == ap_oracle(flags, n_gt)


class TestProposalRecall:
    def test_every_gt_duplicated_as_region(self):
        rng = np.random.default_rng(13)
        boxes = [_grid_box(rng) for _ in range(3)]
        bag = FeatureBag("im0", np.array(boxes), np.full(3, 0.5), np.zeros((3, 1)),
                         np.array([1], dtype=np.int8))
        ds = Dataset(name="d", feature_dim=1, class_names=["object"], bags=[bag],
                     ground_truth={"im0": [("object", b) for b in boxes]})
        assert proposal_recall(ds, "object", 0.5) == 1.0

    def test_disjoint_regions_give_zero(self):
        bag = FeatureBag("im0", np.array([[500.0, 500.0, 510.0, 510.0]]),
                         np.array([0.5]), np.zeros((1, 1)),
                         np.array([1], dtype=np.int8))
        ds = Dataset(name="d", feature_dim=1, class_names=["object"], bags=[bag],
                     ground_truth={"im0": [("object", (0.0, 0.0, 10.0, 10.0))]})
        assert proposal_recall(ds, "object", 0.5) == 0.0

    def test_half_covered(self):
        bag = FeatureBag("im0", np.array([[0.0, 0.0, 10.0, 10.0]]),
                         np.array([0.5]), np.zeros((1, 1)),
                         np.array([1], dtype=np.int8))
        gt = {"im0": [("object", (0.0, 0.0, 10.0, 10.0)),
                      ("object", (100.0, 100.0, 110.0, 110.0))]}
        ds = Dataset(name="d", feature_dim=1, class_names=["object"], bags=[bag],
                     ground_truth=gt)
        assert proposal_recall(ds, "object", 0.5) == 0.5

    def test_no_gt_undefined(self):
        bag = FeatureBag("im0", np.array([[0.0, 0.0, 10.0, 10.0]]),
                         np.array([0.5]), np.zeros((1, 1)),
                         np.array([1], dtype=np.int8))
        ds = Dataset(name="d", feature_dim=1, class_names=["object"], bags=[bag])
        assert proposal_recall(ds, "object", 0.5) is None


def _trained_setup(seed=0, **synth_kw):
    cfg = SyntheticConfig(feature_dim=10, num_pos=15, num_neg=15, k_min=5, k_max=8,
                          **synth_kw)
    ds, truth = generate_synthetic(cfg, seed)
    models = {cls: truth.oracle_model(cls) for cls in ds.class_names}
    return ds, truth, models


class TestEvaluateModels:
    def test_report_structure_and_map(self):
        ds, _, models = _trained_setup(1)
        report = evaluate_models(models, ds, DetectConfig(), 0.5,
                                 provenance={"seed": 1})
        assert report.classes == ["object"]
        assert report.mean_ap == report.ap["object"]
        assert report.gt_counts["object"] > 0
        assert report.provenance["seed"] == 1
        text = report.to_text()
        assert "detection AP" in text and "mean" in text

    def test_map_excludes_undefined_classes(self):
        cfg = SyntheticConfig(feature_dim=12, num_pos=8, num_neg=8, k_min=4,
                              k_max=6, class_names=("a", "b"))
        ds, truth = generate_synthetic(cfg, 2)
        # strip one class's ground truth; its AP must vanish from the mean
        for img in list(ds.ground_truth):
            ds.ground_truth[img] = [(c, b) for c, b in ds.ground_truth[img]
                                    if c != "b"]
        ds.ground_truth = {k: v for k, v in ds.ground_truth.items() if v}
        models = {cls: truth.oracle_model(cls) for cls in ds.class_names}
        report = evaluate_models(models, ds, DetectConfig(), 0.5)
        assert report.ap["b"] is None
        assert report.mean_ap == report.ap["a"]

    def test_classification_ap_oracle_ranking(self):
        ds, _, models = _trained_setup(3)
        cfg = DetectConfig()
        got = classification_ap(models, ds, "object", cfg)
        from maxmil.models import region_confidences

        scores = [float(np.max(region_confidences(models["object"], bag, cfg.loss)))
                  for bag in ds.bags]
        labels = ds.labels_for("object")
        assert got == ranking_ap_oracle(scores, labels)


class TestTransfer:
    def test_source_equals_target_is_identity(self):
        ds, _, models = _trained_setup(4)
        cfg = DetectConfig()
        in_domain = evaluate_models(models, ds, cfg, 0.5, provenance={"seed": 0})
        transferred = transfer_evaluate(models, ds, cfg, 0.5, provenance={"seed": 0})
        assert transferred.to_json() == in_domain.to_json()

    def test_class_intersection(self):
        cfg = SyntheticConfig(feature_dim=14, num_pos=6, num_neg=6, k_min=3,
                              k_max=5, class_names=("dog", "cat"))
        target, truth = generate_synthetic(cfg, 5)
        source_models = {"person": truth.oracle_model("dog"),
                         "dog": truth.oracle_model("dog")}
        report = transfer_evaluate(source_models, target, DetectConfig(), 0.5)
        assert report.classes == ["dog"]

    def test_empty_intersection_raises(self):
        ds, _, models = _trained_setup(6)
        with pytest.raises(ValidationError):
            transfer_evaluate({"other": models["object"]}, ds, DetectConfig(), 0.5)

    def test_dim_mismatch_raises(self):
        ds, _, _ = _trained_setup(7)
        bad = {"object": LinearModel(np.zeros(99), 0.0)}
        with pytest.raises(ValidationError):
            transfer_evaluate(bad, ds, DetectConfig(), 0.5)

    def test_shared_truth_transfer_is_close(self):
        cfg = SyntheticConfig(feature_dim=16, num_pos=40, num_neg=40, k_min=10,
                              k_max=10, witness_rate=0.2)
        src, truth = generate_synthetic(cfg, 8)
        tgt, _ = generate_synthetic(cfg, 9, truth=truth)
        trained = train_class(src, "object", TrainConfig(variant="linear", seed=0))
        models = {"object": trained.model}
        det = DetectConfig()
        ap_in = evaluate_models(models, src, det, 0.5).ap["object"]
        ap_tr = transfer_evaluate(models, tgt, det, 0.5).ap["object"]
        assert abs(ap_in - ap_tr) <= 0.05


class TestPolyhedralOracleAdvantage:
    def test_single_hyperplane_strictly_below_planted_pair(self):
        cfg = SyntheticConfig(feature_dim=12, num_pos=20, num_neg=20, k_min=8,
                              k_max=8, modes=2, witness_rate=0.25)
        ds, truth = generate_synthetic(cfg, 10)
        det = DetectConfig()
        ap_poly = evaluate_models({"object": truth.oracle_model("object")},
                                  ds, det, 0.5).ap["object"]
        ap_single = max(
            evaluate_models({"object": truth.single_hyperplane_model("object", j)},
                            ds, det, 0.5).ap["object"]
            for j in range(2))
        assert ap_single < ap_poly
