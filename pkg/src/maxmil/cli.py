"""Command-line pipeline: generate, train, detect, evaluate, sweep, report.

Flags win over the optional JSON config file (``--config``), which wins over
built-in defaults. Every report embeds the fully resolved configuration and
seed, and re-running a pipeline with the same seed reproduces it byte for
byte regardless of ``--jobs``.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .bags import load_dataset, write_dataset
from .detect import DetectConfig, detect_dataset, read_detections, write_detections
from .errors import MaxMilError, TrainingError
from .evaluate import EvalReport, evaluate_models, transfer_evaluate
from .models import LossConfig
from .reporting import aggregate_reports, write_ablation_table, write_aggregate
from .synthetic import SyntheticConfig, generate_synthetic
from .train import TrainConfig, load_models, save_models, train_multiclass

ABLATION_AXES = {
    "use_score": "use_score",
    "loss_kind": "loss",
    "restarts": "restarts",
    "batch": "batch_bags",
    "C": "C",
}


@dataclass
class ExperimentSpec:
    """One train/detect/evaluate pipeline over ``runs`` consecutive seeds."""

    dataset: Path
    out_dir: Path
    train: TrainConfig
    detect: DetectConfig
    eval_iou: float = 0.5
    runs: int = 1
    jobs: int = 1
    figures: bool = True

    def __post_init__(self):
        if self.runs < 1:
            raise MaxMilError("runs must be >= 1")
        if self.jobs < 1:
            raise MaxMilError("jobs must be >= 1")


def _provenance(cfg: TrainConfig, spec: ExperimentSpec, seed: int,
                result) -> dict:
    return {
        "seed": seed,
        "config": asdict(cfg),
        "detect": {"nms_iou": spec.detect.nms_iou,
                   "min_confidence": spec.detect.min_confidence},
        "eval_iou": spec.eval_iou,
        "failures": result.failures,
        "training_losses": {
            cls: t.restart_losses[t.selected_restart - 1]
            for cls, t in result.models.items()
        },
    }


def run_experiment(spec: ExperimentSpec) -> dict:
    """Train, detect and evaluate once per seed; write per-seed and aggregate files."""
    dataset = load_dataset(spec.dataset)
    out_dir = Path(spec.out_dir)
    seeds = [spec.train.seed + i for i in range(spec.runs)]

    def one(seed: int):
        cfg = replace(spec.train, seed=seed).resolved()
        result = train_multiclass(dataset, cfg, jobs=1)
        if not result.models:
            raise TrainingError(f"no class could be trained: {result.failures}")
        models = {c: t.model for c, t in result.models.items()}
        detections = detect_dataset(models, dataset, spec.detect)
        report = evaluate_models(
            models, dataset, spec.detect, spec.eval_iou, detections=detections,
            provenance=_provenance(cfg, spec, seed, result))
        return seed, report, detections

    if spec.jobs > 1:
        with ThreadPoolExecutor(max_workers=spec.jobs) as pool:
            outcomes = list(pool.map(one, seeds))
    else:
        outcomes = [one(seed) for seed in seeds]

    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed, report, detections in sorted(outcomes, key=lambda t: seeds.index(t[0])):
        (out_dir / f"report_seed{seed}.json").write_text(report.to_json(),
                                                         encoding="utf-8")
        write_detections(detections, out_dir / f"detections_seed{seed}.jsonl")
        reports.append(report.to_dict())
    agg = aggregate_reports(reports)
    write_aggregate(agg, out_dir, figures=spec.figures)
    return agg


def run_ablation(spec: ExperimentSpec, axis: str, values: list) -> list[dict]:
    """One run_experiment per swept value, everything else held fixed."""
    if axis not in ABLATION_AXES:
        raise MaxMilError(f"axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    field = ABLATION_AXES[axis]
    rows = []
    for value in values:
        sub = replace(
            spec,
            train=replace(spec.train, **{field: value}),
            out_dir=Path(spec.out_dir) / f"{axis}={value}",
        )
        rows.append({"value": value, "aggregate": run_experiment(sub)})
    write_ablation_table(rows, axis, spec.out_dir, figures=spec.figures)
    return rows


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

class _Resolver:
    """Merges command-line flags, the JSON config file and defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_cfg = {}
        if getattr(args, "config", None):
            with open(args.config, encoding="utf-8") as fh:
                self.file_cfg = json.load(fh)

    def get(self, key: str, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.file_cfg:
            return self.file_cfg[key]
        return default


def _train_config(r: _Resolver) -> TrainConfig:
    use_score = not bool(r.get("no_score", False))
    if "use_score" in r.file_cfg and not getattr(r.args, "no_score", None):
        use_score = bool(r.file_cfg["use_score"])
    return TrainConfig(
        variant=r.get("variant", "linear"),
        hyperplanes=int(r.get("hyperplanes", 2)),
        hidden_width=int(r.get("hidden_width", 16)),
        learning_rate=float(r.get("lr", 0.01)),
        iterations=None if r.get("iters") is None else int(r.get("iters")),
        batch_bags=None if r.get("batch") is None else int(r.get("batch")),
        restarts=int(r.get("restarts", 12)),
        C=float(r.get("C", 1.0)),
        epsilon=float(r.get("epsilon", 0.01)),
        loss=r.get("loss", "tanh"),
        use_score=use_score,
        seed=int(r.get("seed", 0)),
    )


def _detect_config(r: _Resolver, loss_cfg: LossConfig) -> DetectConfig:
    return DetectConfig(
        loss=loss_cfg,
        nms_iou=float(r.get("iou_nms", 0.3)),
        min_confidence=float(r.get("conf_thresh", 0.05)),
    )


def _stored_loss_config(models: dict, r: _Resolver) -> LossConfig:
    """Detection-time score settings: trained config unless overridden."""
    first = next(iter(models.values()))
    use_score = first.config.use_score
    epsilon = first.config.epsilon
    if getattr(r.args, "no_score", None):
        use_score = False
    if r.get("epsilon") is not None:
        epsilon = float(r.get("epsilon"))
    return LossConfig(kind=first.config.loss, use_score=use_score,
                      epsilon=epsilon, C=first.config.C)


def _add_config_flag(p):
    p.add_argument("--config", help="JSON config file; explicit flags win over it")


def _add_train_flags(p):
    p.add_argument("--variant", choices=("linear", "polyhedral", "hidden"))
    p.add_argument("--hyperplanes", type=int, metavar="J")
    p.add_argument("--hidden-width", type=int, metavar="L", dest="hidden_width")
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--C", type=float, dest="C")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--loss", choices=("tanh", "hinge"))
    p.add_argument("--no-score", action="store_true", default=None, dest="no_score")
    p.add_argument("--seed", type=int)


def _add_run_flags(p):
    p.add_argument("--runs", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--iou-nms", type=float, dest="iou_nms")
    p.add_argument("--conf-thresh", type=float, dest="conf_thresh")
    p.add_argument("--iou-eval", type=float, dest="iou_eval")
    p.add_argument("--no-figures", action="store_true", default=None, dest="no_figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxmil",
        description="Multiple-instance perceptrons for weakly supervised detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a planted synthetic dataset")
    _add_config_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--pos", type=int)
    p.add_argument("--neg", type=int)
    p.add_argument("--k-min", type=int, dest="k_min")
    p.add_argument("--k-max", type=int, dest="k_max")
    p.add_argument("--margin", type=float)
    p.add_argument("--modes", type=int)
    p.add_argument("--witness-rate", type=float, dest="witness_rate")
    p.add_argument("--objectness-corr", type=float, dest="objectness_corr")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--seed", type=int)
    p.add_argument("--truth-out", dest="truth_out",
                   help="also write the planted separators as JSON")

    p = sub.add_parser("train", help="train models for every class")
    _add_config_flag(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-out", required=True, dest="model_out")
    p.add_argument("--jobs", type=int)
    _add_train_flags(p)

    p = sub.add_parser("detect", help="run inference and write JSON-lines detections")
    _add_config_flag(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-nms", type=float, dest="iou_nms")
    p.add_argument("--conf-thresh", type=float, dest="conf_thresh")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--no-score", action="store_true", default=None, dest="no_score")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("eval", help="train/detect/evaluate over one or more seeds")
    _add_config_flag(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--detections", help="score these detections instead of training")
    p.add_argument("--model", help="model bundle (needed with --detections)")
    _add_train_flags(p)
    _add_run_flags(p)

    p = sub.add_parser("transfer", help="evaluate a trained model on another dataset")
    _add_config_flag(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="target dataset")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--iou-nms", type=float, dest="iou_nms")
    p.add_argument("--conf-thresh", type=float, dest="conf_thresh")
    p.add_argument("--iou-eval", type=float, dest="iou_eval")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("ablate", help="sweep one hyperparameter axis")
    _add_config_flag(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated values for the axis")
    _add_train_flags(p)
    _add_run_flags(p)

    p = sub.add_parser("report", help="aggregate per-seed reports into tables/figures")
    _add_config_flag(p)
    p.add_argument("--inputs", required=True, nargs="+",
                   help="report JSON files or directories containing report_seed*.json")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--no-figures", action="store_true", default=None, dest="no_figures")

    return parser


def _parse_values(axis: str, raw: str) -> list:
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        if axis == "use_score":
            if tok.lower() not in ("true", "false"):
                raise MaxMilError(f"use_score values must be true/false, got {tok!r}")
            out.append(tok.lower() == "true")
        elif axis == "loss_kind":
            out.append(tok)
        elif axis in ("restarts", "batch"):
            out.append(int(tok))
        else:  # C
            out.append(float(tok))
    return out


def _cmd_gen_synthetic(r: _Resolver) -> int:
    classes = r.get("classes", "object")
    if isinstance(classes, str):
        classes = tuple(c.strip() for c in classes.split(",") if c.strip())
    cfg = SyntheticConfig(
        feature_dim=int(r.get("feature_dim", 32)),
        num_pos=int(r.get("pos", 100)),
        num_neg=int(r.get("neg", 100)),
        k_min=int(r.get("k_min", 30)),
        k_max=int(r.get("k_max", 30)),
        margin=float(r.get("margin", 1.0)),
        modes=int(r.get("modes", 1)),
        witness_rate=float(r.get("witness_rate", 0.2)),
        objectness_correlation=float(r.get("objectness_corr", 0.8)),
        noise_sigma=float(r.get("noise_sigma", 1.0)),
        class_names=tuple(classes),
    )
    seed = int(r.get("seed", 0))
    dataset, truth = generate_synthetic(cfg, seed)
    write_dataset(dataset, r.args.out)
    print(f"wrote {dataset.num_bags} bags, {len(dataset.class_names)} class(es) "
          f"to {r.args.out}")
    truth_out = r.get("truth_out")
    if truth_out:
        payload = {
            cls: [{"w": w.tolist(), "b": b} for w, b in planes]
            for cls, planes in truth.separators.items()
        }
        Path(truth_out).write_text(
            json.dumps({"separators": payload}, sort_keys=True) + "\n",
            encoding="utf-8")
        print(f"wrote planted separators to {truth_out}")
    return 0


def _cmd_train(r: _Resolver) -> int:
    dataset = load_dataset(r.args.dataset)
    cfg = _train_config(r)
    result = train_multiclass(dataset, cfg, jobs=int(r.get("jobs", 1)))
    for cls, msg in result.failures.items():
        print(f"warning: class {cls!r} not trained: {msg}", file=sys.stderr)
    if not result.models:
        raise TrainingError("no class could be trained")
    save_models(r.args.model_out, result.models)
    for cls, tcm in result.models.items():
        best = tcm.restart_losses[tcm.selected_restart - 1]
        print(f"{cls}: loss {best:.6f} (restart {tcm.selected_restart}"
              f"/{tcm.config.restarts})")
    print(f"wrote models to {r.args.model_out}")
    return 0


def _cmd_detect(r: _Resolver) -> int:
    dataset = load_dataset(r.args.dataset)
    trained = load_models(r.args.model)
    models = {c: t.model for c, t in trained.items()}
    det_cfg = DetectConfig(
        loss=_stored_loss_config(trained, r),
        nms_iou=float(r.get("iou_nms", 0.3)),
        min_confidence=float(r.get("conf_thresh", 0.05)),
    )
    dets = detect_dataset(models, dataset, det_cfg, jobs=int(r.get("jobs", 1)))
    write_detections(dets, r.args.out)
    print(f"wrote {len(dets)} detections to {r.args.out}")
    return 0


def _write_single_report(report: EvalReport, out_dir: Path, figures: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    if figures:
        agg = aggregate_reports([report.to_dict()])
        from .reporting import render_report_figures

        render_report_figures(agg, out_dir)


def _cmd_eval(r: _Resolver) -> int:
    if r.args.detections:
        if not r.args.model:
            raise MaxMilError("--detections also requires --model")
        dataset = load_dataset(r.args.dataset)
        trained = load_models(r.args.model)
        models = {c: t.model for c, t in trained.items()}
        det_cfg = DetectConfig(
            loss=_stored_loss_config(trained, r),
            nms_iou=float(r.get("iou_nms", 0.3)),
            min_confidence=float(r.get("conf_thresh", 0.05)),
        )
        detections = read_detections(r.args.detections)
        report = evaluate_models(
            models, dataset, det_cfg, float(r.get("iou_eval", 0.5)),
            detections=detections,
            provenance={"detections": "precomputed",
                        "config": asdict(next(iter(trained.values())).config)})
        _write_single_report(report, Path(r.args.out_dir),
                             figures=not r.get("no_figures", False))
        print(report.to_text(), end="")
        return 0

    train_cfg = _train_config(r)
    spec = ExperimentSpec(
        dataset=Path(r.args.dataset),
        out_dir=Path(r.args.out_dir),
        train=train_cfg,
        detect=_detect_config(r, train_cfg.loss_config()),
        eval_iou=float(r.get("iou_eval", 0.5)),
        runs=int(r.get("runs", 10)),
        jobs=int(r.get("jobs", 1)),
        figures=not r.get("no_figures", False),
    )
    agg = run_experiment(spec)
    mean = agg["mean_ap"]["mean"]
    std = agg["mean_ap"]["std"]
    if mean is None:
        print("mean AP: undefined (no ground truth)")
    else:
        print(f"mean AP over {agg['runs']} run(s): "
              f"{100.0 * mean:.1f} ± {100.0 * std:.1f}")
    return 0


def _cmd_transfer(r: _Resolver) -> int:
    target = load_dataset(r.args.dataset)
    trained = load_models(r.args.model)
    models = {c: t.model for c, t in trained.items()}
    det_cfg = DetectConfig(
        loss=_stored_loss_config(trained, r),
        nms_iou=float(r.get("iou_nms", 0.3)),
        min_confidence=float(r.get("conf_thresh", 0.05)),
    )
    report = transfer_evaluate(
        models, target, det_cfg, float(r.get("iou_eval", 0.5)),
        provenance={"source_model": "bundle", "seed": None,
                    "config": asdict(next(iter(trained.values())).config)},
        jobs=int(r.get("jobs", 1)))
    out_dir = Path(r.args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "transfer_report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "transfer_report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def _cmd_ablate(r: _Resolver) -> int:
    train_cfg = _train_config(r)
    spec = ExperimentSpec(
        dataset=Path(r.args.dataset),
        out_dir=Path(r.args.out_dir),
        train=train_cfg,
        detect=_detect_config(r, train_cfg.loss_config()),
        eval_iou=float(r.get("iou_eval", 0.5)),
        runs=int(r.get("runs", 10)),
        jobs=int(r.get("jobs", 1)),
        figures=not r.get("no_figures", False),
    )
    values = _parse_values(r.args.axis, r.args.values)
    rows = run_ablation(spec, r.args.axis, values)
    for row in rows:
        mean = row["aggregate"]["mean_ap"]["mean"]
        shown = "-" if mean is None else f"{100.0 * mean:.1f}"
        print(f"{r.args.axis}={row['value']}: mean AP {shown}")
    return 0


def _cmd_report(r: _Resolver) -> int:
    files: list[Path] = []
    for raw in r.args.inputs:
        path = Path(raw)
        if path.is_dir():
            files.extend(sorted(path.glob("report_seed*.json")))
        else:
            files.append(path)
    if not files:
        raise MaxMilError("no report files found")
    reports = [json.loads(p.read_text(encoding="utf-8")) for p in files]
    agg = aggregate_reports(reports)
    paths = write_aggregate(agg, Path(r.args.out_dir),
                            figures=not r.get("no_figures", False))
    for p in paths:
        print(f"wrote {p}")
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "transfer": _cmd_transfer,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolver = _Resolver(args)
        return _COMMANDS[args.command](resolver)
    except (MaxMilError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
