"""Command-line entry point: ``xrayseq {preprocess,build-samples,train,evaluate,synth}``.

Every stage reads and writes files under ``--work-dir`` with fixed names, so
stages can be rerun independently. Values from ``--config`` are overridden by
explicit flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import metadata as md
from .config import PipelineConfig, load_config
from .errors import ConfigError, XraySeqError
from .evaluation import compare_variants, evaluate_model, render_report
from .images import ImageFolder, assemble_batch
from .models import build_model, count_parameters, load_checkpoint
from .samples import (
    DatasetSplit,
    build_samples,
    cohort_stats,
    read_manifest,
    split_by_view,
    split_train_test_val,
    write_manifest,
)
from .synth import MOTIFS, SynthSpec, generate_cohort
from .training import TrainHistory, train

COHORT_FILE = "cohort.csv"
PREPROCESS_SUMMARY = "preprocess.json"
CHECKPOINT_DIR = "checkpoints"

EXIT_ERROR = 1
EXIT_MISSING = 2


def manifest_path(work_dir: Path, view: str) -> Path:
    return work_dir / f"manifest_{view}.csv"


def run_name(view: str, model_descriptor: str) -> str:
    return f"{view}_{model_descriptor}"


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_preprocess(cfg: PipelineConfig) -> dict[str, int]:
    if not cfg.paths.metadata_csv:
        raise ConfigError("paths.metadata_csv is not set (use --metadata)")
    src = _need(Path(cfg.paths.metadata_csv), "metadata CSV")
    records = md.read_metadata(src)
    groups = md.group_patients(records)
    after1 = md.filter_min_followups(groups, cfg.filters.min_records)
    after2 = md.filter_consistent_view(after1)
    counts = {
        "records": len(records),
        "patients": len(groups),
        "after_filter_1": len(after1),
        "after_filter_2": len(after2),
    }
    print(f"parsed: {len(records)} records, {len(groups)} patients")
    print(f"after filter 1: {len(after1)}")
    print(f"after filter 2: {len(after2)}")
    work = cfg.work_dir
    work.mkdir(parents=True, exist_ok=True)
    kept = [r for g in after2 for r in g.records]
    with open(work / COHORT_FILE, "w", newline="", encoding="utf-8") as handle:
        md.write_metadata(kept, handle)
    (work / PREPROCESS_SUMMARY).write_text(json.dumps(counts, indent=2) + "\n", encoding="utf-8")
    return counts


def cmd_build_samples(cfg: PipelineConfig) -> dict[str, DatasetSplit]:
    work = cfg.work_dir
    cohort = _need(work / COHORT_FILE, "preprocessed cohort (run preprocess first)")
    groups = md.group_patients(md.read_metadata(cohort))
    samples = build_samples(groups)
    pa, ap = split_by_view(samples)
    splits = {}
    parts = []
    for view, items in (("PA", pa), ("AP", ap)):
        stats = cohort_stats(items)
        parts.append(f"{view}: {stats.patients} patients, {stats.samples} samples")
        if items:
            split = split_train_test_val(items, cfg.split.seed, cfg.split.mode, cfg.split.ratios)
        else:
            split = DatasetSplit((), (), (), seed=cfg.split.seed, mode=cfg.split.mode)
        write_manifest(split, manifest_path(work, view))
        splits[view] = split
    print("; ".join(parts))
    return splits


def _image_source(cfg: PipelineConfig, cache: bool) -> ImageFolder:
    if not cfg.paths.image_root:
        raise ConfigError("paths.image_root is not set (use --image-root)")
    root = Path(cfg.paths.image_root)
    if not root.is_dir():
        raise FileNotFoundError(f"image root not found: {root}")
    return ImageFolder(
        root,
        size=cfg.model.input_size,
        channels=cfg.model.channels,
        cache_dir=cfg.work_dir / "cache" if cache else None,
    )


def cmd_train(cfg: PipelineConfig, view: str, cache: bool = False) -> tuple[Path, TrainHistory]:
    work = cfg.work_dir
    split = read_manifest(_need(manifest_path(work, view), f"{view} manifest (run build-samples first)"))
    source = _image_source(cfg, cache)
    train_batch = assemble_batch(split.train, source)
    val_batch = assemble_batch(split.validation, source)
    model = build_model(cfg.model)
    counts = count_parameters(model)
    name = run_name(view, cfg.model.descriptor)
    print(f"{name}: frozen={counts.frozen} trainable={counts.trainable} total={counts.total}")
    ckpt_dir = work / CHECKPOINT_DIR
    ckpt = ckpt_dir / f"{name}.pt"
    model, history = train(
        model,
        train_batch,
        val_batch,
        cfg.training,
        checkpoint_path=ckpt,
        log_path=ckpt_dir / f"{name}.log.jsonl",
        meta={"view": view, "name": name},
    )
    history.save(ckpt_dir / f"{name}.history.json")
    print(f"{name}: final train loss {history.train_loss[-1]:.6f}, validation loss {history.val_loss[-1]:.6f}")
    return ckpt, history


def cmd_evaluate(cfg: PipelineConfig, checkpoints: Sequence[Path], view: str | None = None) -> list[Path]:
    work = cfg.work_dir
    if not checkpoints:
        checkpoints = sorted((work / CHECKPOINT_DIR).glob("*.pt"))
        if not checkpoints:
            raise FileNotFoundError(f"no checkpoints found under {work / CHECKPOINT_DIR}")
    source_cfg = cfg
    reports, histories = [], {}
    test_batches: dict[tuple[str, int], object] = {}
    for path in checkpoints:
        model = load_checkpoint(_need(Path(path), "checkpoint"))
        trained_view = model.checkpoint_meta.get("view")
        descriptor = run_name(trained_view or "?", model.config.descriptor)
        if view is not None and trained_view != view:
            raise ConfigError(
                f"checkpoint {path} was trained as {descriptor}, but evaluation requested view {view} "
                f"({run_name(view, model.config.descriptor)})"
            )
        eval_view = view or trained_view
        if eval_view is None:
            raise ConfigError(f"checkpoint {path} does not record a view; pass --view")
        split = read_manifest(_need(manifest_path(work, eval_view), f"{eval_view} manifest"))
        if not split.test:
            raise XraySeqError(f"{eval_view} test partition is empty")
        key = (eval_view, model.config.channels)
        if key not in test_batches:
            source_cfg = replace(cfg, model=replace(cfg.model, channels=model.config.channels, input_size=model.config.input_size))
            test_batches[key] = assemble_batch(split.test, _image_source(source_cfg, cache=False))
        report = evaluate_model(model, test_batches[key], eval_view)
        reports.append(report)
        history_file = Path(path).with_suffix("").with_suffix(".history.json")
        if history_file.is_file():
            histories[report.name] = TrainHistory.load(history_file)
        mean = report.mean_auc
        print(f"{report.name}: mean AUC {'-' if mean is None else f'{mean:.3f}'} over {report.n_samples} test samples")
    out = cfg.evaluation_dir
    written = render_report(reports, histories, out)
    if len(reports) > 1:
        table = compare_variants(reports)
        written.append(table.write_csv(out / "comparison.csv"))
        txt = out / "comparison.txt"
        txt.write_text(table.to_text(), encoding="utf-8")
        written.append(txt)
    for p in written:
        print(f"wrote {p}")
    return written


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig):
    if args.patients < 1:
        raise ConfigError(f"--patients must be >= 1, got {args.patients}")
    spec = SynthSpec(
        n_patients=args.patients,
        followups_per_patient=args.followups,
        classes=tuple(args.classes),
        image_size=args.image_size,
        noise_level=args.noise,
        seed=args.seed if args.seed is not None else 0,
        view_mix=args.view_mix,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else cfg.work_dir / "synth"
    cohort = generate_cohort(spec, out)
    print(f"wrote {cohort.metadata_path}, {cohort.tally_path} and {spec.n_patients * spec.followups_per_patient} images")
    return cohort


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xrayseq", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="YAML pipeline config")
    parser.add_argument("--seed", type=int, help="overrides every seed in the config")
    parser.add_argument("--work-dir", type=Path, help="directory for all stage outputs")
    parser.add_argument("--metadata", type=Path, help="metadata CSV (overrides paths.metadata_csv)")
    parser.add_argument("--image-root", type=Path, help="image directory (overrides paths.image_root)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("preprocess", help="parse metadata and apply the two cohort filters")

    p = sub.add_parser("build-samples", help="windows, label explosion, view split, 70/20/10 manifests")
    p.add_argument("--split-mode", choices=("by_sample", "by_patient"))

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--view", choices=("PA", "AP"), required=True)
    p.add_argument("--backbone", choices=("densenet169", "resnet50v2", "mobilenetv2", "tiny"))
    p.add_argument("--lstm", dest="lstm", action="store_true", default=None)
    p.add_argument("--no-lstm", dest="lstm", action="store_false")
    p.add_argument("--lstm-mode", choices=("per_image", "concat_first"))
    p.add_argument("--branches", type=int, choices=(1, 3))
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--cache", action="store_true", help="cache resized images on disk")

    p = sub.add_parser("evaluate", help="per-label ROC/AUC reports for trained checkpoints")
    p.add_argument("checkpoints", nargs="*", type=Path)
    p.add_argument("--view", choices=("PA", "AP"))
    p.add_argument("--out", type=Path, help="report directory (default WORK_DIR/reports)")

    p = sub.add_parser("synth", help="generate a synthetic follow-up cohort")
    p.add_argument("--patients", type=int, default=400)
    p.add_argument("--followups", type=int, default=3)
    p.add_argument("--classes", nargs="+", choices=MOTIFS, default=["grow", "shrink"])
    p.add_argument("--image-size", type=int, choices=(128, 1024), default=128)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--view-mix", type=float, default=1.0, help="fraction of PA patients")
    p.add_argument("--out", type=Path, help="output directory (default WORK_DIR/synth)")
    return parser


def _apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    paths = cfg.paths
    if args.work_dir is not None:
        paths = replace(paths, work_dir=str(args.work_dir))
    if args.metadata is not None:
        paths = replace(paths, metadata_csv=str(args.metadata))
    if args.image_root is not None:
        paths = replace(paths, image_root=str(args.image_root))
    cfg = replace(cfg, paths=paths)
    if args.command == "build-samples" and args.split_mode:
        cfg = replace(cfg, split=replace(cfg.split, mode=args.split_mode))
    if args.command == "train":
        model_over = {
            k: v
            for k, v in (
                ("backbone", args.backbone),
                ("use_lstm", args.lstm),
                ("lstm_sequence_mode", args.lstm_mode),
                ("branches", args.branches),
                ("channels", args.channels),
            )
            if v is not None
        }
        train_over = {
            k: v
            for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size), ("learning_rate", args.learning_rate))
            if v is not None
        }
        model_cfg = replace(cfg.model, **model_over)
        if model_cfg.branches == 1 and "use_lstm" not in model_over:
            model_cfg = replace(model_cfg, use_lstm=False)
        cfg = replace(cfg, model=model_cfg, training=replace(cfg.training, **train_over))
    if args.command == "evaluate" and args.out is not None:
        cfg = replace(cfg, eval_dir=str(args.out))
    cfg.validate()
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "preprocess":
            cmd_preprocess(cfg)
        elif args.command == "build-samples":
            cmd_build_samples(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.view, cache=args.cache)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoints, args.view)
        elif args.command == "synth":
            cmd_synth(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: MissingFile: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (XraySeqError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
