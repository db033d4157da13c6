"""Command-line surface: one subcommand per pipeline stage.

Every subcommand exits 0 on success and prints a single machine-readable
``error: <reason>`` line to stderr (exit code 2) on failure.  Config files
are TOML; flags override file values.  The ``ICFUSION_CACHE`` environment
variable supplies the default embedding-cache directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

CACHE_ENV = "ICFUSION_CACHE"


def _labels(path):
    from .core import LabelConfig

    return LabelConfig.from_file(path) if path else LabelConfig.default()


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cache_dir(value: str | None) -> str | None:
    return value or os.environ.get(CACHE_ENV) or None


def cmd_ingest(args) -> int:
    from . import dataset as ds

    labels = _labels(args.labels)
    result = ds.ingest(
        args.root,
        args.annotation,
        labels,
        strict=args.strict,
        check_files=not args.no_check_files,
    )
    by_class: dict[int, int] = {}
    for rec in result.records:
        by_class[rec.topology] = by_class.get(rec.topology, 0) + 1
    _print_json(
        {
            "intersections": len(result.records),
            "samples_t": len(result.samples_t),
            "samples_f": len(result.samples_f),
            "per_class_intersections": {str(k): v for k, v in sorted(by_class.items())},
            "diagnostics": list(result.diagnostics),
        }
    )
    return 0


def cmd_synth(args) -> int:
    from .synthgen import SynthSpec, generate

    spec = SynthSpec(
        t_per_class=args.t_per_class,
        f_per_class=args.f_per_class,
        image_size=args.image_size,
        noise_level=args.noise,
        seed=args.seed,
    )
    out = generate(spec, args.out, _labels(args.labels))
    _print_json(
        {
            "root": str(out.root),
            "annotation": str(out.annotation_path),
            "intersections": out.n_intersections,
            "samples_t": out.n_samples_t,
            "samples_f": out.n_samples_f,
        }
    )
    return 0


def cmd_extract_flow(args) -> int:
    from . import dataset as ds
    from .flowfeat import FlowParams, colorize_flow, compute_flow, load_frame, save_frame

    labels = _labels(args.labels)
    result = ds.ingest(args.root, args.annotation, labels)
    out_root = Path(args.out)
    params = FlowParams()
    written = 0
    for sample in result.samples_f:
        frames = [load_frame(p) for p in sample.frame_paths]
        for i, (a, b) in enumerate(zip(frames, frames[1:])):
            path = out_root / sample.intersection_id / f"flow_{i:04d}.png"
            if path.exists():
                continue
            save_frame(path, colorize_flow(compute_flow(a, b, params)))
            written += 1
    _print_json({"sequences": len(result.samples_f), "flow_images_written": written})
    return 0


def cmd_extract_features(args) -> int:
    from . import dataset as ds
    from .flowfeat import FlowEmbedder, FlowParams, build_sequence, load_frame, save_sequence_cache
    from .trainer import _sequence_cache_key

    labels = _labels(args.labels)
    result = ds.ingest(args.root, args.annotation, labels)
    out = _cache_dir(args.out)
    if not out:
        raise ValueError(f"no output directory: pass --out or set {CACHE_ENV}")
    out_root = Path(out)
    params = FlowParams()
    embedder = None
    written = skipped = 0
    for sample in result.samples_f:
        key = _sequence_cache_key(args.snapshot, params, sample)
        path = out_root / f"seq_{key}.npz"
        if path.exists():
            skipped += 1
            continue
        if embedder is None:
            embedder = FlowEmbedder(args.snapshot)
        frames = [load_frame(p) for p in sample.frame_paths]
        feats, mask = build_sequence(frames, embedder, params, args.seq_len)
        save_sequence_cache(path, feats, mask, args.snapshot, sample.frame_paths)
        written += 1
    _print_json({"written": written, "cached": skipped, "dir": str(out_root)})
    return 0


def _load_fold(args):
    from . import dataset as ds

    plans = ds.folds_from_json(args.folds)
    for plan in plans:
        if plan.fold_index == args.fold:
            return plan
    raise ValueError(f"fold {args.fold} not present in {args.folds}")


def _train_config(args, default_lr: float):
    from .training import TrainConfig

    return TrainConfig(
        lr=args.lr if args.lr is not None else default_lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        deterministic=args.deterministic,
    )


def cmd_train_tnet(args) -> int:
    from . import dataset as ds
    from .tnet import TNetConfig, frozen_checksum, train_tnet
    from .training import CsvLogger, save_checkpoint

    labels = _labels(args.labels)
    result = ds.ingest(args.root, args.annotation, labels)
    fold = _load_fold(args)
    topo = result.topology_of()
    from .flowfeat import load_frame

    def part(ids):
        samples = sorted(
            (s for s in result.samples_t if s.intersection_id in ids),
            key=lambda s: s.sample_id,
        )
        images = [load_frame(s.image_path) for s in samples]
        y = np.array([topo[s.intersection_id] for s in samples], dtype=np.int64)
        return images, y

    model_cfg = TNetConfig(snapshot=args.snapshot, freeze_mode=args.freeze_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logger = CsvLogger(out / "log.csv", ("net", "epoch", "train_loss", "val_loss", "val_acc"))
    model, fit = train_tnet(
        part(fold.train),
        part(fold.val),
        _train_config(args, default_lr=1e-5),
        model_cfg,
        logger=logger,
        log_extra={"net": "tnet"},
    )
    save_checkpoint(
        out / "tnet.ckpt",
        model,
        meta={
            "net": "tnet",
            "config": asdict(model_cfg),
            "best_epoch": fit.best_epoch,
            "epochs_run": fit.epochs_run,
            "frozen_checksum": frozen_checksum(model),
        },
    )
    _print_json(
        {
            "checkpoint": str(out / "tnet.ckpt"),
            "best_epoch": fit.best_epoch,
            "best_val_loss": fit.best_val_loss,
            "epochs_run": fit.epochs_run,
        }
    )
    return 0


def _f_partition(result, ids, snapshot, cache_dir, seq_len):
    from .flowfeat import FlowEmbedder, FlowParams, build_sequence, load_frame
    from .flowfeat import load_sequence_cache, save_sequence_cache
    from .trainer import _sequence_cache_key

    params = FlowParams()
    samples = sorted(
        (s for s in result.samples_f if s.intersection_id in ids),
        key=lambda s: s.sample_id,
    )
    embedder = None
    feats, masks, labels = [], [], []
    for s in samples:
        cached = None
        if cache_dir:
            path = Path(cache_dir) / f"seq_{_sequence_cache_key(snapshot, params, s)}.npz"
            if path.exists():
                f, m, _ = load_sequence_cache(path, expect_snapshot=snapshot)
                cached = (f, m)
        if cached is None:
            if embedder is None:
                embedder = FlowEmbedder(snapshot)
            frames = [load_frame(p) for p in s.frame_paths]
            f, m = build_sequence(frames, embedder, params, seq_len)
            if cache_dir:
                save_sequence_cache(path, f, m, snapshot, s.frame_paths)
            cached = (f, m)
        feats.append(cached[0])
        masks.append(cached[1])
        labels.append(s.egomotion_label)
    return (
        np.stack(feats),
        np.stack(masks),
        np.array(labels, dtype=np.int64),
        samples,
    )


def cmd_train_fnet(args) -> int:
    from . import dataset as ds
    from .fnet import FNetConfig, train_fnet
    from .training import CsvLogger, save_checkpoint

    labels = _labels(args.labels)
    result = ds.ingest(args.root, args.annotation, labels)
    fold = _load_fold(args)
    cache = _cache_dir(args.cache_dir)
    model_cfg = FNetConfig(hidden_dim=args.hidden_dim)
    train = _f_partition(result, fold.train, args.snapshot, cache, model_cfg.seq_len)
    val = _f_partition(result, fold.val, args.snapshot, cache, model_cfg.seq_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logger = CsvLogger(out / "log.csv", ("net", "epoch", "train_loss", "val_loss", "val_acc"))
    model, fit = train_fnet(
        train[:3],
        val[:3],
        _train_config(args, default_lr=1e-5),
        model_cfg,
        logger=logger,
        log_extra={"net": "fnet"},
    )
    save_checkpoint(
        out / "fnet.ckpt",
        model,
        meta={
            "net": "fnet",
            "config": asdict(model_cfg),
            "snapshot": args.snapshot,
            "best_epoch": fit.best_epoch,
            "epochs_run": fit.epochs_run,
        },
    )
    _print_json(
        {
            "checkpoint": str(out / "fnet.ckpt"),
            "best_epoch": fit.best_epoch,
            "best_val_loss": fit.best_val_loss,
            "epochs_run": fit.epochs_run,
        }
    )
    return 0


def cmd_predict(args) -> int:
    from . import dataset as ds
    from .inet import write_jsonl
    from .training import load_checkpoint

    labels = _labels(args.labels)
    result = ds.ingest(args.root, args.annotation, labels)
    state, meta = load_checkpoint(args.checkpoint)
    records = []
    if args.which == "tnet":
        from .flowfeat import load_frame
        from .tnet import TNet, TNetConfig, predict_tnet

        cfg_raw = dict(meta.get("config", {}))
        if "fc_dims" in cfg_raw:
            cfg_raw["fc_dims"] = tuple(cfg_raw["fc_dims"])
        model = TNet(TNetConfig(**cfg_raw))
        model.load_state_dict(state)
        for s in result.samples_t:
            pdf = predict_tnet(model, load_frame(s.image_path))
            records.append(
                {"sample_id": s.sample_id, "t_out": [float(x) for x in pdf.values]}
            )
    else:
        from .fnet import FNet, FNetConfig, predict_fnet

        cfg_raw = dict(meta.get("config", {}))
        model = FNet(FNetConfig(**cfg_raw))
        model.load_state_dict(state)
        snapshot = args.snapshot or meta.get("snapshot")
        if not snapshot:
            raise ValueError("pass --snapshot: the checkpoint lacks an embedder id")
        feats, masks, _, samples = _f_partition(
            result,
            {s.intersection_id for s in result.samples_f},
            snapshot,
            _cache_dir(args.cache_dir),
            model.cfg.seq_len,
        )
        for s, f, m in zip(samples, feats, masks):
            pdf = predict_fnet(model, f, m)
            records.append(
                {"sample_id": s.sample_id, "f_out": [float(x) for x in pdf.values]}
            )
    write_jsonl(args.out, records)
    _print_json({"records": len(records), "out": str(args.out)})
    return 0


def cmd_fuse(args) -> int:
    from .inet import FusionConfig, fuse_records, read_pdf_jsonl, write_jsonl

    labels = _labels(args.labels)
    t_records = read_pdf_jsonl(args.tnet_pdf, "t_out")
    f_records = read_pdf_jsonl(args.fnet_pdf, "f_out")
    if len(t_records) != len(f_records):
        raise ValueError(
            f"record counts differ: {len(t_records)} scene vs {len(f_records)} motion"
        )
    cfg = FusionConfig(
        consistency=labels.consistency(),
        top1_threshold=args.threshold,
        mask_mode=args.mode,
    )
    merged = []
    for t_rec, f_rec in zip(t_records, f_records):
        sid = (
            t_rec["sample_id"]
            if t_rec["sample_id"] == f_rec["sample_id"]
            else f"{t_rec['sample_id']}+{f_rec['sample_id']}"
        )
        merged.append(
            {"sample_id": sid, "t_out": t_rec["t_out"], "f_out": f_rec["f_out"]}
        )
    out_records = fuse_records(merged, cfg)
    write_jsonl(args.out, out_records)
    fallbacks = sum(1 for r in out_records if r["fallback_flag"])
    _print_json({"records": len(out_records), "fallbacks": fallbacks, "out": str(args.out)})
    return 0


def cmd_evaluate(args) -> int:
    from . import evalkit

    run_dir = Path(args.run_dir)
    records_per_fold: dict[int, list[dict]] = {}
    for fold_dir in sorted(run_dir.glob("fold*")):
        pred = fold_dir / "predictions.jsonl"
        if not pred.is_file():
            continue
        idx = int(fold_dir.name.removeprefix("fold"))
        records_per_fold[idx] = [
            json.loads(line) for line in pred.read_text().splitlines() if line.strip()
        ]
    if not records_per_fold:
        raise ValueError(f"no fold predictions found under {run_dir}")
    aggregate = evalkit.aggregate_methods(records_per_fold)
    files = evalkit.emit_report(aggregate, run_dir / "report")
    _print_json(
        {
            "folds": len(records_per_fold),
            "mean_accuracy": {
                name: aggregate[name].mean_accuracy() for name in sorted(aggregate)
            },
            "report_files": [str(f) for f in files],
        }
    )
    return 0


def cmd_run_experiment(args) -> int:
    from .trainer import ExperimentConfig, run_experiment

    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.name is not None:
        overrides["name"] = args.name
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    if args.cache_dir or os.environ.get(CACHE_ENV):
        overrides["cache_dir"] = _cache_dir(args.cache_dir)

    if args.synthetic:
        # The dataset is generated below; any paths in the config are unused.
        overrides.setdefault("data_root", "")
        overrides.setdefault("annotation", "")

    if args.config:
        cfg = ExperimentConfig.from_toml(args.config, **overrides)
    else:
        required = {"data_root": args.root, "annotation": args.annotation}
        missing = [k for k, v in required.items() if not v]
        if args.synthetic:
            required = {"data_root": "", "annotation": ""}
        elif missing:
            raise ValueError(
                "pass --config, or --root and --annotation, or --synthetic"
            )
        cfg = ExperimentConfig(
            data_root=required["data_root"],
            annotation=required["annotation"],
            out_dir=args.out or "runs",
            **{
                k: v
                for k, v in overrides.items()
                if k not in ("out_dir", "data_root", "annotation")
            },
        )

    if args.synthetic:
        from .synthgen import SynthSpec, generate

        data_dir = cfg.run_dir / "dataset"
        spec = SynthSpec(seed=cfg.seed)
        generated = generate(spec, data_dir)
        cfg = replace(
            cfg,
            data_root=str(generated.root),
            annotation=str(generated.annotation_path),
        )

    payload = run_experiment(cfg)
    _print_json(
        {
            "run_dir": str(cfg.run_dir),
            "mean_accuracy": {
                name: payload["methods"][name]["mean_accuracy"]
                for name in sorted(payload["methods"])
            },
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icfusion",
        description="Two-stream intersection classification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_labels(p):
        p.add_argument("--labels", help="label catalogue TOML (default: built-in)")

    p = sub.add_parser("ingest", help="validate a dataset and print a summary")
    p.add_argument("--root", required=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--no-check-files", action="store_true")
    add_labels(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--t-per-class", type=int, default=10)
    p.add_argument("--f-per-class", type=int, default=10)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    add_labels(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-flow", help="write colorized flow images")
    p.add_argument("--root", required=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--out", required=True)
    add_labels(p)
    p.set_defaults(func=cmd_extract_flow)

    p = sub.add_parser("extract-features", help="cache embedding sequences")
    p.add_argument("--root", required=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--out", help=f"cache dir (default ${CACHE_ENV})")
    p.add_argument("--snapshot", default="pooledconv2048@s0")
    p.add_argument("--seq-len", type=int, default=80)
    add_labels(p)
    p.set_defaults(func=cmd_extract_features)

    def add_train_common(p):
        p.add_argument("--root", required=True)
        p.add_argument("--annotation", required=True)
        p.add_argument("--folds", required=True, help="fold plan JSON")
        p.add_argument("--fold", type=int, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--weight-decay", type=float, default=1e-6)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--epochs", type=int, default=100)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
        add_labels(p)

    p = sub.add_parser("train-tnet", help="train the scene classifier on one fold")
    add_train_common(p)
    p.add_argument("--snapshot", default="vgg16tiny@s0")
    p.add_argument("--freeze-mode", default="between", choices=("between", "inclusive", "none"))
    p.set_defaults(func=cmd_train_tnet)

    p = sub.add_parser("train-fnet", help="train the ego-motion classifier on one fold")
    add_train_common(p)
    p.add_argument("--snapshot", default="pooledconv2048@s0")
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--cache-dir", help=f"embedding cache (default ${CACHE_ENV})")
    p.set_defaults(func=cmd_train_fnet)

    p = sub.add_parser("predict", help="emit per-sample PDFs from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", required=True, choices=("tnet", "fnet"))
    p.add_argument("--root", required=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snapshot", help="embedder snapshot for fnet prediction")
    p.add_argument("--cache-dir", help=f"embedding cache (default ${CACHE_ENV})")
    add_labels(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fuse", help="fuse scene and motion PDF records")
    p.add_argument("--tnet-pdf", required=True)
    p.add_argument("--fnet-pdf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.999)
    p.add_argument("--mode", default="verbatim", choices=("verbatim", "exclude_worst"))
    add_labels(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="aggregate a run directory into a report")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-experiment", help="full k-fold experiment")
    p.add_argument("--config", help="experiment TOML")
    p.add_argument("--root")
    p.add_argument("--annotation")
    p.add_argument("--out")
    p.add_argument("--name")
    p.add_argument("--seed", type=int)
    p.add_argument("--synthetic", action="store_true", help="generate a synthetic dataset first")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cache-dir", help=f"embedding cache (default ${CACHE_ENV})")
    p.set_defaults(func=cmd_run_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # single machine-readable failure line
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
