"""Per-fold training orchestration and the full cross-validation run.

Run layout: ``<out_dir>/<name>/fold<i>/{tnet.ckpt, fnet.ckpt,
predictions.jsonl, log.csv}`` plus ``<out_dir>/<name>/aggregate.json`` and
the resolved ``config.json``.  With ``deterministic`` set, two runs of the
same configuration produce byte-identical prediction records.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import evalkit
from .core import LabelConfig
from .flowfeat import (
    DEFAULT_EMBED_SNAPSHOT,
    FlowEmbedder,
    FlowParams,
    build_sequence,
    load_frame,
    load_sequence_cache,
    save_sequence_cache,
)
from .fnet import FNetConfig, predict_fnet, train_fnet
from .inet import FusionConfig, fuse
from .tnet import TNetConfig, frozen_checksum, predict_tnet, train_tnet
from .training import (
    CsvLogger,
    TrainConfig,
    derive_seed,
    save_checkpoint,
    set_determinism,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

LOG_FIELDS = ("net", "epoch", "train_loss", "val_loss", "val_acc")


class LeakageError(RuntimeError):
    """A training phase touched an intersection outside its partition."""


@dataclass
class PhaseLedger:
    """Instrumentation hook: counts sample usage per phase per fold."""

    seen: dict[str, dict[str, int]] = field(default_factory=dict)

    def record(self, phase: str, intersection_ids) -> None:
        bucket = self.seen.setdefault(phase, {})
        for iid in intersection_ids:
            bucket[iid] = bucket.get(iid, 0) + 1

    def assert_clean(self, fold: ds.FoldPlan) -> None:
        allowed = {
            "train": fold.train,
            "val": fold.val,
            "test": fold.test,
        }
        for phase, counts in self.seen.items():
            outside = set(counts) - allowed[phase]
            if outside:
                raise LeakageError(
                    f"fold {fold.fold_index}: phase {phase} touched "
                    f"{sorted(outside)[:5]} outside its partition"
                )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full k-fold run needs, resolvable from one TOML file."""

    data_root: str
    annotation: str
    out_dir: str
    name: str = "exp"
    seed: int = 0
    k: int = 5
    ratio: tuple[int, int, int] = (5, 2, 3)
    deterministic: bool = True
    labels_file: str | None = None
    cache_dir: str | None = None
    embed_snapshot: str = DEFAULT_EMBED_SNAPSHOT
    flow: FlowParams = field(default_factory=FlowParams)
    tnet_model: TNetConfig = field(default_factory=TNetConfig)
    fnet_model: FNetConfig = field(default_factory=FNetConfig)
    tnet_train: TrainConfig = field(default_factory=TrainConfig)
    fnet_train: TrainConfig = field(default_factory=TrainConfig)
    top1_threshold: float = 0.999
    mask_mode: str = "verbatim"

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"need k >= 2 folds, got {self.k}")
        if len(self.ratio) != 3 or min(self.ratio) < 1:
            raise ValueError(f"ratio must be three positive ints, got {self.ratio}")

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    @classmethod
    def from_toml(cls, path, **overrides) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        exp = dict(raw.get("experiment", {}))
        exp.update(overrides)
        if "ratio" in exp:
            exp["ratio"] = tuple(int(x) for x in exp["ratio"])
        kwargs = dict(exp)
        if "flow" in raw:
            kwargs["flow"] = FlowParams(**raw["flow"])
        if "tnet" in raw:
            tnet_raw = dict(raw["tnet"])
            train_raw = tnet_raw.pop("train", {})
            if "fc_dims" in tnet_raw:
                tnet_raw["fc_dims"] = tuple(int(x) for x in tnet_raw["fc_dims"])
            kwargs["tnet_model"] = TNetConfig(**tnet_raw)
            kwargs["tnet_train"] = TrainConfig(**train_raw)
        if "fnet" in raw:
            fnet_raw = dict(raw["fnet"])
            train_raw = fnet_raw.pop("train", {})
            kwargs["fnet_model"] = FNetConfig(**fnet_raw)
            kwargs["fnet_train"] = TrainConfig(**train_raw)
        if "fusion" in raw:
            kwargs.update(
                {
                    k: raw["fusion"][k]
                    for k in ("top1_threshold", "mask_mode")
                    if k in raw["fusion"]
                }
            )
        if "embedder" in raw and "snapshot" in raw["embedder"]:
            kwargs["embed_snapshot"] = raw["embedder"]["snapshot"]
        return cls(**kwargs)

    def resolved_dict(self) -> dict:
        out = asdict(self)
        out["ratio"] = list(self.ratio)
        return out


def _sequence_cache_key(snapshot: str, flow: FlowParams, sample: ds.SampleF) -> str:
    h = hashlib.sha256()
    h.update(snapshot.encode())
    h.update(repr(flow).encode())
    for p in sample.frame_paths:
        h.update(str(p).encode())
    return h.hexdigest()[:32]


class Experiment:
    """Holds ingested data and per-sample features for one configured run."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.labels: LabelConfig | None = None
        self.ingest: ds.IngestResult | None = None
        self.folds: list[ds.FoldPlan] = []
        self.t_images: dict[str, np.ndarray] = {}
        self.f_features: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.ledgers: dict[int, PhaseLedger] = {}

    def prepare(self) -> "Experiment":
        cfg = self.cfg
        root = Path(cfg.data_root)
        annotation = Path(cfg.annotation)
        if not root.is_dir():
            raise FileNotFoundError(f"data root {root} does not exist")
        if not annotation.is_file():
            raise FileNotFoundError(f"annotation file {annotation} does not exist")
        self.labels = (
            LabelConfig.from_file(cfg.labels_file)
            if cfg.labels_file
            else LabelConfig.default()
        )
        self.ingest = ds.ingest(root, annotation, self.labels)
        if not self.ingest.samples_t:
            raise ValueError("ingest produced no scene samples")
        self.folds = ds.make_folds(
            self.ingest.records, ratio=cfg.ratio, k=cfg.k, seed=cfg.seed
        )
        self._load_features()
        return self

    def _load_features(self) -> None:
        cfg = self.cfg
        for s in self.ingest.samples_t:
            self.t_images[s.sample_id] = load_frame(s.image_path)
        embedder = None
        cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else None
        for s in self.ingest.samples_f:
            cached = None
            if cache_dir is not None:
                key = _sequence_cache_key(cfg.embed_snapshot, cfg.flow, s)
                cache_path = cache_dir / f"seq_{key}.npz"
                if cache_path.exists():
                    feats, mask, _ = load_sequence_cache(
                        cache_path, expect_snapshot=cfg.embed_snapshot
                    )
                    cached = (feats, mask)
            if cached is None:
                if embedder is None:
                    embedder = FlowEmbedder(cfg.embed_snapshot)
                frames = [load_frame(p) for p in s.frame_paths]
                feats, mask = build_sequence(
                    frames, embedder, cfg.flow, self.cfg.fnet_model.seq_len
                )
                if cache_dir is not None:
                    save_sequence_cache(
                        cache_path, feats, mask, cfg.embed_snapshot, s.frame_paths
                    )
                cached = (feats, mask)
            self.f_features[s.sample_id] = cached

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            consistency=self.labels.consistency(),
            top1_threshold=self.cfg.top1_threshold,
            mask_mode=self.cfg.mask_mode,
        )

    def _partition_t(self, ids) -> tuple[list, np.ndarray, list[str]]:
        topo = self.ingest.topology_of()
        samples = [s for s in self.ingest.samples_t if s.intersection_id in ids]
        samples.sort(key=lambda s: s.sample_id)
        images = [self.t_images[s.sample_id] for s in samples]
        labels = np.array([topo[s.intersection_id] for s in samples], dtype=np.int64)
        return images, labels, [s.intersection_id for s in samples]

    def _partition_f(self, ids) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
        samples = [s for s in self.ingest.samples_f if s.intersection_id in ids]
        samples.sort(key=lambda s: s.sample_id)
        feats = np.stack([self.f_features[s.sample_id][0] for s in samples])
        masks = np.stack([self.f_features[s.sample_id][1] for s in samples])
        labels = np.array([s.egomotion_label for s in samples], dtype=np.int64)
        return feats, masks, labels, [s.intersection_id for s in samples]

    def run_fold(self, fold: ds.FoldPlan) -> list[dict]:
        """Train both nets on one fold and emit test prediction records.

        Refuses invalid folds before any training starts and asserts that
        no training phase touched an intersection outside its partition.
        """
        cfg = self.cfg
        ds.validate_fold(fold, self.ingest.records, cfg.ratio)
        set_determinism(cfg.deterministic)
        torch.manual_seed(derive_seed(cfg.seed, "fold", fold.fold_index))
        ledger = PhaseLedger()
        self.ledgers[fold.fold_index] = ledger

        fold_dir = cfg.run_dir / f"fold{fold.fold_index}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        log_path = fold_dir / "log.csv"
        log_path.unlink(missing_ok=True)
        logger = CsvLogger(log_path, LOG_FIELDS)

        train_imgs, train_tlabels, train_tids = self._partition_t(fold.train)
        val_imgs, val_tlabels, val_tids = self._partition_t(fold.val)
        ledger.record("train", train_tids)
        ledger.record("val", val_tids)
        tnet_cfg = replace(
            cfg.tnet_train,
            seed=derive_seed(cfg.seed, "tnet", fold.fold_index),
            deterministic=cfg.deterministic,
        )
        tnet_model, tnet_fit = train_tnet(
            (train_imgs, train_tlabels),
            (val_imgs, val_tlabels),
            tnet_cfg,
            cfg.tnet_model,
            logger=logger,
            log_extra={"net": "tnet"},
        )

        train_f = self._partition_f(fold.train)
        val_f = self._partition_f(fold.val)
        ledger.record("train", train_f[3])
        ledger.record("val", val_f[3])
        fnet_cfg = replace(
            cfg.fnet_train,
            seed=derive_seed(cfg.seed, "fnet", fold.fold_index),
            deterministic=cfg.deterministic,
        )
        fnet_model, fnet_fit = train_fnet(
            train_f[:3],
            val_f[:3],
            fnet_cfg,
            cfg.fnet_model,
            logger=logger,
            log_extra={"net": "fnet"},
        )
        ledger.assert_clean(fold)

        save_checkpoint(
            fold_dir / "tnet.ckpt",
            tnet_model,
            meta={
                "net": "tnet",
                "config": asdict(cfg.tnet_model),
                "train": asdict(tnet_cfg),
                "best_epoch": tnet_fit.best_epoch,
                "epochs_run": tnet_fit.epochs_run,
                "frozen_checksum": frozen_checksum(tnet_model),
            },
        )
        save_checkpoint(
            fold_dir / "fnet.ckpt",
            fnet_model,
            meta={
                "net": "fnet",
                "config": asdict(cfg.fnet_model),
                "train": asdict(fnet_cfg),
                "best_epoch": fnet_fit.best_epoch,
                "epochs_run": fnet_fit.epochs_run,
            },
        )

        pairs = ds.make_pairs(
            fold,
            self.ingest.samples_t,
            self.ingest.samples_f,
            self.ingest.topology_of(),
        )["test"]
        ledger.record("test", [p.sample_t.intersection_id for p in pairs])
        ledger.record("test", [p.sample_f.intersection_id for p in pairs])
        ledger.assert_clean(fold)

        fusion_cfg = self.fusion_config()
        records = []
        for pair in pairs:
            t_pdf = predict_tnet(tnet_model, self.t_images[pair.sample_t.sample_id])
            feats, mask = self.f_features[pair.sample_f.sample_id]
            f_pdf = predict_fnet(fnet_model, feats, mask)
            result = fuse(t_pdf, f_pdf, fusion_cfg)
            records.append(
                {
                    "sample_id": pair.sample_id,
                    "fold": fold.fold_index,
                    "partition": "test",
                    "true_topology": pair.topology,
                    "true_motion": pair.sample_f.egomotion_label,
                    "t_out": [float(x) for x in t_pdf.values],
                    "f_out": [float(x) for x in f_pdf.values],
                    "i_out": [float(x) for x in result.pdf.values],
                    "mask": [int(x) for x in result.mask],
                    "fallback_flag": bool(result.used_fallback),
                    "branch": result.branch,
                }
            )

        with open(fold_dir / "predictions.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return records

    def run(self) -> dict:
        """Prepare, run every fold, aggregate, and persist all results."""
        if self.ingest is None:
            self.prepare()
        cfg = self.cfg
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        (cfg.run_dir / "config.json").write_text(
            json.dumps(cfg.resolved_dict(), indent=2, sort_keys=True) + "\n"
        )
        records_per_fold: dict[int, list[dict]] = {}
        try:
            for fold in self.folds:
                records_per_fold[fold.fold_index] = self.run_fold(fold)
        except Exception:
            if records_per_fold:
                self._write_aggregate(records_per_fold, partial=True)
            raise
        return self._write_aggregate(records_per_fold, partial=False)

    def _write_aggregate(self, records_per_fold: dict[int, list[dict]], partial: bool) -> dict:
        aggregate = evalkit.aggregate_methods(records_per_fold)
        payload = evalkit.aggregate_to_dict(aggregate)
        for name, agg in aggregate.items():
            mean = payload["methods"][name]["mean_accuracy"]
            assert abs(mean - float(np.mean(agg.fold_accuracies))) < 1e-12
        payload["experiment"] = {
            "name": self.cfg.name,
            "seed": self.cfg.seed,
            "k": self.cfg.k,
            "partial": partial,
            "records_per_fold": {
                str(i): len(r) for i, r in sorted(records_per_fold.items())
            },
        }
        (self.cfg.run_dir / "aggregate.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
        return payload


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full k-fold run; returns the aggregate payload written to disk."""
    return Experiment(cfg).run()
