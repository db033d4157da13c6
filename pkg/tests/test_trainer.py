"""Experiment orchestration: config loading, leakage guards, run layout."""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from icfusion.dataset import FoldPlan
from icfusion.flowfeat import FlowParams
from icfusion.fnet import FNetConfig
from icfusion.tnet import TNetConfig
from icfusion.trainer import (
    LOG_FIELDS,
    Experiment,
    ExperimentConfig,
    LeakageError,
    PhaseLedger,
    _sequence_cache_key,
    run_experiment,
)
from icfusion.training import TrainConfig

TOML_TEXT = """
[experiment]
data_root = "data"
annotation = "data/annotation.csv"
out_dir = "runs"
name = "demo"
seed = 3
k = 4
ratio = [5, 2, 3]
deterministic = false
cache_dir = "cache"

[flow]
levels = 2
winsize = 15

[embedder]
snapshot = "pooledconv2048@s1"

[tnet]
snapshot = "vgg16tiny@s0"
input_size = 96
fc_dims = [128, 32]

[tnet.train]
lr = 2e-3
max_epochs = 7

[fnet]
hidden_dim = 64

[fnet.train]
lr = 3e-3
patience = 4

[fusion]
top1_threshold = 0.9
mask_mode = "exclude_worst"
"""


class TestExperimentConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig("d", "a", "o", k=1)
        with pytest.raises(ValueError):
            ExperimentConfig("d", "a", "o", ratio=(5, 2))
        with pytest.raises(ValueError):
            ExperimentConfig("d", "a", "o", ratio=(5, 0, 3))

    def test_run_dir_joins_out_dir_and_name(self, tmp_path):
        cfg = ExperimentConfig("d", "a", str(tmp_path / "runs"), name="bob")
        assert cfg.run_dir == tmp_path / "runs" / "bob"

    def test_from_toml_maps_every_section(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(TOML_TEXT)
        cfg = ExperimentConfig.from_toml(path)
        assert cfg.data_root == "data"
        assert cfg.name == "demo"
        assert cfg.seed == 3 and cfg.k == 4
        assert cfg.ratio == (5, 2, 3)
        assert cfg.deterministic is False
        assert cfg.cache_dir == "cache"
        assert cfg.embed_snapshot == "pooledconv2048@s1"
        assert cfg.flow == FlowParams(levels=2, winsize=15)
        assert cfg.tnet_model == TNetConfig(
            snapshot="vgg16tiny@s0", input_size=96, fc_dims=(128, 32)
        )
        assert cfg.tnet_train == TrainConfig(lr=2e-3, max_epochs=7)
        assert cfg.fnet_model == FNetConfig(hidden_dim=64)
        assert cfg.fnet_train == TrainConfig(lr=3e-3, patience=4)
        assert cfg.top1_threshold == 0.9
        assert cfg.mask_mode == "exclude_worst"

    def test_from_toml_overrides_win(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(TOML_TEXT)
        cfg = ExperimentConfig.from_toml(path, name="other", seed=11)
        assert cfg.name == "other"
        assert cfg.seed == 11

    def test_resolved_dict_is_json_ready(self):
        cfg = ExperimentConfig("d", "a", "o")
        payload = cfg.resolved_dict()
        assert payload["ratio"] == [5, 2, 3]
        json.dumps(payload)


class TestSequenceCacheKey:
    class FakeSample:
        def __init__(self, paths):
            self.frame_paths = tuple(paths)

    def test_stable_and_sensitive(self):
        s = self.FakeSample(["/x/0.png", "/x/1.png"])
        key = _sequence_cache_key("snap@s0", FlowParams(), s)
        assert key == _sequence_cache_key("snap@s0", FlowParams(), s)
        assert len(key) == 32
        assert key != _sequence_cache_key("snap@s1", FlowParams(), s)
        assert key != _sequence_cache_key("snap@s0", FlowParams(levels=2), s)
        other = self.FakeSample(["/x/0.png", "/x/2.png"])
        assert key != _sequence_cache_key("snap@s0", FlowParams(), other)


class TestPhaseLedger:
    def fold(self) -> FoldPlan:
        return FoldPlan(
            fold_index=0,
            train=frozenset({"a", "b"}),
            val=frozenset({"c"}),
            test=frozenset({"d"}),
        )

    def test_clean_usage_passes(self):
        ledger = PhaseLedger()
        ledger.record("train", ["a", "b", "a"])
        ledger.record("val", ["c"])
        ledger.record("test", ["d"])
        ledger.assert_clean(self.fold())

    def test_out_of_partition_raises(self):
        ledger = PhaseLedger()
        ledger.record("train", ["a", "d"])
        with pytest.raises(LeakageError, match="fold 0") as err:
            ledger.assert_clean(self.fold())
        assert "'d'" in str(err.value)


@pytest.fixture(scope="module")
def smoke_cfg(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    cache = tmp_path_factory.mktemp("cache")
    return ExperimentConfig(
        data_root=str(tiny_dataset.root),
        annotation=str(tiny_dataset.annotation_path),
        out_dir=str(out),
        name="smoke",
        seed=0,
        k=2,
        cache_dir=str(cache),
        tnet_model=TNetConfig(snapshot="vgg16tiny@s0", input_size=96),
        tnet_train=TrainConfig(lr=1e-3, max_epochs=2, patience=2),
        fnet_train=TrainConfig(lr=1e-3, max_epochs=2, patience=2),
    )


@pytest.fixture(scope="module")
def smoke_run(smoke_cfg):
    exp = Experiment(smoke_cfg)
    payload = exp.run()
    return exp, payload


class TestRunLayout:
    def test_files_per_fold(self, smoke_cfg, smoke_run):
        run_dir = smoke_cfg.run_dir
        assert (run_dir / "config.json").exists()
        assert (run_dir / "aggregate.json").exists()
        for fold in range(smoke_cfg.k):
            fold_dir = run_dir / f"fold{fold}"
            for name in ("tnet.ckpt", "fnet.ckpt", "predictions.jsonl", "log.csv"):
                assert (fold_dir / name).exists(), f"missing fold{fold}/{name}"

    def test_config_json_round_trips(self, smoke_cfg, smoke_run):
        data = json.loads((smoke_cfg.run_dir / "config.json").read_text())
        assert data == json.loads(json.dumps(smoke_cfg.resolved_dict()))

    def test_log_csv_covers_both_nets(self, smoke_cfg, smoke_run):
        text = (smoke_cfg.run_dir / "fold0" / "log.csv").read_text().splitlines()
        assert text[0] == ",".join(LOG_FIELDS)
        nets = {line.split(",")[0] for line in text[1:]}
        assert nets == {"tnet", "fnet"}

    def test_prediction_record_schema(self, smoke_cfg, smoke_run):
        line = (
            (smoke_cfg.run_dir / "fold0" / "predictions.jsonl")
            .read_text()
            .splitlines()[0]
        )
        rec = json.loads(line)
        assert set(rec) == {
            "sample_id",
            "fold",
            "partition",
            "true_topology",
            "true_motion",
            "t_out",
            "f_out",
            "i_out",
            "mask",
            "fallback_flag",
            "branch",
        }
        assert rec["fold"] == 0 and rec["partition"] == "test"
        assert len(rec["t_out"]) == 7 and len(rec["f_out"]) == 3
        assert abs(sum(rec["i_out"]) - 1.0) <= 1e-6
        assert set(rec["mask"]) <= {0, 1}
        assert rec["branch"] in {"top1", "worst1", "exclude_worst"}

    def test_aggregate_payload(self, smoke_cfg, smoke_run):
        _, payload = smoke_run
        disk = json.loads((smoke_cfg.run_dir / "aggregate.json").read_text())
        assert disk == payload
        assert set(payload["methods"]) == {"tnet", "fnet", "fused"}
        assert payload["experiment"]["partial"] is False
        assert payload["experiment"]["k"] == 2
        for fold in range(2):
            n_lines = len(
                (smoke_cfg.run_dir / f"fold{fold}" / "predictions.jsonl")
                .read_text()
                .splitlines()
            )
            assert payload["experiment"]["records_per_fold"][str(fold)] == n_lines

    def test_mean_accuracy_is_fold_mean(self, smoke_run):
        _, payload = smoke_run
        for method in payload["methods"].values():
            assert (
                abs(
                    method["mean_accuracy"]
                    - float(np.mean(method["per_fold_accuracy"]))
                )
                <= 1e-12
            )

    def test_ledgers_recorded_and_clean(self, smoke_run):
        exp, _ = smoke_run
        assert set(exp.ledgers) == {0, 1}
        for fold in exp.folds:
            exp.ledgers[fold.fold_index].assert_clean(fold)


class TestGuards:
    def test_prepare_rejects_missing_paths(self, tmp_path, tiny_dataset):
        cfg = ExperimentConfig(
            data_root=str(tmp_path / "nope"),
            annotation=str(tiny_dataset.annotation_path),
            out_dir=str(tmp_path),
        )
        with pytest.raises(FileNotFoundError):
            Experiment(cfg).prepare()
        cfg = ExperimentConfig(
            data_root=str(tiny_dataset.root),
            annotation=str(tmp_path / "nope.csv"),
            out_dir=str(tmp_path),
        )
        with pytest.raises(FileNotFoundError):
            Experiment(cfg).prepare()

    def test_run_fold_refuses_corrupt_fold(self, smoke_cfg, smoke_run, tmp_path):
        exp, _ = smoke_run
        fold = exp.folds[0]
        leaked = next(iter(fold.test))
        # The leaked id stays in test while joining train, so the partitions
        # overlap and the fold must be refused before any training happens.
        bad = FoldPlan(
            fold_index=fold.fold_index,
            train=frozenset(fold.train | {leaked}),
            val=fold.val,
            test=fold.test,
        )
        with pytest.raises(ValueError, match="overlap"):
            exp.run_fold(bad)

    def test_failing_fold_still_writes_partial_aggregate(
        self, smoke_cfg, tmp_path, monkeypatch
    ):
        cfg = replace(smoke_cfg, out_dir=str(tmp_path), name="partial")
        exp = Experiment(cfg)
        original = Experiment.run_fold

        def flaky(self, fold):
            if fold.fold_index >= 1:
                raise RuntimeError("boom")
            return original(self, fold)

        monkeypatch.setattr(Experiment, "run_fold", flaky)
        with pytest.raises(RuntimeError, match="boom"):
            exp.run()
        payload = json.loads((cfg.run_dir / "aggregate.json").read_text())
        assert payload["experiment"]["partial"] is True
        assert list(payload["experiment"]["records_per_fold"]) == ["0"]
