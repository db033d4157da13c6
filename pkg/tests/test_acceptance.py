"""Acceptance gate: ten end-to-end checks over the whole pipeline.

Each test prints one ``[criterion N] PASS/FAIL`` line so the gate can be
read off a test log at a glance.  The checks cover fusion-rule fidelity,
PDF hygiene, sequence padding, split quotas, backbone freezing, synthetic
end-to-end training, dense-flow quality, gradient correctness, and
run-level determinism.
"""

from __future__ import annotations

import io
import json
import time
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import asdict

import numpy as np
import pytest
import torch
from torch import nn

from icfusion.cli import main as cli_main
from icfusion.core import (
    EGOMOTION3,
    TOPOLOGY7,
    ConsistencyMatrix,
    make_pdf,
)
from icfusion.dataset import IntersectionRecord, make_folds, validate_fold
from icfusion.flowfeat import build_sequence, compute_flow
from icfusion.fnet import FNet, FNetConfig, predict_fnet
from icfusion.inet import FusionConfig, build_mask_batch, fuse
from icfusion.synthgen import SynthSpec, generate, make_translation_pair
from icfusion.tnet import TNetConfig, build_tnet, frozen_checksum, predict_tnet
from icfusion.trainer import ExperimentConfig, run_experiment
from icfusion.training import TrainConfig, load_checkpoint

# Hand-tabulated affordance table, independent of the package catalogue:
# row m-1 holds the topology classes that afford ego-motion m.
AFFORDANCE_ROWS = np.array(
    [
        [1, 0, 1, 1, 0, 0, 1],  # straight: cross, side-left, side-right, straight-only
        [1, 1, 1, 0, 1, 0, 0],  # left: cross, t-junction, side-left, left-turn-only
        [1, 1, 0, 1, 0, 1, 0],  # right: cross, t-junction, side-right, right-turn-only
    ],
    dtype=bool,
)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


def run_cli(*argv) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = cli_main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Full 5-fold run on the noise-free synthetic dataset (10 T + 10 F per class)."""
    base = tmp_path_factory.mktemp("acceptance")
    spec = SynthSpec(t_per_class=10, f_per_class=10, image_size=128, seed=0)
    ds = generate(spec, base / "dataset")
    cfg = ExperimentConfig(
        data_root=str(ds.root),
        annotation=str(ds.annotation_path),
        out_dir=str(base / "runs"),
        name="acceptance",
        seed=0,
        k=5,
        cache_dir=str(base / "cache"),
        tnet_model=TNetConfig(snapshot="vgg16tiny@s0", input_size=128),
        tnet_train=TrainConfig(lr=1e-3, max_epochs=80, patience=20),
        fnet_train=TrainConfig(lr=1e-3, max_epochs=60, patience=15),
    )
    start = time.monotonic()
    payload = run_experiment(cfg)
    seconds = time.monotonic() - start
    return {"payload": payload, "seconds": seconds, "cfg": cfg}


def random_consistency(rng: np.random.Generator) -> ConsistencyMatrix:
    while True:
        entries = rng.random((3, 7)) < 0.5
        if entries.any(axis=1).all() and entries.any(axis=0).all():
            return ConsistencyMatrix(entries)


def reference_mask(f: list[float], entries: np.ndarray, threshold: float) -> list[bool]:
    """Brute-force restatement of the masking rule in plain Python."""
    best = min(range(3), key=lambda i: (-f[i], i))
    worst = min(range(3), key=lambda i: (f[i], i))
    motion = best if f[best] > threshold else worst
    return [bool(entries[motion][c]) for c in range(7)]


def reference_fuse(t, f, entries, threshold):
    mask = reference_mask(list(f), entries, threshold)
    product = [t[c] * mask[c] for c in range(7)]
    total = sum(product)
    if total <= 0:
        return list(t), mask, True
    return [p / total for p in product], mask, False


def test_criterion_1_fusion_oracle_equivalence():
    rng = np.random.default_rng(2024)
    matrices = [ConsistencyMatrix.default()] + [
        random_consistency(rng) for _ in range(49)
    ]
    n_tuples = 10_000
    start = time.monotonic()
    worst_pdf_diff = 0.0
    for i in range(n_tuples):
        cm = matrices[i % len(matrices)]
        threshold = 0.999 if i % 4 == 0 else float(rng.uniform(0.5, 1.0))
        if i % 3 == 0:
            eps = float(rng.uniform(0.0, 0.002))
            f_raw = np.full(3, eps / 2)
            f_raw[rng.integers(3)] = 1.0 - eps
        else:
            f_raw = rng.random(3) + 1e-9
        t_raw = rng.random(7) + 1e-9
        if i % 10 == 0:
            t_raw = np.zeros(7)
            t_raw[rng.integers(7)] = 1.0
        t_pdf = make_pdf(t_raw, TOPOLOGY7)
        f_pdf = make_pdf(f_raw, EGOMOTION3)
        cfg = FusionConfig(consistency=cm, top1_threshold=threshold)
        res = fuse(t_pdf, f_pdf, cfg)
        exp_pdf, exp_mask, exp_fb = reference_fuse(
            t_pdf.values, f_pdf.values, cm.entries, threshold
        )
        assert list(res.mask) == exp_mask, f"mask mismatch on tuple {i}"
        assert res.used_fallback == exp_fb, f"fallback mismatch on tuple {i}"
        diff = float(np.max(np.abs(res.pdf.values - np.array(exp_pdf))))
        worst_pdf_diff = max(worst_pdf_diff, diff)
        assert diff <= 1e-12, f"pdf diff {diff} on tuple {i}"
    elapsed = time.monotonic() - start
    report(
        1,
        elapsed < 10.0,
        f"{n_tuples} tuples, masks bitwise equal, max pdf diff "
        f"{worst_pdf_diff:.2e}, {elapsed:.1f}s",
    )


def test_criterion_2_mask_rule_exhaustive_grid():
    steps = np.arange(1001)
    aa, bb = np.meshgrid(steps, steps, indexing="ij")
    keep = aa + bb <= 1000
    i, j = aa[keep], bb[keep]
    f = np.stack([i, j, 1000 - i - j], axis=1) / 1000.0

    masks = build_mask_batch(f, FusionConfig())
    top = np.argmax(f, axis=1)
    worst = np.argmin(f, axis=1)
    saturated = f.max(axis=1) > 0.999
    motion = np.where(saturated, top, worst)
    expected = AFFORDANCE_ROWS[motion]

    equal = np.array_equal(masks, expected)
    n_saturated = int(saturated.sum())
    report(
        2,
        equal and len(f) == 501_501,
        f"{len(f)} grid pdfs at 0.001 resolution ({n_saturated} saturated), "
        "masks exact",
    )


def test_criterion_3_pdf_invariants_across_paths():
    rng = np.random.default_rng(7)
    checked = 0

    def check(values) -> None:
        nonlocal checked
        arr = np.asarray(values, dtype=np.float64)
        assert (arr >= 0).all(), f"negative entry in {arr}"
        assert abs(float(arr.sum()) - 1.0) <= 1e-6, f"sum {arr.sum()} off by >1e-6"
        checked += 1

    for _ in range(100):
        check(make_pdf(rng.random(7) + 1e-9, TOPOLOGY7).values)
        check(make_pdf(rng.random(3) + 1e-9, EGOMOTION3).values)

    tnet = build_tnet(TNetConfig(snapshot="vgg16tiny@s0", input_size=32))
    for _ in range(20):
        image = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        check(predict_tnet(tnet, image).values)

    fnet = FNet(FNetConfig(input_dim=16, hidden_dim=24, seq_len=12))
    for _ in range(20):
        feats = rng.normal(size=(12, 16)).astype(np.float32)
        pad = int(rng.integers(0, 11))
        mask = np.arange(12) >= pad
        feats[~mask] = 0.0
        check(predict_fnet(fnet, feats, mask).values)

    for k in range(300):
        t_raw = rng.random(7) + 1e-9
        if k % 5 == 0:
            t_raw = np.zeros(7)
            t_raw[rng.integers(7)] = 1.0  # often forces the fallback path
        res = fuse(
            make_pdf(t_raw, TOPOLOGY7),
            make_pdf(rng.random(3) + 1e-9, EGOMOTION3),
        )
        check(res.pdf.values)

    report(3, True, f"{checked} pdfs across make_pdf/predict/fuse, sum within 1e-6")


class OnesEmbedder:
    """Stand-in embedder: every flow image maps to an all-ones feature row."""

    def embed(self, images) -> np.ndarray:
        return np.ones((len(images), 8), dtype=np.float32)


def test_criterion_4_padding_law():
    rng = np.random.default_rng(4)
    embedder = OnesEmbedder()
    lengths = rng.integers(2, 201, size=1000)
    n_padded = n_subsampled = 0
    for n in lengths:
        # A static sequence short-circuits the flow stage, leaving padding
        # behaviour identical to a moving one at a fraction of the cost.
        frame = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
        feats, mask = build_sequence([frame] * int(n), embedder, seq_len=80)
        assert feats.shape == (80, 8), f"length {n}: shape {feats.shape}"
        assert mask.shape == (80,)
        assert np.all(np.diff(mask.astype(int)) >= 0), f"length {n}: mask not monotone"
        assert not feats[~mask].any(), f"length {n}: nonzero padded row"
        assert feats[mask].all(), f"length {n}: zero row at a valid step"
        steps = int(n) - 1
        if steps <= 80:
            assert int(mask.sum()) == steps
            n_padded += 1
        else:
            assert int(mask.sum()) == 80
            n_subsampled += 1
    report(
        4,
        True,
        f"1000 lengths in [2, 200]: 80 rows each, monotone masks, "
        f"{n_padded} padded / {n_subsampled} subsampled",
    )


def test_criterion_5_split_protocol_over_seeds():
    def records(per_class):
        recs = []
        for c, count in enumerate(per_class, start=1):
            for idx in range(count):
                iid = f"c{c}i{idx:02d}"
                recs.append(IntersectionRecord(iid, c, f"drive_{iid}", 10))
        return recs

    uniform = records([10] * 7)
    ragged = records([10, 11, 12, 13, 10, 9, 8])
    folds_checked = 0
    for seed in range(100):
        recs = uniform if seed % 2 == 0 else ragged
        all_ids = {r.intersection_id for r in recs}
        plans = make_folds(recs, ratio=(5, 2, 3), k=5, seed=seed)
        assert len(plans) == 5
        for plan in plans:
            validate_fold(plan, recs, (5, 2, 3))
            assert not plan.test & (plan.train | plan.val), "test ids leaked"
            assert plan.train | plan.val | plan.test == all_ids
            folds_checked += 1
    report(
        5,
        folds_checked == 500,
        f"{folds_checked} folds over 100 seeds: disjoint, covering, "
        "5:2:3 within +/-1 per class",
    )


def test_criterion_6_freezing_contract(e2e):
    cfg = e2e["cfg"]
    reference = frozen_checksum(build_tnet(cfg.tnet_model))
    checked = 0
    for fold in range(cfg.k):
        state, meta = load_checkpoint(cfg.run_dir / f"fold{fold}" / "tnet.ckpt")
        assert meta["frozen_checksum"] == reference, f"fold {fold} drifted"
        raw = dict(meta["config"])
        raw["fc_dims"] = tuple(raw["fc_dims"])
        model = build_tnet(TNetConfig(**raw))
        model.load_state_dict(state)
        assert frozen_checksum(model) == reference, f"fold {fold} state drifted"
        widths = [m.out_features for m in model.classifier if isinstance(m, nn.Linear)]
        assert widths == [512, 128, 7], f"fold {fold} head widths {widths}"
        checked += 1
    report(
        6,
        checked == cfg.k,
        f"{checked} folds: frozen checksums unchanged by training, "
        "head widths (512, 128) -> 7",
    )


def test_criterion_7_synthetic_end_to_end(e2e):
    payload, seconds = e2e["payload"], e2e["seconds"]
    tnet = payload["methods"]["tnet"]
    fnet = payload["methods"]["fnet"]
    fused = payload["methods"]["fused"]
    per_fold_ok = all(
        f >= t for f, t in zip(fused["per_fold_accuracy"], tnet["per_fold_accuracy"])
    )
    ok = (
        tnet["mean_accuracy"] >= 0.95
        and fnet["mean_accuracy"] >= 0.95
        and per_fold_ok
        and seconds <= 1800.0
    )
    report(
        7,
        ok,
        f"tnet {tnet['mean_accuracy']:.3f}, fnet {fnet['mean_accuracy']:.3f}, "
        f"fused {fused['mean_accuracy']:.3f} (>= tnet on every fold: "
        f"{per_fold_ok}), {seconds / 60:.1f} min",
    )


def test_criterion_8_optical_flow_oracle():
    errors = []
    for shift in range(1, 9):
        for sx, sy in ((shift, 0), (0, shift), (shift, shift)):
            a, b = make_translation_pair(sx, sy, size=128, seed=shift)
            flow = compute_flow(a, b)
            expected = np.array([sx, sy], dtype=np.float32)
            errors.append(np.linalg.norm(flow - expected, axis=2).ravel())
    median_epe = float(np.median(np.concatenate(errors)))
    report(
        8,
        median_epe <= 0.5,
        f"24 translation pairs (1-8 px): median endpoint error {median_epe:.3f} px",
    )


def finite_difference_max_relerr(model, loss_fn, weights, n_samples: int) -> float:
    """Max relative error between autograd and central differences."""
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for tensor in weights:
        grad = tensor.grad.detach().flatten()
        n = min(n_samples, grad.numel())
        picks = torch.topk(grad.abs(), n).indices
        flat = tensor.data.view(-1)
        for idx in picks:
            orig = flat[idx].item()
            h = max(1e-6, 1e-4 * abs(orig))
            with torch.no_grad():
                flat[idx] = orig + h
                loss_plus = loss_fn().item()
                flat[idx] = orig - h
                loss_minus = loss_fn().item()
                flat[idx] = orig
            fd = (loss_plus - loss_minus) / (2 * h)
            an = grad[idx].item()
            worst = max(worst, abs(fd - an) / max(abs(an), 1e-12))
    return worst


def test_criterion_9_gradient_sanity():
    torch.manual_seed(9)
    tnet = build_tnet(TNetConfig(snapshot="vgg16tiny@s0", input_size=32))
    tnet.double().eval()
    x_img = torch.randn(4, 3, 32, 32, dtype=torch.float64)
    y_img = torch.tensor([0, 2, 4, 6])

    def tnet_loss():
        return nn.functional.cross_entropy(tnet(x_img), y_img)

    tnet_err = finite_difference_max_relerr(
        tnet,
        tnet_loss,
        [tnet.classifier[6].weight, tnet.classifier[1].weight],
        n_samples=3,
    )

    fnet = FNet(FNetConfig(input_dim=16, hidden_dim=24, seq_len=12))
    fnet.double().eval()
    x_seq = torch.randn(4, 12, 16, dtype=torch.float64)
    mask = torch.arange(12).expand(4, 12) >= torch.tensor([[0], [3], [5], [11]])
    y_seq = torch.tensor([0, 1, 2, 0])

    def fnet_loss():
        return nn.functional.cross_entropy(fnet(x_seq, mask), y_seq)

    fnet_err = finite_difference_max_relerr(
        fnet, fnet_loss, [fnet.head.weight], n_samples=5
    )

    ok = tnet_err < 1e-2 and fnet_err < 1e-2
    report(
        9,
        ok,
        f"finite differences vs autograd: scene head {tnet_err:.2e}, "
        f"motion head {fnet_err:.2e} (both < 1e-2)",
    )


def test_criterion_10_run_experiment_determinism(tiny_dataset, tmp_path):
    toml = tmp_path / "det.toml"
    toml.write_text(
        f"""
[experiment]
data_root = "{tiny_dataset.root}"
annotation = "{tiny_dataset.annotation_path}"
out_dir = "unused"
seed = 0
k = 2
deterministic = true
cache_dir = "{tmp_path / 'cache'}"

[tnet]
snapshot = "vgg16tiny@s0"
input_size = 96

[tnet.train]
lr = 1e-3
max_epochs = 2
patience = 2

[fnet.train]
lr = 1e-3
max_epochs = 2
patience = 2
"""
    )
    for name in ("det_a", "det_b"):
        code, _, err = run_cli(
            "run-experiment", "--config", toml, "--out", tmp_path / "runs",
            "--name", name,
        )
        assert code == 0, f"run {name} failed: {err}"
    identical = []
    for fold in range(2):
        a = (tmp_path / "runs" / "det_a" / f"fold{fold}" / "predictions.jsonl").read_bytes()
        b = (tmp_path / "runs" / "det_b" / f"fold{fold}" / "predictions.jsonl").read_bytes()
        identical.append(a == b)
        assert a, f"fold {fold} produced no prediction records"
    report(
        10,
        all(identical),
        f"two consecutive runs: prediction records byte-identical on "
        f"{sum(identical)}/2 folds",
    )
