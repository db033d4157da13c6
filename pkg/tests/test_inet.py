"""Fusion mask and renormalization, checked against a brute-force oracle."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icfusion.core import (
    EGOMOTION3,
    TOPOLOGY7,
    ConsistencyMatrix,
    make_pdf,
    top1,
    worst1,
)
from icfusion.inet import (
    FusionConfig,
    build_mask,
    build_mask_batch,
    fuse,
    fuse_batch,
    fuse_records,
    read_pdf_jsonl,
    write_jsonl,
)

AFFORDED = {
    1: {1, 2, 3},
    2: {2, 3},
    3: {1, 2},
    4: {1, 3},
    5: {2},
    6: {3},
    7: {1},
}


def oracle_mask(f: np.ndarray, threshold: float, mode: str) -> np.ndarray:
    """Independent re-derivation of the mask rule from the class catalogue."""
    order = np.argsort(f, kind="stable")
    best = int(np.flatnonzero(f == f.max())[0]) + 1
    worst = int(np.flatnonzero(f == f.min())[0]) + 1
    if mode == "verbatim":
        motion = best if f.max() > threshold else worst
        return np.array([motion in AFFORDED[c] for c in range(1, 8)], dtype=bool)
    return np.array([AFFORDED[c] != {worst} for c in range(1, 8)], dtype=bool)


def oracle_fuse(t: np.ndarray, f: np.ndarray, threshold: float, mode: str):
    mask = oracle_mask(f, threshold, mode)
    product = t * mask
    if product.sum() <= 0:
        return t.copy(), mask, True
    return product / product.sum(), mask, False


def motion_pdfs():
    return st.lists(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        min_size=3,
        max_size=3,
    ).filter(lambda w: sum(w) > 1e-9)


def topology_pdfs():
    return st.lists(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        min_size=7,
        max_size=7,
    ).filter(lambda w: sum(w) > 1e-9)


class TestFusionConfig:
    def test_defaults(self):
        cfg = FusionConfig()
        assert cfg.top1_threshold == 0.999
        assert cfg.mask_mode == "verbatim"
        assert cfg.fallback_policy == "tnet_passthrough"
        assert cfg.consistency == ConsistencyMatrix.default()

    @pytest.mark.parametrize("thr", [0.0, -0.5, 1.0001])
    def test_threshold_range(self, thr):
        with pytest.raises(ValueError):
            FusionConfig(top1_threshold=thr)

    def test_threshold_one_allowed(self):
        assert FusionConfig(top1_threshold=1.0).top1_threshold == 1.0

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            FusionConfig(mask_mode="strict")
        with pytest.raises(ValueError):
            FusionConfig(fallback_policy="uniform")


class TestMaskRule:
    def test_saturated_top1_keeps_classes_affording_top_motion(self):
        f = make_pdf([0.9995, 0.0003, 0.0002], EGOMOTION3)
        mask = build_mask(f)
        np.testing.assert_array_equal(
            mask, [c in (1, 3, 4, 7) for c in range(1, 8)]
        )

    def test_unsaturated_keys_on_worst_motion(self):
        f = make_pdf([0.5, 0.3, 0.2], EGOMOTION3)  # worst motion: right
        mask = build_mask(f)
        np.testing.assert_array_equal(
            mask, [3 in AFFORDED[c] for c in range(1, 8)]
        )

    def test_max_equal_to_threshold_is_not_saturated(self):
        # Binary-exact weights: max is exactly the threshold, and the strict
        # comparison must send this to the worst1 branch (worst=left, ties on
        # the lowest id).
        cfg = FusionConfig(top1_threshold=0.5)
        f = make_pdf([0.5, 0.25, 0.25], EGOMOTION3)
        mask = build_mask(f, cfg)
        np.testing.assert_array_equal(mask, [2 in AFFORDED[c] for c in range(1, 8)])

    def test_exclude_worst_drops_only_singleton_classes(self):
        cfg = FusionConfig(mask_mode="exclude_worst")
        f = make_pdf([0.5, 0.3, 0.2], EGOMOTION3)  # worst: right (3)
        mask = build_mask(f, cfg)
        # Only class 6 (right_turn_only) affords exactly {right}.
        np.testing.assert_array_equal(mask, [c != 6 for c in range(1, 8)])

    def test_mask_depends_only_on_argmax_argmin_and_max(self):
        cfg = FusionConfig(top1_threshold=0.9)
        a = make_pdf([0.95, 0.03, 0.02], EGOMOTION3)
        b = make_pdf([0.95, 0.04, 0.01], EGOMOTION3)
        np.testing.assert_array_equal(build_mask(a, cfg), build_mask(b, cfg))

    @given(motion_pdfs(), st.floats(min_value=0.01, max_value=1.0))
    @settings(max_examples=300, deadline=None)
    def test_verbatim_matches_oracle(self, w, threshold):
        f = make_pdf(w, EGOMOTION3)
        cfg = FusionConfig(top1_threshold=threshold)
        np.testing.assert_array_equal(
            build_mask(f, cfg), oracle_mask(f.values, threshold, "verbatim")
        )

    @given(motion_pdfs())
    @settings(max_examples=200, deadline=None)
    def test_exclude_worst_matches_oracle(self, w):
        f = make_pdf(w, EGOMOTION3)
        cfg = FusionConfig(mask_mode="exclude_worst")
        np.testing.assert_array_equal(
            build_mask(f, cfg), oracle_mask(f.values, 0.999, "exclude_worst")
        )

    def test_rejects_topology_pdf(self):
        t = make_pdf(np.ones(7), TOPOLOGY7)
        with pytest.raises(ValueError):
            build_mask(t)


class TestFuse:
    def test_renormalized_product(self):
        t = make_pdf([0.3, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1], TOPOLOGY7)
        f = make_pdf([0.9995, 0.0004, 0.0001], EGOMOTION3)
        res = fuse(t, f)
        kept = np.array([1, 0, 1, 1, 0, 0, 1], dtype=bool)
        expected = t.values * kept
        expected = expected / expected.sum()
        np.testing.assert_allclose(res.pdf.values, expected, atol=1e-12)
        assert res.branch == "top1"
        assert not res.used_fallback

    def test_zero_product_falls_back_to_scene_pdf(self):
        t = make_pdf([0, 1, 0, 0, 0, 0, 0], TOPOLOGY7)  # t_junction only
        f = make_pdf([0.9999, 0.00005, 0.00005], EGOMOTION3)  # saturated straight
        res = fuse(t, f)
        assert res.used_fallback
        np.testing.assert_array_equal(res.pdf.values, t.values)

    def test_zero_preservation(self):
        t = make_pdf([0.3, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1], TOPOLOGY7)
        f = make_pdf([0.9995, 0.0004, 0.0001], EGOMOTION3)
        res = fuse(t, f)
        assert (res.pdf.values[~res.mask] == 0).all()

    def test_argmax_stability_when_top_class_survives(self):
        t = make_pdf([0.4, 0.05, 0.2, 0.1, 0.1, 0.05, 0.1], TOPOLOGY7)
        f = make_pdf([0.9999, 0.00005, 0.00005], EGOMOTION3)
        res = fuse(t, f)
        assert res.mask[top1(t) - 1]
        assert top1(res.pdf) == top1(t)

    def test_mask_read_only(self):
        t = make_pdf(np.ones(7), TOPOLOGY7)
        f = make_pdf([0.5, 0.3, 0.2], EGOMOTION3)
        res = fuse(t, f)
        with pytest.raises(ValueError):
            res.mask[0] = False

    @given(topology_pdfs(), motion_pdfs(), st.floats(min_value=0.01, max_value=1.0))
    @settings(max_examples=300, deadline=None)
    def test_matches_oracle(self, tw, fw, threshold):
        t = make_pdf(tw, TOPOLOGY7)
        f = make_pdf(fw, EGOMOTION3)
        cfg = FusionConfig(top1_threshold=threshold)
        res = fuse(t, f, cfg)
        exp_pdf, exp_mask, exp_fb = oracle_fuse(t.values, f.values, threshold, "verbatim")
        np.testing.assert_array_equal(res.mask, exp_mask)
        assert res.used_fallback == exp_fb
        np.testing.assert_allclose(res.pdf.values, exp_pdf, atol=1e-12)

    @given(topology_pdfs(), motion_pdfs())
    @settings(max_examples=200, deadline=None)
    def test_output_is_normalized_pdf(self, tw, fw):
        res = fuse(make_pdf(tw, TOPOLOGY7), make_pdf(fw, EGOMOTION3))
        assert abs(float(res.pdf.values.sum()) - 1.0) <= 1e-9
        assert (res.pdf.values >= 0).all()

    @given(topology_pdfs(), motion_pdfs())
    @settings(max_examples=200, deadline=None)
    def test_fallback_iff_masked_mass_is_zero(self, tw, fw):
        t = make_pdf(tw, TOPOLOGY7)
        f = make_pdf(fw, EGOMOTION3)
        res = fuse(t, f)
        masked_mass = float((t.values * res.mask).sum())
        assert res.used_fallback == (masked_mass <= 0.0)

    def test_rejects_swapped_spaces(self):
        t = make_pdf(np.ones(7), TOPOLOGY7)
        f = make_pdf(np.ones(3), EGOMOTION3)
        with pytest.raises(ValueError):
            fuse(f, t)


class TestBatchInterfaces:
    @given(
        st.lists(st.tuples(topology_pdfs(), motion_pdfs()), min_size=1, max_size=20)
    )
    @settings(max_examples=50, deadline=None)
    def test_batch_equals_scalar_loop(self, pairs):
        t = np.array([make_pdf(tw, TOPOLOGY7).values for tw, _ in pairs])
        f = np.array([make_pdf(fw, EGOMOTION3).values for _, fw in pairs])
        fused, masks, fallback = fuse_batch(t, f)
        for i in range(len(pairs)):
            res = fuse(
                make_pdf(t[i], TOPOLOGY7), make_pdf(f[i], EGOMOTION3)
            )
            np.testing.assert_array_equal(masks[i], res.mask)
            assert fallback[i] == res.used_fallback
            np.testing.assert_allclose(fused[i], res.pdf.values, atol=1e-12)

    def test_exclude_worst_batch(self):
        f = np.array([[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]])
        cfg = FusionConfig(mask_mode="exclude_worst")
        masks = build_mask_batch(f, cfg)
        np.testing.assert_array_equal(masks[0], [c != 6 for c in range(1, 8)])
        np.testing.assert_array_equal(masks[1], [c != 7 for c in range(1, 8)])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            build_mask_batch(np.ones((2, 7)))
        with pytest.raises(ValueError):
            fuse_batch(np.ones((2, 7)) / 7, np.ones((3, 3)) / 3)


class TestRecordInterface:
    def test_fuse_records_round_trip(self, tmp_path):
        records = [
            {
                "sample_id": "a/T0",
                "t_out": [0.3, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1],
                "f_out": [0.9995, 0.0004, 0.0001],
            },
            {
                "sample_id": "b/T0",
                "t_out": [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                "f_out": [0.9999, 0.00005, 0.00005],
            },
        ]
        out = fuse_records(records)
        assert out[0]["sample_id"] == "a/T0"
        assert out[0]["mask"] == [1, 0, 1, 1, 0, 0, 1]
        assert not out[0]["fallback_flag"]
        assert out[1]["fallback_flag"]
        assert out[1]["i_out"] == [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]

        path = tmp_path / "fused.jsonl"
        write_jsonl(path, out)
        back = read_pdf_jsonl(path, "i_out")
        assert [r["sample_id"] for r in back] == ["a/T0", "b/T0"]

    def test_read_pdf_jsonl_validates_keys(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"sample_id": "x"}\n')
        with pytest.raises(ValueError, match="t_out"):
            read_pdf_jsonl(path, "t_out")

    def test_read_pdf_jsonl_skips_blank_lines(self, tmp_path):
        path = tmp_path / "ok.jsonl"
        path.write_text('{"sample_id": "x", "f_out": [1, 0, 0]}\n\n')
        assert len(read_pdf_jsonl(path, "f_out")) == 1
