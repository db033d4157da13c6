"""Late fusion of the scene and ego-motion streams via a binary mask.

The ego-motion distribution is converted into a 7-wide boolean mask over
topology classes through the motion/topology consistency matrix, the scene
distribution is multiplied elementwise by the mask, and the product is
renormalized.  When the product is all zero the scene distribution passes
through unchanged and the result is flagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    EGOMOTION3,
    TOPOLOGY7,
    ClassPDF,
    ConsistencyMatrix,
    make_pdf,
    top1,
    worst1,
)

MASK_MODES = ("verbatim", "exclude_worst")
FALLBACK_POLICIES = ("tnet_passthrough",)
DEFAULT_THRESHOLD = 0.999


@dataclass(frozen=True)
class FusionConfig:
    """Mask construction and fallback settings for the fusion stage.

    ``verbatim`` mode keys the mask on the top-1 motion when the ego-motion
    distribution is saturated (max strictly above ``top1_threshold``) and on
    the worst-1 motion otherwise, keeping the topology classes that afford
    the chosen motion.  ``exclude_worst`` is the alternative reading: it
    drops only the classes whose afforded motions are exactly the singleton
    worst-1 motion.
    """

    consistency: ConsistencyMatrix = field(
        default_factory=ConsistencyMatrix.default
    )
    top1_threshold: float = DEFAULT_THRESHOLD
    mask_mode: str = "verbatim"
    fallback_policy: str = "tnet_passthrough"

    def __post_init__(self) -> None:
        if not 0.0 < self.top1_threshold <= 1.0:
            raise ValueError(
                f"top1_threshold must be in (0, 1], got {self.top1_threshold}"
            )
        if self.mask_mode not in MASK_MODES:
            raise ValueError(
                f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}"
            )
        if self.fallback_policy not in FALLBACK_POLICIES:
            raise ValueError(
                f"fallback_policy must be one of {FALLBACK_POLICIES}, "
                f"got {self.fallback_policy!r}"
            )


@dataclass(frozen=True)
class FusionResult:
    pdf: ClassPDF
    mask: np.ndarray
    used_fallback: bool
    branch: str

    def __post_init__(self) -> None:
        m = np.asarray(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)


def _mask_and_branch(
    f_pdf: ClassPDF, cfg: FusionConfig
) -> tuple[np.ndarray, str]:
    if f_pdf.space != EGOMOTION3:
        raise ValueError(f"mask input must be an ego-motion pdf, got {f_pdf.space!r}")
    cm = cfg.consistency
    if cfg.mask_mode == "verbatim":
        if float(np.max(f_pdf.values)) > cfg.top1_threshold:
            motion = top1(f_pdf)
            branch = "top1"
        else:
            motion = worst1(f_pdf)
            branch = "worst1"
        return cm.row(motion).copy(), branch
    worst = worst1(f_pdf)
    mask = np.array(
        [
            cm.afforded(c) != frozenset({worst})
            for c in range(1, cm.entries.shape[1] + 1)
        ],
        dtype=bool,
    )
    return mask, "exclude_worst"


def build_mask(f_pdf: ClassPDF, cfg: FusionConfig | None = None) -> np.ndarray:
    """Boolean keep-mask over topology classes for one ego-motion PDF.

    The mask depends only on the argmax, argmin, and max value of the
    input distribution.
    """
    mask, _ = _mask_and_branch(f_pdf, cfg or FusionConfig())
    return mask


def fuse(
    t_pdf: ClassPDF,
    f_pdf: ClassPDF,
    cfg: FusionConfig | None = None,
) -> FusionResult:
    """Mask the scene distribution by the ego-motion mask and renormalize.

    An all-zero product (the mask removed every class holding probability
    mass) falls back to the unchanged scene distribution, with
    ``used_fallback`` set.
    """
    cfg = cfg or FusionConfig()
    if t_pdf.space != TOPOLOGY7:
        raise ValueError(f"fusion target must be a topology pdf, got {t_pdf.space!r}")
    mask, branch = _mask_and_branch(f_pdf, cfg)
    product = t_pdf.values * mask
    total = float(product.sum())
    if total <= 0.0:
        return FusionResult(
            pdf=make_pdf(t_pdf.values, TOPOLOGY7),
            mask=mask,
            used_fallback=True,
            branch=branch,
        )
    return FusionResult(
        pdf=make_pdf(product / total, TOPOLOGY7),
        mask=mask,
        used_fallback=False,
        branch=branch,
    )


def _singleton_mask_table(cm: ConsistencyMatrix) -> np.ndarray:
    """(3, 7) table: entry [m-1][c-1] true iff class c affords exactly {m}."""
    n_motions, n_classes = cm.entries.shape
    return np.array(
        [
            [cm.afforded(c) == frozenset({m}) for c in range(1, n_classes + 1)]
            for m in range(1, n_motions + 1)
        ],
        dtype=bool,
    )


def build_mask_batch(
    f_probs: np.ndarray, cfg: FusionConfig | None = None
) -> np.ndarray:
    """Vectorized :func:`build_mask` over (N, 3) rows of motion probabilities."""
    cfg = cfg or FusionConfig()
    rows = cfg.consistency.entries  # (3, 7) bool, row i is motion id i+1
    f = np.asarray(f_probs, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != rows.shape[0]:
        raise ValueError(f"expected (N, {rows.shape[0]}) motion probabilities, got {f.shape}")
    top = np.argmax(f, axis=1)
    worst = np.argmin(f, axis=1)
    if cfg.mask_mode == "verbatim":
        saturated = f.max(axis=1) > cfg.top1_threshold
        return rows[np.where(saturated, top, worst)]
    return ~_singleton_mask_table(cfg.consistency)[worst]


def fuse_batch(
    t_probs: np.ndarray,
    f_probs: np.ndarray,
    cfg: FusionConfig | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`fuse`; returns (fused pdfs, masks, fallback flags)."""
    cfg = cfg or FusionConfig()
    t = np.asarray(t_probs, dtype=np.float64)
    masks = build_mask_batch(f_probs, cfg)
    if t.shape != masks.shape:
        raise ValueError(
            f"topology probabilities {t.shape} do not align with masks {masks.shape}"
        )
    product = t * masks
    totals = product.sum(axis=1, keepdims=True)
    fallback = totals[:, 0] <= 0.0
    t_totals = t.sum(axis=1, keepdims=True)
    fused = np.where(
        fallback[:, None], t / t_totals, product / np.where(totals > 0, totals, 1.0)
    )
    return fused, masks, fallback


def fuse_records(in_records, cfg: FusionConfig | None = None) -> list[dict]:
    """Batch interface over dict records.

    Each input record carries ``sample_id``, ``t_out`` (7 reals), and
    ``f_out`` (3 reals); each output record carries ``sample_id``,
    ``i_out``, ``mask``, and ``fallback_flag``.
    """
    cfg = cfg or FusionConfig()
    out = []
    for rec in in_records:
        res = fuse(
            make_pdf(np.asarray(rec["t_out"], dtype=np.float64), TOPOLOGY7),
            make_pdf(np.asarray(rec["f_out"], dtype=np.float64), EGOMOTION3),
            cfg,
        )
        out.append(
            {
                "sample_id": rec["sample_id"],
                "i_out": [float(x) for x in res.pdf.values],
                "mask": [int(x) for x in res.mask],
                "fallback_flag": bool(res.used_fallback),
            }
        )
    return out


def read_pdf_jsonl(path, key: str) -> list[dict]:
    """Read (sample_id, <key>) records from a JSON-lines file."""
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "sample_id" not in rec or key not in rec:
            raise ValueError(f"{path}:{i}: record needs sample_id and {key}")
        records.append(rec)
    return records


def write_jsonl(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
