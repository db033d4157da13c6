"""Drive-folder ingestion, cross-validation fold plans, and view pairing.

Annotation format: one CSV row per sample, header required.  Columns::

    kind,intersection_id,topology,drive_id,frame_start,frame_end,
    d2i_start,d2i_end,egomotion,frame_of_entry,lat,lon

``kind`` is ``T`` (single view, one frame, ``d2i_start`` = capture distance)
or ``F`` (view sequence, inclusive frame range, ``d2i_start``/``d2i_end`` =
sequence start/end distances, ``egomotion`` = motion class id).  Trailing
columns are optional.  Image files live under the drive-folder convention
``<root>/<drive_id>/image_02/data/<frame:010d>.png``.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import D2IConfig, LabelConfig

ANNOTATION_COLUMNS = (
    "kind",
    "intersection_id",
    "topology",
    "drive_id",
    "frame_start",
    "frame_end",
    "d2i_start",
    "d2i_end",
    "egomotion",
    "frame_of_entry",
    "lat",
    "lon",
)

PARTITIONS = ("train", "val", "test")


class IngestError(ValueError):
    """Raised in strict mode for any annotation problem."""


class PairingError(ValueError):
    """No eligible view sequence available for some single-view sample."""


def frame_path(root, drive_id: str, frame: int) -> Path:
    return Path(root) / drive_id / "image_02" / "data" / f"{frame:010d}.png"


@dataclass(frozen=True)
class IntersectionRecord:
    intersection_id: str
    topology: int
    drive_id: str
    frame_of_entry: int
    geo_hint: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.frame_of_entry < 0:
            raise ValueError(f"frame_of_entry must be >= 0, got {self.frame_of_entry}")
        if not 1 <= self.topology <= 7:
            raise ValueError(f"topology must be in [1, 7], got {self.topology}")


@dataclass(frozen=True)
class SampleT:
    """Single forward view captured before entering the intersection."""

    intersection_id: str
    image_path: Path
    capture_d2i: float

    @property
    def sample_id(self) -> str:
        return f"{self.intersection_id}/T{Path(self.image_path).stem}"


@dataclass(frozen=True)
class SampleF:
    """Egocentric view sequence captured while passing the intersection."""

    intersection_id: str
    frame_paths: tuple[Path, ...]
    egomotion_label: int
    start_d2i: float
    end_d2i: float

    def __post_init__(self) -> None:
        if not self.frame_paths:
            raise ValueError("frame list must be non-empty")

    @property
    def sample_id(self) -> str:
        first = Path(self.frame_paths[0]).stem
        last = Path(self.frame_paths[-1]).stem
        return f"{self.intersection_id}/F{first}-{last}"


@dataclass(frozen=True)
class SamplePair:
    """A single-view sample joined with a view sequence of the same topology.

    The sequence preferably comes from the same intersection; when none
    exists in the partition, a same-topology sequence is reused, so the
    members may reference different intersections.
    """

    sample_t: SampleT
    sample_f: SampleF
    topology: int

    @property
    def sample_id(self) -> str:
        return f"{self.sample_t.sample_id}+{self.sample_f.sample_id}"


@dataclass(frozen=True)
class IngestResult:
    records: tuple[IntersectionRecord, ...]
    samples_t: tuple[SampleT, ...]
    samples_f: tuple[SampleF, ...]
    diagnostics: tuple[str, ...] = ()

    def topology_of(self) -> dict[str, int]:
        return {r.intersection_id: r.topology for r in self.records}


@dataclass(frozen=True)
class AnnotationRow:
    """One annotation line; used by the writer and by the synthetic generator."""

    kind: str
    intersection_id: str
    topology: int
    drive_id: str
    frame_start: int
    frame_end: int | None = None
    d2i_start: float | None = None
    d2i_end: float | None = None
    egomotion: int | None = None
    frame_of_entry: int | None = None
    lat: float | None = None
    lon: float | None = None


def write_annotation(path, rows) -> None:
    def fmt(v):
        return "" if v is None else v

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for r in rows:
            writer.writerow([fmt(getattr(r, col)) for col in ANNOTATION_COLUMNS])


def _parse_row(raw: dict, line_no: int) -> AnnotationRow:
    def opt(name, conv):
        v = (raw.get(name) or "").strip()
        return conv(v) if v else None

    try:
        kind = (raw.get("kind") or "").strip().upper()
        if kind not in ("T", "F"):
            raise ValueError(f"kind must be T or F, got {raw.get('kind')!r}")
        row = AnnotationRow(
            kind=kind,
            intersection_id=(raw.get("intersection_id") or "").strip(),
            topology=int(raw["topology"]),
            drive_id=(raw.get("drive_id") or "").strip(),
            frame_start=int(raw["frame_start"]),
            frame_end=opt("frame_end", int),
            d2i_start=opt("d2i_start", float),
            d2i_end=opt("d2i_end", float),
            egomotion=opt("egomotion", int),
            frame_of_entry=opt("frame_of_entry", int),
            lat=opt("lat", float),
            lon=opt("lon", float),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"line {line_no}: malformed row ({exc})") from exc
    if not row.intersection_id or not row.drive_id:
        raise ValueError(f"line {line_no}: intersection_id and drive_id are required")
    if row.frame_start < 0:
        raise ValueError(f"line {line_no}: negative frame index")
    if row.kind == "F":
        if row.frame_end is None or row.frame_end < row.frame_start:
            raise ValueError(f"line {line_no}: F row needs frame_start <= frame_end")
        if row.egomotion is None or row.d2i_start is None or row.d2i_end is None:
            raise ValueError(f"line {line_no}: F row needs egomotion, d2i_start, d2i_end")
        if not 1 <= row.egomotion <= 3:
            raise ValueError(f"line {line_no}: egomotion must be in [1, 3]")
    else:
        if row.d2i_start is None:
            raise ValueError(f"line {line_no}: T row needs d2i_start (capture distance)")
    return row


def ingest(
    root_path,
    annotation_file,
    labels: LabelConfig | None = None,
    *,
    strict: bool = False,
    check_files: bool = True,
) -> IngestResult:
    """Read an annotation CSV into validated intersection records and samples.

    Rows that violate the D2I windows, reference missing files, or fail to
    parse are skipped with a per-row diagnostic; ``strict=True`` turns every
    diagnostic into an :class:`IngestError`.  Intersections whose rows
    disagree on topology, drive or entry frame are dropped entirely, which
    keeps the result independent of row order.
    """
    labels = labels or LabelConfig.default()
    d2i = labels.d2i
    root = Path(root_path)
    diagnostics: list[str] = []

    def problem(msg: str) -> None:
        if strict:
            raise IngestError(msg)
        diagnostics.append(msg)

    rows: list[AnnotationRow] = []
    with open(annotation_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return IngestResult((), (), (), ())
        missing = set(ANNOTATION_COLUMNS[:5]) - set(reader.fieldnames)
        if missing:
            raise IngestError(f"annotation header missing columns: {sorted(missing)}")
        for line_no, raw in enumerate(reader, start=2):
            try:
                rows.append(_parse_row(raw, line_no))
            except ValueError as exc:
                problem(str(exc))

    kept: list[tuple[AnnotationRow, SampleT | SampleF]] = []
    for row in rows:
        tag = f"{row.kind} sample {row.intersection_id}/{row.frame_start}"
        if row.kind == "T":
            lo, hi = d2i.t_range()
            if not lo <= row.d2i_start <= hi:
                problem(f"{tag}: capture_d2i {row.d2i_start} outside [{lo}, {hi}]")
                continue
            path = frame_path(root, row.drive_id, row.frame_start)
            if check_files and not path.is_file():
                problem(f"{tag}: missing image {path}")
                continue
            kept.append((row, SampleT(row.intersection_id, path, row.d2i_start)))
        else:
            lo_s, hi_s = d2i.f_start_range()
            lo_e, hi_e = d2i.f_end_range()
            if not lo_s <= row.d2i_start <= hi_s:
                problem(f"{tag}: start_d2i {row.d2i_start} outside [{lo_s}, {hi_s}]")
                continue
            if not lo_e <= row.d2i_end <= hi_e:
                problem(f"{tag}: end_d2i {row.d2i_end} outside [{lo_e}, {hi_e}]")
                continue
            paths = tuple(
                frame_path(root, row.drive_id, f)
                for f in range(row.frame_start, row.frame_end + 1)
            )
            if check_files:
                absent = [p for p in paths if not p.is_file()]
                if absent:
                    problem(f"{tag}: missing {len(absent)} frame(s), first {absent[0]}")
                    continue
            kept.append(
                (
                    row,
                    SampleF(
                        row.intersection_id,
                        paths,
                        row.egomotion,
                        row.d2i_start,
                        row.d2i_end,
                    ),
                )
            )

    # Group per intersection and reject internally inconsistent groups.
    by_iid: dict[str, list[tuple[AnnotationRow, SampleT | SampleF]]] = defaultdict(list)
    for row, sample in kept:
        by_iid[row.intersection_id].append((row, sample))

    records: list[IntersectionRecord] = []
    samples_t: list[SampleT] = []
    samples_f: list[SampleF] = []
    for iid in sorted(by_iid):
        group = by_iid[iid]
        topologies = {r.topology for r, _ in group}
        drives = {r.drive_id for r, _ in group}
        entries = {r.frame_of_entry for r, _ in group if r.frame_of_entry is not None}
        geos = {(r.lat, r.lon) for r, _ in group if r.lat is not None and r.lon is not None}
        if len(topologies) > 1 or len(drives) > 1 or len(entries) > 1 or len(geos) > 1:
            problem(f"intersection {iid}: conflicting rows, dropped {len(group)} sample(s)")
            continue
        if entries:
            entry = entries.pop()
        else:
            f_starts = [r.frame_start for r, _ in group if r.kind == "F"]
            entry = min(f_starts) if f_starts else min(r.frame_start for r, _ in group)
        try:
            records.append(
                IntersectionRecord(
                    intersection_id=iid,
                    topology=topologies.pop(),
                    drive_id=drives.pop(),
                    frame_of_entry=entry,
                    geo_hint=geos.pop() if geos else None,
                )
            )
        except ValueError as exc:
            problem(f"intersection {iid}: {exc}")
            continue
        for _, sample in group:
            (samples_t if isinstance(sample, SampleT) else samples_f).append(sample)

    samples_t.sort(key=lambda s: s.sample_id)
    samples_f.sort(key=lambda s: s.sample_id)
    return IngestResult(
        tuple(records), tuple(samples_t), tuple(samples_f), tuple(diagnostics)
    )


@dataclass(frozen=True)
class FoldPlan:
    """One train/val/test partition of intersection ids."""

    fold_index: int
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]

    def partition_of(self, intersection_id: str) -> str:
        for name in PARTITIONS:
            if intersection_id in getattr(self, name):
                return name
        raise KeyError(intersection_id)

    def partition(self, name: str) -> frozenset[str]:
        if name not in PARTITIONS:
            raise KeyError(name)
        return getattr(self, name)


def split_counts(n: int, ratio: tuple[int, int, int]) -> tuple[int, int, int]:
    """Largest-remainder split of ``n`` items into three quotas."""
    total = sum(ratio)
    exact = [n * r / total for r in ratio]
    counts = [int(x) for x in exact]
    remainders = sorted(
        range(3), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def make_folds(
    records,
    ratio: tuple[int, int, int] = (5, 2, 3),
    k: int = 5,
    seed: int = 0,
) -> list[FoldPlan]:
    """Build ``k`` stratified train/val/test plans over intersections.

    Each fold is an independent re-randomization under a seed derived from
    ``(seed, fold_index)``, stratified by topology class so the skewed class
    counts cannot starve a partition.  Deterministic for a fixed seed.
    """
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    by_class: dict[int, list[str]] = defaultdict(list)
    for rec in records:
        by_class[rec.topology].append(rec.intersection_id)
    for c in by_class:
        by_class[c].sort()
    short = {c: len(ids) for c, ids in by_class.items() if len(ids) < k}
    if short:
        raise ValueError(
            f"need at least {k} intersections per topology class, got {short}"
        )

    plans = []
    for fold in range(k):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), fold]))
        parts: dict[str, list[str]] = {name: [] for name in PARTITIONS}
        for c in sorted(by_class):
            ids = list(by_class[c])
            order = rng.permutation(len(ids))
            shuffled = [ids[i] for i in order]
            n_train, n_val, n_test = split_counts(len(ids), ratio)
            parts["train"] += shuffled[:n_train]
            parts["val"] += shuffled[n_train : n_train + n_val]
            parts["test"] += shuffled[n_train + n_val :]
        plans.append(
            FoldPlan(
                fold_index=fold,
                train=frozenset(parts["train"]),
                val=frozenset(parts["val"]),
                test=frozenset(parts["test"]),
            )
        )
    return plans


def validate_fold(plan: FoldPlan, records, ratio: tuple[int, int, int] = (5, 2, 3)) -> None:
    """Raise ValueError unless the plan satisfies the partition invariants.

    Checks pairwise disjointness, exact coverage of all intersections, and
    per-class partition sizes within +/-1 of the exact ratio quota.
    """
    sets = [plan.train, plan.val, plan.test]
    for i in range(3):
        for j in range(i + 1, 3):
            overlap = sets[i] & sets[j]
            if overlap:
                raise ValueError(
                    f"fold {plan.fold_index}: partitions {PARTITIONS[i]} and "
                    f"{PARTITIONS[j]} overlap on {sorted(overlap)[:5]}"
                )
    all_ids = {r.intersection_id for r in records}
    covered = plan.train | plan.val | plan.test
    if covered != all_ids:
        raise ValueError(
            f"fold {plan.fold_index}: partitions cover {len(covered)} of "
            f"{len(all_ids)} intersections"
        )
    by_class: dict[int, list[str]] = defaultdict(list)
    for rec in records:
        by_class[rec.topology].append(rec.intersection_id)
    total = sum(ratio)
    for c, ids in sorted(by_class.items()):
        n = len(ids)
        for name, r in zip(PARTITIONS, ratio):
            got = len(plan.partition(name) & set(ids))
            exact = n * r / total
            if abs(got - exact) > 1.0:
                raise ValueError(
                    f"fold {plan.fold_index}: class {c} has {got} {name} "
                    f"intersections, quota {exact:.2f} +/- 1"
                )


def make_pairs(
    fold: FoldPlan,
    samples_t,
    samples_f,
    topology_of: dict[str, int],
) -> dict[str, list[SamplePair]]:
    """Pair every single-view sample with a view sequence, per partition.

    A same-intersection sequence is preferred; otherwise a same-partition,
    same-topology sequence is reused round-robin in intersection-id order.
    Pairing never crosses partitions.  Raises :class:`PairingError` when a
    partition has a single-view sample with no eligible sequence.
    """
    out: dict[str, list[SamplePair]] = {}
    for name in PARTITIONS:
        ids = fold.partition(name)
        part_t = sorted(
            (s for s in samples_t if s.intersection_id in ids), key=lambda s: s.sample_id
        )
        part_f = sorted(
            (s for s in samples_f if s.intersection_id in ids),
            key=lambda s: (s.intersection_id, s.sample_id),
        )
        f_by_iid: dict[str, list[SampleF]] = defaultdict(list)
        f_by_class: dict[int, list[SampleF]] = defaultdict(list)
        for s in part_f:
            f_by_iid[s.intersection_id].append(s)
            f_by_class[topology_of[s.intersection_id]].append(s)
        rotation: dict = defaultdict(int)
        pairs = []
        for t in part_t:
            topo = topology_of[t.intersection_id]
            if t.intersection_id in f_by_iid:
                pool = f_by_iid[t.intersection_id]
                key = ("iid", t.intersection_id)
            else:
                pool = f_by_class.get(topo, [])
                key = ("class", topo)
                if not pool:
                    raise PairingError(
                        f"fold {fold.fold_index} {name}: no class-{topo} sequence "
                        f"available for {t.sample_id}"
                    )
            f = pool[rotation[key] % len(pool)]
            rotation[key] += 1
            pairs.append(SamplePair(sample_t=t, sample_f=f, topology=topo))
        out[name] = pairs
    return out


def folds_to_json(plans, path, *, seed: int | None = None, ratio=None) -> None:
    payload = {
        "version": 1,
        "seed": seed,
        "ratio": list(ratio) if ratio is not None else None,
        "k": len(plans),
        "folds": [
            {
                "fold_index": p.fold_index,
                "train": sorted(p.train),
                "val": sorted(p.val),
                "test": sorted(p.test),
            }
            for p in plans
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def folds_from_json(path) -> list[FoldPlan]:
    payload = json.loads(Path(path).read_text())
    return [
        FoldPlan(
            fold_index=int(f["fold_index"]),
            train=frozenset(f["train"]),
            val=frozenset(f["val"]),
            test=frozenset(f["test"]),
        )
        for f in payload["folds"]
    ]
