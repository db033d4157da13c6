"""Label spaces, probability vectors, and the motion/topology consistency relation.

Everything in this module is an immutable value and every operation is a pure
function, so the types can be shared freely across threads and processes.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TOPOLOGY7 = "topology7"
EGOMOTION3 = "egomotion3"
SPACE_SIZES = {TOPOLOGY7: 7, EGOMOTION3: 3}

# Sum-to-one slack accepted when validating externally produced PDFs.  Tests
# that check our own arithmetic should use a much tighter bound (1e-9).
PDF_SUM_TOL = 1e-6


class LabelConfigError(ValueError):
    """Malformed label-space configuration."""


@dataclass(frozen=True)
class EgoMotionClass:
    """One maneuver class (straight / left / right by default)."""

    id: int
    name: str


@dataclass(frozen=True)
class TopologyClass:
    """One road-topology class plus the set of ego-motion ids it affords."""

    id: int
    name: str
    afforded_motions: frozenset[int]


#: Default catalogue.  The class set is configuration-loadable (see
#: :class:`LabelConfig`), so a different reading of the seven classes costs a
#: config file, not a code change.
DEFAULT_EGOMOTIONS: tuple[EgoMotionClass, ...] = (
    EgoMotionClass(1, "straight"),
    EgoMotionClass(2, "left"),
    EgoMotionClass(3, "right"),
)

DEFAULT_TOPOLOGIES: tuple[TopologyClass, ...] = (
    TopologyClass(1, "four_way_cross", frozenset({1, 2, 3})),
    TopologyClass(2, "t_junction", frozenset({2, 3})),
    TopologyClass(3, "side_road_left", frozenset({1, 2})),
    TopologyClass(4, "side_road_right", frozenset({1, 3})),
    TopologyClass(5, "left_turn_only", frozenset({2})),
    TopologyClass(6, "right_turn_only", frozenset({3})),
    TopologyClass(7, "straight_only", frozenset({1})),
)


@dataclass(frozen=True)
class D2IConfig:
    """Admissible distance-to-intersection windows, in meters.

    Negative distances are before the intersection entry point.  Single-view
    captures must lie in [-L2, -L1]; a view sequence must start in [-L3, 0]
    and end in [0, L4].
    """

    L1: float = 5.0
    L2: float = 15.0
    L3: float = 5.0
    L4: float = 15.0

    def __post_init__(self) -> None:
        for name in ("L1", "L2", "L3", "L4"):
            if getattr(self, name) < 0:
                raise ValueError(f"D2I distance {name} must be >= 0")
        if not self.L1 < self.L2:
            raise ValueError(f"need L1 < L2, got L1={self.L1}, L2={self.L2}")

    def t_range(self) -> tuple[float, float]:
        return (-self.L2, -self.L1)

    def f_start_range(self) -> tuple[float, float]:
        return (-self.L3, 0.0)

    def f_end_range(self) -> tuple[float, float]:
        return (0.0, self.L4)


class ConsistencyMatrix:
    """Boolean relation: ``entries[m-1, c-1]`` iff motion ``m`` is afforded by topology ``c``.

    Shape is (3 motions, 7 topologies).  Every row and every column must have
    at least one ``True`` entry.
    """

    def __init__(self, entries) -> None:
        arr = np.array(entries, dtype=bool)
        if arr.shape != (SPACE_SIZES[EGOMOTION3], SPACE_SIZES[TOPOLOGY7]):
            raise ValueError(f"consistency matrix must be 3x7, got {arr.shape}")
        if not arr.any(axis=1).all():
            raise ValueError("every ego-motion row needs at least one consistent topology")
        if not arr.any(axis=0).all():
            raise ValueError("every topology column needs at least one consistent motion")
        arr.setflags(write=False)
        self._entries = arr

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @classmethod
    def from_topologies(cls, topologies: tuple[TopologyClass, ...]) -> "ConsistencyMatrix":
        arr = np.zeros((SPACE_SIZES[EGOMOTION3], SPACE_SIZES[TOPOLOGY7]), dtype=bool)
        for topo in topologies:
            for m in topo.afforded_motions:
                arr[m - 1, topo.id - 1] = True
        return cls(arr)

    @classmethod
    def default(cls) -> "ConsistencyMatrix":
        return cls.from_topologies(DEFAULT_TOPOLOGIES)

    def row(self, motion_id: int) -> np.ndarray:
        """Topology mask consistent with the given motion id (1-based)."""
        return self._entries[motion_id - 1]

    def afforded(self, topology_id: int) -> frozenset[int]:
        """Motion ids afforded by the given topology id (1-based)."""
        col = self._entries[:, topology_id - 1]
        return frozenset(int(m + 1) for m in np.flatnonzero(col))

    def __eq__(self, other) -> bool:
        return isinstance(other, ConsistencyMatrix) and bool(
            np.array_equal(self._entries, other._entries)
        )

    def __repr__(self) -> str:
        return f"ConsistencyMatrix({self._entries.astype(int).tolist()})"


@dataclass(frozen=True, eq=False)
class ClassPDF:
    """A normalized probability vector tagged with its label space."""

    values: np.ndarray
    space: str

    def __post_init__(self) -> None:
        if self.space not in SPACE_SIZES:
            raise ValueError(f"unknown label space {self.space!r}")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.shape[0] != SPACE_SIZES[self.space]:
            raise ValueError(
                f"{self.space} PDF must have length {SPACE_SIZES[self.space]}, "
                f"got shape {vals.shape}"
            )
        if not np.isfinite(vals).all():
            raise ValueError("PDF entries must be finite")
        if (vals < 0).any():
            raise ValueError("PDF entries must be non-negative")
        if abs(float(vals.sum()) - 1.0) > PDF_SUM_TOL:
            raise ValueError(f"PDF entries must sum to 1, got {float(vals.sum())!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.values.shape[0])


def make_pdf(values, space: str) -> ClassPDF:
    """Normalize non-negative weights into a :class:`ClassPDF`.

    Raises ValueError on a length mismatch, a negative entry, or an all-zero
    vector.  Idempotent: normalizing a PDF returns the same PDF.
    """
    if space not in SPACE_SIZES:
        raise ValueError(f"unknown label space {space!r}")
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1 or vals.shape[0] != SPACE_SIZES[space]:
        raise ValueError(
            f"{space} weights must have length {SPACE_SIZES[space]}, got shape {vals.shape}"
        )
    if not np.isfinite(vals).all():
        raise ValueError("weights must be finite")
    if (vals < 0).any():
        raise ValueError("weights must be non-negative")
    total = float(vals.sum())
    if total <= 0.0:
        raise ValueError("weights must not be all zero")
    return ClassPDF(vals / total, space)


def _pdf_values(pdf) -> np.ndarray:
    if isinstance(pdf, ClassPDF):
        return pdf.values
    return np.asarray(pdf, dtype=np.float64)


def top1(pdf) -> int:
    """Most probable class id (1-based).  Ties break toward the lowest id."""
    return int(np.argmax(_pdf_values(pdf))) + 1


def worst1(pdf) -> int:
    """Least probable class id (1-based).  Ties break toward the lowest id."""
    return int(np.argmin(_pdf_values(pdf))) + 1


@dataclass(frozen=True)
class LabelConfig:
    """The full label-space catalogue: topology classes, motion classes, D2I windows."""

    topologies: tuple[TopologyClass, ...] = DEFAULT_TOPOLOGIES
    egomotions: tuple[EgoMotionClass, ...] = DEFAULT_EGOMOTIONS
    d2i: D2IConfig = D2IConfig()

    def __post_init__(self) -> None:
        topo_ids = sorted(t.id for t in self.topologies)
        if topo_ids != list(range(1, SPACE_SIZES[TOPOLOGY7] + 1)):
            raise LabelConfigError(
                f"topology ids must cover 1..{SPACE_SIZES[TOPOLOGY7]} uniquely, got {topo_ids}"
            )
        motion_ids = sorted(m.id for m in self.egomotions)
        if motion_ids != list(range(1, SPACE_SIZES[EGOMOTION3] + 1)):
            raise LabelConfigError(
                f"ego-motion ids must cover 1..{SPACE_SIZES[EGOMOTION3]} uniquely, got {motion_ids}"
            )
        valid = set(motion_ids)
        for topo in self.topologies:
            if not topo.afforded_motions:
                raise LabelConfigError(f"topology {topo.id} affords no motions")
            if not topo.afforded_motions <= valid:
                raise LabelConfigError(
                    f"topology {topo.id} affords unknown motion ids "
                    f"{sorted(topo.afforded_motions - valid)}"
                )

    def topology(self, topology_id: int) -> TopologyClass:
        for t in self.topologies:
            if t.id == topology_id:
                return t
        raise KeyError(topology_id)

    def egomotion(self, motion_id: int) -> EgoMotionClass:
        for m in self.egomotions:
            if m.id == motion_id:
                return m
        raise KeyError(motion_id)

    def motion_id(self, name: str) -> int:
        for m in self.egomotions:
            if m.name == name:
                return m.id
        raise KeyError(name)

    def topology_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in sorted(self.topologies, key=lambda t: t.id))

    def egomotion_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in sorted(self.egomotions, key=lambda m: m.id))

    def consistency(self) -> ConsistencyMatrix:
        return ConsistencyMatrix.from_topologies(self.topologies)

    @classmethod
    def default(cls) -> "LabelConfig":
        return cls()

    @classmethod
    def from_file(cls, path) -> "LabelConfig":
        """Load a catalogue from a TOML file.

        Expected keys: ``topology_classes`` (list of tables with ``id``,
        ``name`` and ``afforded_motions``, motions given by name or id),
        optional ``egomotion_classes``, and an optional ``d2i`` table with
        L1..L4.  Missing sections fall back to the defaults.
        """
        raw = tomllib.loads(Path(path).read_text())
        try:
            motions = tuple(
                EgoMotionClass(int(row["id"]), str(row["name"]))
                for row in raw.get("egomotion_classes", [])
            ) or DEFAULT_EGOMOTIONS
            by_name = {m.name: m.id for m in motions}

            def resolve_motion(value) -> int:
                if isinstance(value, str):
                    if value not in by_name:
                        raise LabelConfigError(f"unknown ego-motion name {value!r}")
                    return by_name[value]
                return int(value)

            topologies = tuple(
                TopologyClass(
                    int(row["id"]),
                    str(row["name"]),
                    frozenset(resolve_motion(v) for v in row["afforded_motions"]),
                )
                for row in raw.get("topology_classes", [])
            ) or DEFAULT_TOPOLOGIES
            d2i_raw = raw.get("d2i", {})
            d2i = D2IConfig(
                L1=float(d2i_raw.get("L1", 5.0)),
                L2=float(d2i_raw.get("L2", 15.0)),
                L3=float(d2i_raw.get("L3", 5.0)),
                L4=float(d2i_raw.get("L4", 15.0)),
            )
        except (KeyError, TypeError) as exc:
            raise LabelConfigError(f"malformed label config {path}: {exc}") from exc
        return cls(topologies=topologies, egomotions=motions, d2i=d2i)

    def to_file(self, path) -> None:
        """Write the catalogue as TOML (round-trips through :meth:`from_file`)."""
        lines = ["[d2i]"]
        for name in ("L1", "L2", "L3", "L4"):
            lines.append(f"{name} = {getattr(self.d2i, name)}")
        for m in self.egomotions:
            lines += ["", "[[egomotion_classes]]", f"id = {m.id}", f'name = "{m.name}"']
        for t in self.topologies:
            names = ", ".join(f'"{self.egomotion(mid).name}"' for mid in sorted(t.afforded_motions))
            lines += [
                "",
                "[[topology_classes]]",
                f"id = {t.id}",
                f'name = "{t.name}"',
                f"afforded_motions = [{names}]",
            ]
        Path(path).write_text("\n".join(lines) + "\n")
