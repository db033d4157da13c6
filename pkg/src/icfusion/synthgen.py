"""Synthetic toy-dataset generator in the ingestion layout.

Renders one drive folder per synthetic intersection: a scene image whose
glyph (road-arm layout plus class tint) encodes the topology class, and a
frame sequence whose textured background translates according to the
ego-motion script, so dense flow separates the motion classes by
construction.  Annotation, folder layout, and D2I metadata match the
ingestion contract, which makes the whole pipeline runnable at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from matplotlib.colors import hsv_to_rgb

from .core import LabelConfig
from .dataset import AnnotationRow, frame_path, write_annotation
from .training import derive_seed

# Road arms per topology class: N up, E right, W left; S is the approach.
DEFAULT_GLYPHS: dict[int, str] = {
    1: "NSEW",
    2: "SEW",
    3: "NSW",
    4: "NSE",
    5: "SW",
    6: "SE",
    7: "NS",
}

# Per-step pixel drift (dx, dy) realizing each ego-motion class.
DEFAULT_MOTION_SCRIPTS: dict[int, tuple[float, float]] = {
    1: (0.0, 2.5),
    2: (-3.0, 1.0),
    3: (3.0, 1.0),
}


@dataclass(frozen=True)
class SynthSpec:
    """Shape and content of one generated dataset.

    Fixed (spec, seed) produces byte-identical output.  ``noise_level`` is
    the standard deviation of additive pixel noise as a fraction of the
    8-bit range; 0 renders noise-free scenes.
    """

    t_per_class: int = 10
    f_per_class: int = 10
    image_size: int = 128
    min_seq_frames: int = 11
    max_seq_frames: int = 16
    noise_level: float = 0.0
    seed: int = 0
    glyphs: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_GLYPHS))
    motion_scripts: dict[int, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_MOTION_SCRIPTS)
    )

    def __post_init__(self) -> None:
        if self.t_per_class < 1 or self.f_per_class < 0:
            raise ValueError("need t_per_class >= 1 and f_per_class >= 0")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 2 <= self.min_seq_frames <= self.max_seq_frames:
            raise ValueError("need 2 <= min_seq_frames <= max_seq_frames")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")


@dataclass(frozen=True)
class GeneratedDataset:
    root: Path
    annotation_path: Path
    n_intersections: int
    n_samples_t: int
    n_samples_f: int


def _item_rng(spec: SynthSpec, *parts) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(derive_seed("synth", spec.seed, *parts))
    )


def _class_tint(topology: int) -> np.ndarray:
    rgb = hsv_to_rgb([(topology - 1) / 7.0, 0.65, 0.78])
    return (np.asarray(rgb) * 255.0).round().astype(np.float64)


def _add_noise(img: np.ndarray, rng: np.random.Generator, level: float) -> np.ndarray:
    if level <= 0:
        return img
    noisy = img.astype(np.float64) + rng.normal(0.0, level * 255.0, img.shape)
    return np.clip(noisy, 0, 255).astype(np.uint8)


def render_scene(
    topology: int,
    spec: SynthSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """One RGB scene image: tinted road arms on a dark ground."""
    size = spec.image_size
    arms = spec.glyphs[topology]
    bg = 28.0 + rng.uniform(-8.0, 8.0)
    img = np.full((size, size, 3), bg, dtype=np.float64)

    half = size // 2
    width = int(size * rng.uniform(0.16, 0.24))
    cx = half + int(rng.uniform(-size * 0.06, size * 0.06))
    cy = half + int(rng.uniform(-size * 0.06, size * 0.06))
    color = _class_tint(topology) * rng.uniform(0.9, 1.05)

    lo_x, hi_x = cx - width // 2, cx + width // 2
    lo_y, hi_y = cy - width // 2, cy + width // 2
    if "N" in arms:
        img[: cy, lo_x:hi_x] = color
    if "S" in arms:
        img[cy:, lo_x:hi_x] = color
    if "E" in arms:
        img[lo_y:hi_y, cx:] = color
    if "W" in arms:
        img[lo_y:hi_y, : cx] = color
    img[lo_y:hi_y, lo_x:hi_x] = color  # junction core

    # Lane mark: a light notch along the approach, jittered per scene.
    mark_w = max(2, width // 8)
    mark_y = cy + int((size - cy) * rng.uniform(0.3, 0.7))
    if mark_y < size - 2:
        img[mark_y : mark_y + 2, cx - mark_w : cx + mark_w] = 235.0

    img = np.clip(img, 0, 255).astype(np.uint8)
    return _add_noise(img, rng, spec.noise_level)


def render_sequence(
    motion: int,
    n_frames: int,
    spec: SynthSpec,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Frames of a textured ground translating per the motion script."""
    size = spec.image_size
    base_dx, base_dy = spec.motion_scripts[motion]
    scale = rng.uniform(0.9, 1.1)
    dx, dy = base_dx * scale, base_dy * scale

    steps = n_frames - 1
    margin = int(np.ceil(steps * max(abs(dx), abs(dy)))) + 4
    big = rng.integers(0, 256, (size + 2 * margin, size + 2 * margin, 3)).astype(
        np.uint8
    )
    big = cv2.GaussianBlur(big, (5, 5), 0)

    frames = []
    for t in range(n_frames):
        # Content moving by (+dx, +dy) per step means the crop window moves
        # the opposite way across the shared texture.
        ox = margin - int(round(t * dx))
        oy = margin - int(round(t * dy))
        frame = big[oy : oy + size, ox : ox + size].copy()
        frames.append(_add_noise(frame, rng, spec.noise_level))
    return frames


def make_translation_pair(
    shift_x: float,
    shift_y: float,
    size: int = 128,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Two textured frames where the second is the first shifted by (dx, dy).

    Integer shifts are exact crops of a shared texture, which makes the
    pair a ground-truth oracle for dense-flow estimators.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51F7]))
    margin = int(np.ceil(max(abs(shift_x), abs(shift_y)))) + 2
    big = rng.integers(0, 256, (size + 2 * margin, size + 2 * margin, 3)).astype(
        np.uint8
    )
    big = cv2.GaussianBlur(big, (5, 5), 0)
    a = big[margin : margin + size, margin : margin + size].copy()
    oy = margin - int(round(shift_y))
    ox = margin - int(round(shift_x))
    b = big[oy : oy + size, ox : ox + size].copy()
    return a, b


def _afforded_cycle(labels: LabelConfig, topology: int, index: int) -> int:
    motions = sorted(labels.topology(topology).afforded_motions)
    return motions[index % len(motions)]


def generate(
    spec: SynthSpec,
    out_dir,
    labels: LabelConfig | None = None,
) -> GeneratedDataset:
    """Write a full synthetic dataset (drive folders + annotation CSV).

    Per topology class, intersection ``i`` holds a scene image when
    ``i < t_per_class`` and a frame sequence when ``i < f_per_class``; the
    sequence's ego-motion cycles through the class's afforded motions, so
    every motion class appears in any stratified partition that includes
    the single-motion topology classes.
    """
    labels = labels or LabelConfig.default()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows: list[AnnotationRow] = []
    n_t = n_f = n_int = 0
    entry_frame = 10

    for topology in sorted(spec.glyphs):
        for idx in range(max(spec.t_per_class, spec.f_per_class)):
            iid = f"c{topology}i{idx:02d}"
            drive = f"drive_{iid}"
            n_int += 1
            if idx < spec.t_per_class:
                rng = _item_rng(spec, "t", topology, idx)
                scene = render_scene(topology, spec, rng)
                path = frame_path(root, drive, 0)
                path.parent.mkdir(parents=True, exist_ok=True)
                if not cv2.imwrite(str(path), cv2.cvtColor(scene, cv2.COLOR_RGB2BGR)):
                    raise OSError(f"cannot write {path}")
                rows.append(
                    AnnotationRow(
                        kind="T",
                        intersection_id=iid,
                        topology=topology,
                        drive_id=drive,
                        frame_start=0,
                        d2i_start=round(float(rng.uniform(*labels.d2i.t_range())), 2),
                        frame_of_entry=entry_frame,
                    )
                )
                n_t += 1
            if idx < spec.f_per_class:
                rng = _item_rng(spec, "f", topology, idx)
                motion = _afforded_cycle(labels, topology, idx)
                n_frames = spec.min_seq_frames + idx % (
                    spec.max_seq_frames - spec.min_seq_frames + 1
                )
                frames = render_sequence(motion, n_frames, spec, rng)
                for k, frame in enumerate(frames):
                    path = frame_path(root, drive, entry_frame + k)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    if not cv2.imwrite(
                        str(path), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)
                    ):
                        raise OSError(f"cannot write {path}")
                rows.append(
                    AnnotationRow(
                        kind="F",
                        intersection_id=iid,
                        topology=topology,
                        drive_id=drive,
                        frame_start=entry_frame,
                        frame_end=entry_frame + n_frames - 1,
                        d2i_start=round(
                            float(rng.uniform(*labels.d2i.f_start_range())), 2
                        ),
                        d2i_end=round(float(rng.uniform(*labels.d2i.f_end_range())), 2),
                        egomotion=motion,
                        frame_of_entry=entry_frame,
                    )
                )
                n_f += 1

    annotation = root / "annotation.csv"
    write_annotation(annotation, rows)
    return GeneratedDataset(
        root=root,
        annotation_path=annotation,
        n_intersections=n_int,
        n_samples_t=n_t,
        n_samples_f=n_f,
    )
