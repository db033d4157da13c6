"""Dense optical flow, flow-image rendering, and fixed-length embeddings.

The ego-motion branch turns a view sequence into a fixed-shape tensor in
three steps: dense flow between consecutive frames, an HSV rendering of
each flow field as an RGB image, and a 2048-dim embedding per image from a
frozen convolutional backbone.  Sequences are then pre-padded with zero
rows (or evenly subsampled) to exactly ``seq_len`` steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from torch import nn

from .training import derive_seed, seeded_rng

EMBED_DIM = 2048
SEQ_LEN = 80
DEFAULT_EMBED_SNAPSHOT = "pooledconv2048@s0"


@dataclass(frozen=True)
class FlowParams:
    """Farneback dense-flow settings."""

    pyr_scale: float = 0.5
    levels: int = 4
    winsize: int = 21
    iterations: int = 5
    poly_n: int = 7
    poly_sigma: float = 1.5

    def __post_init__(self) -> None:
        if not 0 < self.pyr_scale < 1:
            raise ValueError(f"pyr_scale must be in (0, 1), got {self.pyr_scale}")
        if min(self.levels, self.winsize, self.iterations, self.poly_n) < 1:
            raise ValueError("levels, winsize, iterations, poly_n must be >= 1")


def _to_gray(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[2] == 3:
        return cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)
    raise ValueError(f"expected HxW or HxWx3 frame, got shape {frame.shape}")


def compute_flow(
    frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams | None = None
) -> np.ndarray:
    """Dense flow from ``frame_a`` to ``frame_b`` as an HxWx2 float32 field.

    Identical frames short-circuit to an exactly zero field, so a static
    scene renders as a perfectly neutral flow image.
    """
    if frame_a.shape != frame_b.shape:
        raise ValueError(
            f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}"
        )
    params = params or FlowParams()
    gray_a = _to_gray(frame_a)
    gray_b = _to_gray(frame_b)
    if np.array_equal(gray_a, gray_b):
        return np.zeros(gray_a.shape + (2,), dtype=np.float32)
    flow = cv2.calcOpticalFlowFarneback(
        gray_a,
        gray_b,
        None,
        params.pyr_scale,
        params.levels,
        params.winsize,
        params.iterations,
        params.poly_n,
        params.poly_sigma,
        0,
    )
    return flow.astype(np.float32, copy=False)


def magnitude_angle(flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel magnitude and direction angle in [0, 2*pi)."""
    mag = np.hypot(flow[..., 0], flow[..., 1])
    two_pi = 2.0 * np.pi
    ang = np.mod(np.arctan2(flow[..., 1], flow[..., 0]), two_pi)
    # mod of a tiny negative angle can round up to exactly 2*pi; keep the
    # documented half-open range.
    return mag, np.where(ang >= two_pi, 0.0, ang)


def colorize_flow(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Render a flow field as an RGB uint8 image (HSV direction coding).

    Hue encodes direction, saturation encodes magnitude relative to
    ``max_mag`` (the field's own maximum when omitted), value is fixed at 1,
    so zero flow renders white.  Passing a shared ``max_mag`` keeps hues
    identical across frames and only rescales saturation.
    """
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected HxWx2 flow, got shape {flow.shape}")
    mag, ang = magnitude_angle(flow.astype(np.float64, copy=False))
    scale = float(mag.max()) if max_mag is None else float(max_mag)
    hsv = np.empty(flow.shape[:2] + (3,), dtype=np.float64)
    hsv[..., 0] = ang / (2.0 * np.pi)
    if scale > 0:
        hsv[..., 1] = np.clip(mag / scale, 0.0, 1.0)
    else:
        hsv[..., 1] = 0.0
    hsv[..., 2] = 1.0
    rgb = hsv_to_rgb(hsv)
    return (rgb * 255.0).round().astype(np.uint8)


def flow_images(frames, params: FlowParams | None = None) -> list[np.ndarray]:
    """Flow renderings between consecutive frames (n frames -> n-1 images)."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    return [
        colorize_flow(compute_flow(a, b, params)) for a, b in zip(frames, frames[1:])
    ]


def load_frame(path) -> np.ndarray:
    """Read an image file as RGB uint8."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def save_frame(path, rgb: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write image {path}")


def subsample_indices(m: int, n: int) -> np.ndarray:
    """Evenly spaced frame picks: round(linspace(0, m-1, n)).

    For m > n the rounded indices are strictly increasing (the step exceeds
    one), so no frame is used twice and both endpoints are kept.
    """
    if m < 1 or n < 1:
        raise ValueError(f"need m, n >= 1, got m={m}, n={n}")
    return np.round(np.linspace(0.0, m - 1, n)).astype(np.int64)


def pad_or_subsample(
    features: np.ndarray, seq_len: int = SEQ_LEN
) -> tuple[np.ndarray, np.ndarray]:
    """Fit a (m, D) step matrix to exactly ``seq_len`` rows.

    Short sequences are pre-padded: zero rows first, the real steps flush
    at the end, with a boolean mask marking the real rows.  Long sequences
    are evenly subsampled (mask all True).  Returns ``(out, mask)`` with
    shapes (seq_len, D) and (seq_len,).
    """
    if features.ndim != 2:
        raise ValueError(f"expected (m, D) features, got shape {features.shape}")
    m = features.shape[0]
    if m == 0:
        raise ValueError("empty step sequence")
    mask = np.zeros(seq_len, dtype=bool)
    if m <= seq_len:
        out = np.zeros((seq_len, features.shape[1]), dtype=np.float32)
        out[seq_len - m :] = features
        mask[seq_len - m :] = True
    else:
        out = features[subsample_indices(m, seq_len)].astype(np.float32, copy=False)
        mask[:] = True
    return out, mask


def preprocess_rgb(
    images, input_size: int, normalization: str = "symmetric"
) -> torch.Tensor:
    """Resize RGB uint8 images into a (N, 3, S, S) float tensor.

    ``normalization`` is ``symmetric`` for [-1, 1] scaling or ``imagenet``
    for the standard per-channel mean/std used by pretrained backbones.
    """
    if normalization not in ("symmetric", "imagenet"):
        raise ValueError(f"unknown normalization {normalization!r}")
    batch = np.empty((len(images), input_size, input_size, 3), dtype=np.float32)
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError("expected RGB uint8 images")
        if img.shape[:2] != (input_size, input_size):
            img = cv2.resize(
                img, (input_size, input_size), interpolation=cv2.INTER_AREA
            )
        batch[i] = img.astype(np.float32)
    x = torch.from_numpy(batch).permute(0, 3, 1, 2) / 255.0
    if normalization == "symmetric":
        return x * 2.0 - 1.0
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    return (x - mean) / std


class PooledConvEmbedder(nn.Module):
    """Small strided conv stack ending in a 2048-dim global average pool."""

    input_size = 299

    def __init__(self) -> None:
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, kernel_size=7, stride=4, padding=3),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, kernel_size=5, stride=2, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 128, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(128, EMBED_DIM, kernel_size=1),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


def parse_snapshot(snapshot: str) -> tuple[str, str]:
    """Split ``arch@source`` into its parts; source is ``s<int>`` or ``imagenet``."""
    arch, sep, source = snapshot.partition("@")
    if not sep or not arch or not source:
        raise ValueError(f"snapshot must look like 'arch@source', got {snapshot!r}")
    if source != "imagenet" and not (source.startswith("s") and source[1:].isdigit()):
        raise ValueError(f"snapshot source must be 's<seed>' or 'imagenet', got {source!r}")
    return arch, source


def _load_inception_backbone():
    try:
        import torchvision  # noqa: F401
        from torchvision.models import Inception_V3_Weights, inception_v3
    except ImportError as exc:
        raise RuntimeError(
            "snapshot 'inception3@imagenet' needs the optional torchvision "
            "dependency (pip install icfusion[pretrained])"
        ) from exc
    try:
        model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise RuntimeError(
            "could not load ImageNet weights for inception3; they must be "
            "available in the local torchvision cache (this environment may "
            "not allow downloads). Use a seeded snapshot such as "
            f"'{DEFAULT_EMBED_SNAPSHOT}' instead."
        ) from exc
    model.fc = nn.Identity()
    model.aux_logits = False
    model.AuxLogits = None
    return model


class FlowEmbedder:
    """Frozen image-to-vector encoder producing 2048-dim embeddings.

    ``snapshot`` selects the weights: ``pooledconv2048@s<seed>`` builds the
    local conv stack with seed-determined random weights (the default, and
    fully offline); ``inception3@imagenet`` reuses a pretrained torchvision
    backbone when its weights are locally available.
    """

    def __init__(self, snapshot: str = DEFAULT_EMBED_SNAPSHOT) -> None:
        arch, source = parse_snapshot(snapshot)
        self.snapshot = snapshot
        self.dim = EMBED_DIM
        if arch == "pooledconv2048":
            if source == "imagenet":
                raise ValueError("pooledconv2048 has no pretrained weights; use s<seed>")
            with seeded_rng(derive_seed("embedder", arch, source)):
                model = PooledConvEmbedder()
            self.input_size = PooledConvEmbedder.input_size
            self._normalize = "symmetric"
        elif arch == "inception3":
            if source != "imagenet":
                raise ValueError("inception3 supports only the imagenet source")
            model = _load_inception_backbone()
            self.input_size = 299
            self._normalize = "imagenet"
        else:
            raise ValueError(f"unknown embedder architecture {arch!r}")
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model

    def preprocess(self, images) -> torch.Tensor:
        return preprocess_rgb(images, self.input_size, self._normalize)

    @torch.no_grad()
    def embed(self, images, batch_size: int = 8) -> np.ndarray:
        """Map a list of RGB uint8 images to a (n, 2048) float32 matrix."""
        if len(images) == 0:
            return np.zeros((0, self.dim), dtype=np.float32)
        out = []
        for start in range(0, len(images), batch_size):
            x = self.preprocess(images[start : start + batch_size])
            out.append(self.model(x).cpu().numpy().astype(np.float32))
        return np.concatenate(out, axis=0)


def build_sequence(
    frames,
    embedder: FlowEmbedder,
    params: FlowParams | None = None,
    seq_len: int = SEQ_LEN,
) -> tuple[np.ndarray, np.ndarray]:
    """Full sequence pipeline: frames -> flow images -> embeddings -> pad.

    ``n`` frames yield ``n - 1`` flow embeddings, pre-padded with zero rows
    or evenly subsampled to exactly ``seq_len`` steps.  Returns
    ``(features, mask)`` of shapes (seq_len, 2048) and (seq_len,).
    """
    images = flow_images(frames, params)
    emb = embedder.embed(images)
    return pad_or_subsample(emb, seq_len)


CACHE_VERSION = 1


def sequence_cache_paths(path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix != ".npz":
        base = base.with_suffix(".npz")
    return base, base.with_suffix(".json")


def save_sequence_cache(path, features, mask, snapshot: str, frame_list) -> Path:
    """Persist one embedding sequence as an .npz plus a JSON sidecar."""
    npz_path, sidecar = sequence_cache_paths(path)
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        npz_path,
        features=np.asarray(features, dtype=np.float32),
        valid_mask=np.asarray(mask, dtype=bool),
    )
    sidecar.write_text(
        json.dumps(
            {
                "version": CACHE_VERSION,
                "snapshot": snapshot,
                "frames": [str(f) for f in frame_list],
                "shape": list(np.asarray(features).shape),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return npz_path


def load_sequence_cache(path, expect_snapshot: str | None = None):
    """Load a cached sequence; returns (features, valid_mask, metadata)."""
    npz_path, sidecar = sequence_cache_paths(path)
    meta = json.loads(sidecar.read_text())
    if meta.get("version") != CACHE_VERSION:
        raise ValueError(
            f"cache {npz_path} has version {meta.get('version')}, "
            f"expected {CACHE_VERSION}"
        )
    if expect_snapshot is not None and meta.get("snapshot") != expect_snapshot:
        raise ValueError(
            f"cache {npz_path} was built with snapshot {meta.get('snapshot')!r}, "
            f"expected {expect_snapshot!r}"
        )
    with np.load(npz_path) as data:
        return data["features"], data["valid_mask"], meta
