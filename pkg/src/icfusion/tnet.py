"""Topology classifier: a VGG16-layout conv stack with a 7-way head.

The conv stack follows the classic 13-conv / 5-pool layout so pretrained
weights can drop in when available; a ``tiny`` variant divides channel
widths by 8 for CPU-scale experiments.  During fine-tuning the middle of
the stack is frozen and only the early convs plus the head move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import TOPOLOGY7, ClassPDF, make_pdf
from .flowfeat import parse_snapshot, preprocess_rgb
from .training import (
    CsvLogger,
    FitResult,
    TrainConfig,
    derive_seed,
    fit_classifier,
    param_checksum,
    seeded_rng,
)

BLOCK_CONVS = (2, 2, 3, 3, 3)
FULL_WIDTHS = (64, 128, 256, 512, 512)
TINY_WIDTHS = (8, 16, 32, 64, 64)
FREEZE_MODES = ("between", "inclusive", "none")
DEFAULT_TNET_SNAPSHOT = "vgg16tiny@s0"

# Flat indices of the pool layers in the torchvision-compatible layout.
_POOL_INDICES = (4, 9, 16, 23, 30)


@dataclass(frozen=True)
class TNetConfig:
    snapshot: str = DEFAULT_TNET_SNAPSHOT
    num_classes: int = 7
    input_size: int = 224
    fc_dims: tuple[int, int] = (512, 128)
    dropout: float = 0.5
    freeze_mode: str = "between"

    def __post_init__(self) -> None:
        parse_snapshot(self.snapshot)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ValueError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )
        if len(self.fc_dims) != 2 or min(self.fc_dims) < 1:
            raise ValueError(f"fc_dims must be two positive ints, got {self.fc_dims}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(
                f"freeze_mode must be one of {FREEZE_MODES}, got {self.freeze_mode!r}"
            )


def _widths_for(arch: str) -> tuple[int, ...]:
    if arch == "vgg16":
        return FULL_WIDTHS
    if arch == "vgg16tiny":
        return TINY_WIDTHS
    raise ValueError(f"unknown conv-stack architecture {arch!r}")


def _make_features(widths) -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = 3
    for block, n_convs in enumerate(BLOCK_CONVS):
        out_ch = widths[block]
        for _ in range(n_convs):
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
    return nn.Sequential(*layers)


class TNet(nn.Module):
    """Conv stack then Flatten -> fc -> ReLU -> Dropout -> fc -> ReLU -> fc."""

    def __init__(self, cfg: TNetConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg or TNetConfig()
        arch, _ = parse_snapshot(self.cfg.snapshot)
        widths = _widths_for(arch)
        self.features = _make_features(widths)
        spatial = self.cfg.input_size // 32
        flat = widths[-1] * spatial * spatial
        fc1, fc2 = self.cfg.fc_dims
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, fc1),
            nn.ReLU(inplace=True),
            nn.Dropout(self.cfg.dropout),
            nn.Linear(fc1, fc2),
            nn.ReLU(inplace=True),
            nn.Linear(fc2, self.cfg.num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, S, S) input, got {tuple(x.shape)}")
        return self.classifier(self.features(x))


def _frozen_feature_indices(freeze_mode: str) -> tuple[int, ...]:
    """Flat indices of conv layers whose parameters stay fixed."""
    if freeze_mode == "none":
        return ()
    pool1, pool4 = _POOL_INDICES[0], _POOL_INDICES[3]
    lo = pool1 + 1 if freeze_mode == "between" else 0
    return tuple(
        i
        for i in range(lo, pool4)
        if i not in _POOL_INDICES  # pools have no parameters anyway
    )


def frozen_param_names(model: TNet) -> tuple[str, ...]:
    names = []
    for idx in _frozen_feature_indices(model.cfg.freeze_mode):
        layer = model.features[idx]
        for pname, _ in layer.named_parameters():
            names.append(f"features.{idx}.{pname}")
    return tuple(names)


def apply_freeze(model: TNet) -> tuple[str, ...]:
    """Set requires_grad per the model's freeze mode; returns frozen names."""
    frozen = set(frozen_param_names(model))
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
    return tuple(sorted(frozen))


def frozen_checksum(model: TNet) -> str:
    """Digest of the frozen parameters; unchanged by any amount of training."""
    return param_checksum(model, names=frozen_param_names(model))


def _load_vgg16_imagenet_features() -> nn.Sequential:
    try:
        from torchvision.models import VGG16_Weights, vgg16
    except ImportError as exc:
        raise RuntimeError(
            "snapshot 'vgg16@imagenet' needs the optional torchvision "
            "dependency (pip install icfusion[pretrained])"
        ) from exc
    try:
        pretrained = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise RuntimeError(
            "could not load ImageNet weights for vgg16; they must be "
            "available in the local torchvision cache (this environment may "
            "not allow downloads). Use a seeded snapshot such as "
            f"'{DEFAULT_TNET_SNAPSHOT}' instead."
        ) from exc
    return pretrained.features


def _init_vgg_weights(module: nn.Module) -> None:
    """Variance-preserving init, matching the reference VGG scheme.

    Conv layers use Kaiming fan-out with ReLU gain and zero bias, linear
    layers N(0, 0.01) with zero bias.  PyTorch's default layer init is
    contractive through a deep random ReLU stack, which leaves a frozen
    random backbone emitting near-constant features; this scheme keeps
    activation variance roughly level across all thirteen conv layers.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.01)
            nn.init.zeros_(m.bias)


def build_tnet(cfg: TNetConfig | None = None, seed: int = 0) -> TNet:
    """Construct a TNet per its snapshot and apply the freeze mode.

    The snapshot alone determines the conv-stack weights: seeded snapshots
    (``vgg16tiny@s0``) draw them from the snapshot seed, ``vgg16@imagenet``
    copies pretrained weights (full widths only).  The classifier head is
    re-drawn from ``seed`` so different training runs share a backbone but
    start from their own head.  ``cfg`` may be a bare snapshot string.
    """
    if isinstance(cfg, str):
        cfg = TNetConfig(snapshot=cfg)
    cfg = cfg or TNetConfig()
    arch, source = parse_snapshot(cfg.snapshot)
    with seeded_rng(derive_seed("tnet", cfg.snapshot)):
        model = TNet(cfg)
        _init_vgg_weights(model)
    if source == "imagenet":
        if arch != "vgg16":
            raise ValueError(f"{arch} has no pretrained weights; use s<seed>")
        model.features.load_state_dict(_load_vgg16_imagenet_features().state_dict())
    with seeded_rng(derive_seed("tnet", "head", seed)):
        _init_vgg_weights(model.classifier)
    apply_freeze(model)
    return model


def preprocess(images, cfg: TNetConfig) -> torch.Tensor:
    _, source = parse_snapshot(cfg.snapshot)
    norm = "imagenet" if source == "imagenet" else "symmetric"
    return preprocess_rgb(images, cfg.input_size, norm)


def images_to_tensors(
    images, cfg: TNetConfig, labels=None
) -> tuple[tuple[torch.Tensor], torch.Tensor | None]:
    """Preprocess RGB uint8 images; 1-based labels become 0-based."""
    x = preprocess(images, cfg)
    y = None
    if labels is not None:
        y = torch.as_tensor(np.asarray(labels, dtype=np.int64) - 1)
    return (x,), y


def train_tnet(
    train_data: tuple[list, np.ndarray],
    val_data: tuple[list, np.ndarray],
    cfg: TrainConfig | None = None,
    model_cfg: TNetConfig | None = None,
    logger: CsvLogger | None = None,
    log_extra: dict | None = None,
) -> tuple[TNet, FitResult]:
    """Train a fresh TNet on (images, labels) pairs.

    Labels are 1-based topology ids and every class must appear in the
    training set.  The freeze mode keeps the configured conv stages fixed;
    returns the best-validation model and its fit record.
    """
    model_cfg = model_cfg or TNetConfig()
    cfg = cfg or TrainConfig()
    labels = np.asarray(train_data[1])
    present = set(int(v) for v in labels.ravel())
    missing = sorted(set(range(1, model_cfg.num_classes + 1)) - present)
    if missing:
        raise ValueError(f"training set has no samples for class(es) {missing}")
    model = build_tnet(model_cfg, seed=cfg.seed)
    train_inputs, train_labels = images_to_tensors(train_data[0], model_cfg, train_data[1])
    val_inputs, val_labels = images_to_tensors(val_data[0], model_cfg, val_data[1])
    result = fit_classifier(
        model, train_inputs, train_labels, val_inputs, val_labels, cfg,
        logger=logger, log_extra=log_extra,
    )
    return model, result


@torch.no_grad()
def predict_tnet(model: TNet, image: np.ndarray) -> ClassPDF:
    """Class distribution for one RGB uint8 image."""
    was_training = model.training
    model.eval()
    x = preprocess([image], model.cfg)
    probs = torch.softmax(model(x), dim=1)[0].numpy().astype(np.float64)
    if was_training:
        model.train()
    return make_pdf(probs, TOPOLOGY7)
