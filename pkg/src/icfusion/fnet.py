"""Ego-motion classifier: an LSTM over flow-image embedding sequences.

Outputs a 3-class distribution (straight / left turn / right turn).
Padded steps are removed before the recurrence, not merely zeroed, so the
output is exactly invariant to how much pre-padding a sequence carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .core import EGOMOTION3, ClassPDF, make_pdf
from .flowfeat import EMBED_DIM, SEQ_LEN
from .training import (
    CsvLogger,
    FitResult,
    TrainConfig,
    derive_seed,
    fit_classifier,
    seeded_rng,
)


@dataclass(frozen=True)
class FNetConfig:
    input_dim: int = EMBED_DIM
    hidden_dim: int = 256
    num_layers: int = 1
    dropout: float = 0.5
    num_classes: int = 3
    seq_len: int = SEQ_LEN

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.num_layers, self.num_classes) < 1:
            raise ValueError("dimensions and layer count must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


class FNet(nn.Module):
    """LSTM -> dropout -> linear head over masked step sequences."""

    def __init__(self, cfg: FNetConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg or FNetConfig()
        self.lstm = nn.LSTM(
            self.cfg.input_dim,
            self.cfg.hidden_dim,
            num_layers=self.cfg.num_layers,
            batch_first=True,
        )
        self.dropout = nn.Dropout(self.cfg.dropout)
        self.head = nn.Linear(self.cfg.hidden_dim, self.cfg.num_classes)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Logits for a batch of (B, T, D) sequences with (B, T) step masks.

        Valid steps are gathered to the front of each row (the stable sort
        keeps their order) and packed, so the recurrence never sees a padded
        step and every row must have at least one valid step.
        """
        if x.ndim != 3 or mask.shape != x.shape[:2]:
            raise ValueError(
                f"expected (B, T, D) inputs with (B, T) mask, got {tuple(x.shape)} "
                f"and {tuple(mask.shape)}"
            )
        mask = mask.bool()
        lengths = mask.sum(dim=1)
        if int(lengths.min().item()) < 1:
            raise ValueError("every sequence needs at least one valid step")
        order = torch.argsort((~mask).long(), dim=1, stable=True)
        aligned = torch.gather(x, 1, order.unsqueeze(-1).expand_as(x))
        packed = pack_padded_sequence(
            aligned, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, (h_n, _) = self.lstm(packed)
        return self.head(self.dropout(h_n[-1]))


def build_fnet(cfg: FNetConfig | None = None, seed: int = 0) -> FNet:
    """Construct an FNet with seed-determined initial weights."""
    with seeded_rng(derive_seed("fnet", seed)):
        return FNet(cfg)


def sequences_to_tensors(
    features: np.ndarray, masks: np.ndarray, labels=None
) -> tuple[tuple[torch.Tensor, torch.Tensor], torch.Tensor | None]:
    """Stack (N, T, D) features and (N, T) masks; labels become 0-based."""
    x = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))
    m = torch.from_numpy(np.ascontiguousarray(masks)).bool()
    y = None
    if labels is not None:
        y = torch.as_tensor(np.asarray(labels, dtype=np.int64) - 1)
    return (x, m), y


def _require_all_classes(labels, num_classes: int, what: str) -> None:
    present = set(int(v) for v in np.asarray(labels).ravel())
    missing = sorted(set(range(1, num_classes + 1)) - present)
    if missing:
        raise ValueError(f"{what} has no samples for class(es) {missing}")


def train_fnet(
    train_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: TrainConfig | None = None,
    model_cfg: FNetConfig | None = None,
    logger: CsvLogger | None = None,
    log_extra: dict | None = None,
) -> tuple[FNet, FitResult]:
    """Train a fresh FNet on (features, masks, labels) arrays.

    Labels are 1-based motion ids and every class must appear in the
    training set.  Returns the best-validation model and its fit record.
    """
    model_cfg = model_cfg or FNetConfig()
    cfg = cfg or TrainConfig()
    _require_all_classes(train_data[2], model_cfg.num_classes, "training set")
    model = build_fnet(model_cfg, seed=cfg.seed)
    train_inputs, train_labels = sequences_to_tensors(*train_data)
    val_inputs, val_labels = sequences_to_tensors(*val_data)
    result = fit_classifier(
        model, train_inputs, train_labels, val_inputs, val_labels, cfg,
        logger=logger, log_extra=log_extra,
    )
    return model, result


@torch.no_grad()
def predict_fnet(model: FNet, features: np.ndarray, mask: np.ndarray) -> ClassPDF:
    """Class distribution for one padded (seq_len, D) feature matrix."""
    was_training = model.training
    model.eval()
    x = torch.from_numpy(np.asarray(features, dtype=np.float32)).unsqueeze(0)
    m = torch.from_numpy(np.asarray(mask, dtype=bool)).unsqueeze(0)
    probs = torch.softmax(model(x, m), dim=1)[0].numpy().astype(np.float64)
    if was_training:
        model.train()
    return make_pdf(probs, EGOMOTION3)
