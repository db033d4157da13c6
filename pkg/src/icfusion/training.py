"""Shared training machinery: seeding, fitting with early stopping, checks.

All stochastic choices flow from explicit integer seeds via
:func:`derive_seed`, so two runs with the same configuration produce the
same parameters, batch orders, and therefore the same predictions when
deterministic mode is on.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAX_SEED = 2**63


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite; the run is unusable and must stop."""


def derive_seed(*parts) -> int:
    """Map a tuple of strings/ints to a stable 63-bit seed."""
    if not parts:
        raise ValueError("need at least one seed part")
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % MAX_SEED


@contextmanager
def seeded_rng(seed: int):
    """Run a block under a forked, seeded global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % MAX_SEED)
        yield


def set_determinism(deterministic: bool) -> None:
    torch.use_deterministic_algorithms(bool(deterministic))


def param_checksum(module: nn.Module, names=None) -> str:
    """sha256 over the named parameters' bytes, in sorted name order."""
    h = hashlib.sha256()
    wanted = None if names is None else set(names)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if wanted is not None and name not in wanted:
            continue
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().contiguous().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for one network."""

    lr: float = 1e-5
    weight_decay: float = 1e-6
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")


class CsvLogger:
    """Append-only CSV writer that creates the header on first use."""

    def __init__(self, path, fieldnames) -> None:
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.DictWriter(fh, self.fieldnames).writeheader()

    def log(self, **row) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, self.fieldnames).writerow(row)


@dataclass
class FitResult:
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)


def _forward(model: nn.Module, inputs: tuple[torch.Tensor, ...]) -> torch.Tensor:
    return model(*inputs)


def _slice_inputs(inputs, idx) -> tuple[torch.Tensor, ...]:
    return tuple(t[idx] for t in inputs)


@torch.no_grad()
def evaluate_classifier(
    model: nn.Module,
    inputs: tuple[torch.Tensor, ...],
    labels: torch.Tensor,
    batch_size: int = 32,
) -> tuple[float, float, torch.Tensor]:
    """Mean cross-entropy, top-1 accuracy, and class probabilities."""
    was_training = model.training
    model.eval()
    n = labels.shape[0]
    losses = []
    probs = []
    for start in range(0, n, batch_size):
        idx = slice(start, min(start + batch_size, n))
        logits = _forward(model, _slice_inputs(inputs, idx))
        losses.append(
            nn.functional.cross_entropy(logits, labels[idx], reduction="sum")
        )
        probs.append(torch.softmax(logits, dim=1))
    if was_training:
        model.train()
    probs = torch.cat(probs, dim=0)
    loss = float(torch.stack(losses).sum().item()) / max(n, 1)
    acc = float((probs.argmax(dim=1) == labels).float().mean().item())
    return loss, acc, probs


def fit_classifier(
    model: nn.Module,
    train_inputs: tuple[torch.Tensor, ...],
    train_labels: torch.Tensor,
    val_inputs: tuple[torch.Tensor, ...],
    val_labels: torch.Tensor,
    cfg: TrainConfig,
    logger: CsvLogger | None = None,
    log_extra: dict | None = None,
) -> FitResult:
    """Train with Adam and stop early on stagnating validation loss.

    Only parameters with ``requires_grad`` are optimized, so frozen stages
    stay untouched.  The parameters of the best validation epoch are
    restored before returning.  A non-finite training loss raises
    :class:`TrainingDivergedError` immediately.
    """
    set_determinism(cfg.deterministic)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = int(train_labels.shape[0])
    if n == 0:
        raise ValueError("empty training set")

    best_val = math.inf
    best_epoch = -1
    best_state = None
    bad_epochs = 0
    history: list[dict] = []

    for epoch in range(cfg.max_epochs):
        model.train()
        order = torch.randperm(
            n, generator=torch.Generator().manual_seed(derive_seed(cfg.seed, "epoch", epoch))
        )
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            logits = _forward(model, _slice_inputs(train_inputs, idx))
            loss = nn.functional.cross_entropy(logits, train_labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.item()) * idx.shape[0]
        train_loss = epoch_loss / n
        val_loss, val_acc, _ = evaluate_classifier(
            model, val_inputs, val_labels, batch_size=max(cfg.batch_size, 32)
        )
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        row = {
            "epoch": epoch,
            "train_loss": f"{train_loss:.6f}",
            "val_loss": f"{val_loss:.6f}",
            "val_acc": f"{val_acc:.4f}",
        }
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc}
        )
        if logger is not None:
            logger.log(**{**(log_extra or {}), **row})
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return FitResult(
        best_epoch=best_epoch,
        best_val_loss=best_val,
        epochs_run=len(history),
        history=history,
    )


def finite_difference_check(
    model: nn.Module,
    loss_fn,
    k: int = 5,
    eps: float = 1e-4,
    seed: int = 0,
    trainable_only: bool = True,
) -> float:
    """Compare autograd gradients against central differences.

    Samples ``k`` scalar weights from the model's (trainable) parameters,
    perturbs each by ``+eps`` and ``-eps``, and returns the worst relative
    error between the two gradient estimates.  The model is deep-copied to
    float64 first; ``loss_fn(model)`` must return a scalar loss tensor and
    must itself cast any inputs it closes over.
    """
    model = copy.deepcopy(model).double()
    model.eval()
    named = [
        (name, p)
        for name, p in model.named_parameters()
        if p.requires_grad or not trainable_only
    ]
    if not named:
        raise ValueError("no parameters to check")
    for _, p in model.named_parameters():
        p.grad = None
    loss = loss_fn(model)
    loss.backward()

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xFD]))
    flat_sizes = [p.numel() for _, p in named]
    total = sum(flat_sizes)
    picks = rng.choice(total, size=min(k, total), replace=False)

    worst = 0.0
    for flat in sorted(int(x) for x in picks):
        pi = 0
        while flat >= flat_sizes[pi]:
            flat -= flat_sizes[pi]
            pi += 1
        name, p = named[pi]
        if p.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic = float(p.grad.view(-1)[flat].item())
        with torch.no_grad():
            orig = float(p.view(-1)[flat].item())
            p.view(-1)[flat] = orig + eps
            up = float(loss_fn(model).item())
            p.view(-1)[flat] = orig - eps
            down = float(loss_fn(model).item())
            p.view(-1)[flat] = orig
        numeric = (up - down) / (2.0 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def save_checkpoint(path, model: nn.Module, meta: dict | None = None) -> None:
    payload = {"state_dict": model.state_dict(), "meta": meta or {}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return payload["state_dict"], payload.get("meta", {})
