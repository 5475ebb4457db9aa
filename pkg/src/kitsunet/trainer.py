"""Patch sampling, the Adam training loop, plateau schedule and checkpointing.

Every random draw in an iteration comes from a generator seeded with
``(seed, epoch, iteration)``, so resuming from a checkpoint replays the
exact same batches without having to restore any generator state.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentConfig, augment_pair
from .losses import LossConfig, multiscale_loss
from .network import MultiScaleUNet, NetworkSpec, build
from .volcore import PathLike, pad_to_shape

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "ema_val_loss", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    patch_size: Tuple[int, int, int] = (192, 192, 48)
    batch_size: int = 8
    iterations_per_epoch: int = 250
    initial_lr: float = 3e-4
    lr_factor: float = 0.2
    lr_patience: int = 30
    min_lr: float = 1e-6
    max_epochs: int = 1000
    foreground_fraction: float = 0.5
    val_patches: int = 8
    ema_beta: float = 0.9
    seed: int = 0
    device: str = "cpu"

    def violations(self, spec: Optional[NetworkSpec] = None) -> List[str]:
        errs = []
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            errs.append(f"patch_size must be three positive ints, got {self.patch_size}")
        elif spec is not None and any(p % spec.divisor for p in self.patch_size):
            errs.append(f"patch_size {tuple(self.patch_size)} not divisible by {spec.divisor}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations_per_epoch < 1:
            errs.append("iterations_per_epoch must be >= 1")
        if not 0 < self.lr_factor < 1:
            errs.append(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.lr_patience < 1:
            errs.append("lr_patience must be >= 1")
        if not self.initial_lr > 0:
            errs.append("initial_lr must be > 0")
        if not 0 <= self.foreground_fraction <= 1:
            errs.append("foreground_fraction must be in [0, 1]")
        if not 0 <= self.ema_beta < 1:
            errs.append("ema_beta must be in [0, 1)")
        if self.max_epochs < 1 or self.val_patches < 1:
            errs.append("max_epochs and val_patches must be >= 1")
        return errs

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- sampling

def legal_origins(shape: Sequence[int], patch: Sequence[int]) -> List[int]:
    """Number of legal patch origins along each axis."""
    return [n - p + 1 for n, p in zip(shape, patch)]


def sample_patch(image: np.ndarray, label: np.ndarray, patch_size: Sequence[int],
                 force_foreground: bool, seed) -> Tuple[np.ndarray, np.ndarray]:
    """Crop a random patch; with ``force_foreground`` it contains a foreground voxel."""
    rng = np.random.default_rng(seed)
    if any(n < p for n, p in zip(image.shape, patch_size)):
        image, _ = pad_to_shape(image, patch_size, fill=float(image.min()))
        label, _ = pad_to_shape(label, patch_size, fill=0)
    counts = legal_origins(image.shape, patch_size)
    fg = np.flatnonzero(label) if force_foreground else np.empty(0, dtype=np.int64)
    if fg.size:
        voxel = np.unravel_index(fg[rng.integers(fg.size)], label.shape)
        # origins whose patch covers the chosen voxel
        origin = [int(rng.integers(max(0, v - p + 1), min(v, c - 1) + 1))
                  for v, p, c in zip(voxel, patch_size, counts)]
    else:
        origin = [int(rng.integers(c)) for c in counts]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
    return image[sl].copy(), label[sl].copy()


# ---------------------------------------------------------------- schedules

class PlateauSchedule:
    """Multiply the lr by ``factor`` once the training loss has not improved for ``patience`` epochs."""

    def __init__(self, lr: float, factor: float = 0.2, patience: int = 30):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.since_best = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.since_best = 0
        else:
            self.since_best += 1
            if self.since_best >= self.patience:
                self.lr *= self.factor
                self.since_best = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "factor": self.factor, "patience": self.patience,
                "best": self.best, "since_best": self.since_best}

    def load_state_dict(self, d: dict) -> None:
        self.__dict__.update(d)


def ema_series(values: Sequence[float], beta: float = 0.9) -> List[float]:
    out = []
    for v in values:
        out.append(float(v) if not out else beta * out[-1] + (1 - beta) * float(v))
    return out


def smoothed_validation(values: Sequence[float], beta: float = 0.9) -> float:
    if not len(values):
        raise ValueError("need at least one value")
    return ema_series(values, beta)[-1]


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    epoch: int = -1
    history: List[dict] = field(default_factory=list)
    best_ema: float = math.inf
    best_epoch: int = -1


def _batch(cases, config: TrainConfig, augment: AugmentConfig, rng: np.random.Generator,
           n: int):
    images, labels = [], []
    for _ in range(n):
        idx = int(rng.integers(len(cases)))
        force = bool(rng.random() < config.foreground_fraction)
        patch_seed, aug_seed = rng.integers(2 ** 63, size=2)
        img, lab = sample_patch(cases[idx][0], cases[idx][1], config.patch_size, force,
                                int(patch_seed))
        if augment is not None:
            img, lab = augment_pair(img, lab, augment, int(aug_seed))
        images.append(img)
        labels.append(lab)
    x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(labels).astype(np.int64))
    return x, y


def save_checkpoint(path: PathLike, net: MultiScaleUNet, optimizer, schedule: PlateauSchedule,
                    state: TrainState, config: TrainConfig, loss_config: LossConfig,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "network_spec": net.spec.to_dict(),
        "model": net.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "schedule": schedule.state_dict() if schedule is not None else None,
        "train_state": asdict(state),
        "train_config": config.to_dict(),
        "loss_config": loss_config.to_dict(),
        "extra": extra or {},
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: PathLike, device: str = "cpu"):
    """Return ``(network, payload)`` for a saved checkpoint."""
    payload = torch.load(path, map_location=device, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    net = MultiScaleUNet(NetworkSpec(**payload["network_spec"]))
    net.load_state_dict(payload["model"])
    return net.to(device), payload


def write_metrics(path: PathLike, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in METRICS_COLUMNS})


def read_metrics(path: PathLike) -> List[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in METRICS_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


def validation_loss(net, cases, config: TrainConfig, loss_config: LossConfig) -> float:
    # same patches every epoch so the series is comparable
    rng = np.random.default_rng([config.seed, 0x7A11])
    net.eval()
    total = 0.0
    with torch.no_grad():
        for _ in range(config.val_patches):
            x, y = _batch(cases, config, None, rng, 1)
            total += float(multiscale_loss(net(x.to(config.device)), y.to(config.device),
                                           loss_config))
    net.train()
    return total / config.val_patches


def train(config: TrainConfig, train_cases, val_cases, network: Optional[MultiScaleUNet] = None,
          out_dir: Optional[PathLike] = None, *, spec: Optional[NetworkSpec] = None,
          augment: Optional[AugmentConfig] = None, loss_config: Optional[LossConfig] = None,
          resume: Optional[PathLike] = None, extra: Optional[dict] = None,
          max_iterations: Optional[int] = None) -> Tuple[MultiScaleUNet, List[dict]]:
    """Train on in-memory ``(image, label)`` arrays already preprocessed.

    Writes ``metrics.csv`` and ``epoch_XXXX.pt``/``last.pt``/``best.pt`` under
    ``out_dir`` when given. ``max_iterations`` caps the total iteration count,
    stopping at the end of the epoch that reaches it.
    """
    if not train_cases or not val_cases:
        raise TrainingError("need at least one training and one validation case")
    loss_config = loss_config or LossConfig()
    augment = augment if augment is not None else AugmentConfig()
    torch.manual_seed(config.seed)
    if network is None:
        network = build(spec or NetworkSpec(), config.seed)
    errs = config.violations(network.spec) + loss_config.violations() + augment.violations()
    if errs:
        raise ValueError("; ".join(errs))
    net = network.to(config.device)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.initial_lr,
                                 betas=(0.9, 0.999), eps=1e-8)
    schedule = PlateauSchedule(config.initial_lr, config.lr_factor, config.lr_patience)
    state = TrainState()
    if resume is not None:
        payload = torch.load(resume, map_location=config.device, weights_only=False)
        net.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        schedule.load_state_dict(payload["schedule"])
        state = TrainState(**payload["train_state"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    iters_done = (state.epoch + 1) * config.iterations_per_epoch
    epoch = state.epoch + 1
    while epoch < config.max_epochs and schedule.lr >= config.min_lr:
        if max_iterations is not None and iters_done >= max_iterations:
            break
        for group in optimizer.param_groups:
            group["lr"] = schedule.lr
        lr = schedule.lr
        losses = []
        for it in range(config.iterations_per_epoch):
            rng = np.random.default_rng([config.seed, epoch, it])
            x, y = _batch(train_cases, config, augment, rng, config.batch_size)
            loss = multiscale_loss(net(x.to(config.device)), y.to(config.device), loss_config)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch} iteration {it}; "
                    f"lr={lr:g}, input range [{x.min():.3g}, {x.max():.3g}]")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        iters_done += config.iterations_per_epoch
        train_loss = float(np.mean(losses))
        val_loss = validation_loss(net, val_cases, config, loss_config)
        vals = [h["val_loss"] for h in state.history] + [val_loss]
        ema = smoothed_validation(vals, config.ema_beta)
        state.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                              "ema_val_loss": ema, "lr": lr})
        schedule.step(train_loss)
        state.epoch = epoch
        improved = ema < state.best_ema
        if improved:
            state.best_ema, state.best_epoch = ema, epoch
        log.info("epoch %d train %.4f val %.4f ema %.4f lr %.3g", epoch, train_loss,
                 val_loss, ema, lr)
        if out is not None:
            args = (net, optimizer, schedule, state, config, loss_config, extra)
            save_checkpoint(out / f"epoch_{epoch:04d}.pt", *args)
            save_checkpoint(out / "last.pt", *args)
            if improved:
                save_checkpoint(out / "best.pt", *args)
            write_metrics(out / "metrics.csv", state.history)
        epoch += 1
    return net, state.history
