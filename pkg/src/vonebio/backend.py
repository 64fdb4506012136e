"""Trainable backend, SGD with momentum, plateau LR schedule and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .gfb import FilterBank
from .vone_block import VOneBlock, normalize

log = logging.getLogger(__name__)

BOTTLENECK_CHANNELS = 64


@dataclass
class BackendConfig:
    in_channels: int = 512
    num_classes: int = 10
    head: list = field(default_factory=lambda: [[64, 1], [128, 2]])
    batch_norm: bool = True

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128
    epochs: int = 60
    plateau_factor: float = 10.0
    plateau_threshold: float = 0.01
    plateau_patience: int = 5
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        for name in ("lr0", "batch_size", "epochs", "plateau_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.plateau_threshold < 0:
            raise ValueError("momentum, weight_decay and plateau_threshold must be non-negative")
        if int(self.plateau_patience) != self.plateau_patience or self.plateau_patience < 1:
            raise ValueError("plateau_patience must be an integer >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Backend(nn.Module):
    """1x1 bottleneck (V1 channels -> 64) followed by a small conv head."""

    def __init__(self, cfg: BackendConfig):
        super().__init__()
        self.cfg = cfg
        self.bottleneck = nn.Conv2d(cfg.in_channels, BOTTLENECK_CHANNELS, 1, bias=True)
        layers = []
        c_in = BOTTLENECK_CHANNELS
        for c_out, stride in cfg.head:
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=not cfg.batch_norm))
            if cfg.batch_norm:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.ReLU())
            c_in = c_out
        self.head = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, cfg.num_classes)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                with torch.no_grad():
                    m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                    if m.bias is not None:
                        m.bias.zero_()

    def forward(self, v1: torch.Tensor) -> torch.Tensor:
        x = self.head(self.bottleneck(v1))
        return self.fc(x.mean(dim=(2, 3)))


def make_backend(cfg: BackendConfig, seed: int = 0, dtype=torch.float32) -> Backend:
    g = torch.Generator().manual_seed(seed)
    model = Backend(cfg).to(dtype)
    model.reset_parameters(g)
    return model


@dataclass
class TrainState:
    model: Backend
    lr: float
    lr0: float
    momentum_buffers: dict = field(default_factory=dict)
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    metrics: list = field(default_factory=list)
    bank_checksum: str = ""

    @classmethod
    def fresh(cls, model: Backend, cfg: TrainConfig, bank_checksum: str = "") -> "TrainState":
        bufs = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        return cls(model=model, lr=cfg.lr0, lr0=cfg.lr0, momentum_buffers=bufs, bank_checksum=bank_checksum)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy via log-sum-exp."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    c = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{int(labels.min())}, {int(labels.max())}]")
    picked = logits.gather(1, labels[:, None]).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - picked).mean()


def forward_loss(state_or_model, v1_acts, labels):
    model = state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model
    logits = model(v1_acts)
    return cross_entropy(logits, labels), logits


def sgd_step(state: TrainState, grads: dict, cfg: TrainConfig) -> TrainState:
    """Classic momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (g + wd * w)``; ``w <- w - lr * v``.
    """
    params = dict(state.model.named_parameters())
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(w.shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise FloatingPointError(f"{bad} non-finite gradient entries in {name} (lr={state.lr})")
    with torch.no_grad():
        for name, g in grads.items():
            w = params[name]
            v = state.momentum_buffers.setdefault(name, torch.zeros_like(w))
            v.mul_(cfg.momentum).add_(g + cfg.weight_decay * w)
            w.sub_(state.lr * v)
    return state


def plateau_schedule(state: TrainState, val_loss: float, cfg: TrainConfig) -> TrainState:
    """Divide the LR after ``patience`` epochs without a significant drop.

    An epoch improves when ``val_loss < best - threshold``. ``best`` tracks
    the running minimum, so a slow decline of less than ``threshold`` per
    epoch still counts as a plateau.
    """
    if val_loss < state.best_val_loss - cfg.plateau_threshold:
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= cfg.plateau_patience:
            state.lr = state.lr / cfg.plateau_factor
            state.epochs_since_improvement = 0
            log.info("plateau: lr -> %g", state.lr)
    state.best_val_loss = min(state.best_val_loss, val_loss)
    return state


class AugmentParams(NamedTuple):
    scale: np.ndarray
    angle: np.ndarray
    flip: np.ndarray
    shift_x: np.ndarray
    shift_y: np.ndarray

    @classmethod
    def identity(cls, n: int = 1) -> "AugmentParams":
        z = np.zeros(n)
        return cls(np.ones(n), z, np.zeros(n, dtype=bool), z, z)


def draw_augment_params(rng: np.random.Generator, n: int) -> AugmentParams:
    """Scale U[1, 1.2], rotation U[-30, 30] deg, h-flip p=0.5, shifts U[-5%, 5%]."""
    return AugmentParams(
        scale=rng.uniform(1.0, 1.2, n),
        angle=rng.uniform(-30.0, 30.0, n),
        flip=rng.random(n) < 0.5,
        shift_x=rng.uniform(-0.05, 0.05, n),
        shift_y=rng.uniform(-0.05, 0.05, n),
    )


def geometric_augment(images, params: AugmentParams) -> torch.Tensor:
    """Apply the sampled affine maps with bilinear sampling and zero fill.

    Output keeps the input size, so scaling by ``s > 1`` is a zoom followed
    by a center crop. Shifts are fractions of width/height.
    """
    x = torch.as_tensor(images)
    out_dtype = x.dtype if x.is_floating_point() else torch.float32
    # float64 sampling keeps identity parameters exact to ~1e-15
    x = x.to(torch.float64)
    n = x.shape[0]
    a = np.deg2rad(params.angle)
    cos, sin = np.cos(a), np.sin(a)
    flip = np.where(params.flip, -1.0, 1.0)
    # output coords v -> input coords u = F R(-a) (v - t) / s, in [-1, 1] units
    m = np.zeros((n, 2, 3))
    m[:, 0, 0] = flip * cos / params.scale
    m[:, 0, 1] = flip * sin / params.scale
    m[:, 1, 0] = -sin / params.scale
    m[:, 1, 1] = cos / params.scale
    t = np.stack([2 * params.shift_x, 2 * params.shift_y], axis=1)
    m[:, :, 2] = -np.einsum("nij,nj->ni", m[:, :, :2], t)
    theta = torch.from_numpy(m)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.to(out_dtype)


def augment(image, rng: np.random.Generator, params: AugmentParams | None = None) -> torch.Tensor:
    """Augment one ``[3, H, W]`` image (or a batch) and normalize it."""
    x = torch.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    if params is None:
        params = draw_augment_params(rng, x.shape[0])
    out = normalize(geometric_augment(x, params))
    return out[0] if single else out


class ArrayDataset(NamedTuple):
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


class VOneNet(nn.Module):
    def __init__(self, bank: FilterBank, backend: Backend):
        super().__init__()
        self.vone = VOneBlock(bank)
        self.backend = backend

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            v1 = self.vone(x)
        return self.backend(v1)


def _gradients(model: nn.Module) -> dict:
    return {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}


def evaluate(model: VOneNet, x: np.ndarray, y: np.ndarray, batch_size: int = 100) -> tuple[float, float, np.ndarray]:
    """Clean loss, top-1 accuracy and predictions on unnormalized images."""
    model.eval()
    total, correct, preds = 0.0, 0, []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = normalize(torch.as_tensor(x[i:i + batch_size], dtype=torch.float32))
            yb = torch.as_tensor(y[i:i + batch_size], dtype=torch.long)
            logits = model(xb)
            total += float(cross_entropy(logits, yb)) * len(yb)
            p = logits.argmax(1)
            correct += int((p == yb).sum())
            preds.append(p.numpy())
    n = max(len(x), 1)
    return total / n, correct / n, np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def train(
    bank: FilterBank,
    backend_cfg: BackendConfig,
    train_cfg: TrainConfig,
    dataset: ArrayDataset,
    progress=None,
) -> TrainState:
    """Train the backend on top of the frozen bank.

    Raises ``RuntimeError`` if the bank weights change during training.
    """
    from .data import batch_iterator

    if len(dataset.train_x) == 0:
        raise ValueError("training split is empty")
    if dataset.train_x.shape[1:] != (bank.input_channels,) + dataset.train_x.shape[2:]:
        raise ValueError(f"images have {dataset.train_x.shape[1]} channels, bank expects {bank.input_channels}")
    if backend_cfg.in_channels != bank.num_channels:
        raise ValueError(f"backend expects {backend_cfg.in_channels} V1 channels, bank has {bank.num_channels}")

    torch.manual_seed(train_cfg.seed)
    checksum = bank.checksum()
    backend = make_backend(backend_cfg, seed=train_cfg.seed)
    model = VOneNet(bank, backend)
    buffer_before = model.vone.weight.clone()
    state = TrainState.fresh(backend, train_cfg, bank_checksum=checksum)

    cached_v1 = None
    if not train_cfg.augment:
        with torch.no_grad():
            cached_v1 = torch.cat([
                model.vone(normalize(torch.as_tensor(dataset.train_x[i:i + 256], dtype=torch.float32)))
                for i in range(0, len(dataset.train_x), 256)
            ])

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        rng = np.random.default_rng([train_cfg.seed, epoch])
        loss_sum, correct, seen = 0.0, 0, 0
        for idx in batch_iterator(len(dataset.train_x), train_cfg.batch_size, train_cfg.seed, epoch):
            yb = torch.as_tensor(dataset.train_y[idx], dtype=torch.long)
            if cached_v1 is not None:
                v1 = cached_v1[idx]
            else:
                xb = augment(dataset.train_x[idx], rng)
                with torch.no_grad():
                    v1 = model.vone(xb)
            backend.zero_grad(set_to_none=True)
            loss, logits = forward_loss(backend, v1, yb)
            loss.backward()
            sgd_step(state, _gradients(backend), train_cfg)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
            seen += len(idx)

        if len(dataset.val_x):
            val_loss, val_acc, _ = evaluate(model, dataset.val_x, dataset.val_y)
        else:
            val_loss, val_acc = loss_sum / seen, float("nan")
        lr_used = state.lr
        plateau_schedule(state, val_loss, train_cfg)
        row = {
            "epoch": epoch + 1,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": lr_used,
            "seconds": time.perf_counter() - t0,
        }
        state.metrics.append(row)
        log.info("epoch %(epoch)d train_loss %(train_loss).4f val_loss %(val_loss).4f val_acc %(val_acc).3f", row)
        if progress is not None:
            progress(row)

    if not torch.equal(buffer_before, model.vone.weight) or bank.checksum() != checksum:
        raise RuntimeError("filter bank weights changed during training")
    return state


METRIC_FIELDS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds"]


def save_checkpoint(state: TrainState, backend_cfg: BackendConfig, train_cfg: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "backend": state.model.state_dict(),
            "momentum": state.momentum_buffers,
            "lr": state.lr,
            "lr0": state.lr0,
            "best_val_loss": state.best_val_loss,
            "epochs_since_improvement": state.epochs_since_improvement,
            "bank_checksum": state.bank_checksum,
        },
        out / "checkpoint.pt",
    )
    (out / "config.json").write_text(
        json.dumps({"backend": asdict(backend_cfg), "train": asdict(train_cfg)}, indent=2) + "\n"
    )
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(state.metrics)
    return out


def load_checkpoint(ckpt_dir) -> tuple[TrainState, BackendConfig, TrainConfig]:
    ckpt_dir = Path(ckpt_dir)
    cfg = json.loads((ckpt_dir / "config.json").read_text())
    backend_cfg = BackendConfig.from_dict(cfg["backend"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    blob = torch.load(ckpt_dir / "checkpoint.pt", weights_only=True)
    model = Backend(backend_cfg)
    model.load_state_dict(blob["backend"])
    metrics = []
    mpath = ckpt_dir / "metrics.csv"
    if mpath.exists():
        with open(mpath) as fh:
            metrics = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    state = TrainState(
        model=model,
        lr=blob["lr"],
        lr0=blob["lr0"],
        momentum_buffers=blob["momentum"],
        best_val_loss=blob["best_val_loss"],
        epochs_since_improvement=blob["epochs_since_improvement"],
        metrics=metrics,
        bank_checksum=blob["bank_checksum"],
    )
    return state, backend_cfg, train_cfg
