"""Adam and the supervised pre-training stage."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import l1_gaze_loss, symmetry_loss
from .model import GazeNet
from .synthgaze import LabeledSet

log = logging.getLogger(__name__)

BETAS = (0.5, 0.95)


class DivergenceError(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam. Parameters are replaced, never written in place."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = BETAS, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def adam_step(state: Adam, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> Adam:
    state.step(params, grads)
    return state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay_epoch: int = 5
    lr_decay_factor: float = 0.1
    l1_weight: float = 1.0
    sym_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError(f"invalid TrainConfig: {self}")
        if self.epochs and self.lr_decay_epoch > self.epochs:
            raise ValueError("lr_decay_epoch must not exceed epochs")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-indexed ``epoch``."""
        return self.lr if epoch < self.lr_decay_epoch else self.lr * self.lr_decay_factor


PRETRAIN_LOG_HEADER = ("epoch", "train_l1", "train_sym", "lr")


def pretrain(model: GazeNet, source: LabeledSet, cfg: TrainConfig) -> list[dict]:
    """Train theta on labeled source data with L1 + symmetry loss; prompts stay untouched.

    Returns one log row per epoch (epoch-mean batch losses).
    """
    cfg.validate()
    opt = Adam(cfg.lr)
    theta = model.params
    zero_prompts = [Tensor(np.zeros_like(b.tensor.data)) for b in model.prompts.blocks]
    rows = []
    n = len(source)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        l1_sum = sym_sum = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            x = Tensor(source.images[idx])
            y = Tensor(source.labels[idx])
            pred = model.forward(x, zero_prompts)
            pred_f = model.forward(ad.flip_horizontal(x), zero_prompts)
            l1 = l1_gaze_loss(pred, y)
            sym = symmetry_loss(pred, pred_f)
            loss = ad.add(ad.scalar_mul(l1, cfg.l1_weight), ad.scalar_mul(sym, cfg.sym_weight))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"pretrain diverged at epoch {epoch}, step {start // cfg.batch_size}")
            grads = ad.grad(loss, list(theta.values()))
            opt.step(theta, {k: g.data for k, g in zip(theta, grads)})
            l1_sum += l1.item() * len(idx)
            sym_sum += sym.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_l1": l1_sum / seen, "train_sym": sym_sum / seen, "lr": opt.lr}
        log.info("pretrain epoch %d l1=%.4f sym=%.4f lr=%g", epoch, row["train_l1"], row["train_sym"], row["lr"])
        rows.append(row)
    return rows


def predict(model: GazeNet, images: np.ndarray, prompts=None, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.forward(Tensor(images[start: start + batch_size]), prompts).data)
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.float32)


def write_csv(path: str | Path, rows: list[dict], header: tuple[str, ...]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def config_dict(cfg) -> dict:
    return asdict(cfg)
