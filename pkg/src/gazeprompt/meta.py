"""Meta-learning a prompt initialization whose symmetry-loss steps reduce gaze error.

One outer iteration:

    for each sample i:   p_i = p - inner_lr * grad_p L_sym(f_{theta,p}(x_i), x_i)
    G = mean_i  d/dp L1(f_{theta,p_i}(x_i), y_i)
    p <- p - outer_lr * G

The per-sample inner steps are computed in one batched pass: the shared prompt
is broadcast to a (batch, n) tensor, so row i of the gradient of the summed
symmetry loss is exactly sample i's inner gradient. In ``exact`` mode the inner
gradient stays on the graph and the meta-gradient includes the second-order
term; ``first_order`` treats d p_i / d p as the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import l1_gaze_loss, personalization_loss, symmetry_loss_sum
from .model import GazeNet
from .synthgaze import LabeledSet
from .training import Adam, DivergenceError

log = logging.getLogger(__name__)

MODES = ("first_order", "exact")
PROMPT_INITS = ("gaussian", "zeros")
META_LOG_HEADER = ("iteration", "mean_inner_sym_loss", "mean_post_inner_l1")


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-4
    outer_lr: float = 1e-4
    iterations: int = 500
    batch_size: int = 20
    mode: str = "first_order"
    prompt_init: str = "gaussian"
    init_std: float = 1.0
    outer_optimizer: str = "sgd"
    seed: int = 0

    def validate(self) -> None:
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("inner_lr must be >= 0 and outer_lr > 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prompt_init not in PROMPT_INITS:
            raise ValueError(f"prompt_init must be one of {PROMPT_INITS}, got {self.prompt_init!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError(f"outer_optimizer must be 'sgd' or 'adam', got {self.outer_optimizer!r}")


def frozen_params(model: GazeNet) -> dict[str, Tensor]:
    """Theta as constants sharing the model's arrays (no weight gradients get computed)."""
    return {k: Tensor(t.data, dtype=t.dtype) for k, t in model.params.items()}


def gaussian_prompts(model: GazeNet, rng: np.random.Generator, std: float = 1.0) -> list[np.ndarray]:
    return [(std * rng.standard_normal(b.tensor.shape)).astype(b.tensor.dtype) for b in model.prompts.blocks]


def inner_update(model: GazeNet, prompts: Sequence[Tensor], x: Tensor, inner_lr: float,
                 create_graph: bool = False) -> list[Tensor]:
    """One plain gradient step on the symmetry loss of a sample or micro-batch."""
    theta = frozen_params(model)
    loss = personalization_loss(lambda inp: model.forward(inp, prompts, params=theta), x)
    grads = ad.grad(loss, list(prompts), create_graph=create_graph)
    for g in grads:
        if not np.all(np.isfinite(g.data)):
            raise DivergenceError("non-finite inner gradient")
    if not create_graph:
        grads = [g.detach() for g in grads]
    return [ad.sub(p, ad.scalar_mul(g, inner_lr)) for p, g in zip(prompts, grads)]


def meta_gradient(model: GazeNet, prompt_arrays: Sequence[np.ndarray], images: np.ndarray, labels: np.ndarray,
                  inner_lr: float, mode: str = "first_order") -> tuple[list[np.ndarray], float, float]:
    """Batch-mean meta-gradient w.r.t. the shared prompt.

    Returns (gradients per prompt block, mean inner symmetry loss, mean post-inner L1).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    exact = mode == "exact"
    theta = frozen_params(model)
    batch = len(images)
    p = [Tensor(a, requires_grad=True, dtype=a.dtype) for a in prompt_arrays]
    per_sample = [ad.broadcast_to(ad.reshape(t, (1, t.size)), (batch, t.size)) for t in p]
    x = Tensor(images)
    y = Tensor(labels)

    def fwd(inp, prm):
        return model.forward(inp, prm, params=theta)

    sym_sum = symmetry_loss_sum(fwd(x, per_sample), fwd(ad.flip_horizontal(x), per_sample))
    inner = ad.grad(sym_sum, per_sample, create_graph=exact)
    if not exact:
        inner = [g.detach() for g in inner]
    adapted = [ad.sub(ps, ad.scalar_mul(g, inner_lr)) for ps, g in zip(per_sample, inner)]
    l1 = l1_gaze_loss(fwd(x, adapted), y)
    grads = ad.grad(l1, p)
    return [g.data for g in grads], sym_sum.item() / batch, l1.item()


def outer_step(model: GazeNet, images: np.ndarray, labels: np.ndarray, cfg: MetaConfig,
               optimizer: Adam | None = None) -> tuple[float, float]:
    """Update ``model.prompts`` in place of its arrays; theta is never touched."""
    grads, sym, l1 = meta_gradient(model, model.prompts.arrays(), images, labels, cfg.inner_lr, cfg.mode)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite meta-gradient")
    if optimizer is None:
        model.prompts.assign([a - cfg.outer_lr * g for a, g in zip(model.prompts.arrays(), grads)])
    else:
        named = dict(zip(model.prompt_names(), model.prompts.tensors()))
        optimizer.step(named, dict(zip(named, grads)))
    return sym, l1


def init_prompts(model: GazeNet, cfg: MetaConfig) -> None:
    if cfg.prompt_init == "gaussian":
        rng = np.random.default_rng([cfg.seed, 1])
        model.prompts.assign(gaussian_prompts(model, rng, cfg.init_std))
    else:
        model.prompts.assign([np.zeros_like(a) for a in model.prompts.arrays()])


def meta_train(model: GazeNet, source: LabeledSet, cfg: MetaConfig, initialize: bool = True) -> list[dict]:
    """Meta-learn ``model.prompts`` on labeled source data. Returns per-iteration log rows."""
    cfg.validate()
    if initialize:
        init_prompts(model, cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    optimizer = Adam(cfg.outer_lr) if cfg.outer_optimizer == "adam" else None
    rows = []
    n = len(source)
    for it in range(cfg.iterations):
        idx = np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        try:
            sym, l1 = outer_step(model, source.images[idx], source.labels[idx], cfg, optimizer)
        except DivergenceError as exc:
            raise DivergenceError(f"meta-training diverged at iteration {it}; last healthy iteration {it - 1}") from exc
        if not (np.isfinite(sym) and np.isfinite(l1)):
            raise DivergenceError(f"meta-training loss non-finite at iteration {it}; last healthy iteration {it - 1}")
        rows.append({"iteration": it, "mean_inner_sym_loss": sym, "mean_post_inner_l1": l1})
        if it % 50 == 0:
            log.info("meta iter %d sym=%.4f l1=%.4f", it, sym, l1)
    return rows
