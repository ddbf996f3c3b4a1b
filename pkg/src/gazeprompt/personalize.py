"""Test-time personalization, angular-error evaluation and report I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import personalization_loss
from .meta import frozen_params, gaussian_prompts
from .model import GazeNet
from .synthgaze import PersonDataset
from .training import Adam, DivergenceError, predict, write_csv

STRATEGIES = ("prompt_only", "update_all", "no_meta_prompt")


@dataclass(frozen=True)
class PersonalizeConfig:
    num_images: int = 5
    lr: float = 0.01
    steps: int = 50
    strategy: str = "prompt_only"
    # update_all runs this many steps when set (default: steps // 10)
    update_all_steps: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 1:
            raise ValueError(f"num_images must be >= 1, got {self.num_images}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def effective_steps(self) -> int:
        if self.strategy == "update_all":
            return self.update_all_steps if self.update_all_steps is not None else self.steps // 10
        return self.steps


def gaze_to_vector(pitch, yaw) -> np.ndarray:
    """Unit gaze vector(s) (-cos p sin y, -sin p, -cos p cos y)."""
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    return np.stack([-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=-1)


def angular_error(pred, truth) -> np.ndarray:
    """Angle in degrees between gaze directions given as (..., 2) pitch/yaw arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    a = gaze_to_vector(pred[..., 0], pred[..., 1])
    b = gaze_to_vector(truth[..., 0], truth[..., 1])
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def personalize(model: GazeNet, person: PersonDataset, cfg: PersonalizeConfig, person_index: int = 0) -> GazeNet:
    """Adapt a copy of ``model`` to one person from its first K unlabeled images."""
    cfg.validate()
    adapted = model.copy()
    images = person.first_k(cfg.num_images)  # images only; labels never touched
    if cfg.strategy == "no_meta_prompt":
        rng = np.random.default_rng([cfg.seed, person_index, 3])
        adapted.prompts.assign(gaussian_prompts(adapted, rng))
    if cfg.strategy == "update_all":
        trainable = adapted.named_tensors()
        params = adapted.params
    else:
        trainable = dict(zip(adapted.prompt_names(), adapted.prompts.tensors()))
        params = frozen_params(adapted)
    opt = Adam(cfg.lr)
    x = Tensor(images)
    prompts = adapted.prompts.tensors()
    for step in range(cfg.effective_steps()):
        loss = personalization_loss(lambda inp: adapted.forward(inp, prompts, params=params), x)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"personalization loss non-finite for person {person.person.person_id} at step {step}")
        grads = ad.grad(loss, list(trainable.values()))
        opt.step(trainable, {k: g.data for k, g in zip(trainable, grads)})
    return adapted


@dataclass
class EvalReport:
    person_ids: list[str]
    person_errors: list[float]
    mean_error: float
    config: dict = field(default_factory=dict)
    seed: int = 0

    def rows(self) -> list[dict]:
        n_adapt = self.config.get("num_images", 0)
        strategy = self.config.get("strategy", "none")
        return [{"person_id": p, "n_adapt": n_adapt, "strategy": strategy, "error_deg": e}
                for p, e in zip(self.person_ids, self.person_errors)]

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        write_csv(stem.with_suffix(".csv"), self.rows(), ("person_id", "n_adapt", "strategy", "error_deg"))
        summary = {"mean_error_deg": self.mean_error, "n_persons": len(self.person_ids),
                   "config": self.config, "seed": self.seed,
                   "per_person": dict(zip(self.person_ids, self.person_errors))}
        stem.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def person_error(model: GazeNet, person: PersonDataset) -> float:
    if len(person.test_images) == 0:
        raise ValueError(f"person {person.person.person_id} has an empty test split")
    return float(angular_error(predict(model, person.test_images), person.test_labels).mean())


def evaluate(model: GazeNet, persons: Sequence[PersonDataset], config: dict | None = None,
             seed: int = 0) -> EvalReport:
    errors = [person_error(model, p) for p in persons]
    return EvalReport([p.person.person_id for p in persons], errors,
                      float(np.mean(errors)) if errors else float("nan"), dict(config or {}), seed)


def personalize_and_evaluate(model: GazeNet, persons: Sequence[PersonDataset], cfg: PersonalizeConfig,
                             seed: int = 0) -> EvalReport:
    """Adapt to each person independently and report test errors, in person order."""
    errors = []
    for j, person in enumerate(persons):
        errors.append(person_error(personalize(model, person, cfg, j), person))
    return EvalReport([p.person.person_id for p in persons], errors, float(np.mean(errors)),
                      asdict(cfg), seed)
