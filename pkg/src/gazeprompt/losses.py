"""Supervised L1 gaze loss and the left-right symmetry (personalization) loss."""

from __future__ import annotations

from typing import Callable

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

# Horizontal flip keeps pitch and negates yaw.
FLIP_GAZE = (1.0, -1.0)


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != 2 or a.shape[1] != 2:
        raise DimensionError(f"{op}: expected (batch, 2) predictions, got {a.shape}")
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def l1_gaze_loss(pred: Tensor, label: Tensor) -> Tensor:
    """Mean absolute error over batch and both angle components."""
    _check_pair(pred, label, "l1_gaze_loss")
    return ad.mean_all(ad.abs_(ad.sub(pred, label)))


def symmetry_loss_sum(pred: Tensor, pred_flipped: Tensor) -> Tensor:
    """Sum over samples of 0.5 * ||pred_i - M pred_flipped_i||_1, M = diag(1, -1)."""
    _check_pair(pred, pred_flipped, "symmetry_loss")
    resid = ad.sub(pred, ad.select_columns(pred_flipped, FLIP_GAZE))
    return ad.scalar_mul(ad.sum_all(ad.abs_(resid)), 0.5)


def symmetry_loss(pred: Tensor, pred_flipped: Tensor) -> Tensor:
    """Batch mean of the per-sample symmetry loss."""
    return ad.scalar_mul(symmetry_loss_sum(pred, pred_flipped), 1.0 / pred.shape[0])


def personalization_loss(forward: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """Symmetry loss between predictions on ``x`` and on its horizontal mirror.

    ``forward`` closes over whichever parameters and prompts should be
    differentiated.
    """
    return symmetry_loss(forward(x), forward(ad.flip_horizontal(x)))
