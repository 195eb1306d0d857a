"""Imitation objectives: trajectory L1, latent world-model MSE and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


@dataclass
class ILLossReport:
    l_imi: float
    l_wm: float
    l_il: float
    alpha: float


def imitation_loss(actions, expert_actions):
    """Mean absolute difference over every (step, dim) component."""
    if not isinstance(actions, Tensor):
        actions = Tensor(np.asarray(actions))
    expert = np.asarray(expert_actions)
    if actions.shape != expert.shape:
        raise ValueError(f"imitation_loss: shapes {actions.shape} and {expert.shape} differ")
    return ad.mean(ad.abs_(actions - expert))


def world_model_loss(pred_next, next_state):
    """MSE with the target branch detached (no gradient reaches it)."""
    target = next_state.detach() if isinstance(next_state, Tensor) else np.asarray(next_state)
    if pred_next.shape != tuple(np.shape(target.data if isinstance(target, Tensor) else target)):
        raise ValueError("world_model_loss: width mismatch")
    return ad.mse(pred_next, target)


def il_total(l_imi, l_wm, alpha=1.0):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return l_imi + l_wm * alpha
