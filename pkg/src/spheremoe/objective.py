"""Load-balancing auxiliary loss and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass
class BalanceConfig:
    alpha: float = 1e-2
    tau0: float = 0.3

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")


@dataclass
class LossBreakdown:
    task_loss: float
    balance_loss: float
    total: float
    per_expert_load: np.ndarray
    per_expert_mean_prob: np.ndarray


def expert_load(selected, num_experts: int) -> np.ndarray:
    return np.bincount(np.asarray(selected, dtype=np.intp).reshape(-1), minlength=num_experts)


def balance_loss(scores: Tensor, selected, tau0: float) -> Tensor:
    """``N * sum_i t_i * mean_tokens softmax(s / tau0)_i``.

    ``t_i`` is the fraction of tokens dispatched to expert ``i``. It is a
    constant of the forward pass, so only the softmax term carries gradient.
    """
    n_tokens, N = scores.shape
    if n_tokens == 0:
        raise ValueError("balance loss needs at least one token")
    if not tau0 > 0:
        raise ValueError("tau0 must be positive")
    frac = expert_load(selected, N) / n_tokens
    mean_prob = tn.mean(tn.softmax(tn.scale(scores, 1.0 / tau0), dim=-1), axis=0)
    return tn.scale(tn.sum(tn.mul(mean_prob, Tensor(frac))), float(N))


def total_loss(task, balance, alpha: float):
    """``task + alpha * balance`` for tensors or plain floats."""
    if isinstance(task, Tensor) or isinstance(balance, Tensor):
        return tn.add(task, tn.scale(tn.as_tensor(balance), alpha))
    return task + alpha * balance


def breakdown(task: Tensor, balance: Tensor, alpha: float, scores: Tensor, selected, tau0: float) -> LossBreakdown:
    N = scores.shape[1]
    z = scores.data / tau0
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return LossBreakdown(
        task_loss=task.item(),
        balance_loss=balance.item(),
        total=task.item() + alpha * balance.item(),
        per_expert_load=expert_load(selected, N),
        per_expert_mean_prob=p.mean(axis=0),
    )
