"""Token-to-expert scoring, top-1 selection and gating.

Two scorers share one code path:

* ``baseline``: dot product between the hidden vector and an expert embedding
  living in the hidden space.
* ``hypersphere``: project the hidden vector to a small routing space, then
  take the cosine against unit-normalised expert embeddings. The gate divides
  scores by a learnable temperature stored as its logarithm.

The two ablation switches ``dim_reduction`` and ``l2_norm`` default to what the
variant implies and may be overridden independently.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Rng, Tensor

VARIANTS = ("baseline", "hypersphere")
GATINGS = ("softmax", "sigmoid")
DEFAULT_TAU = {"softmax": 0.3, "sigmoid": 0.07}


@dataclass
class RouterConfig:
    variant: str = "hypersphere"
    gating: str = "softmax"
    num_experts: int = 8
    routing_dim: int | None = None  # None -> max(1, N // 2)
    tau_init: float | None = None  # None -> 0.3 softmax / 0.07 sigmoid
    tau0: float | None = None  # balance-loss temperature; None -> tau_init (hypersphere) or 1.0
    eps_norm: float = 1e-12
    dim_reduction: bool | None = None  # None -> variant == hypersphere
    l2_norm: bool | None = None
    learnable_tau: bool | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"router variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gating not in GATINGS:
            raise ValueError(f"gating must be one of {GATINGS}, got {self.gating!r}")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.routing_dim is not None and self.routing_dim < 1:
            raise ValueError("routing_dim must be >= 1")
        for name in ("tau_init", "tau0", "eps_norm"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def d_e(self) -> int:
        return self.routing_dim if self.routing_dim is not None else max(1, self.num_experts // 2)

    @property
    def use_projection(self) -> bool:
        return self.variant == "hypersphere" if self.dim_reduction is None else self.dim_reduction

    @property
    def use_l2(self) -> bool:
        return self.variant == "hypersphere" if self.l2_norm is None else self.l2_norm

    @property
    def use_learnable_tau(self) -> bool:
        return self.variant == "hypersphere" if self.learnable_tau is None else self.learnable_tau

    @property
    def tau_start(self) -> float:
        if not self.use_learnable_tau:
            return 1.0
        return self.tau_init if self.tau_init is not None else DEFAULT_TAU[self.gating]

    @property
    def balance_tau(self) -> float:
        if self.tau0 is not None:
            return self.tau0
        return DEFAULT_TAU[self.gating] if self.variant == "hypersphere" else 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExpertEmbeddings:
    """Router parameters: expert embeddings, optional projection, log-temperature."""

    E: Tensor
    log_tau: Tensor
    W: Tensor | None = None

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau.item())

    def tensors(self) -> dict[str, Tensor]:
        out = {"E": self.E, "log_tau": self.log_tau}
        if self.W is not None:
            out["W"] = self.W
        return out


@dataclass
class RoutingOutcome:
    scores: Tensor  # [T, N] pre-gate scores
    selected: np.ndarray  # [T] expert index
    gate: Tensor  # [T]
    projected: Tensor | None = None  # [T, d_e] normalised routing features
    extras: dict = field(default_factory=dict)


def init_router(config: RouterConfig, d: int, rng: Rng) -> ExpertEmbeddings:
    N = config.num_experts
    width = config.d_e if config.use_projection else d
    E = rng.child("E").normal((N, width))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    W = None
    if config.use_projection:
        W = Tensor(rng.child("W").normal((d, config.d_e), 1.0 / math.sqrt(d)), requires_grad=True, name="W")
    log_tau = Tensor(math.log(config.tau_start), requires_grad=config.use_learnable_tau, name="log_tau")
    return ExpertEmbeddings(E=Tensor(E, requires_grad=True, name="E"), log_tau=log_tau, W=W)


def score_baseline(H: Tensor, E: Tensor) -> Tensor:
    if H.shape[-1] != E.shape[-1]:
        raise tn.ShapeError(f"hidden width {H.shape[-1]} != expert embedding width {E.shape[-1]}")
    return tn.matmul(H, tn.transpose(E))


def score_hypersphere(H: Tensor, W: Tensor, E: Tensor, eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """Cosine between ``H @ W`` rows and ``E`` rows; also returns the normalised projections."""
    if H.shape[-1] != W.shape[0] or W.shape[1] != E.shape[1]:
        raise tn.ShapeError(f"incompatible shapes H{H.shape} W{W.shape} E{E.shape}")
    projected = tn.l2_normalize(tn.matmul(H, W), dim=-1, eps=eps)
    En = tn.l2_normalize(E, dim=-1, eps=eps)
    return tn.matmul(projected, tn.transpose(En)), projected


def select_top1(scores) -> np.ndarray:
    """Per-row argmax; ties go to the lowest expert index."""
    return tn.argmax(scores, axis=-1)


def gate_value(scores: Tensor, selected, gating: str, tau) -> Tensor:
    """Gate for the selected expert: ``softmax(s/tau)[k]`` or ``sigmoid(s_k/tau)``."""
    tau = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if not (tau.data > 0).all():
        raise ValueError("temperature must be positive")
    z = tn.div(scores, tau)
    if gating == "softmax":
        return tn.pick(tn.softmax(z, dim=-1), selected)
    if gating == "sigmoid":
        return tn.sigmoid(tn.pick(z, selected))
    raise ValueError(f"unknown gating {gating!r}")


def compute_scores(H: Tensor, config: RouterConfig, params: ExpertEmbeddings) -> tuple[Tensor, Tensor | None]:
    if config.variant == "hypersphere" and config.use_projection and config.use_l2:
        return score_hypersphere(H, params.W, params.E, config.eps_norm)
    feats = tn.matmul(H, params.W) if config.use_projection else H
    E = params.E
    projected = None
    if config.use_l2:
        feats = tn.l2_normalize(feats, dim=-1, eps=config.eps_norm)
        E = tn.l2_normalize(E, dim=-1, eps=config.eps_norm)
        projected = feats
    elif config.use_projection:
        projected = feats
    return score_baseline(feats, E), projected


def route(H: Tensor, config: RouterConfig, params: ExpertEmbeddings, frozen: bool = False) -> RoutingOutcome:
    """Score, select and gate every row of ``H``.

    ``frozen`` evaluates the same function with detached router parameters, so
    gradients still reach ``H`` but never ``E``, ``W`` or ``log_tau``.
    """
    if params.E.shape[0] != config.num_experts:
        raise ValueError(f"router has {params.E.shape[0]} embeddings but config says {config.num_experts}")
    if frozen:
        params = ExpertEmbeddings(
            E=params.E.detach(),
            log_tau=params.log_tau.detach(),
            W=None if params.W is None else params.W.detach(),
        )
    scores, projected = compute_scores(H, config, params)
    selected = select_top1(scores)
    gate = gate_value(scores, selected, config.gating, tn.exp(params.log_tau))
    return RoutingOutcome(scores=scores, selected=selected, gate=gate, projected=projected)
