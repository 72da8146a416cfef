"""Sparse mixture-of-experts layer with top-1 dispatch and a residual connection.

``smoe_forward`` computes ``H'[t] = H[t] + g_t * FFN_{k_t}(H[t])`` with the
autodiff ops. The numpy helpers below give the closed-form Jacobian of that
map for a single token, split into the expert path and the routing path, and
the routing-path vector-Jacobian product used by the span diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .routing import ExpertEmbeddings, RouterConfig, RoutingOutcome, init_router, route
from .tensor import Rng, Tensor

ACTIVATIONS = ("gelu", "relu")


class NonDifferentiableError(ValueError):
    """The token sits too close to a routing decision boundary."""


def activate(x: Tensor, name: str) -> Tensor:
    if name == "gelu":
        return tn.gelu(x)
    if name == "relu":
        return tn.relu(x)
    raise ValueError(f"unknown activation {name!r}")


def _activate_np(a: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and elementwise derivative."""
    if name == "relu":
        return np.maximum(a, 0.0), (a > 0).astype(float)
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (a + 0.044715 * a**3))
    d = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * a * a)
    return 0.5 * a * (1.0 + t), d


@dataclass
class ExpertFFN:
    blocks: list[tuple[Tensor, Tensor, Tensor, Tensor]]  # (W1, b1, W2, b2)
    activation: str = "gelu"

    def __call__(self, x: Tensor) -> Tensor:
        for W1, b1, W2, b2 in self.blocks:
            x = tn.add(tn.matmul(activate(tn.add(tn.matmul(x, W1), b1), self.activation), W2), b2)
        return x

    def forward_np(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Output and Jacobian d out / d h for one token vector."""
        x = h
        J = np.eye(h.shape[0])
        for W1, b1, W2, b2 in self.blocks:
            z, dz = _activate_np(x @ W1.data + b1.data, self.activation)
            x = z @ W2.data + b2.data
            J = (W2.data.T * dz) @ W1.data.T @ J
        return x, J

    def tensors(self) -> list[Tensor]:
        return [t for block in self.blocks for t in block]


def init_expert(d: int, d_ff: int, sublayers: int, activation: str, rng: Rng) -> ExpertFFN:
    blocks = []
    for j in range(sublayers):
        r = rng.child(j)
        blocks.append(
            (
                Tensor(r.child("W1").normal((d, d_ff), 1.0 / math.sqrt(d)), requires_grad=True),
                Tensor(np.zeros(d_ff), requires_grad=True),
                Tensor(r.child("W2").normal((d_ff, d), 1.0 / math.sqrt(d_ff)), requires_grad=True),
                Tensor(np.zeros(d), requires_grad=True),
            )
        )
    return ExpertFFN(blocks, activation)


@dataclass
class SMoELayer:
    config: RouterConfig
    router: ExpertEmbeddings
    experts: list[ExpertFFN]

    def __post_init__(self):
        if len(self.experts) != self.config.num_experts:
            raise ValueError(f"{len(self.experts)} experts for a {self.config.num_experts}-way router")

    @property
    def activation(self) -> str:
        return self.experts[0].activation


def init_smoe(config: RouterConfig, d: int, d_ff: int, sublayers: int, activation: str, rng: Rng) -> SMoELayer:
    router = init_router(config, d, rng.child("router"))
    experts = [init_expert(d, d_ff, sublayers, activation, rng.child("expert", i)) for i in range(config.num_experts)]
    return SMoELayer(config, router, experts)


def smoe_forward(H: Tensor, layer: SMoELayer, frozen_routing: bool = False) -> tuple[Tensor, RoutingOutcome]:
    outcome = route(H, layer.config, layer.router, frozen=frozen_routing)
    T = H.shape[0]
    parts, order = [], []
    for i, expert in enumerate(layer.experts):
        idx = np.flatnonzero(outcome.selected == i)
        if idx.size == 0:
            continue
        parts.append(expert(tn.index_select(H, idx)))
        order.append(idx)
    perm = np.concatenate(order)
    inverse = np.empty(T, dtype=np.intp)
    inverse[perm] = np.arange(T)
    expert_out = tn.index_select(tn.concat(parts, axis=0), inverse)
    gated = tn.mul(tn.reshape(outcome.gate, (T, 1)), expert_out)
    return tn.add(H, gated), outcome


# ---------------------------------------------------------------------------
# closed-form single-token Jacobian pieces (baseline scorer, softmax gate)


def _routing_state(h: np.ndarray, layer: SMoELayer, margin: float):
    cfg = layer.config
    if cfg.gating != "softmax" or cfg.use_projection or cfg.use_l2:
        raise ValueError("closed-form Jacobian is defined for the dot-product scorer with softmax gating")
    E = layer.router.E.data
    tau = layer.router.tau
    s = E @ h
    k = int(np.argmax(s))
    if s.size > 1:
        runner_up = np.max(np.delete(s, k))
        if s[k] - runner_up < margin:
            raise NonDifferentiableError(
                f"non-differentiable neighborhood: top-2 score margin {s[k] - runner_up:.3g} < {margin:g}"
            )
    z = s / tau
    S = np.exp(z - z.max())
    S /= S.sum()
    return E, tau, S, k


def top2_margin(h: np.ndarray, layer: SMoELayer) -> float:
    s = layer.router.E.data @ h
    if s.size < 2:
        return math.inf
    top = np.sort(s)[::-1]
    return float(top[0] - top[1])


def jacobian_analytic(h, layer: SMoELayer, margin: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(J1, J2)``: expert path ``I + S_k J_ffn`` and gate path ``sum_j c_j h_ffn e_j^T``.

    The temperature enters as ``1/tau`` in the gate path and equals 1 for the
    plain dot-product router.
    """
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=float)
    E, tau, S, k = _routing_state(h, layer, margin)
    h_ffn, J_ffn = layer.experts[k].forward_np(h)
    J1 = np.eye(h.size) + S[k] * J_ffn
    J2 = np.zeros((h.size, h.size))
    for j in range(E.shape[0]):
        coef = S[k] * ((1.0 if j == k else 0.0) - S[j]) / tau
        J2 += coef * np.outer(h_ffn, E[j])
    return J1, J2


def routing_grad_component(h, layer: SMoELayer, upstream, margin: float = 1e-6) -> np.ndarray:
    """``J2^T u``: a linear combination of the expert embeddings."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=float)
    u = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream, dtype=float)
    E, tau, S, k = _routing_state(h, layer, margin)
    h_ffn, _ = layer.experts[k].forward_np(h)
    proj = float(h_ffn @ u)
    coef = S[k] * (np.eye(E.shape[0])[k] - S) / tau * proj
    return coef @ E


def routing_grad_general(h, layer: SMoELayer, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gate-path gradient for any scorer/gating, plus the per-expert direction basis.

    Returns ``(component, basis)`` where ``component = basis @ c`` and column
    ``j`` of ``basis`` is ``d s_j / d h``. For the dot-product scorer that
    column is ``e_j``; with projection and normalisation it is
    ``W (I - p p^T) e_j / ||W^T h||``, which lies in the column space of ``W``.
    """
    cfg = layer.config
    h = np.asarray(h, dtype=float)
    u = np.asarray(upstream, dtype=float)
    E = layer.router.E.data
    tau = layer.router.tau
    W = layer.router.W.data if cfg.use_projection else None
    feats = h @ W if W is not None else h
    if cfg.use_l2:
        nf = max(np.linalg.norm(feats), cfg.eps_norm)
        p = feats / nf
        En = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), cfg.eps_norm)
        s = En @ p
        dfeat = (En - np.outer(En @ p, p)) / nf  # rows: d s_j / d feats
    else:
        s = E @ feats
        dfeat = E
    basis = (dfeat @ W.T).T if W is not None else dfeat.T  # [d, N]
    k = int(np.argmax(s))
    h_ffn, _ = layer.experts[k].forward_np(h)
    proj = float(h_ffn @ u)
    if cfg.gating == "softmax":
        z = s / tau
        S = np.exp(z - z.max())
        S /= S.sum()
        c = S[k] * (np.eye(s.size)[k] - S) / tau * proj
    else:
        sig = 1.0 / (1.0 + math.exp(-s[k] / tau))
        c = np.zeros(s.size)
        c[k] = sig * (1.0 - sig) / tau * proj
    return basis @ c, basis
