"""Small pre-norm Transformer encoder with one SMoE layer inserted mid-stack."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .moe import ACTIVATIONS, SMoELayer, activate, init_smoe, smoe_forward
from .routing import RouterConfig, RoutingOutcome
from .tensor import Rng, Tensor

PAD_ID = 0
MASK_ID = 1


@dataclass
class ModelConfig:
    vocab_size: int = 256
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    smoe_position: int | None = None  # None -> layers // 2
    num_expert_sublayers: int = 3
    expert_d_ff: int | None = None  # None -> d_ff
    activation: str = "gelu"
    router: RouterConfig = field(default_factory=RouterConfig)

    def __post_init__(self):
        if isinstance(self.router, dict):
            self.router = RouterConfig(**self.router)
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if not 0 <= self.smoe_at <= self.layers:
            raise ValueError(f"smoe_position must lie in [0, {self.layers}]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if min(self.vocab_size, self.hidden, self.d_ff, self.max_seq_len, self.num_expert_sublayers) < 1:
            raise ValueError("model sizes must be positive")

    @property
    def smoe_at(self) -> int:
        return self.layers // 2 if self.smoe_position is None else self.smoe_position

    @property
    def expert_width(self) -> int:
        return self.d_ff if self.expert_d_ff is None else self.expert_d_ff

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Encoded:
    hidden: Tensor  # [B*T, d]
    outcome: RoutingOutcome
    pre_smoe_hidden: Tensor  # [B*T, d], input to the router
    smoe_output: Tensor


class Model:
    """Parameters live in ``self.params`` (name -> Tensor) plus the SMoE layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = Rng(seed, ("init",))
        d, f = config.hidden, config.d_ff
        p: dict[str, Tensor] = {}

        def new(name, shape, std=None):
            data = np.zeros(shape) if std is None else rng.child(name).normal(shape, std)
            p[name] = Tensor(data, requires_grad=True, name=name)

        new("tok_emb", (config.vocab_size, d), 1.0 / math.sqrt(d))
        new("pos_emb", (config.max_seq_len, d), 0.02)
        for i in range(config.layers):
            b = f"blocks.{i}."
            for ln in ("ln1", "ln2"):
                p[b + ln + ".g"] = Tensor(np.ones(d), requires_grad=True, name=b + ln + ".g")
                new(b + ln + ".b", (d,))
            for m in ("q", "k", "v"):
                new(b + f"attn.W{m}", (d, d), 1.0 / math.sqrt(d))
                new(b + f"attn.b{m}", (d,))
            new(b + "attn.Wo", (d, d), 1.0 / math.sqrt(d) / math.sqrt(2 * max(config.layers, 1)))
            new(b + "attn.bo", (d,))
            new(b + "ffn.W1", (d, f), 1.0 / math.sqrt(d))
            new(b + "ffn.b1", (f,))
            new(b + "ffn.W2", (f, d), 1.0 / math.sqrt(f) / math.sqrt(2 * max(config.layers, 1)))
            new(b + "ffn.b2", (d,))
        self.params = p
        self.smoe: SMoELayer = init_smoe(
            config.router, d, config.expert_width, config.num_expert_sublayers, config.activation, rng.child("smoe")
        )

    # parameter bookkeeping ---------------------------------------------------

    def router_tensors(self) -> dict[str, Tensor]:
        return {f"smoe.router.{k}": v for k, v in self.smoe.router.tensors().items()}

    def expert_tensors(self) -> dict[str, Tensor]:
        names = ("W1", "b1", "W2", "b2")
        out = {}
        for i, expert in enumerate(self.smoe.experts):
            for j, block in enumerate(expert.blocks):
                for n, t in zip(names, block):
                    out[f"smoe.expert.{i}.{j}.{n}"] = t
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        """Every model tensor, in a fixed order, including non-trainable ones."""
        return {**self.params, **self.router_tensors(), **self.expert_tensors()}

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}

    def backbone_names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.named_tensors().values()]))

    def set_smoe_frozen(self, frozen: bool) -> None:
        for t in self.expert_tensors().values():
            t.requires_grad = not frozen
        for name, t in self.router_tensors().items():
            if name.endswith("log_tau"):
                t.requires_grad = (not frozen) and self.config.router.use_learnable_tau
            else:
                t.requires_grad = not frozen

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = self.named_tensors()
        missing = set(tensors) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)[:5]}")
        for k, t in tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# forward pass


def _attention(x: Tensor, p: dict, prefix: str, B: int, T: int, heads: int, key_bias, rate, rng) -> Tensor:
    d = x.shape[1]
    dh = d // heads

    def proj(m):
        y = tn.add(tn.matmul(x, p[prefix + f"W{m}"]), p[prefix + f"b{m}"])
        return tn.transpose(tn.reshape(y, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    att = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_bias is not None:
        att = tn.add(att, key_bias)
    att = tn.dropout(tn.softmax(att, dim=-1), rate, rng and rng.child("att"))
    ctx = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B * T, d))
    return tn.add(tn.matmul(ctx, p[prefix + "Wo"]), p[prefix + "bo"])


def _block(x: Tensor, model: Model, i: int, B: int, T: int, key_bias, rng: Rng | None, rate: float) -> Tensor:
    cfg, p = model.config, model.params
    b = f"blocks.{i}."
    h = tn.layer_norm(x, p[b + "ln1.g"], p[b + "ln1.b"])
    a = _attention(h, p, b + "attn.", B, T, cfg.heads, key_bias, rate, rng and rng.child(i, "a"))
    x = tn.add(x, tn.dropout(a, rate, rng and rng.child(i, "ad")))
    h = tn.layer_norm(x, p[b + "ln2.g"], p[b + "ln2.b"])
    h = tn.add(tn.matmul(activate(tn.add(tn.matmul(h, p[b + "ffn.W1"]), p[b + "ffn.b1"]), cfg.activation),
                         p[b + "ffn.W2"]), p[b + "ffn.b2"])
    return tn.add(x, tn.dropout(h, rate, rng and rng.child(i, "fd")))


def encode(tokens, model: Model, rng: Rng | None = None, dropout: float = 0.0) -> Encoded:
    """Run the encoder on a ``[B, T]`` id matrix.

    Dropout is applied only when ``rng`` is given (training mode). The SMoE
    layer never applies dropout.
    """
    cfg = model.config
    ids = np.atleast_2d(np.asarray(tokens, dtype=np.intp))
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")
    pad = ids == PAD_ID
    key_bias = None
    if pad.any():
        key_bias = np.where(pad, -1e9, 0.0)[:, None, None, :]
        key_bias[pad.all(axis=1)] = 0.0  # fully padded rows attend uniformly
        key_bias = Tensor(key_bias)
    x = tn.add(tn.embedding(model.params["tok_emb"], ids), tn.index_select(model.params["pos_emb"], np.arange(T)))
    x = tn.reshape(x, (B * T, cfg.hidden))
    if rng is None:
        dropout = 0.0
    else:
        x = tn.dropout(x, dropout, rng.child("emb"))
    for i in range(cfg.smoe_at):
        x = _block(x, model, i, B, T, key_bias, rng, dropout)
    pre = x
    x, outcome = smoe_forward(x, model.smoe)
    smoe_out = x
    for i in range(cfg.smoe_at, cfg.layers):
        x = _block(x, model, i, B, T, key_bias, rng, dropout)
    return Encoded(hidden=x, outcome=outcome, pre_smoe_hidden=pre, smoe_output=smoe_out)


def mlm_logits(hidden: Tensor, model: Model) -> Tensor:
    """Output projection tied to the token embedding."""
    return tn.matmul(hidden, tn.transpose(model.params["tok_emb"]))
