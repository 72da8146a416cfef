"""Adam, the warmup/linear-decay schedule, training loops and checkpoint files.

All randomness in a step (batch choice, masking, dropout) is drawn from
streams labelled by the step number, so a run resumed from a checkpoint
replays the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .data import MaskedBatch, mask_tokens
from .model import Model, ModelConfig, encode, mlm_logits
from .objective import balance_loss, expert_load, total_loss
from .tensor import Rng

MAGIC = b"XMOE"
FORMAT_VERSION = 1
DTYPE_F64 = 0
DTYPE_BYTES = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr_max: float = 3e-4
    warmup_steps: int = 300
    schedule: str = "linear_decay"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    alpha: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 100
    freeze_routing: bool = False
    dropout_rate: float = 0.1
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.warmup_steps < 0 or self.batch_size < 1:
            raise ValueError("steps and warmup_steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps > self.steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) exceeds steps ({self.steps})")
        if self.schedule != "linear_decay":
            raise ValueError("only the linear_decay schedule is supported")
        for name in ("lr_max", "adam_eps", "weight_decay", "alpha", "dropout_rate", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dropout_rate >= 1:
            raise ValueError("dropout_rate must be < 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay (matrices only).

    ``params`` maps names to Tensors whose ``data`` is replaced, never mutated.
    """
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise tn.ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if config.weight_decay and p.data.ndim >= 2:
            update = update + config.weight_decay * p.data
        p.data = np.asarray(p.data - lr * update, dtype=np.float64)
    return state


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_max`` then linear decay to 0 at ``config.steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w, total = config.warmup_steps, config.steps
    if step < w:
        return config.lr_max * step / w
    if total <= w:
        return config.lr_max if step == w else 0.0
    return config.lr_max * max(0.0, (total - step) / (total - w))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


# ---------------------------------------------------------------------------
# logs


LOG_FIELDS = ("step", "task_loss", "balance_loss", "total_loss", "tau", "lr")


@dataclass
class TrainLog:
    num_experts: int
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(record)

    @property
    def header(self) -> list[str]:
        return list(LOG_FIELDS) + [f"load_{i}" for i in range(self.num_experts)]

    def loads(self) -> np.ndarray:
        return np.array([r["load"] for r in self.records], dtype=np.int64).reshape(-1, self.num_experts)

    def steps(self) -> np.ndarray:
        return np.array([r["step"] for r in self.records], dtype=np.int64)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.records:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]] + [int(x) for x in r["load"]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> TrainLog:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][: len(LOG_FIELDS)] != list(LOG_FIELDS):
            raise ValueError(f"{path} is not a training log (unexpected header)")
        n = len(rows[0]) - len(LOG_FIELDS)
        log = cls(num_experts=n)
        for row in rows[1:]:
            rec = {"step": int(row[0])}
            rec.update({k: float(v) for k, v in zip(LOG_FIELDS[1:], row[1 : len(LOG_FIELDS)])})
            rec["load"] = [int(x) for x in row[len(LOG_FIELDS) :]]
            log.append(rec)
        return log


# ---------------------------------------------------------------------------
# checkpoints


def config_digest(config: ModelConfig) -> str:
    """Digest of the architecture; checkpoints are interchangeable iff digests match."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    model_config: dict = field(default_factory=dict)
    run_config: dict = field(default_factory=dict)
    digest: str = ""
    version: int = FORMAT_VERSION

    def model(self) -> Model:
        m = Model(model_config_from_dict(self.model_config))
        m.load_state_dict(self.params)
        return m


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def make_checkpoint(step: int, model: Model, adam: AdamState, rng: Rng, run_config: dict | None = None) -> Checkpoint:
    return Checkpoint(
        step=step,
        params=model.state_dict(),
        adam_t=adam.t,
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        rng_state=rng.get_state(),
        model_config=model.config.to_dict(),
        run_config=run_config or {},
        digest=config_digest(model.config),
    )


def _record(name: str, tag: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BB", tag, len(dims))
    return head + b"".join(struct.pack("<Q", n) for n in dims) + payload


def checkpoint_bytes(cp: Checkpoint) -> bytes:
    meta = {
        "adam_t": cp.adam_t,
        "digest": cp.digest,
        "model_config": cp.model_config,
        "rng_state": cp.rng_state,
        "run_config": cp.run_config,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    records = [_record("meta", DTYPE_BYTES, (len(blob),), blob)]
    for prefix, tensors in (("param/", cp.params), ("adam.m/", cp.adam_m), ("adam.v/", cp.adam_v)):
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
            records.append(_record(prefix + name, DTYPE_F64, arr.shape, arr.tobytes(order="C")))
    header = MAGIC + struct.pack("<IQI", cp.version, cp.step, len(records))
    return header + b"".join(records)


def save_checkpoint(path, cp: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(cp))


def parse_checkpoint(buf: bytes, expected_digest: str | None = None) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version, step, count = struct.unpack("<IQI", take(16))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    meta: dict = {}
    groups: dict[str, dict[str, np.ndarray]] = {"param/": {}, "adam.m/": {}, "adam.v/": {}}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        dims = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        if tag == DTYPE_F64:
            arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(dims)
            for prefix, group in groups.items():
                if name.startswith(prefix):
                    group[name[len(prefix) :]] = arr
                    break
            else:
                raise CheckpointError(f"unexpected tensor record {name!r}")
        elif tag == DTYPE_BYTES:
            payload = bytes(take(n))
            if name == "meta":
                meta = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"unknown dtype tag {tag} in record {name!r}")
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last record")
    cp = Checkpoint(
        step=step,
        params=groups["param/"],
        adam_t=meta.get("adam_t", 0),
        adam_m=groups["adam.m/"],
        adam_v=groups["adam.v/"],
        rng_state=meta.get("rng_state", {}),
        model_config=meta.get("model_config", {}),
        run_config=meta.get("run_config", {}),
        digest=meta.get("digest", ""),
        version=version,
    )
    if expected_digest is not None and cp.digest != expected_digest:
        raise CheckpointError(f"config digest mismatch: checkpoint {cp.digest}, expected {expected_digest}")
    return cp


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected_digest)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainData:
    """Token matrices for training and validation plus masking settings."""

    train: np.ndarray
    val: np.ndarray
    vocab_size: int
    mask_rate: float = 0.15


class TrainResult(NamedTuple):
    model: Model
    log: TrainLog
    checkpoints: list[Checkpoint]


def batch_for_step(data: TrainData, config: TrainConfig, step: int) -> MaskedBatch:
    rng = Rng(config.seed, ("train",))
    n = data.train.shape[0]
    size = min(config.batch_size, n)
    rows = np.sort(rng.child("batch", step).choice(n, size, replace=False))
    return mask_tokens(data.train[rows], rng.child("mask", step), data.mask_rate, vocab_size=data.vocab_size)


def validation_loss(model: Model, data: TrainData, seed: int = 0, max_sequences: int = 256) -> float:
    """Masked-LM loss on a fixed masking of the validation split, inference mode."""
    tokens = data.val[:max_sequences]
    if tokens.shape[0] == 0:
        raise ValueError("no validation sequences")
    batch = mask_tokens(tokens, Rng(seed, ("val-mask",)), data.mask_rate, vocab_size=data.vocab_size)
    with tn.no_grad():
        enc = encode(batch.input_ids, model)
        loss = tn.cross_entropy(mlm_logits(enc.hidden, model), batch.target_ids, batch.mask_flags)
    return loss.item()


def step_losses(model: Model, batch: MaskedBatch, config: TrainConfig, rng: Rng | None):
    enc = encode(batch.input_ids, model, rng, config.dropout_rate)
    task = tn.cross_entropy(mlm_logits(enc.hidden, model), batch.target_ids, batch.mask_flags)
    bal = balance_loss(enc.outcome.scores, enc.outcome.selected, model.config.router.balance_tau)
    return enc, task, bal, total_loss(task, bal, config.alpha)


def _run(
    model: Model,
    data: TrainData,
    config: TrainConfig,
    resume: Checkpoint | None,
    frozen: bool,
    run_config: dict | None,
) -> TrainResult:
    model.set_smoe_frozen(frozen)
    params = model.named_parameters()
    everything = model.named_tensors()
    frozen_snapshot = {k: t.data.copy() for k, t in everything.items() if k not in params} if frozen else {}
    adam = AdamState()
    start = 1
    if resume is not None:
        if resume.digest and resume.digest != config_digest(model.config):
            raise CheckpointError("resume checkpoint was written for a different model config")
        model.load_state_dict(resume.params)
        adam = AdamState(resume.adam_t, {k: v.copy() for k, v in resume.adam_m.items()},
                         {k: v.copy() for k, v in resume.adam_v.items()})
        start = resume.step + 1
    root = Rng(config.seed, ("train",))
    log = TrainLog(model.config.router.num_experts)
    checkpoints: list[Checkpoint] = []
    N = model.config.router.num_experts
    for step in range(start, config.steps + 1):
        batch = batch_for_step(data, config, step)
        model.zero_grad()
        try:
            enc, task, bal, total = step_losses(model, batch, config, root.child("dropout", step))
            tn.backward(total)
        except tn.NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at step {step}: {exc}") from exc
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        gnorm = clip_global_norm(grads, config.grad_clip)
        if not math.isfinite(gnorm):
            raise DivergenceError(f"non-finite gradient norm at step {step}")
        lr = lr_at(step, config)
        adam_step(params, grads, adam, lr, config)
        for k, snap in frozen_snapshot.items():
            if not np.array_equal(everything[k].data, snap):
                raise AssertionError(f"frozen tensor {k} changed at step {step}")
        log.append(
            {
                "step": step,
                "task_loss": task.item(),
                "balance_loss": bal.item(),
                "total_loss": total.item(),
                "tau": model.smoe.router.tau,
                "lr": lr,
                "load": expert_load(enc.outcome.selected, N).tolist(),
            }
        )
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoints.append(make_checkpoint(step, model, adam, root, run_config))
    return TrainResult(model, log, checkpoints)


def pretrain(model: Model, data: TrainData, config: TrainConfig, resume: Checkpoint | None = None,
             run_config: dict | None = None) -> TrainResult:
    """Masked-LM training on ``task + alpha * balance``; checkpoints every ``checkpoint_every`` steps."""
    return _run(model, data, config, resume, frozen=config.freeze_routing, run_config=run_config)


def finetune_frozen(model: Model, data: TrainData, config: TrainConfig, resume: Checkpoint | None = None,
                    run_config: dict | None = None) -> TrainResult:
    """Train only the backbone; router and expert tensors stay bitwise fixed.

    The balance loss is still added when ``alpha > 0``. With the router
    frozen its gradient reaches the backbone through the token representations.
    """
    try:
        return _run(model, data, config, resume, frozen=True, run_config=run_config)
    finally:
        model.set_smoe_frozen(False)
