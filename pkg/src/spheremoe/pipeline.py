"""Glue between run configs, data, training and metrics, shared by the CLI and tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .analysis import ic_series, model_rc, rf_series
from .config import ConfigError, RunConfig
from .data import Corpus, eval_token_set, gen_synthetic, load_text_corpus, split_indices
from .model import Model
from .training import Checkpoint, TrainData, TrainResult, finetune_frozen, pretrain, validation_loss


@dataclass
class Prepared:
    corpus: Corpus
    data: TrainData
    eval_tokens: np.ndarray  # [S, T] fixed RF / RC token set
    eval_clusters: np.ndarray | None


def load_corpus(run: RunConfig) -> Corpus:
    if run.source.corpus_path:
        corpus, _ = load_text_corpus(run.source.corpus_path, run.source.tokenization, run.data.seq_len,
                                     run.source.max_vocab)
    else:
        corpus = gen_synthetic(run.data)
    if corpus.vocab_size > run.model.vocab_size:
        raise ConfigError(f"corpus vocabulary {corpus.vocab_size} exceeds model vocab_size {run.model.vocab_size}")
    if corpus.tokens.shape[1] > run.model.max_seq_len:
        raise ConfigError(f"sequence length {corpus.tokens.shape[1]} exceeds max_seq_len {run.model.max_seq_len}")
    return corpus


def prepare(run: RunConfig, corpus: Corpus | None = None) -> Prepared:
    corpus = load_corpus(run) if corpus is None else corpus
    tr, va = split_indices(corpus.tokens.shape[0], run.data.val_fraction, run.data.seed)
    if va.size == 0:
        raise ConfigError("validation split is empty; raise data.val_fraction or data.sequences")
    data = TrainData(corpus.tokens[tr], corpus.tokens[va], run.model.vocab_size, run.data.mask_rate)
    ev = eval_token_set(data.val, run.analysis.rf_eval_tokens)
    clusters = None if corpus.clusters is None else corpus.clusters[va][: ev.shape[0]]
    return Prepared(corpus, data, ev, clusters)


def run_pretrain(run: RunConfig, prepared: Prepared, resume: Checkpoint | None = None) -> TrainResult:
    model = Model(run.model, seed=run.train.seed)
    return pretrain(model, prepared.data, run.train, resume=resume, run_config=run.to_dict())


def run_finetune(run: RunConfig, prepared: Prepared, start: Checkpoint, seed: int, frozen: bool = True) -> TrainResult:
    """Fine-tune from ``start`` with the given training seed."""
    model = start.model()
    cfg = dataclasses.replace(run.train, seed=seed)
    fn = finetune_frozen if frozen else pretrain
    return fn(model, prepared.data, cfg, run_config=run.to_dict())


def finetune_ic(run: RunConfig, prepared: Prepared, start: Checkpoint, runs: int, window: int):
    """``runs`` fine-tunes with seeds ``seed .. seed+runs-1``; returns logs and the IC series."""
    logs = [run_finetune(run, prepared, start, run.train.seed + i).log for i in range(runs)]
    return logs, ic_series(logs, window)


def summarize(run: RunConfig, prepared: Prepared, result: TrainResult) -> dict:
    """Final validation loss, final RC and mean RF ratio over the second half of training."""
    rc = model_rc(result.model, prepared.eval_tokens, prepared.eval_clusters, run.analysis.label_semantics)
    rf = rf_series(result.checkpoints, prepared.eval_tokens).mean(run.train.steps // 2) if len(result.checkpoints) > 1 else float("nan")
    return {
        "final_task_loss": validation_loss(result.model, prepared.data, seed=run.data.seed),
        "final_rc": rc.rc,
        "mean_rf": rf,
    }


# ---------------------------------------------------------------------------
# ablation grids

ABLATION_AXES = ("routing_dim", "alpha", "variant", "gating", "components")

DEFAULT_VALUES = {
    "routing_dim": ["N/4", "N/2", "N", "2N", "4N"],
    "alpha": ["0", "1e-3", "1e-2", "1e-1"],
    "variant": ["baseline", "hypersphere"],
    "gating": ["softmax", "sigmoid"],
    "components": [f"{a},{b},{c}" for a in ("on", "off") for b in ("on", "off") for c in ("on", "off")],
}


def _routing_dim(value: str, N: int) -> int:
    v = value.strip().replace(" ", "")
    try:
        if v == "N":
            out = N
        elif v.endswith("N"):
            out = int(v[:-1]) * N
        elif v.startswith("N/"):
            out = N // int(v[2:])
        else:
            out = int(v)
    except ValueError:
        raise ConfigError(f"bad routing dimension {value!r}") from None
    if out < 1:
        raise ConfigError(f"routing dimension {value!r} resolves to {out}")
    return out


def _flag(v: str) -> bool:
    v = v.strip().lower()
    if v in ("on", "1", "true", "yes"):
        return True
    if v in ("off", "0", "false", "no"):
        return False
    raise ConfigError(f"expected on/off, got {v!r}")


def ablation_config(axis: str, value: str, base: RunConfig) -> tuple[RunConfig, bool | None]:
    """Config for one sweep point; the second item is the fine-tune freeze flag for ``components``."""
    run = RunConfig.from_dict(base.to_dict())
    router = run.model.router
    frozen = None
    if axis == "routing_dim":
        router.routing_dim = _routing_dim(value, router.num_experts)
    elif axis == "alpha":
        try:
            run.train.alpha = float(value)
        except ValueError:
            raise ConfigError(f"bad alpha {value!r}") from None
        if run.train.alpha < 0:
            raise ConfigError("alpha must be non-negative")
    elif axis == "variant":
        if value not in ("baseline", "hypersphere"):
            raise ConfigError(f"unknown variant {value!r}")
        router.variant = value
    elif axis == "gating":
        if value not in ("softmax", "sigmoid"):
            raise ConfigError(f"unknown gating {value!r}")
        router.gating = value
    elif axis == "components":
        parts = value.split(",")
        if len(parts) != 3:
            raise ConfigError(f"components value {value!r} must be dim_reduction,l2_norm,frozen")
        router.variant = "hypersphere"
        router.dim_reduction, router.l2_norm, frozen = (_flag(p) for p in parts)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    try:
        run = RunConfig.from_dict(run.to_dict())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return run, frozen


def run_ablation(axis: str, values: list[str], base: RunConfig, finetune_steps: int = 200) -> list[dict]:
    """One train and evaluate cycle per value, all with the base seed; rows in value order."""
    rows = []
    prepared = None
    for value in values:
        run, frozen = ablation_config(axis, value, base)
        if prepared is None:
            prepared = prepare(run)
        result = run_pretrain(run, prepared)
        if frozen is not None:
            ft = RunConfig.from_dict(run.to_dict())
            ft.train.steps = finetune_steps
            ft.train.warmup_steps = min(ft.train.warmup_steps, finetune_steps // 10)
            start = result.checkpoints[-1] if result.checkpoints else None
            if start is None:
                raise ConfigError("components ablation needs checkpoint_every <= steps")
            result = run_finetune(ft, prepared, start, ft.train.seed, frozen=frozen)
            run = ft
        rows.append({"axis": axis, "value": value, **summarize(run, prepared, result)})
    return rows
