"""Run configuration files: INI sections mapped onto the config dataclasses.

Sections ``[model]``, ``[router]``, ``[train]``, ``[data]`` and ``[analysis]``.
Every field has a default, so an empty file is valid. Unknown sections or
keys are errors, reported with the offending line number.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field

from .data import SyntheticCorpusSpec
from .model import ModelConfig
from .routing import RouterConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class AnalysisConfig:
    label_semantics: str = "assigned_expert"
    rf_eval_tokens: int = 4096
    ic_window: int = 100
    pinv_tol: float = 1e-10
    jacobian_d: int = 6
    jacobian_experts: int = 3
    jacobian_trials: int = 20
    jacobian_tol: float = 1e-5
    jacobian_margin: float = 1e-6
    span_tokens: int = 500
    span_tol: float = 1e-10


@dataclass
class CorpusSource:
    """Where training text comes from: the synthetic generator or a file."""

    corpus_path: str | None = None
    tokenization: str = "byte"
    max_vocab: int = 4096


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    source: CorpusSource = field(default_factory=CorpusSource)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return cls(
            model=ModelConfig(**d["model"]),
            train=TrainConfig(**d["train"]),
            data=SyntheticCorpusSpec(**d["data"]),
            source=CorpusSource(**d.get("source", {})),
            analysis=AnalysisConfig(**d.get("analysis", {})),
        )


# ---------------------------------------------------------------------------
# presets


def desk_preset() -> dict:
    """Laptop defaults: every field at its dataclass default."""
    return RunConfig().to_dict()


def small_preset() -> dict:
    """Single-core scale used by the acceptance suite (about 0.04 s per step)."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        vocab_size=128, hidden=32, layers=2, heads=4, d_ff=128, max_seq_len=32, smoe_position=1,
        router=RouterConfig(num_experts=8),
    )
    cfg.data = SyntheticCorpusSpec(vocab_size=128, num_clusters=8, tokens_per_cluster=12, sequences=1024, seq_len=32)
    cfg.train = TrainConfig(steps=600, batch_size=16, lr_max=1e-3, warmup_steps=60, checkpoint_every=50)
    return cfg.to_dict()


def full_preset() -> dict:
    """Full-scale hyperparameters for reference; far beyond a desk machine."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        vocab_size=250002, hidden=768, layers=12, heads=12, d_ff=3072, max_seq_len=512, smoe_position=6,
        router=RouterConfig(num_experts=32, routing_dim=16),
    )
    cfg.train = TrainConfig(steps=125000, batch_size=2048, lr_max=5e-4, warmup_steps=10000, weight_decay=0.01)
    cfg.data = SyntheticCorpusSpec(vocab_size=250002, seq_len=512, sequences=65536)
    return cfg.to_dict()


PRESETS = {"desk": desk_preset, "small": small_preset, "full": full_preset}


# ---------------------------------------------------------------------------
# parsing

# file section -> (key in RunConfig dict, nested key or None)
SECTIONS = {
    "model": ("model", None),
    "router": ("model", "router"),
    "train": ("train", None),
    "data": ("data", None),
    "source": ("source", None),
    "analysis": ("analysis", None),
}

_CLASSES = {
    "model": ModelConfig,
    "router": RouterConfig,
    "train": TrainConfig,
    "data": SyntheticCorpusSpec,
    "source": CorpusSource,
    "analysis": AnalysisConfig,
}


def _field_types(section: str) -> dict[str, object]:
    cls = _CLASSES[section]
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if not (section == "model" and f.name == "router")}


def _convert(raw: str, tp, where: str):
    raw = raw.strip()
    args = typing.get_args(tp)
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        if raw.lower() in ("none", "null", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw.strip("\"'")
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return n
        elif key is not None and current == section and s.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return n
    return 0


def set_value(cfg: dict, section: str, key: str, raw: str, where: str = "override") -> None:
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    types_ = _field_types(section)
    if key not in types_:
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    top, nested = SECTIONS[section]
    target = cfg[top] if nested is None else cfg[top][nested]
    target[key] = _convert(raw, types_[key], where)


def parse_config_text(text: str, base: dict | None = None, source: str = "<config>") -> dict:
    cfg = copy.deepcopy(base if base is not None else desk_preset())
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = _line_of(text, section, key)
            set_value(cfg, section, key, raw, where=f"{source}:{line}")
    return cfg


def build_run_config(cfg: dict) -> RunConfig:
    try:
        run = RunConfig.from_dict(cfg)
        run.data.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    if run.analysis.label_semantics not in ("assigned_expert", "latent_cluster"):
        raise ConfigError("analysis.label_semantics must be assigned_expert or latent_cluster")
    if run.source.tokenization not in ("byte", "whitespace"):
        raise ConfigError("source.tokenization must be byte or whitespace")
    return run


def load_run_config(path: str | None = None, preset: str = "desk", overrides: list[str] | None = None,
                    env: dict | None = None) -> RunConfig:
    """Preset, then file, then ``XMOE_SEED`` from ``env``, then ``section.key=value`` overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if path is not None:
        try:
            text = open(path, encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_text(text, cfg, source=str(path))
    if env and env.get("XMOE_SEED") not in (None, ""):
        set_value(cfg, "train", "seed", env["XMOE_SEED"], where="XMOE_SEED")
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        set_value(cfg, section, key.strip().lower(), raw, where=f"--set {item}")
    return build_run_config(cfg)
