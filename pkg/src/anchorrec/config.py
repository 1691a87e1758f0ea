"""Run configuration: one dataclass per TOML section, ``--set`` overrides,
and a stable hash of the resolved values."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .ingest import ConfigError, SyntheticSpec

ALIGNMENT_MODES = ("anchor", "direct_similarity", "direct_contrastive", "none")
PROPAGATION_MODES = ("neighbors", "self_scaled")


@dataclass
class DataConfig:
    source: str = "files"  # "files" or "synthetic"
    interactions: str = ""
    features: dict = field(default_factory=dict)  # modality -> .f32 path
    split_ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    synth_seed: int = 0
    k_sim: int = 10
    sim_normalization: str = "row"
    sim_modality: str = "mm"


@dataclass
class ModelConfig:
    d: int = 64
    d_proj: int = 64
    layers: int = 2
    alpha: float = 0.5
    lambda_recon: float = 0.1
    alignment_mode: str = "anchor"
    propagation: str = "neighbors"
    mlp_hidden: int = 0  # 0 -> width d
    hidden_activation: str = "tanh"


@dataclass
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda_m: dict = field(default_factory=lambda: {"mm": 1.0, "t": 1.0, "v": 1.0})
    tau: float = 0.2
    reg: float = 1e-4


@dataclass
class TrainConfig:
    epochs_max: int = 1000
    batch_size: int = 2048
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    eval_every: int = 5
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    early_stopping: bool = True


@dataclass
class EvalConfig:
    cutoffs: list = field(default_factory=lambda: [10, 20, 50])
    select_metric: str = "recall@20"
    overlap_k: int = 10
    neighbor_k: int = 3


@dataclass
class OutputConfig:
    dir: str = "runs"


SECTIONS = {
    "data": DataConfig,
    "synth": SyntheticSpec,
    "model": ModelConfig,
    "losses": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        m, lo, tr = self.model, self.losses, self.train
        if m.alignment_mode not in ALIGNMENT_MODES:
            raise ConfigError(f"model.alignment_mode must be one of {ALIGNMENT_MODES}, got {m.alignment_mode!r}")
        if m.propagation not in PROPAGATION_MODES:
            raise ConfigError(f"model.propagation must be one of {PROPAGATION_MODES}")
        if not 0.0 <= m.alpha <= 1.0:
            raise ConfigError(f"model.alpha must lie in [0, 1], got {m.alpha}")
        if m.d < 1 or m.d_proj < 1 or m.layers < 0:
            raise ConfigError("model.d, model.d_proj must be >= 1 and model.layers >= 0")
        if lo.tau <= 0:
            raise ConfigError(f"losses.tau must be > 0, got {lo.tau}")
        if min(lo.lambda1, lo.lambda2, lo.reg, m.lambda_recon) < 0:
            raise ConfigError("loss weights must be non-negative")
        if tr.batch_size < 1 or tr.patience < 1 or tr.eval_every < 1:
            raise ConfigError("train.batch_size, train.patience, train.eval_every must be >= 1")
        if not (0 < tr.beta1 < 1 and 0 < tr.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if tr.learning_rate < 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if not tr.seeds:
            raise ConfigError("train.seeds must list at least one seed")
        if self.data.source not in ("files", "synthetic"):
            raise ConfigError(f"data.source must be 'files' or 'synthetic', got {self.data.source!r}")
        if self.data.sim_normalization not in ("row", "symmetric"):
            raise ConfigError("data.sim_normalization must be 'row' or 'symmetric'")
        if any(int(n) < 1 for n in self.eval.cutoffs):
            raise ConfigError("eval.cutoffs must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def short_hash(self) -> str:
        return self.hash()[:12]

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**values)


def from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        values = raw.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _build(cls, dict(values), name)
    return RunConfig(**parts).validate()


def parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        path = key.strip().split(".")
        if len(path) < 2:
            raise ConfigError(f"override key {key!r} needs a section, e.g. losses.lambda1")
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[path[-1]] = parse_value(value.strip())
    return raw


def _resolve_paths(raw: dict, base: Path) -> dict:
    data = raw.get("data")
    if not data:
        return raw

    def fix(p):
        p = Path(p)
        return str(p if p.is_absolute() else (base / p).resolve())

    if data.get("interactions"):
        data["interactions"] = fix(data["interactions"])
    if data.get("features"):
        data["features"] = {m: fix(p) for m, p in data["features"].items()}
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent.resolve()
    raw = apply_overrides(raw, overrides)
    return from_dict(_resolve_paths(raw, base))


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy ``cfg`` with per-section field updates, e.g. ``model={"d": 8}``."""
    raw = cfg.to_dict()
    for name, updates in sections.items():
        raw[name].update(updates)
    return from_dict(raw)
