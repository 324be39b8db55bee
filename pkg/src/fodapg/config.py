"""Pipeline configuration: dataclasses, JSON round-trip, dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

DEFAULT_ORGANS = ("lungs", "heart", "pleura", "mediastinum", "spine", "diaphragm")

DEFAULT_DISEASES = (
    "effusion", "consolidation", "pneumothorax", "edema", "cardiomegaly",
    "atelectasis", "pneumonia", "fracture", "emphysema", "fibrosis",
    "nodule", "opacity", "scoliosis", "hernia", "infiltrate",
    "thickening", "congestion", "calcification",
)

DEFAULT_CUES = ("no", "normal", "without", "clear", "free")


@dataclass
class CorpusConfig:
    n_studies: int = 500
    organs: tuple = DEFAULT_ORGANS
    diseases: tuple = DEFAULT_DISEASES
    zipf_exponent: float = 1.1
    mean_findings: float = 2.0
    negation_prob: float = 0.3
    k_regions: int = 16
    d_v: int = 32
    noise: float = 0.1
    train_fraction: float = 0.8
    min_freq: int = 1

    def validate(self):
        if self.n_studies < 1:
            raise ConfigError("corpus.n_studies must be >= 1")
        if not self.organs or not self.diseases:
            raise ConfigError("corpus lexicon needs at least one organ and one disease")
        if len(set(self.organs) | set(self.diseases)) != len(self.organs) + len(self.diseases):
            raise ConfigError("corpus lexicon has duplicate terms")
        if not 0.0 <= self.negation_prob <= 1.0:
            raise ConfigError("corpus.negation_prob must be in [0, 1]")
        if self.zipf_exponent < 0:
            raise ConfigError("corpus.zipf_exponent must be >= 0")
        if self.mean_findings <= 0:
            raise ConfigError("corpus.mean_findings must be > 0")
        if self.k_regions < 1 or self.d_v < 1:
            raise ConfigError("corpus.k_regions and corpus.d_v must be >= 1")
        if self.noise < 0:
            raise ConfigError("corpus.noise must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("corpus.train_fraction must be in (0, 1)")
        if self.min_freq < 1:
            raise ConfigError("corpus.min_freq must be >= 1")


@dataclass
class OntologyConfig:
    alpha: int = 2              # keep candidates with freq >= alpha
    beta: int = 1_000_000       # ... and freq <= beta
    gamma: float = 0.8          # merge threshold on context similarity
    delta: float = 0.05         # edge threshold on conditional co-occurrence
    cues: tuple = DEFAULT_CUES

    def validate(self):
        if self.alpha < 1 or self.beta < self.alpha:
            raise ConfigError("ontology needs 1 <= alpha <= beta")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("ontology.gamma must be in [0, 1]")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("ontology.delta must be in [0, 1]")
        if not self.cues:
            raise ConfigError("ontology.cues must not be empty")


@dataclass
class ModelConfig:
    node_dim: int = 32          # graph node feature width
    d_l: int = 32               # node representation width after the GCN
    gcn_layers: int = 2
    activation: str = "relu"
    measure: str = "dot"        # dot | neg_euclidean | cosine
    heads: int = 1              # >1 switches fusion to the multi-head path
    d_e: int = 32               # token embedding width
    d_h: int = 64               # encoder/decoder state width

    def validate(self):
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"model.activation must be relu or tanh, got {self.activation!r}")
        if self.measure not in ("dot", "neg_euclidean", "cosine"):
            raise ConfigError(f"unknown attention measure {self.measure!r}")
        if min(self.node_dim, self.d_l, self.d_e, self.d_h) < 1 or self.gcn_layers < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.heads < 1:
            raise ConfigError("model.heads must be >= 1")
        if self.d_l % self.heads != 0:
            raise ConfigError("model.d_l must be divisible by model.heads")
        if self.d_h % 2 != 0:
            raise ConfigError("model.d_h must be even (bidirectional halves)")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_encoder: float = 1e-3    # graph + fusion + encoder group
    lr_decoder: float = 1e-2    # everything else, 10x larger
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_len: int = 128
    val_cap: int = 50
    val_fraction: float = 0.2

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ConfigError("adam betas must be in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("train.eps must be > 0 and weight_decay >= 0")
        if self.max_len < 1:
            raise ConfigError("train.max_len must be >= 1")
        if self.val_cap < 1 or not 0.0 < self.val_fraction <= 1.0:
            raise ConfigError("train.val_cap >= 1 and val_fraction in (0, 1] required")


@dataclass
class DecodeConfig:
    mode: str = "greedy"        # greedy | beam
    beam_width: int = 4
    max_len: int = 128
    length_norm: bool = False

    def validate(self):
        if self.mode not in ("greedy", "beam"):
            raise ConfigError(f"decode.mode must be greedy or beam, got {self.mode!r}")
        if self.beam_width < 1 or self.max_len < 1:
            raise ConfigError("decode.beam_width and decode.max_len must be >= 1")


@dataclass
class RlConfig:
    enabled: bool = False
    steps: int = 50
    samples: int = 5            # Monte Carlo rollouts per study
    reward: str = "bleu4"       # bleu4 | cider
    lr: float = 1e-4
    max_len: int = 64
    baseline: bool = False      # subtract the mean sample reward

    def validate(self):
        if self.steps < 0 or self.samples < 1:
            raise ConfigError("rl.steps must be >= 0 and rl.samples >= 1")
        if self.reward not in ("bleu4", "cider"):
            raise ConfigError(f"rl.reward must be bleu4 or cider, got {self.reward!r}")
        if self.lr <= 0 or self.max_len < 1:
            raise ConfigError("rl.lr must be > 0 and rl.max_len >= 1")


@dataclass
class PipelineConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    ontology: OntologyConfig = field(default_factory=OntologyConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    rl: RlConfig = field(default_factory=RlConfig)

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        for section in (self.corpus, self.ontology, self.model,
                        self.train, self.decode, self.rl):
            section.validate()
        return self


_SECTIONS = {
    "corpus": CorpusConfig, "ontology": OntologyConfig, "model": ModelConfig,
    "train": TrainConfig, "decode": DecodeConfig, "rl": RlConfig,
}


def to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build_section(cls, data: dict, prefix: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {prefix} section: {exc}") from exc


def from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = PipelineConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    if isinstance(current, tuple):
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError:
            parsed = [p for p in raw.split(",") if p]
        if not isinstance(parsed, list):
            raise ConfigError(f"expected a list, got {raw!r}")
        return tuple(parsed)
    return raw


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    """Apply dotted-path overrides like {"train.epochs": "50"} onto a config."""
    for path, raw in overrides.items():
        parts = path.split(".")
        if parts[0] == "seed" and len(parts) == 1:
            cfg.seed = _coerce(raw, cfg.seed)
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown override {path!r}")
        section = getattr(cfg, parts[0])
        if not hasattr(section, parts[1]):
            raise ConfigError(f"unknown override {path!r}")
        setattr(section, parts[1], _coerce(raw, getattr(section, parts[1])))
    cfg.validate()
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
