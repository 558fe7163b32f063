"""
Configuration module for the recommendation pipeline.
Process settings come from the environment; pipeline settings come from a flat
KEY=VALUE file with section prefixes, overridable from the command line.
"""
import hashlib
import json
import multiprocessing
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from src.exceptions.base import ConfigError, ConfigPathError

# Load .env from current working directory
load_dotenv()

TASKS = ("seq_rec", "sid2title", "title2sid", "asym1", "asym2", "tsalign_s2t", "tsalign_t2s")
STRATEGIES = ("semantic", "gaussian")


class Config:
    """Process-level configuration."""

    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_JSON: bool = os.getenv("LOG_JSON", "false").lower() == "true"

    # Remote extractor credentials are read from the env var named here
    EXTRACTOR_API_KEY_ENV: str = os.getenv("EXTRACTOR_API_KEY_ENV", "EXTRACTOR_API_KEY")
    EXTRACTOR_CACHE_DIR: Optional[str] = os.getenv("EXTRACTOR_CACHE_DIR")

    TORCH_THREADS: int = int(os.getenv("TORCH_THREADS", "1"))
    MAX_WORKERS: int = int(os.getenv("MAX_WORKERS", "0"))

    @staticmethod
    def get_optimal_workers() -> dict:
        """Calculate worker counts from the available CPU cores."""
        cpu_count = multiprocessing.cpu_count()

        # Leave one core for the system
        project_cores = max(1, cpu_count - 1)
        workers = Config.MAX_WORKERS or project_cores

        return {
            "cpu_count": cpu_count,
            "project_cores": project_cores,
            "workers": workers,
        }


def _as_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {value!r}", key=key)


def _as_int(key: str, value: str) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}", key=key) from None


def _as_float(key: str, value: str) -> float:
    try:
        return float(value.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {value!r}", key=key) from None


def _as_int_list(key: str, value: str) -> List[int]:
    return [_as_int(key, part) for part in value.split(",") if part.strip()]


def _as_str_list(value: str) -> List[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


@dataclass
class PathsConfig:
    catalog: str = "data/catalog.jsonl"
    interactions: str = "data/interactions.jsonl"
    embeddings: str = "data/embeddings.txt"
    embedding_table: str = "data/word_vectors.txt"
    workdir: str = "work"


@dataclass
class QuantizerConfig:
    levels: int = 3
    codes_per_level: List[int] = field(default_factory=lambda: [256, 256, 256])
    max_iters: int = 100
    rel_tol: float = 1e-6
    seed: int = 7
    normalize: bool = False
    pca: bool = False
    pca_dim: int = 32
    workers: int = 1
    chunk_size: int = 4096

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("QUANTIZER_LEVELS must be at least 1", key="QUANTIZER_LEVELS")
        if self.levels > 26:
            raise ConfigError("QUANTIZER_LEVELS must be at most 26", key="QUANTIZER_LEVELS")
        if len(self.codes_per_level) != self.levels:
            raise ConfigError(
                f"QUANTIZER_CODES_PER_LEVEL has {len(self.codes_per_level)} entries, expected {self.levels}",
                key="QUANTIZER_CODES_PER_LEVEL")
        if any(k < 1 for k in self.codes_per_level):
            raise ConfigError("every QUANTIZER_CODES_PER_LEVEL entry must be >= 1", key="QUANTIZER_CODES_PER_LEVEL")
        if self.rel_tol < 0:
            raise ConfigError("QUANTIZER_REL_TOL must be >= 0", key="QUANTIZER_REL_TOL")
        if self.max_iters < 1:
            raise ConfigError("QUANTIZER_MAX_ITERS must be >= 1", key="QUANTIZER_MAX_ITERS")
        if self.pca and self.pca_dim < 1:
            raise ConfigError("QUANTIZER_PCA_DIM must be >= 1", key="QUANTIZER_PCA_DIM")
        if self.workers < 1 or self.chunk_size < 1:
            raise ConfigError("QUANTIZER_WORKERS and QUANTIZER_CHUNK_SIZE must be >= 1", key="QUANTIZER_WORKERS")


@dataclass
class ExtractorConfig:
    backend: str = "local"
    endpoint: str = ""
    model: str = "deepseek-chat"
    api_key_env: str = Config.EXTRACTOR_API_KEY_ENV
    sample_cap: int = 32
    seed: int = 7
    max_retries: int = 3
    backoff: float = 1.0
    timeout: float = 60.0
    cache_dir: str = ""
    max_in_flight: int = 4
    rate_per_second: int = 5
    fallback_local: bool = True
    top_terms: int = 15
    category: str = "general merchandise"

    def validate(self) -> None:
        if self.backend not in ("local", "remote"):
            raise ConfigError("EXTRACTOR_BACKEND must be 'local' or 'remote'", key="EXTRACTOR_BACKEND")
        if self.sample_cap < 1:
            raise ConfigError("EXTRACTOR_SAMPLE_CAP must be >= 1", key="EXTRACTOR_SAMPLE_CAP")
        if self.max_retries < 0:
            raise ConfigError("EXTRACTOR_MAX_RETRIES must be >= 0", key="EXTRACTOR_MAX_RETRIES")
        if self.backend == "remote" and not self.endpoint:
            raise ConfigError("EXTRACTOR_ENDPOINT is required for the remote backend", key="EXTRACTOR_ENDPOINT")
        if self.max_in_flight < 1 or self.rate_per_second < 1:
            raise ConfigError("EXTRACTOR_MAX_IN_FLIGHT and EXTRACTOR_RATE_PER_SECOND must be >= 1",
                              key="EXTRACTOR_MAX_IN_FLIGHT")
        if self.top_terms < 1:
            raise ConfigError("EXTRACTOR_TOP_TERMS must be >= 1", key="EXTRACTOR_TOP_TERMS")

    def identity(self) -> dict:
        """Fields that change extraction output (cache location and throughput excluded)."""
        keep = ("backend", "endpoint", "model", "sample_cap", "seed", "top_terms", "category")
        return {name: getattr(self, name) for name in keep}


@dataclass
class InitPlan:
    strategies: List[str] = field(default_factory=lambda: ["semantic", "semantic", "semantic"])
    seed: int = 7
    full_covariance: bool = False

    def validate(self, levels: int) -> None:
        if len(self.strategies) != levels:
            raise ConfigError(f"INIT_PLAN has {len(self.strategies)} entries, expected {levels}", key="INIT_PLAN")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"INIT_PLAN has unknown strategies {unknown}", key="INIT_PLAN")

    @classmethod
    def depth(cls, semantic_levels: int, levels: int, seed: int, full_covariance: bool = False) -> "InitPlan":
        """Plan with SA-Init on the first ``semantic_levels`` levels and Gaussian below."""
        strategies = ["semantic"] * semantic_levels + ["gaussian"] * (levels - semantic_levels)
        return cls(strategies=strategies, seed=seed, full_covariance=full_covariance)


def default_weights() -> Dict[str, float]:
    return {task: (1.0 if task == "seq_rec" else 0.25) for task in TASKS}


@dataclass
class CorpusConfig:
    max_hist: int = 20
    sliding: bool = True
    tsalign: bool = True
    weights: Dict[str, float] = field(default_factory=default_weights)
    seed: int = 7

    def validate(self) -> None:
        if self.max_hist < 1:
            raise ConfigError("CORPUS_MAX_HIST must be >= 1", key="CORPUS_MAX_HIST")
        unknown = sorted(set(self.weights) - set(TASKS))
        if unknown:
            raise ConfigError(f"CORPUS_WEIGHTS has unknown tasks {unknown}", key="CORPUS_WEIGHTS")
        if any(w <= 0 for w in self.weights.values()):
            raise ConfigError("CORPUS_WEIGHTS must be positive", key="CORPUS_WEIGHTS")


@dataclass
class ModelConfig:
    dim: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: float = 4.0
    max_seq: int = 256
    vocab_size: int = 0
    tie_embeddings: bool = True
    dropout: float = 0.0
    seed: int = 7

    def validate(self) -> None:
        if self.dim < 1 or self.layers < 1 or self.heads < 1:
            raise ConfigError("MODEL_DIM, MODEL_LAYERS and MODEL_HEADS must be >= 1", key="MODEL_DIM")
        if self.dim % self.heads:
            raise ConfigError("MODEL_DIM must be divisible by MODEL_HEADS", key="MODEL_HEADS")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("MODEL_DROPOUT must be in [0, 1)", key="MODEL_DROPOUT")
        if self.max_seq < 2:
            raise ConfigError("MODEL_MAX_SEQ must be >= 2", key="MODEL_MAX_SEQ")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 32
    steps: int = 2000
    grad_clip: float = 1.0
    eval_interval: int = 50
    patience: int = 3
    eval_examples: int = 256
    eval_users: int = 100
    hr_beam: int = 20
    threads: int = 1
    seed: int = 7

    def validate(self) -> None:
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ConfigError("TRAIN_OPTIMIZER must be adam, adamw or sgd", key="TRAIN_OPTIMIZER")
        if self.lr <= 0:
            raise ConfigError("TRAIN_LR must be > 0", key="TRAIN_LR")
        if self.batch_size < 1 or self.steps < 1 or self.eval_interval < 1:
            raise ConfigError("TRAIN_BATCH_SIZE, TRAIN_STEPS and TRAIN_EVAL_INTERVAL must be >= 1",
                              key="TRAIN_STEPS")
        if self.patience < 1:
            raise ConfigError("TRAIN_PATIENCE must be >= 1", key="TRAIN_PATIENCE")


@dataclass
class EvalConfig:
    beam_width: int = 20
    probe_width: int = 5
    probes: bool = True
    max_users: int = 0
    probe_items: int = 0
    max_title_tokens: int = 48
    per_user_csv: bool = True

    def validate(self) -> None:
        if self.beam_width < 1 or self.probe_width < 1:
            raise ConfigError("EVAL_BEAM_WIDTH and EVAL_PROBE_WIDTH must be >= 1", key="EVAL_BEAM_WIDTH")


@dataclass
class SynthConfig:
    items: int = 200
    users: int = 500
    categories: int = 8
    dim: int = 32
    min_seq: int = 8
    max_seq: int = 20
    noise: float = 0.35
    focus: float = 0.85
    out_dir: str = "data"

    def validate(self) -> None:
        if self.items < self.categories or self.categories < 1:
            raise ConfigError("SYNTH_ITEMS must be >= SYNTH_CATEGORIES >= 1", key="SYNTH_ITEMS")
        if self.min_seq < 5 or self.max_seq < self.min_seq:
            raise ConfigError("SYNTH_MIN_SEQ must be >= 5 and <= SYNTH_MAX_SEQ", key="SYNTH_MIN_SEQ")


@dataclass
class AblateConfig:
    seeds: List[int] = field(default_factory=list)


# Config file key -> (section, field, parser)
_KEYS = {
    "PATHS_CATALOG": ("paths", "catalog", str),
    "PATHS_INTERACTIONS": ("paths", "interactions", str),
    "PATHS_EMBEDDINGS": ("paths", "embeddings", str),
    "PATHS_EMBEDDING_TABLE": ("paths", "embedding_table", str),
    "PATHS_WORKDIR": ("paths", "workdir", str),
    "CATALOG_MIN_COUNT": (None, "min_count", _as_int),
    "QUANTIZER_LEVELS": ("quantizer", "levels", _as_int),
    "QUANTIZER_CODES_PER_LEVEL": ("quantizer", "codes_per_level", _as_int_list),
    "QUANTIZER_MAX_ITERS": ("quantizer", "max_iters", _as_int),
    "QUANTIZER_REL_TOL": ("quantizer", "rel_tol", _as_float),
    "QUANTIZER_NORMALIZE": ("quantizer", "normalize", _as_bool),
    "QUANTIZER_PCA": ("quantizer", "pca", _as_bool),
    "QUANTIZER_PCA_DIM": ("quantizer", "pca_dim", _as_int),
    "QUANTIZER_WORKERS": ("quantizer", "workers", _as_int),
    "QUANTIZER_CHUNK_SIZE": ("quantizer", "chunk_size", _as_int),
    "EXTRACTOR_BACKEND": ("extractor", "backend", str),
    "EXTRACTOR_ENDPOINT": ("extractor", "endpoint", str),
    "EXTRACTOR_MODEL": ("extractor", "model", str),
    "EXTRACTOR_API_KEY_ENV": ("extractor", "api_key_env", str),
    "EXTRACTOR_SAMPLE_CAP": ("extractor", "sample_cap", _as_int),
    "EXTRACTOR_MAX_RETRIES": ("extractor", "max_retries", _as_int),
    "EXTRACTOR_BACKOFF": ("extractor", "backoff", _as_float),
    "EXTRACTOR_TIMEOUT": ("extractor", "timeout", _as_float),
    "EXTRACTOR_CACHE_DIR": ("extractor", "cache_dir", str),
    "EXTRACTOR_MAX_IN_FLIGHT": ("extractor", "max_in_flight", _as_int),
    "EXTRACTOR_RATE_PER_SECOND": ("extractor", "rate_per_second", _as_int),
    "EXTRACTOR_FALLBACK_LOCAL": ("extractor", "fallback_local", _as_bool),
    "EXTRACTOR_TOP_TERMS": ("extractor", "top_terms", _as_int),
    "EXTRACTOR_CATEGORY": ("extractor", "category", str),
    "INIT_PLAN": ("init", "strategies", lambda k, v: _as_str_list(v)),
    "INIT_FULL_COVARIANCE": ("init", "full_covariance", _as_bool),
    "CORPUS_MAX_HIST": ("corpus", "max_hist", _as_int),
    "CORPUS_SLIDING": ("corpus", "sliding", _as_bool),
    "CORPUS_TSALIGN": ("corpus", "tsalign", _as_bool),
    "MODEL_DIM": ("model", "dim", _as_int),
    "MODEL_LAYERS": ("model", "layers", _as_int),
    "MODEL_HEADS": ("model", "heads", _as_int),
    "MODEL_FFN_MULT": ("model", "ffn_mult", _as_float),
    "MODEL_MAX_SEQ": ("model", "max_seq", _as_int),
    "MODEL_TIE_EMBEDDINGS": ("model", "tie_embeddings", _as_bool),
    "MODEL_DROPOUT": ("model", "dropout", _as_float),
    "TRAIN_OPTIMIZER": ("train", "optimizer", str),
    "TRAIN_LR": ("train", "lr", _as_float),
    "TRAIN_WEIGHT_DECAY": ("train", "weight_decay", _as_float),
    "TRAIN_BATCH_SIZE": ("train", "batch_size", _as_int),
    "TRAIN_STEPS": ("train", "steps", _as_int),
    "TRAIN_GRAD_CLIP": ("train", "grad_clip", _as_float),
    "TRAIN_EVAL_INTERVAL": ("train", "eval_interval", _as_int),
    "TRAIN_PATIENCE": ("train", "patience", _as_int),
    "TRAIN_EVAL_EXAMPLES": ("train", "eval_examples", _as_int),
    "TRAIN_EVAL_USERS": ("train", "eval_users", _as_int),
    "TRAIN_HR_BEAM": ("train", "hr_beam", _as_int),
    "TRAIN_THREADS": ("train", "threads", _as_int),
    "EVAL_BEAM_WIDTH": ("eval", "beam_width", _as_int),
    "EVAL_PROBE_WIDTH": ("eval", "probe_width", _as_int),
    "EVAL_PROBES": ("eval", "probes", _as_bool),
    "EVAL_MAX_USERS": ("eval", "max_users", _as_int),
    "EVAL_PROBE_ITEMS": ("eval", "probe_items", _as_int),
    "EVAL_MAX_TITLE_TOKENS": ("eval", "max_title_tokens", _as_int),
    "EVAL_PER_USER_CSV": ("eval", "per_user_csv", _as_bool),
    "ABLATE_SEEDS": ("ablate", "seeds", _as_int_list),
    "SYNTH_ITEMS": ("synth", "items", _as_int),
    "SYNTH_USERS": ("synth", "users", _as_int),
    "SYNTH_CATEGORIES": ("synth", "categories", _as_int),
    "SYNTH_DIM": ("synth", "dim", _as_int),
    "SYNTH_MIN_SEQ": ("synth", "min_seq", _as_int),
    "SYNTH_MAX_SEQ": ("synth", "max_seq", _as_int),
    "SYNTH_NOISE": ("synth", "noise", _as_float),
    "SYNTH_FOCUS": ("synth", "focus", _as_float),
    "SYNTH_OUT_DIR": ("synth", "out_dir", str),
}

# Sections each stage reads directly; upstream stages are chained through their hashes
STAGE_SECTIONS = {
    "quantize": ("paths.inputs", "min_count", "quantizer", "seed"),
    "mint": ("seed",),
    "extract": ("extractor",),
    "init": ("init", "paths.embedding_table"),
    "corpus": ("corpus",),
    "train": ("model", "train"),
    "eval": ("eval",),
    "probe": ("eval",),
}
STAGE_UPSTREAM = {
    "quantize": (),
    "mint": ("quantize",),
    "extract": ("mint",),
    "init": ("mint", "extract"),
    "corpus": ("mint", "extract"),
    "train": ("corpus", "init"),
    "eval": ("train",),
    "probe": ("train",),
}


@dataclass
class PipelineConfig:
    """Typed view over the flat pipeline config file."""

    seed: int = 7
    min_count: int = 5
    paths: PathsConfig = field(default_factory=PathsConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    init: InitPlan = field(default_factory=InitPlan)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    source: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Optional[str]]) -> "PipelineConfig":
        """Build a config from flat KEY=VALUE pairs; unknown keys are rejected."""
        cfg = cls()
        clean = {k.strip().upper(): (v or "") for k, v in values.items()}
        if "SEED" in clean:
            cfg.seed = _as_int("SEED", clean["SEED"])

        # Seeded components follow the global seed
        for section in (cfg.quantizer, cfg.extractor, cfg.init, cfg.corpus, cfg.model, cfg.train):
            section.seed = cfg.seed

        for key, raw in clean.items():
            if key == "SEED":
                continue
            if key == "CORPUS_WEIGHTS":
                cfg.corpus.weights = _parse_weights(raw)
                continue
            if key not in _KEYS:
                raise ConfigError(f"Unknown config key {key}", key=key)
            section, name, parser = _KEYS[key]
            value = parser(raw) if parser is str else parser(key, raw)
            target = cfg if section is None else getattr(cfg, section)
            setattr(target, name, value)

        if not cfg.ablate.seeds:
            cfg.ablate.seeds = [cfg.seed]
        cfg.source = dict(sorted(clean.items()))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[List[str]] = None) -> "PipelineConfig":
        """Read the config file (if any) and apply KEY=VALUE overrides on top."""
        values: Dict[str, Optional[str]] = {}
        if path:
            if not os.path.exists(path):
                raise ConfigPathError(f"Config file not found: {path}", path=path)
            values.update(dotenv_values(path))
        for override in overrides or []:
            if "=" not in override:
                raise ConfigError(f"Override must look like KEY=VALUE, got {override!r}")
            key, value = override.split("=", 1)
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    def with_overrides(self, **values: str) -> "PipelineConfig":
        """Copy of this config with extra flat keys applied."""
        merged = dict(self.source)
        merged.update({k.upper(): str(v) for k, v in values.items()})
        return PipelineConfig.from_mapping(merged)

    def validate(self) -> None:
        """Validate configuration settings."""
        if self.min_count < 1:
            raise ConfigError("CATALOG_MIN_COUNT must be >= 1", key="CATALOG_MIN_COUNT")
        self.quantizer.validate()
        self.extractor.validate()
        self.init.validate(self.quantizer.levels)
        self.corpus.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.synth.validate()

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def _section_value(self, name: str):
        if name == "seed":
            return self.seed
        if name == "min_count":
            return self.min_count
        if name == "paths.inputs":
            return {k: getattr(self.paths, k) for k in ("catalog", "interactions", "embeddings")}
        if name == "paths.embedding_table":
            return self.paths.embedding_table
        if name == "extractor":
            return self.extractor.identity()
        return asdict(getattr(self, name))

    def stage_hash(self, stage: str) -> str:
        """Hash of everything that determines a stage's artifacts, upstream included."""
        payload = {
            "stage": stage,
            "sections": {name: self._section_value(name) for name in STAGE_SECTIONS[stage]},
            "upstream": {up: self.stage_hash(up) for up in STAGE_UPSTREAM[stage]},
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        """Short correlation id for log lines."""
        blob = json.dumps(self.source, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:8]


def _parse_weights(raw: str) -> Dict[str, float]:
    weights = default_weights()
    for part in _as_str_list(raw):
        if ":" not in part:
            raise ConfigError(f"CORPUS_WEIGHTS entries must look like task:weight, got {part!r}",
                              key="CORPUS_WEIGHTS")
        task, value = part.split(":", 1)
        weights[task.strip()] = _as_float("CORPUS_WEIGHTS", value)
    return weights


def config_keys() -> List[str]:
    """All recognised config keys, for help output."""
    return ["SEED", "CORPUS_WEIGHTS"] + sorted(_KEYS)


__all__ = [
    "Config", "PipelineConfig", "PathsConfig", "QuantizerConfig", "ExtractorConfig", "InitPlan",
    "CorpusConfig", "ModelConfig", "TrainConfig", "EvalConfig", "SynthConfig", "AblateConfig",
    "TASKS", "STRATEGIES", "STAGE_SECTIONS", "STAGE_UPSTREAM", "config_keys",
]
