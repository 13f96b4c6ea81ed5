"""Run configuration: one flat record covering every module setting.

Defaults follow the WN18RR optimal configuration (d=480, lr=5e-5, B=512,
N=256, margin 6, temperature 1, variant "R.S.T h - t"); ``PRESETS`` holds
the other datasets. The canonical form is sorted-key JSON, and its hash is
embedded in every artifact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .ensemble import WDS_SCHEMES, FusionMethod, WdsConfig
from .search import SearchConfig
from .training import LossConfig, TrainConfig
from .variant import parse_variant


class ConfigError(ValueError):
    """Unknown keys or invalid values in a run configuration."""


@dataclass
class RunConfig:
    dataset: str = ""
    output_dir: str = "runs"
    seed: int = 0
    # model
    variant: str = "R.S.T h - t"
    dim: int = 480
    norm_order: int = 2
    # loss / training
    margin: float = 6.0
    temperature: float = 1.0
    num_negatives: int = 256
    corruption: str = "both"
    learning_rate: float = 5e-5
    batch_size: int = 512
    max_steps: int = 20000
    eval_every: int = 2000
    valid_max_queries: int = 0
    normalize_entities: bool = False
    log_every: int = 100
    # evaluation
    checkpoint: str = ""
    split: str = "test"
    # search; full-scale runs use search_iterations=30000
    beam_width: int = 3
    search_iterations: int = 2000
    max_ops: int = 4
    gamma: float = 1e-9
    max_stages: int = 10
    workers: int = 1
    warm_start: bool = False
    # ensemble
    manifest: str = ""
    wds_schemes: str = "uniform,geometric,learnable"
    geometric_ratio: float = 0.5
    wds_steps: int = 200
    wds_per_relation: bool = False
    fusion_methods: str = ",".join(m.value for m in FusionMethod)
    k_rrf: float = 60.0
    phi: float = 0.98
    # runtime
    threads: int = 0  # 0 leaves BLAS thread pools alone

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            parse_variant(self.variant)
            self.loss_config()
            self.train_config()
            self.search_config()
            for scheme in self.scheme_list():
                WdsConfig(scheme=scheme, ratio=self.geometric_ratio)
            self.method_list()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.dim <= 0 or self.dim % 3:
            raise ConfigError(f"dim must be a positive multiple of 3, got {self.dim}")
        if self.norm_order not in (1, 2):
            raise ConfigError("norm_order must be 1 or 2")
        if self.split not in ("train", "valid", "test"):
            raise ConfigError("split must be train, valid or test")
        if self.k_rrf <= 0 or not 0 < self.phi < 1:
            raise ConfigError("k_rrf must be positive and phi in (0, 1)")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")

    # -- module configs -------------------------------------------------------

    def loss_config(self) -> LossConfig:
        return LossConfig(self.margin, self.temperature, self.num_negatives, self.corruption)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, max_steps=self.max_steps, eval_every=self.eval_every,
            seed=self.seed, learning_rate=self.learning_rate, normalize_entities=self.normalize_entities,
            valid_max_queries=self.valid_max_queries, log_every=self.log_every,
        )

    def search_config(self) -> SearchConfig:
        return SearchConfig(self.beam_width, self.search_iterations, self.max_ops, self.gamma,
                            self.max_stages, self.seed, self.workers, self.warm_start)

    def scheme_list(self) -> list[str]:
        names = [s.strip() for s in self.wds_schemes.split(",") if s.strip()]
        for name in names:
            if name not in WDS_SCHEMES:
                raise ValueError(f"unknown WDS scheme {name!r}")
        return names

    def method_list(self) -> list[FusionMethod]:
        return [FusionMethod(m.strip()) for m in self.fusion_methods.split(",") if m.strip()]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, value in data.items():
            default = known[key].default
            values[key] = _coerce(key, value, type(default))
        return cls(**values)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.canonical() + "\n", encoding="utf-8")
        return path


def _coerce(key: str, value, kind: type):
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be a boolean")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


# Optimal per-dataset settings; criterion runs scale dim/steps down from these.
PRESETS: dict[str, dict] = {
    "wn18rr": {"variant": "R.S.T h - t", "dim": 480, "learning_rate": 5e-5, "batch_size": 512,
               "num_negatives": 256, "margin": 6.0, "temperature": 1.0},
    "db100k": {"variant": "S h - T.R.S t", "dim": 600, "learning_rate": 5e-5, "batch_size": 1024,
               "num_negatives": 512, "margin": 9.0, "temperature": 1.0},
    "ogbl-wikikg2": {"variant": "T h - H t", "dim": 300, "learning_rate": 1e-3, "batch_size": 8192,
                     "num_negatives": 125, "margin": 8.0, "temperature": 1.0},
    "yago3-10": {"variant": "T.S.R h - t", "dim": 600, "learning_rate": 5e-4, "batch_size": 1024,
                 "num_negatives": 1024, "margin": 13.3, "temperature": 1.1},
}
