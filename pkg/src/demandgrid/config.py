"""Run configuration: one INI-style key-value file covering every stage.

Example::

    [run]
    seed = 0
    out_dir = run

    [catalog]
    n_articles = 500
    elasticity_range = 0.1, 0.6

    [train]
    near_epochs = 7

Values are Python literals (numbers, tuples, booleans, ``None``) or bare
strings. Unknown sections and keys are rejected before any stage runs.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datagen import CatalogSpec
from .datagen import ConfigError as CatalogConfigError
from .features import ConfigError as SchemaConfigError
from .features import CovariateSchema
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1
    out_dir: str = "run"


@dataclass
class ImputeSection:
    alpha: float = 0.5
    min_mass: float = 0.2


@dataclass
class SchemaSection:
    market_mode: str = "stacked"
    e_dim: int = 8
    t_dim: int = 52
    window: int = 52


@dataclass
class ModelSection:
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 32
    near_horizon: int = 5
    far_horizon: int = 20
    prediction_horizon: int = 26
    tau_hidden: int = 8
    head_hidden: int = 32
    emb_dim: int = 10
    dropout: float = 0.1


@dataclass
class TrainSection:
    near_epochs: int = 7
    far_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"
    lr_floor: float = 0.05
    market_weights: tuple | None = None
    samples_per_epoch: int | None = None
    recent_origins: int | None = None
    min_history: int = 1
    imputed_weight: float = 1.0
    clip_norm: float | None = None
    # last week whose actuals training may use; None means n_weeks - 1 - horizon
    cutoff: int | None = None


@dataclass
class PredictSection:
    origin: int | None = None
    horizon: int = 26
    discounts: tuple | None = None


@dataclass
class EvaluateSection:
    start_dates: tuple | None = None
    horizon: int = 26


@dataclass
class ScalingSection:
    fractions: tuple = (0.1, 0.3, 1.0)
    start_dates: tuple | None = None
    seeds: tuple = (0, 1, 2)
    test_share: float = 0.2
    eval_weeks: int = 5


@dataclass
class StalenessSection:
    train_week: int | None = None
    offsets: int = 9
    seeds: tuple = (0, 1, 2)
    # finetune: each week continues from last week's model; scratch: full retrain
    retrain: str = "finetune"
    finetune_epochs: int = 1
    finetune_learning_rate: float = 5e-4
    finetune_samples: int | None = None
    finetune_recent_origins: int | None = 26


# seeds are derived from [run] seed, sizes of embeddings/rows from the catalog
_CATALOG_KEYS = [f.name for f in fields(CatalogSpec) if f.name != "seed"]

SECTIONS = {
    "run": RunSection,
    "catalog": CatalogSpec,
    "impute": ImputeSection,
    "schema": SchemaSection,
    "model": ModelSection,
    "train": TrainSection,
    "predict": PredictSection,
    "evaluate": EvaluateSection,
    "scaling": ScalingSection,
    "staleness": StalenessSection,
}


def _allowed(section: str) -> list[str]:
    if section == "catalog":
        return _CATALOG_KEYS
    return [f.name for f in fields(SECTIONS[section])]


def _parse(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw.strip()


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        return tuple(value) if isinstance(value, (tuple, list)) else (value,)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _default(cls, name):
    f = next(f for f in fields(cls) if f.name == name)
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()  # type: ignore[misc]


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    catalog: CatalogSpec = field(default_factory=CatalogSpec)
    impute: ImputeSection = field(default_factory=ImputeSection)
    schema: SchemaSection = field(default_factory=SchemaSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    predict: PredictSection = field(default_factory=PredictSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    scaling: ScalingSection = field(default_factory=ScalingSection)
    staleness: StalenessSection = field(default_factory=StalenessSection)
    source: str | None = None  # path the config was read from

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str  # keys are case sensitive
        try:
            cp.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from exc
        values = {}
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section}]; known: {', '.join(SECTIONS)}")
            allowed = _allowed(section)
            kw = {}
            for key, raw in cp.items(section):
                if key not in allowed:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                kw[key] = _coerce(section, key, _parse(raw), _default(SECTIONS[section], key))
            values[section] = SECTIONS[section](**kw)
        cfg = cls(**values)
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = cls.from_text(text, str(path))
        cfg.source = str(path)
        return cfg

    def override(self, seed: int | None = None, workers: int | None = None, out_dir: str | None = None) -> "RunConfig":
        if seed is not None:
            self.run.seed = seed
        if workers is not None:
            self.run.workers = workers
        if out_dir is not None:
            self.run.out_dir = out_dir
        return self.validate()

    # ---------------------------------------------------------- derived

    def catalog_spec(self) -> CatalogSpec:
        return dataclasses.replace(self.catalog, seed=self.run.seed)

    def covariate_schema(self) -> CovariateSchema:
        c = self.catalog
        return CovariateSchema(
            n_markets=c.n_markets,
            brand_vocab=c.n_brands,
            group_vocab=c.n_commodity_groups,
            **dataclasses.asdict(self.schema),
        )

    def model_config(self) -> ModelConfig:
        kw = dataclasses.asdict(self.model)
        return ModelConfig.for_schema(self.covariate_schema(), seed=self.run.seed, **kw)

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in dataclasses.asdict(self.train).items() if k != "cutoff"}
        return TrainConfig(seed=self.run.seed, **kw).validate()

    def finetune_config(self) -> TrainConfig:
        st = self.staleness
        return dataclasses.replace(
            self.train_config(),
            near_epochs=st.finetune_epochs,
            far_epochs=st.finetune_epochs,
            learning_rate=st.finetune_learning_rate,
            samples_per_epoch=st.finetune_samples,
            recent_origins=st.finetune_recent_origins,
        ).validate()

    def train_cutoff(self) -> int:
        if self.train.cutoff is not None:
            return self.train.cutoff
        return self.catalog.n_weeks - 1 - self.evaluate.horizon

    def validate(self) -> "RunConfig":
        try:
            self.catalog_spec().validate()
            self.covariate_schema()
            self.model_config()
            self.train_config()
            self.finetune_config()
        except (CatalogConfigError, SchemaConfigError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        if self.run.workers < 1:
            raise ConfigError("[run] workers must be >= 1")
        W = self.catalog.n_weeks
        if not 0 < self.train_cutoff() < W:
            raise ConfigError(f"[train] cutoff {self.train_cutoff()} outside the catalog's {W} weeks")
        if any(not 0 < f <= 1 for f in self.scaling.fractions):
            raise ConfigError(f"[scaling] fractions must lie in (0, 1], got {self.scaling.fractions}")
        if self.staleness.offsets < 1:
            raise ConfigError("[staleness] offsets must be >= 1")
        if self.staleness.retrain not in ("finetune", "scratch"):
            raise ConfigError(f"[staleness] retrain must be 'finetune' or 'scratch', got {self.staleness.retrain!r}")
        return self

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
