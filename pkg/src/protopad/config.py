"""Run configuration: one JSON document drives every CLI command.

The document is fully validated before any compute starts. Exactly one data
source must be given: an inline synthetic spec, a single feature table split
by users, or three explicit per-split feature tables.

Example:

    {
      "data": {"synthetic": {"countries": ["ESP", "CHL"], "dimension": 16,
                              "seed": 5}},
      "split": {"train_user_fraction": 0.5, "val_user_fraction": 0.25,
                "test_user_fraction": 0.25, "seed": 5},
      "episode": {"support_countries": ["ESP", "CHL"], "seed": 6},
      "embedding": {"hidden_dims": [32], "output_dim": 16, "seed": 7},
      "training": {"seed": 8},
      "output_dir": "runs/baseline"
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .data import Dataset, SplitSpec, load_feature_table, split_by_users
from .episodes import EpisodeSpec, ExtensionSpec, SyntheticSpec, generate_synthetic
from .errors import ConfigError, DataError
from .mlp import Activation, EmbeddingConfig
from .protonet import DistanceMetric
from .trainer import TrainConfig

_TOP_KEYS = {
    "data", "split", "episode", "extension", "embedding", "training",
    "metric", "normalize", "pais_by_screen_source", "per_country_prototypes",
    "output_dir",
}


def _require_mapping(doc: Any, name: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"'{name}' must be a JSON object, got {type(doc).__name__}")
    return doc


def _check_keys(doc: Mapping[str, Any], allowed: set[str], name: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")


def _build(cls, doc: Mapping[str, Any], name: str):
    """Construct a frozen spec dataclass from a JSON object, fail-fast."""
    allowed = {f.name for f in fields(cls)}
    _check_keys(doc, allowed, name)
    kwargs = dict(doc)
    for key in ("hidden_dims", "countries", "support_countries", "class_set",
                "class_axis_flips"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except (DataError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


@dataclass(frozen=True)
class EmbeddingSpec:
    """Embedding config minus input_dim, which is inferred from the data."""

    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 64
    activation: str = "relu"
    seed: int = 0

    def with_input_dim(self, input_dim: int) -> EmbeddingConfig:
        return EmbeddingConfig(
            input_dim=input_dim,
            hidden_dims=self.hidden_dims,
            output_dim=self.output_dim,
            activation=Activation(self.activation),
            seed=self.seed,
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs, parsed and validated."""

    synthetic: SyntheticSpec | None
    feature_table: Path | None
    feature_tables: dict[str, Path] | None
    split: SplitSpec | None
    episode: EpisodeSpec
    extension: ExtensionSpec | None
    embedding: EmbeddingSpec
    training: TrainConfig
    metric: DistanceMetric
    normalize: bool
    pais_by_screen_source: bool
    per_country_prototypes: bool
    output_dir: Path
    base_dir: Path = field(default_factory=Path)

    def data_description(self) -> str:
        if self.synthetic is not None:
            return f"synthetic({','.join(self.synthetic.countries)})"
        if self.feature_table is not None:
            return str(self.feature_table)
        assert self.feature_tables is not None
        return ", ".join(f"{k}={v}" for k, v in sorted(self.feature_tables.items()))


def parse_config(doc: Mapping[str, Any], base_dir: Path | str = ".") -> RunConfig:
    """Validate a config document and build the typed RunConfig."""
    base_dir = Path(base_dir)
    doc = _require_mapping(doc, "config")
    _check_keys(doc, _TOP_KEYS, "config")
    for key in ("data", "episode", "output_dir"):
        if key not in doc:
            raise ConfigError(f"config is missing required section '{key}'")

    data = _require_mapping(doc["data"], "data")
    _check_keys(data, {"synthetic", "feature_table", "feature_tables"}, "data")
    if len(data) != 1:
        raise ConfigError("'data' must name exactly one source: synthetic, "
                          "feature_table, or feature_tables")

    synthetic = None
    feature_table = None
    feature_tables = None
    if "synthetic" in data:
        synthetic = _build(SyntheticSpec, _require_mapping(data["synthetic"], "synthetic"),
                           "data.synthetic")
    elif "feature_table" in data:
        feature_table = base_dir / str(data["feature_table"])
    else:
        tables = _require_mapping(data["feature_tables"], "feature_tables")
        _check_keys(tables, {"train", "val", "test"}, "data.feature_tables")
        if set(tables) != {"train", "val", "test"}:
            raise ConfigError("'data.feature_tables' needs exactly train, val and test paths")
        feature_tables = {k: base_dir / str(v) for k, v in tables.items()}

    split = None
    if "split" in doc:
        split = _build(SplitSpec, _require_mapping(doc["split"], "split"), "split")
    if feature_tables is None and split is None:
        raise ConfigError("a 'split' section is required unless explicit "
                          "per-split feature tables are given")

    episode = _build(EpisodeSpec, _require_mapping(doc["episode"], "episode"), "episode")
    extension = None
    if "extension" in doc:
        extension = _build(ExtensionSpec, _require_mapping(doc["extension"], "extension"),
                           "extension")
    embedding = _build(EmbeddingSpec, _require_mapping(doc.get("embedding", {}), "embedding"),
                       "embedding")
    try:
        Activation(embedding.activation)
    except ValueError:
        raise ConfigError(f"unknown activation {embedding.activation!r}") from None
    training = _build(TrainConfig, _require_mapping(doc.get("training", {}), "training"),
                      "training")
    if training.learning_rate <= 0.0:
        raise ConfigError(f"training.learning_rate must be > 0, got {training.learning_rate}")

    try:
        metric = DistanceMetric(doc.get("metric", "squared_euclidean"))
    except ValueError:
        raise ConfigError(f"unknown metric {doc.get('metric')!r}") from None

    for flag in ("normalize", "pais_by_screen_source", "per_country_prototypes"):
        if flag in doc and not isinstance(doc[flag], bool):
            raise ConfigError(f"'{flag}' must be a boolean")

    return RunConfig(
        synthetic=synthetic,
        feature_table=feature_table,
        feature_tables=feature_tables,
        split=split,
        episode=episode,
        extension=extension,
        embedding=embedding,
        training=training,
        metric=metric,
        normalize=bool(doc.get("normalize", True)),
        pais_by_screen_source=bool(doc.get("pais_by_screen_source", False)),
        per_country_prototypes=bool(doc.get("per_country_prototypes", False)),
        output_dir=base_dir / str(doc["output_dir"]),
        base_dir=base_dir,
    )


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, base_dir=path.parent)


def override_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Rebase every component seed on one master seed (CLI --seed)."""
    out = replace(
        cfg,
        split=replace(cfg.split, seed=seed) if cfg.split is not None else None,
        episode=replace(cfg.episode, seed=seed + 1),
        embedding=replace(cfg.embedding, seed=seed + 2),
        training=replace(cfg.training, seed=seed + 3),
    )
    if cfg.synthetic is not None:
        out = replace(out, synthetic=replace(cfg.synthetic, seed=seed + 4))
    return out


def resolve_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Materialize the train/val/test datasets named by the config."""
    if cfg.synthetic is not None:
        ds = generate_synthetic(cfg.synthetic)
        assert cfg.split is not None
        return split_by_users(ds, cfg.split)
    if cfg.feature_table is not None:
        ds = load_feature_table(cfg.feature_table)
        assert cfg.split is not None
        return split_by_users(ds, cfg.split)
    assert cfg.feature_tables is not None
    return (
        load_feature_table(cfg.feature_tables["train"]),
        load_feature_table(cfg.feature_tables["val"]),
        load_feature_table(cfg.feature_tables["test"]),
    )
