"""Run configuration: one file with a section per component, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from crossground.embeddings import EmbeddingConfig, make_provider
from crossground.groundnet.model import ModelConfig
from crossground.groundnet.pipeline import Providers
from crossground.groundnet.proposals import ProposalConfig
from crossground.groundnet.training import TrainConfig
from crossground.synth import ShiftConfig, SynthConfig
from crossground.viewretrieval import RetrievalConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 only treats "1.0e-4" as a float; accept "1e-4" too
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)\.?[0-9_]*[eE][-+]?[0-9]+$|^[-+]?(?:[0-9][0-9_]*)?\.[0-9_]+(?:[eE][-+]?[0-9]+)?$|^[-+]?[0-9][0-9_]*\.[0-9_]*$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$""", re.X),
    list("-+0123456789."),
)


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "retrieval": RetrievalConfig,
    "proposals": ProposalConfig,
    "embedding": EmbeddingConfig,
    "synth": SynthConfig,
    "shift": ShiftConfig,
}
# fields owned elsewhere: the run seed drives training, synth classes are fixed
EXCLUDED = {"train": {"seed"}, "synth": {"classes"}}


def _fields(cls, section):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in EXCLUDED.get(section, ())}


def _coerce(value, current):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)

    def __post_init__(self):
        if self.model.c != self.embedding.dim:
            raise ConfigError(f"model.c={self.model.c} must equal embedding.dim={self.embedding.dim}")
        if self.embedding.provider == "toy" and (
            self.synth.embedding_dim != self.embedding.dim or self.synth.embedding_seed != self.embedding.seed
        ):
            raise ConfigError("synth.embedding_dim/embedding_seed must match the toy embedding provider")
        object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        if "seed" in data:
            if not isinstance(data["seed"], int):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = data["seed"]
        for section, klass in SECTIONS.items():
            values = data.get(section) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            allowed = _fields(klass, section)
            bad = set(values) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in section {section!r}: {sorted(bad)}")
            defaults = klass()
            coerced = {k: _coerce(v, getattr(defaults, k)) for k, v in values.items()}
            try:
                kwargs[section] = klass(**coerced)
            except (TypeError, ValueError, RuntimeError) as exc:
                raise ConfigError(f"section {section!r}: {exc}") from exc
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for section in SECTIONS:
            obj = getattr(self, section)
            out[section] = {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(obj).items()
                if k in _fields(type(obj), section)
            }
        return json.loads(json.dumps(out))

    def providers(self) -> Providers:
        return Providers(make_provider(self.embedding))


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML)."""
    data = json.loads(json.dumps(data or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        value = yaml.load(raw, Loader=_Loader)
        parts = path.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} does not address a section")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = yaml.load(path.read_text(encoding="utf-8"), Loader=_Loader) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(apply_overrides(data, overrides))
