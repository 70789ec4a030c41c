"""Run configuration: a JSON-mirrored tree of dataclasses plus the seed scheme."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dgp import EnvConfig, GeneratorSpec
from .geometry import FIXED_SET, RESAMPLE, SKILL_MODES
from .neural import NEGATIVE_SLOPE, MlpSpec
from .objective import TrainConfig
from .policy import PolicyKind


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    hidden: tuple[int, ...] = (256, 256)
    negative_slope: float = NEGATIVE_SLOPE
    skip_connections: bool = True
    # None: match the ground-truth state dimension.
    output_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class SkillsConfig:
    count: int = 64
    mode: str = RESAMPLE

    def __post_init__(self):
        if self.mode not in SKILL_MODES:
            raise ConfigError(f"unknown skill mode {self.mode!r}")
        if self.count < 1:
            raise ConfigError("skill count must be >= 1")


@dataclass(frozen=True)
class CollectionConfig:
    episodes_per_round: int = 500
    every: int = 1000
    pool_size: int = 100_000


@dataclass(frozen=True)
class EvalConfig:
    probe_size: int = 4000
    heldout_episodes: int = 1000
    diversity_skills: int = 16
    diversity_episodes: int = 32
    oracle_skills: int = 64
    eval_horizon: int = 40
    coverage_grid: int = 100


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyKind = field(default_factory=PolicyKind)
    skills: SkillsConfig = field(default_factory=SkillsConfig)
    collection: CollectionConfig = field(default_factory=CollectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gamma: float = 1.0
    seed: int = 0
    # None: derive the generator seed from the master seed.
    generator_seed: int | None = None

    def __post_init__(self):
        if self.generator.d != self.env.d:
            raise ConfigError(f"generator input dim {self.generator.d} != environment dim {self.env.d}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim or self.env.d

    def encoder_spec(self) -> MlpSpec:
        return MlpSpec(self.generator.D, self.latent_dim, self.encoder.hidden, self.encoder.negative_slope,
                       self.encoder.skip_connections)

    def generator_spec(self) -> GeneratorSpec:
        seed = self.generator_seed if self.generator_seed is not None else sub_seed(self.seed, "generator")
        return dataclasses.replace(self.generator, seed=seed)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def replace(self, **changes) -> "RunConfig":
        """``replace(**{"train.steps": 0})`` style nested update."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *head, last = path.split(".")
            for k in head:
                node = node[k]
            if last not in node:
                raise ConfigError(f"unknown config field {path!r}")
            node[last] = value
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kinds = {"env": EnvConfig, "generator": GeneratorSpec, "encoder": EncoderConfig, "train": TrainConfig,
                 "policy": PolicyKind, "skills": SkillsConfig, "collection": CollectionConfig, "eval": EvalConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in kinds:
                sub_known = {f.name for f in dataclasses.fields(kinds[k])}
                bad = set(v) - sub_known
                if bad:
                    raise ConfigError(f"unknown fields in {k}: {sorted(bad)}")
                kw[k] = kinds[k](**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
            else:
                kw[k] = v
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def sub_seed(master: int, name: str, index: int = 0) -> int:
    """64-bit seed for substream (name, index) of ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(name.encode()), int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


class Seeds:
    """Hands out named random streams and remembers every seed it derived."""

    def __init__(self, master: int):
        self.master = int(master)
        self.derived: dict[str, int] = {}

    def seed(self, name: str, index: int = 0) -> int:
        s = sub_seed(self.master, name, index)
        self.derived[f"{name}/{index}"] = s
        return s

    def rng(self, name: str, index: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed(name, index))


__all__ = ["RunConfig", "EncoderConfig", "SkillsConfig", "CollectionConfig", "EvalConfig", "ConfigError",
           "Seeds", "sub_seed", "flatten", "FIXED_SET", "RESAMPLE"]
