"""Synthetic ground-truth world.

Latent states live in the box [-B, B]^d and move by unit-length steps. A
fixed, seeded, injective piecewise-linear generator turns states into
observations.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import sample_uniform_sphere, sample_vmf_batch

log = logging.getLogger(__name__)

REFLECT = "reflect"
CLAMP = "clamp"


class DegenerateSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    d: int = 4
    D: int = 16
    hidden_layers: tuple[int, ...] = (16, 16)
    activation_slope: float = 0.5
    seed: int = 0
    identity: bool = False
    # States are divided by this before the first layer.
    state_scale: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.d < 1 or self.D < self.d:
            raise ValueError(f"need 1 <= d <= D, got d={self.d}, D={self.D}")
        if not 0 < self.activation_slope < 1:
            raise ValueError("activation_slope must lie in (0, 1)")
        widths = [self.d, *self.hidden_layers, self.D]
        # Each linear map must be injective, so widths never shrink.
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"layer widths must be nondecreasing from d to D: {widths}")
        if self.identity and (self.hidden_layers or self.D != self.d):
            raise ValueError("identity generator needs hidden_layers=() and D == d")
        if self.state_scale <= 0:
            raise ValueError("state_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**{**d, "hidden_layers": tuple(d.get("hidden_layers", (16, 16)))})


class Generator:
    """o = g(s): scale, then alternate full-column-rank linear maps and leaky ReLUs.

    The last map is a plain linear lift to R^D. Every stage is injective, so
    :meth:`inverse` is exact on the image.
    """

    def __init__(self, spec: GeneratorSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self._pinvs = [np.linalg.pinv(w) for w in weights]
        for w in weights:
            w.setflags(write=False)
        for b in biases:
            b.setflags(write=False)

    @property
    def lipschitz_bound(self) -> float:
        """Product of layer spectral norms over the input scale (activation slopes are <= 1)."""
        return float(np.prod([np.linalg.norm(w, 2) for w in self.weights]) / self.spec.state_scale)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.spec.d:
            raise ValueError(f"state has dimension {s.shape[-1]}, generator expects {self.spec.d}")
        if self.spec.identity:
            return s.copy()
        h = s / self.spec.state_scale
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.where(h > 0, h, self.spec.activation_slope * h)
        return h

    def inverse(self, o: np.ndarray) -> np.ndarray:
        o = np.asarray(o, dtype=float)
        if self.spec.identity:
            return o.copy()
        h = o
        last = len(self.weights) - 1
        for i in reversed(range(len(self.weights))):
            if i < last:
                h = np.where(h > 0, h, h / self.spec.activation_slope)
            h = (h - self.biases[i]) @ self._pinvs[i].T
        return h * self.spec.state_scale


def make_generator(spec: GeneratorSpec, max_attempts: int = 100, min_ratio: float = 1e-3) -> Generator:
    """Build the seeded generator; badly conditioned weight draws are redrawn."""
    if spec.identity:
        return Generator(spec, [np.eye(spec.d)], [np.zeros(spec.d)])
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0x67656E,)))
    widths = [spec.d, *spec.hidden_layers, spec.D]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths, widths[1:]):
        for _ in range(max_attempts):
            w = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
            sv = np.linalg.svd(w, compute_uv=False)
            if sv[-1] >= min_ratio * sv[0] and sv[-1] >= 1e-6:
                break
        else:
            raise DegenerateSpecError(f"no well-conditioned {fan_out}x{fan_in} layer in {max_attempts} draws")
        weights.append(w)
        # Scaled inputs lie in roughly [-B/scale, B/scale]; offsets spread the kinks across that range.
        biases.append(rng.standard_normal(fan_out))
    return Generator(spec, weights, biases)


@dataclass(frozen=True)
class EnvConfig:
    d: int = 4
    B: float = 50.0
    boundary: str = REFLECT
    kappa_env: float = 10.0
    horizon: int = 20

    def __post_init__(self):
        if self.boundary not in (REFLECT, CLAMP):
            raise ValueError(f"unknown boundary rule {self.boundary!r}")
        if self.B <= 0 or self.horizon < 1 or self.d < 1:
            raise ValueError("need B > 0, horizon >= 1, d >= 1")
        if self.B <= self.horizon / 10:
            log.warning("box half-width %.3g is small for horizon %d; boundary contact will be common",
                        self.B, self.horizon)


def env_step(config: EnvConfig, s: np.ndarray, a: np.ndarray):
    """Move by ``a`` and apply the boundary rule.

    Works on single states or stacks. Returns ``(s_next, boundary_hit)``.
    """
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if s.shape != a.shape or s.shape[-1] != config.d:
        raise ValueError(f"state {s.shape} and action {a.shape} must both end in d={config.d}")
    nxt = s + a
    B = config.B
    out = np.abs(nxt) > B
    hit = np.any(out, axis=-1)
    if np.any(out):
        if config.boundary == REFLECT:
            nxt = np.where(nxt > B, 2 * B - nxt, nxt)
            nxt = np.where(nxt < -B, -2 * B - nxt, nxt)
        nxt = np.clip(nxt, -B, B)
    return nxt, hit


def sample_episode_start(config: EnvConfig, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = (config.d,) if size is None else (size, config.d)
    return rng.uniform(-config.B / 2, config.B / 2, size=shape)


@dataclass(frozen=True)
class TransitionRecord:
    s: np.ndarray
    o: np.ndarray
    z: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    o_next: np.ndarray
    boundary: bool = False


@dataclass
class Transitions:
    """Column store of transition records; row i is one (s, o, z, a, s', o') tuple."""

    s: np.ndarray
    o: np.ndarray
    z: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    o_next: np.ndarray
    boundary: np.ndarray
    episode: np.ndarray = field(default=None)
    t: np.ndarray = field(default=None)
    # Observation at the start of the row's episode (anchor-diff objective).
    o_anchor: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.s.shape[0]
        if self.o_anchor is None:
            self.o_anchor = self.o
        if self.episode is None:
            self.episode = np.zeros(n, dtype=np.int64)
        if self.t is None:
            self.t = np.arange(n, dtype=np.int64)
        for name in ("o", "z", "a", "s_next", "o_next", "boundary", "episode", "t", "o_anchor"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column {name} has the wrong length")

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, idx) -> "Transitions":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return Transitions(**{k: v[idx] for k, v in self._columns().items()})

    def _columns(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in
                ("s", "o", "z", "a", "s_next", "o_next", "boundary", "episode", "t", "o_anchor")}

    def records(self) -> Iterator[TransitionRecord]:
        for i in range(len(self)):
            yield TransitionRecord(self.s[i], self.o[i], self.z[i], self.a[i],
                                   self.s_next[i], self.o_next[i], bool(self.boundary[i]))

    @classmethod
    def concat(cls, parts: list["Transitions"]) -> "Transitions":
        cols = [p._columns() for p in parts]
        return cls(**{k: np.concatenate([c[k] for c in cols]) for k in cols[0]})

    def interior(self) -> "Transitions":
        return self[np.flatnonzero(~self.boundary)]


def generate_assumption1_dataset(n: int, d: int, kappa: float, rng: np.random.Generator, B: float = 50.0):
    """z ~ uniform sphere, s ~ uniform box, s_next = s + vMF(z, kappa). Returns ``(z, s, s_next)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = sample_uniform_sphere(d, rng, size=n)
    s = rng.uniform(-B / 2, B / 2, size=(n, d))
    step = sample_vmf_batch(z, kappa, rng)
    return z, s, s + step


def transitions_from_latents(generator: Generator, z: np.ndarray, s: np.ndarray, s_next: np.ndarray) -> Transitions:
    n = s.shape[0]
    return Transitions(s=s, o=generator(s), z=z, a=s_next - s, s_next=s_next, o_next=generator(s_next),
                       boundary=np.zeros(n, dtype=bool), episode=np.arange(n), t=np.zeros(n, dtype=np.int64))


def _columns_header(d: int, D: int, extra: tuple[str, ...] = ()) -> list[str]:
    cols = list(extra) + ["episode", "t"]
    cols += [f"s[{i}]" for i in range(d)] + [f"o[{i}]" for i in range(D)] + [f"z[{i}]" for i in range(d)]
    cols += [f"s'[{i}]" for i in range(d)] + [f"o'[{i}]" for i in range(D)] + ["boundary_flag"]
    return cols


def _row(tr: Transitions, i: int) -> list:
    return [int(tr.episode[i]), int(tr.t[i]), *map(float, tr.s[i]), *map(float, tr.o[i]), *map(float, tr.z[i]),
            *map(float, tr.s_next[i]), *map(float, tr.o_next[i]), int(bool(tr.boundary[i]))]


def export_transitions(tr: Transitions, path, trajectory_ids: np.ndarray | None = None) -> Path:
    """Write CSV (``.csv``) or line-delimited JSON (anything else)."""
    path = Path(path)
    d, D = tr.s.shape[1], tr.o.shape[1]
    extra = ("trajectory",) if trajectory_ids is not None else ()
    header = _columns_header(d, D, extra)
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(tr)):
                w.writerow(([int(trajectory_ids[i])] if extra else []) + _row(tr, i))
    else:
        with path.open("w") as fh:
            for i in range(len(tr)):
                vals = ([int(trajectory_ids[i])] if extra else []) + _row(tr, i)
                fh.write(json.dumps(dict(zip(header, vals))) + "\n")
    return path


def read_transitions(path) -> Transitions:
    """Load a CSV or JSONL export back into a column store."""
    path = Path(path)
    if path.suffix == ".csv":
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path} holds no transitions")
    keys = list(rows[0])
    d = sum(1 for k in keys if k.startswith("s["))
    D = sum(1 for k in keys if k.startswith("o["))

    def block(prefix, width):
        return np.array([[float(r[f"{prefix}[{i}]"]) for i in range(width)] for r in rows])

    s, s_next = block("s", d), block("s'", d)
    return Transitions(s=s, o=block("o", D), z=block("z", d), a=s_next - s, s_next=s_next,
                       o_next=block("o'", D),
                       boundary=np.array([bool(int(float(r["boundary_flag"]))) for r in rows]),
                       episode=np.array([int(float(r["episode"])) for r in rows]),
                       t=np.array([int(float(r["t"])) for r in rows]))


def spec_dict(spec) -> dict:
    out = asdict(spec)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out
