"""Small numpy MLPs with exact reverse-mode gradients and an Adam optimizer.

Parameters live in one flat float64 vector; :class:`Layout` maps names to
slices of it. Forward passes return a tape holding everything backward needs,
so both directions are pure functions of their arguments.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NEGATIVE_SLOPE = 0.2


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (256, 256)
    negative_slope: float = NEGATIVE_SLOPE
    skip_connections: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all widths must be >= 1: {self}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**{**d, "hidden": tuple(d.get("hidden", (256, 256)))})


@dataclass(frozen=True)
class Layout:
    """Name -> (offset, shape) table for a flat parameter vector."""

    entries: tuple[tuple[str, int, tuple[int, ...]], ...]
    size: int

    @classmethod
    def for_spec(cls, spec: MlpSpec) -> "Layout":
        entries = []
        offset = 0
        w = spec.widths
        for i in range(len(w) - 1):
            for name, shape in ((f"W{i}", (w[i + 1], w[i])), (f"b{i}", (w[i + 1],))):
                entries.append((name, offset, shape))
                offset += int(np.prod(shape))
        if spec.skip_connections:
            shape = (spec.output_dim, spec.input_dim)
            entries.append(("W_skip", offset, shape))
            offset += int(np.prod(shape))
        return cls(tuple(entries), offset)

    def unpack(self, values: np.ndarray) -> dict[str, np.ndarray]:
        """Views (not copies) into ``values`` keyed by parameter name."""
        if values.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {values.shape}, layout expects ({self.size},)")
        return {name: values[off:off + int(np.prod(shape))].reshape(shape) for name, off, shape in self.entries}


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    layout = Layout.for_spec(spec)
    values = np.zeros(layout.size)
    p = layout.unpack(values)
    for name, _, shape in layout.entries:
        if name.startswith("W"):
            p[name][...] = rng.standard_normal(shape) / np.sqrt(shape[1])
    return values


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Evaluate the MLP on one input ``(input_dim,)`` or a batch ``(n, input_dim)``.

    Returns ``(y, tape)``; the output layer is linear.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (..., {spec.input_dim})")
    p = Layout.for_spec(spec).unpack(params)
    n_layers = len(spec.hidden) + 1
    acts = [xb]
    pres = []
    h = xb
    for i in range(n_layers):
        z = h @ p[f"W{i}"].T + p[f"b{i}"]
        pres.append(z)
        h = leaky_relu(z, spec.negative_slope) if i < n_layers - 1 else z
        if i < n_layers - 1:
            acts.append(h)
    y = h
    if spec.skip_connections:
        y = y + xb @ p["W_skip"].T
    tape = {"acts": acts, "pres": pres, "single": single}
    return (y[0] if single else y), tape


def backward(spec: MlpSpec, params: np.ndarray, tape: dict, upstream: np.ndarray):
    """Gradient of sum <upstream, y> with respect to the parameters and the input.

    Returns ``(grad_params, grad_input)`` with ``grad_params`` laid out like ``params``.
    """
    layout = Layout.for_spec(spec)
    p = layout.unpack(params)
    acts, pres = tape["acts"], tape["pres"]
    u = np.asarray(upstream, dtype=float)
    u = u[None, :] if tape["single"] else u
    if u.shape != pres[-1].shape:
        raise ValueError(f"upstream shape {np.shape(upstream)} does not match output {pres[-1].shape}")
    grads = np.zeros(layout.size)
    g = layout.unpack(grads)
    n_layers = len(pres)
    delta = u
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            delta = delta * np.where(pres[i] > 0, 1.0, spec.negative_slope)
        g[f"W{i}"][...] = delta.T @ acts[i]
        g[f"b{i}"][...] = delta.sum(axis=0)
        delta = delta @ p[f"W{i}"]
    grad_x = delta
    if spec.skip_connections:
        g["W_skip"][...] = u.T @ acts[0]
        grad_x = grad_x + u @ p["W_skip"]
    return grads, (grad_x[0] if tape["single"] else grad_x)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    rejected: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> "OptimState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), **kw)


def optimizer_step(state: OptimState, params: np.ndarray, grads: np.ndarray):
    """Bias-corrected Adam update. Non-finite gradients skip the step and bump ``rejected``.

    Returns ``(new_params, state)``; ``state`` is updated in place.
    """
    if grads.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if not np.all(np.isfinite(grads)):
        state.rejected += 1
        log.warning("non-finite gradient, step rejected (%d so far)", state.rejected)
        return params, state
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def save_checkpoint(path, spec: MlpSpec, params: np.ndarray, seed: int, step: int) -> tuple[Path, Path]:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    layout = Layout.for_spec(spec)
    header = {
        "spec": asdict(spec),
        "layout": [{"name": n, "offset": o, "shape": list(s)} for n, o, s in layout.entries],
        "size": layout.size,
        "seed": int(seed),
        "step": int(step),
        "dtype": "<f8",
        "data": path.with_suffix(".bin").name,
    }
    bin_path = path.with_suffix(".bin")
    json_path = path.with_suffix(".json")
    bin_path.write_bytes(np.asarray(params, dtype="<f8").tobytes())
    json_path.write_text(json.dumps(header, indent=2))
    return json_path, bin_path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(spec, params, header)``."""
    json_path = Path(path).with_suffix(".json")
    header = json.loads(json_path.read_text())
    spec = MlpSpec.from_dict(header["spec"])
    params = np.frombuffer((json_path.parent / header["data"]).read_bytes(), dtype="<f8").astype(float)
    if params.size != Layout.for_spec(spec).size:
        raise ValueError("checkpoint data does not match its layout")
    return spec, params, header
