"""Directional statistics on the unit hypersphere.

Uniform and von Mises-Fisher sampling, the vMF log-density with an in-house
modified Bessel function, and rank diagnostics for skill sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

UNIT_TOL = 1e-9

# Power series for I_nu below this argument, scaled asymptotic expansion above.
BESSEL_SWITCH = 50.0

FIXED_SET = "fixed-set"
RESAMPLE = "resample-each-batch"
SKILL_MODES = (FIXED_SET, RESAMPLE)


class InvalidDimensionError(ValueError):
    pass


def as_unit_vector(x, tol: float = UNIT_TOL) -> np.ndarray:
    """Validate that ``x`` is a unit vector (or a stack of them) and return it as floats."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise InvalidDimensionError("unit vectors need d >= 1")
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"not unit norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")
    return x


@dataclass(frozen=True)
class VmfParams:
    mean: np.ndarray
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "mean", as_unit_vector(self.mean))
        if self.mean.ndim != 1:
            raise ValueError("mean must be a single vector")
        # kappa = inf is accepted as the point-mass limit
        if not self.kappa >= 0:
            raise ValueError("kappa must be >= 0")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class SkillSet:
    """An ordered skill list. In resample mode ``skills`` is only the current draw."""

    skills: np.ndarray
    mode: str = FIXED_SET

    def __post_init__(self):
        self.skills = as_unit_vector(np.atleast_2d(self.skills))
        if self.skills.shape[0] < 1:
            raise ValueError("skill set must be nonempty")
        if self.mode not in SKILL_MODES:
            raise ValueError(f"unknown skill mode {self.mode!r}")

    @property
    def dim(self) -> int:
        return self.skills.shape[1]

    def __len__(self) -> int:
        return self.skills.shape[0]

    @classmethod
    def uniform(cls, count: int, d: int, rng: np.random.Generator, mode: str = FIXED_SET) -> "SkillSet":
        return cls(sample_uniform_sphere(d, rng, size=count), mode)

    def refresh(self, rng: np.random.Generator) -> None:
        if self.mode == RESAMPLE:
            self.skills = sample_uniform_sphere(self.dim, rng, size=len(self))

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` skills from p(z): uniform sphere or uniform over the fixed list."""
        if self.mode == RESAMPLE:
            return sample_uniform_sphere(self.dim, rng, size=size)
        return self.skills[rng.integers(0, len(self), size=size)]


def sample_uniform_sphere(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Normalized standard Gaussian draws; shape ``(d,)`` or ``(size, d)``."""
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    shape = (d,) if size is None else (size, d)
    x = rng.standard_normal(shape)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    # Exact zeros have probability zero but would poison the stream.
    while np.any(norms == 0):
        bad = (norms == 0)[..., 0]
        x[bad] = rng.standard_normal((int(bad.sum()), d)) if size is not None else rng.standard_normal(d)
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms


def householder_from_e1(mean: np.ndarray) -> np.ndarray:
    """Orthogonal reflection H with H e1 = mean."""
    d = mean.shape[0]
    u = -mean.copy()
    u[0] += 1.0
    nu = np.linalg.norm(u)
    if nu < 1e-15:
        return np.eye(d)
    u /= nu
    return np.eye(d) - 2.0 * np.outer(u, u)


def _sample_vmf_cosines(kappa: float, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Wood's rejection sampler for t = <mean, x> under vMF(kappa) on S^{d-1}, d >= 2."""
    m = d - 1.0
    # Cancellation-free form of (-2k + sqrt(4k^2 + m^2)) / m.
    b = m / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m * m))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * math.log1p(-x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        batch = max(16, int(need * 1.3) + 8)
        z = rng.beta(m / 2.0, m / 2.0, size=batch)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        log_u = np.log(rng.uniform(size=batch))
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = kappa * w + m * np.log1p(-x0 * w) - c >= log_u
        acc = w[ok][:need]
        out[filled:filled + acc.size] = acc
        filled += acc.size
    return np.clip(out, -1.0, 1.0)


def sample_vmf(params: VmfParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from vMF(mean, kappa); tangent-normal construction rotated onto ``mean``."""
    d = params.dim
    n = 1 if size is None else size
    if params.kappa == 0:
        return sample_uniform_sphere(d, rng, size=size)
    if math.isinf(params.kappa):
        return params.mean.copy() if size is None else np.tile(params.mean, (n, 1))
    if d == 1:
        # S^0: P(x = mean) = e^k / (e^k + e^-k)
        p_plus = 1.0 / (1.0 + math.exp(-2.0 * params.kappa))
        signs = np.where(rng.uniform(size=n) < p_plus, 1.0, -1.0)
        x = signs[:, None] * params.mean[None, :]
        return x[0] if size is None else x
    t = _sample_vmf_cosines(params.kappa, d, n, rng)
    v = sample_uniform_sphere(d - 1, rng, size=n)
    x = np.empty((n, d))
    x[:, 0] = t
    x[:, 1:] = np.sqrt(np.maximum(0.0, 1.0 - t * t))[:, None] * v
    x = x @ householder_from_e1(params.mean).T
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x[0] if size is None else x


def sample_vmf_batch(means: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """One vMF draw per row of ``means`` with a shared concentration."""
    means = as_unit_vector(np.atleast_2d(means))
    n, d = means.shape
    if kappa == 0:
        return sample_uniform_sphere(d, rng, size=n)
    if math.isinf(kappa):
        return means.copy()
    if d == 1:
        p_plus = 1.0 / (1.0 + math.exp(-2.0 * kappa))
        return np.where(rng.uniform(size=(n, 1)) < p_plus, 1.0, -1.0) * means
    t = _sample_vmf_cosines(kappa, d, n, rng)
    g = rng.standard_normal((n, d))
    # Tangent direction: Gaussian projected off each mean.
    g -= np.sum(g * means, axis=1, keepdims=True) * means
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    x = t[:, None] * means + np.sqrt(np.maximum(0.0, 1.0 - t * t))[:, None] * g
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def log_bessel_iv(nu: float, x: float) -> float:
    """log I_nu(x) for x > 0, nu > -1."""
    if x <= 0:
        raise ValueError("log_bessel_iv needs x > 0")
    if x < BESSEL_SWITCH:
        # sum_k (x/2)^{2k+nu} / (k! Gamma(k+nu+1)), accumulated in log space
        half = math.log(x / 2.0)
        terms = []
        k = 0
        peak = -math.inf
        while True:
            lt = (2 * k + nu) * half - math.lgamma(k + 1) - math.lgamma(k + nu + 1)
            terms.append(lt)
            peak = max(peak, lt)
            if k > x and lt < peak - 40.0:
                break
            k += 1
        terms = np.array(terms)
        return float(peak + math.log(np.sum(np.exp(terms - peak))))
    # I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k
    mu = 4.0 * nu * nu
    total, term = 1.0, 1.0
    for k in range(1, 30):
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        if abs(nxt) > abs(term):
            break
        term = nxt
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(total)


def log_sphere_area(d: int) -> float:
    """log of the surface measure of S^{d-1}."""
    return math.log(2.0) + (d / 2.0) * math.log(math.pi) - math.lgamma(d / 2.0)


def vmf_log_normalizer(d: int, kappa: float) -> float:
    """log C_d(kappa) = (d/2-1) log k - (d/2) log(2 pi) - log I_{d/2-1}(k)."""
    if kappa == 0:
        return -log_sphere_area(d)
    nu = d / 2.0 - 1.0
    return nu * math.log(kappa) - (d / 2.0) * math.log(2.0 * math.pi) - log_bessel_iv(nu, kappa)


def vmf_log_density(params: VmfParams, x) -> float | np.ndarray:
    if math.isinf(params.kappa):
        raise ValueError("the point-mass limit has no density")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.dim:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {params.dim}")
    return params.kappa * (x @ params.mean) + vmf_log_normalizer(params.dim, params.kappa)


def mean_resultant_length(d: int, kappa: float) -> float:
    """A_d(kappa) = I_{d/2}(k) / I_{d/2-1}(k), the expected cosine with the mean."""
    if kappa == 0:
        return 0.0
    return math.exp(log_bessel_iv(d / 2.0, kappa) - log_bessel_iv(d / 2.0 - 1.0, kappa))


class AffineGeneratorCheck(NamedTuple):
    is_generator: bool
    rank: int
    smallest_nonzero_singular: float
    centered_min_singular: float


def is_affine_generator(skills, rel_tol: float = 1e-8) -> AffineGeneratorCheck:
    """Test whether affine combinations of the skills reach all of R^d.

    Rank of the difference matrix {z_i - z_1} against ``rel_tol`` times its
    largest singular value. The smallest singular value of the centered skill
    matrix is reported as a conditioning diagnostic, not judged.
    """
    z = skills.skills if isinstance(skills, SkillSet) else np.atleast_2d(np.asarray(skills, dtype=float))
    n, d = z.shape
    if n < 1:
        raise ValueError("need at least one skill")
    centered_min = skill_conditioning(z) if n >= 2 else 0.0
    if n < 2:
        return AffineGeneratorCheck(False, 0, 0.0, centered_min)
    sv = np.linalg.svd(z[1:] - z[0], compute_uv=False)
    top = sv[0] if sv.size else 0.0
    if top == 0:
        return AffineGeneratorCheck(False, 0, 0.0, centered_min)
    nonzero = sv[sv > rel_tol * top]
    rank = int(nonzero.size)
    return AffineGeneratorCheck(rank == d, rank, float(nonzero[-1]), centered_min)


def skill_conditioning(skills) -> float:
    """Smallest singular value of the column-centered skill matrix (d-th, zero if fewer rows)."""
    z = skills.skills if isinstance(skills, SkillSet) else np.atleast_2d(np.asarray(skills, dtype=float))
    n, d = z.shape
    if n < 2:
        raise ValueError("conditioning needs at least two skills")
    sv = np.linalg.svd(z - z.mean(axis=0), compute_uv=False)
    if sv.size < d:
        return 0.0
    return float(sv[d - 1])
