"""Metrics: linear identifiability fits, state coverage, oracle return, feature geometry."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .dgp import Transitions
from .geometry import is_affine_generator, skill_conditioning  # noqa: F401  (re-exported)
from .neural import MlpSpec
from .objective import encode
from .policy import PolicyKind, World, rollout_batch

log = logging.getLogger(__name__)

RIDGE = 1e-8


@dataclass
class LinearFitResult:
    A: np.ndarray
    intercept: np.ndarray
    r2_per_dim: np.ndarray
    r2_aggregate: float
    n_train: int
    n_test: int
    ridge: bool = False

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.A.T + self.intercept


def fit_linear_map(features, targets, split_seed: int = 0, train_frac: float = 0.8) -> LinearFitResult:
    """Least squares ``targets ~ A @ features + c`` on a random split; R^2 on the held-out part.

    The aggregate R^2 pools residual and total sums of squares over target
    dimensions, i.e. weights each dimension by its variance.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    Y = np.asarray(targets, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    n, f = X.shape
    if Y.shape[0] != n:
        raise ValueError(f"{n} feature rows but {Y.shape[0]} target rows")
    if n < 10 * (f + 1):
        raise ValueError(f"need at least {10 * (f + 1)} samples for {f} features, got {n}")
    perm = np.random.default_rng(split_seed).permutation(n)
    n_train = int(round(train_frac * n))
    tr, te = perm[:n_train], perm[n_train:]
    design = np.hstack([X[tr], np.ones((n_train, 1))])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    ridge = bool(diag.min() <= 1e-10 * max(diag.max(), 1e-300))
    if ridge:
        log.warning("rank-deficient design (%d features); using ridge lambda=%g", f, RIDGE)
        gram = design.T @ design + RIDGE * np.eye(f + 1)
        beta = np.linalg.solve(gram, design.T @ Y[tr])
    else:
        beta = solve_triangular(r, q.T @ Y[tr])
    A, c = beta[:f].T, beta[f]
    resid = Y[te] - (X[te] @ A.T + c)
    ss_res = np.sum(resid ** 2, axis=0)
    ss_tot = np.sum((Y[te] - Y[te].mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_dim = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, np.nan)
    total = ss_tot.sum()
    agg = float(1.0 - ss_res.sum() / total) if total > 0 else float("nan")
    return LinearFitResult(A, c, per_dim, agg, n_train, n - n_train, ridge)


class ProbeResult(NamedTuple):
    r2_state: float
    r2_diff: float
    fit_state: LinearFitResult
    fit_diff: LinearFitResult


def identifiability_probe(encoder: MlpSpec, params: np.ndarray, generator, states, next_states=None,
                          split_seed: int = 0) -> ProbeResult:
    """Linear probes from phi(o) to s and from phi(o') - phi(o) to s' - s.

    Without ``next_states`` the sample is read as one trajectory and
    consecutive rows form the pairs.
    """
    s = np.asarray(states, dtype=float)
    if next_states is None:
        s, s_next = s[:-1], s[1:]
    else:
        s_next = np.asarray(next_states, dtype=float)
    if s.shape[0] < 1000:
        raise ValueError("identifiability probe needs at least 1000 states")
    phi = encode(encoder, params, generator(s))
    phi_next = encode(encoder, params, generator(s_next))
    fit_s = fit_linear_map(phi, s, split_seed)
    fit_d = fit_linear_map(phi_next - phi, s_next - s, split_seed)
    return ProbeResult(fit_s.r2_aggregate, fit_d.r2_aggregate, fit_s, fit_d)


@dataclass
class CoverageReport:
    grid: int
    cell_length: float
    occupied: int
    cells: frozenset = field(repr=False)
    fraction: float | None = None


def state_coverage(states, grid: int, bound: float) -> CoverageReport:
    """Distinct cells of a G x G grid over [-B, B]^2 hit by the first two state coordinates.

    ``states`` is an array of states, a :class:`Transitions` (both endpoints
    count) or a list of either. Cells are half-open on the upper side.
    """
    if grid < 2:
        raise ValueError("grid must be >= 2")
    parts = states if isinstance(states, list) else [states]
    pts = []
    for p in parts:
        if isinstance(p, Transitions):
            pts += [p.s, p.s_next]
        else:
            pts.append(np.atleast_2d(np.asarray(p, dtype=float)))
    xy = np.concatenate(pts)[:, :2] if pts else np.empty((0, 2))
    if xy.shape[1] < 2:
        xy = np.hstack([xy, np.zeros((xy.shape[0], 1))])
    cell = 2.0 * bound / grid
    idx = np.clip(np.floor((xy + bound) / cell).astype(np.int64), 0, grid - 1)
    cells = frozenset(map(tuple, np.unique(idx, axis=0).tolist())) if len(idx) else frozenset()
    return CoverageReport(grid, cell, len(cells), cells)


def coverage_fractions(reports: list[CoverageReport]) -> list[CoverageReport]:
    """Fill ``fraction``: occupied cells over cells touched by any report in the set."""
    union = frozenset().union(*(r.cells for r in reports))
    for r in reports:
        r.fraction = r.occupied / len(union) if union else 0.0
    return reports


@dataclass
class OracleReturnReport:
    w: np.ndarray
    returns: np.ndarray
    best_skill: int
    oracle_return: float


def oracle_return(world: World, policy: PolicyKind, skills: np.ndarray, w: np.ndarray, horizon: int,
                  rng: np.random.Generator, start: np.ndarray | None = None, gamma: float = 1.0) -> OracleReturnReport:
    """Best return along hidden direction ``w`` among one rollout per skill.

    Per-step reward is <w, s_{t+1} - s_t>; with gamma = 1 the return is <w, s_T - s_0>.
    """
    skills = np.atleast_2d(skills)
    if skills.shape[0] < 1:
        raise ValueError("need at least one skill")
    n, d = skills.shape[0], world.env.d
    starts = np.zeros((n, d)) if start is None else np.tile(np.asarray(start, dtype=float), (n, 1))
    tr = rollout_batch(world, policy, skills, horizon, rng, starts=starts)
    step_reward = (tr.s_next - tr.s) @ np.asarray(w, dtype=float)
    disc = gamma ** tr.t.astype(float)
    returns = np.bincount(tr.episode, weights=disc * step_reward, minlength=n)
    best = int(np.argmax(returns))
    return OracleReturnReport(np.asarray(w, dtype=float), returns, best, float(returns[best]))


def geometry_diagnostics(encoder: MlpSpec, params: np.ndarray, transitions: Transitions, eps: float = 1e-12) -> dict:
    """Collapse/antipodality statistics of phi(o), phi(o') and alignment of phi(o') - phi(o) with z."""
    if len(transitions) < 1000:
        raise ValueError("geometry diagnostics need at least 1000 transitions")
    phi = encode(encoder, params, transitions.o)
    phi_next = encode(encoder, params, transitions.o_next)
    diff = phi_next - phi
    n_phi = np.linalg.norm(phi, axis=1)
    n_next = np.linalg.norm(phi_next, axis=1)
    n_diff = np.linalg.norm(diff, axis=1)
    ok_pair = (n_phi > eps) & (n_next > eps)
    ok_diff = n_diff > eps
    out = {
        "mean_abs_cos_phi": float(np.mean(np.abs(np.sum(phi * phi_next, axis=1)[ok_pair]
                                                 / (n_phi * n_next)[ok_pair]))) if ok_pair.any() else float("nan"),
        "excluded_pairs": int((~ok_pair).sum()),
        "excluded_diffs": int((~ok_diff).sum()),
        "diff_norm_mean": float(n_diff.mean()),
        "diff_norm_std": float(n_diff.std()),
        "diff_norm_min": float(n_diff.min()),
        "diff_norm_max": float(n_diff.max()),
        "n": int(len(transitions)),
    }
    if transitions.z.shape[1] == diff.shape[1] and ok_diff.any():
        cos = np.sum(diff * transitions.z, axis=1)[ok_diff] / n_diff[ok_diff]
        out["mean_cos_diff_z"] = float(cos.mean())
    else:
        out["mean_cos_diff_z"] = float("nan")
    return out
