"""The contrastive skill-discrimination objective and the encoder training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dgp import Transitions
from .geometry import RESAMPLE, SkillSet
from .neural import MlpSpec, OptimState, backward, forward, init_params, optimizer_step

log = logging.getLogger(__name__)

FUTURE_DIFF = "future-diff"
MARGINAL = "marginal"
ANCHOR_DIFF = "anchor-diff"
OBJECTIVES = (FUTURE_DIFF, MARGINAL, ANCHOR_DIFF)

HISTORY_COLUMNS = ("step", "loss", "pos_logit_mean", "log_partition", "accuracy", "r2_state", "r2_diff")


class TrainingFailed(RuntimeError):
    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class TrainConfig:
    objective: str = FUTURE_DIFF
    xi: float = 1.0
    negatives: int = 255
    batch_size: int = 256
    steps: int = 20_000
    lr: float = 1e-3
    # "cosine" anneals the learning rate to lr_floor * lr over the run.
    lr_schedule: str = "cosine"
    lr_floor: float = 0.01
    eval_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.negatives < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("need negatives >= 1, batch_size >= 1, steps >= 0")


class LossReport(NamedTuple):
    loss: float
    pos_logit_mean: float
    log_partition: float
    accuracy: float


def encode(spec: MlpSpec, params: np.ndarray, o: np.ndarray) -> np.ndarray:
    return forward(spec, params, o)[0]


def critic_features(spec: MlpSpec, params: np.ndarray, o, o_next, objective: str = FUTURE_DIFF, o_anchor=None):
    """The feature vectors that get scored against skills.

    One array for the difference objectives, two (phi(o), phi(o')) for the
    marginal one.
    """
    if objective == FUTURE_DIFF:
        return [encode(spec, params, o_next) - encode(spec, params, o)]
    if objective == MARGINAL:
        return [encode(spec, params, o), encode(spec, params, o_next)]
    if objective == ANCHOR_DIFF:
        if o_anchor is None:
            raise ValueError("anchor-diff needs the episode's first observation")
        return [encode(spec, params, o_next) - encode(spec, params, o_anchor)]
    raise ValueError(f"unknown objective {objective!r}")


def logits_from_features(f: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Inner products of features with candidate skills.

    ``candidates`` is ``(K+1, d)`` shared by every row, or ``(n, K+1, d)`` per row.
    """
    if candidates.shape[-1] != f.shape[-1]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match skill dim {candidates.shape[-1]}")
    if candidates.ndim == 3:
        return np.einsum("nd,nkd->nk", f, candidates)
    return f @ candidates.T


def critic_logits(spec: MlpSpec, params: np.ndarray, o, o_next, candidates, objective: str = FUTURE_DIFF,
                  o_anchor=None) -> np.ndarray:
    """Logits against ``candidates`` (index 0 is the positive).

    Difference objectives return shape ``(..., K+1)``; the marginal objective
    stacks its two terms on a new leading axis.
    """
    feats = critic_features(spec, params, o, o_next, objective, o_anchor)
    out = [logits_from_features(f, np.asarray(candidates, dtype=float)) for f in feats]
    return out[0] if len(out) == 1 else np.stack(out)


def reward_of_transition(spec: MlpSpec, params: np.ndarray, o, o_next, z) -> float | np.ndarray:
    """(phi(o') - phi(o)) . z for one transition or a batch."""
    diff = encode(spec, params, o_next) - encode(spec, params, o)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != diff.shape[-1]:
        raise ValueError(f"skill dim {z.shape[-1]} does not match feature dim {diff.shape[-1]}")
    return np.sum(diff * z, axis=-1)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def contrastive_loss_grad(logits, xi: float = 1.0, positive_mask=None):
    """Loss, report and d(mean loss)/d(logits).

    Per row: -xi * l_0 + log(mean_j exp(l_j)). Accuracy credits the share of
    argmax ties held by copies of the positive (``positive_mask``, default
    column 0 only), i.e. uniform tie-breaking.
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    L = logits[None, :] if single else logits
    n, k1 = L.shape
    lse = _logsumexp(L)
    log_partition = lse - math.log(k1)
    per_row = -xi * L[:, 0] + log_partition
    top = L.max(axis=1, keepdims=True)
    at_top = L == top
    if positive_mask is None:
        positive_mask = np.zeros_like(at_top)
        positive_mask[:, 0] = True
    with np.errstate(invalid="ignore"):  # NaN logits: no row attains the max
        acc = (at_top & positive_mask).sum(axis=1) / at_top.sum(axis=1)
    grad = np.exp(L - lse[:, None])
    grad[:, 0] -= xi
    grad /= n
    report = LossReport(float(per_row.mean()), float(L[:, 0].mean()), float(log_partition.mean()),
                        float(acc.mean()))
    return report.loss, report, (grad[0] if single else grad)


def contrastive_loss(logits, xi: float = 1.0, positive_mask=None):
    """``(loss, LossReport)`` for logits whose column 0 is the positive skill."""
    loss, report, _ = contrastive_loss_grad(logits, xi, positive_mask)
    return loss, report


def assemble_candidates(z_pos: np.ndarray, skills: SkillSet, negatives: int, rng: np.random.Generator):
    """Positive skills plus K negatives shared across the batch.

    Returns ``(negs, positive_mask)``; the mask marks negatives that are
    copies of the row's positive (only possible with a fixed skill set).
    """
    negs = skills.draw(rng, negatives)
    mask = np.zeros((z_pos.shape[0], negatives + 1), dtype=bool)
    mask[:, 0] = True
    if skills.mode != RESAMPLE:
        mask[:, 1:] = np.all(z_pos[:, None, :] == negs[None, :, :], axis=-1)
    return negs, mask


def batch_loss_and_grad(spec: MlpSpec, params: np.ndarray, o, o_next, z_pos, negs, objective: str, xi: float,
                        positive_mask=None, o_anchor=None):
    """Mean objective over a batch and its exact parameter gradient."""
    n = o.shape[0]
    if objective == FUTURE_DIFF:
        x = np.concatenate([o, o_next])
    elif objective == MARGINAL:
        x = np.concatenate([o, o_next])
    elif objective == ANCHOR_DIFF:
        if o_anchor is None:
            raise ValueError("anchor-diff needs the episode's first observation")
        x = np.concatenate([o_anchor, o_next])
    else:
        raise ValueError(f"unknown objective {objective!r}")
    y, tape = forward(spec, params, x)
    first, second = y[:n], y[n:]
    feats = [second - first] if objective != MARGINAL else [first, second]
    upstream_parts = []
    reports = []
    total = 0.0
    for f in feats:
        logits = np.empty((n, negs.shape[0] + 1))
        logits[:, 0] = np.sum(f * z_pos, axis=1)
        logits[:, 1:] = f @ negs.T
        loss, rep, g = contrastive_loss_grad(logits, xi, positive_mask)
        total += loss
        reports.append(rep)
        upstream_parts.append(g[:, :1] * z_pos + g[:, 1:] @ negs)
    if objective == MARGINAL:
        upstream = np.concatenate(upstream_parts)
    else:
        upstream = np.concatenate([-upstream_parts[0], upstream_parts[0]])
    grads, _ = backward(spec, params, tape, upstream)
    report = LossReport(total, *(float(np.mean([getattr(r, f) for r in reports]))
                                 for f in ("pos_logit_mean", "log_partition", "accuracy")))
    return report, grads


def learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "constant" or config.steps <= 1:
        return config.lr
    frac = min(1.0, step / (config.steps - 1))
    return config.lr * (config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainResult:
    params: np.ndarray
    history: list[dict] = field(default_factory=list)
    rejected_steps: int = 0
    steps: int = 0
    failed: str | None = None
    opt: OptimState | None = None


def train_encoder(data: Transitions | Callable[[int, np.ndarray], Transitions], encoder: MlpSpec,
                  config: TrainConfig, skills: SkillSet, rng: np.random.Generator, params: np.ndarray | None = None,
                  probe: Callable[[np.ndarray], tuple[float, float]] | None = None,
                  on_eval: Callable[[int, np.ndarray], None] | None = None) -> TrainResult:
    """Minimize the contrastive objective with Adam.

    ``data`` is a fixed transition table or a callable ``(step, params)``
    returning the current training pool (the harness refreshes it between
    collection rounds). Boundary-contact transitions are never sampled.

    History rows are written at step 0 (a batch scored without an update),
    every ``eval_every`` steps and at the end. Loss columns average the
    batches since the previous row; ``probe(params)`` supplies
    ``(r2_state, r2_diff)``.
    """
    if params is None:
        params = init_params(encoder, rng)
    params = params.copy()
    if skills.dim != encoder.output_dim:
        raise ValueError(f"skills have dim {skills.dim} but the encoder outputs {encoder.output_dim}")
    opt = OptimState.zeros_like(params, lr=config.lr)
    result = TrainResult(params=params, opt=opt)
    window: list[LossReport] = []

    def draw_batch(step):
        pool = data(step, params) if callable(data) else data
        idx = np.flatnonzero(~pool.boundary)
        if idx.size == 0:
            raise TrainingFailed("no-data", "training pool has no interior transitions")
        pick = idx[rng.integers(0, idx.size, size=config.batch_size)]
        z_pos = pool.z[pick]
        negs, mask = assemble_candidates(z_pos, skills, config.negatives, rng)
        anchor = pool.o_anchor[pick] if config.objective == ANCHOR_DIFF else None
        return pool.o[pick], pool.o_next[pick], z_pos, negs, mask, anchor

    def record(step):
        r2s, r2d = probe(params) if probe is not None else (float("nan"), float("nan"))
        means = [float(np.mean([getattr(r, f) for r in window])) for f in LossReport._fields]
        result.history.append(dict(zip(HISTORY_COLUMNS, [step, *means, r2s, r2d])))
        window.clear()
        if on_eval is not None:
            on_eval(step, params)

    o, o_next, z_pos, negs, mask, anchor = draw_batch(0)
    rep, _ = batch_loss_and_grad(encoder, params, o, o_next, z_pos, negs, config.objective, config.xi, mask, anchor)
    window.append(rep)
    record(0)
    for step in range(config.steps):
        o, o_next, z_pos, negs, mask, anchor = draw_batch(step)
        rep, grads = batch_loss_and_grad(encoder, params, o, o_next, z_pos, negs, config.objective, config.xi,
                                         mask, anchor)
        window.append(rep)
        opt.lr = learning_rate(config, step)
        params, opt = optimizer_step(opt, params, grads)
        if opt.rejected > max(1, 0.01 * config.steps):
            result.failed = "divergence"
            result.steps = step + 1
            log.error("rejected-step budget exceeded at step %d", step)
            record(step + 1)
            break
        done = step + 1
        if done == config.steps or (config.eval_every and done % config.eval_every == 0):
            record(done)
    else:
        result.steps = config.steps
    result.params = params
    result.rejected_steps = opt.rejected
    return result
