"""Experiment orchestration: one CSF run end to end, the ablations, and the max-entropy check."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import FIXED_SET, RESAMPLE, ConfigError, RunConfig, Seeds, flatten
from .dgp import Transitions, make_generator
from .evaluation import (
    coverage_fractions,
    geometry_diagnostics,
    identifiability_probe,
    is_affine_generator,
    oracle_return,
    skill_conditioning,
    state_coverage,
)
from .geometry import SkillSet, sample_uniform_sphere
from .neural import init_params, load_checkpoint, save_checkpoint
from .objective import (
    ANCHOR_DIFF,
    FUTURE_DIFF,
    HISTORY_COLUMNS,
    MARGINAL,
    TrainingFailed,
    assemble_candidates,
    contrastive_loss,
    encode,
    train_encoder,
)
from .policy import GREEDY, SCRIPTED_VMF, UNIFORM, World, diversity_score, rollout_batch, skill_embedding

log = logging.getLogger(__name__)

# Identifiability thresholds for the default configuration.
R2_DIFF_MIN = 0.95
R2_STATE_MIN = 0.90


class AblationConfigError(ConfigError):
    pass


@dataclass
class RunReport:
    status: str
    reason: str | None
    r2_state: float
    r2_diff: float
    diversity: dict
    coverage: dict
    oracle: dict
    geometry: dict
    conditioning: dict
    critic: dict
    rejected_steps: int
    steps: int
    config: dict
    sub_seeds: dict
    config_hash: str
    checkpoint_hash: str | None = None
    probe: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    history: list = field(default_factory=list, repr=False)
    coverage_history: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        """Deterministic part of the report (wall time and history live in other files)."""
        d = dataclasses.asdict(self)
        for k in ("wall_time_s", "history", "coverage_history"):
            d.pop(k)
        return _jsonable(d)

    @classmethod
    def from_json(cls, d: dict) -> "RunReport":
        return cls(**d)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class _Setup:
    """Everything a run derives from its config before training starts."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.seeds = Seeds(config.seed)
        self.gen_spec = config.generator_spec()
        if config.generator_seed is None:
            self.seeds.seed("generator")  # recorded for the report; same value the config derived
        self.generator = make_generator(self.gen_spec)
        self.enc_spec = config.encoder_spec()
        self.skill_map = skill_embedding(config.env.d, config.latent_dim, self.seeds.rng("skill-map"))
        self.params0 = init_params(self.enc_spec, self.seeds.rng("encoder-init"))
        mode = config.skills.mode
        self.skills = SkillSet.uniform(config.skills.count, config.latent_dim, self.seeds.rng("skills"), mode)
        self.task_w = sample_uniform_sphere(config.env.d, self.seeds.rng("task"))
        rng = self.seeds.rng("probe")
        B = config.env.B
        self.probe_s = rng.uniform(-B / 2, B / 2, size=(config.eval.probe_size, config.env.d))
        self.probe_next = self.probe_s + sample_uniform_sphere(config.env.d, rng, size=config.eval.probe_size)

    def world(self, params) -> World:
        return World(self.config.env, self.generator, self.enc_spec, params, self.skill_map)

    def probe(self, params):
        return identifiability_probe(self.enc_spec, params, self.generator, self.probe_s, self.probe_next)


def evaluate_params(setup: _Setup, params: np.ndarray) -> dict:
    """All end-of-run metrics for one parameter vector."""
    cfg = setup.config
    ev = cfg.eval
    seeds = setup.seeds
    world = setup.world(params)
    policy = cfg.policy
    d_lat = cfg.latent_dim

    pr = setup.probe(params)
    probe = {"r2_state": pr.r2_state, "r2_diff": pr.r2_diff, "r2_state_per_dim": pr.fit_state.r2_per_dim,
             "r2_diff_per_dim": pr.fit_diff.r2_per_dim, "A_state": pr.fit_state.A, "A_diff": pr.fit_diff.A,
             "A_shape": list(pr.fit_state.A.shape), "intercept": True, "split": "80/20 held-out",
             "ridge_fallback": pr.fit_state.ridge or pr.fit_diff.ridge}

    # Held-out transitions from the training distribution.
    rng = seeds.rng("heldout")
    z = setup.skills.draw(rng, ev.heldout_episodes)
    held = rollout_batch(world, policy, z, cfg.env.horizon, rng).interior()
    negs, mask = assemble_candidates(held.z, setup.skills, cfg.train.negatives, rng)
    diff = encode(setup.enc_spec, params, held.o_next) - encode(setup.enc_spec, params, held.o)
    logits = np.empty((len(held), cfg.train.negatives + 1))
    logits[:, 0] = np.sum(diff * held.z, axis=1)
    logits[:, 1:] = diff @ negs.T
    _, rep = contrastive_loss(logits, cfg.train.xi, mask)
    rewards = np.sum(diff * held.z, axis=1)
    n = len(held)
    chance = 1.0 / (cfg.train.negatives + 1) if setup.skills.mode == RESAMPLE else float(np.mean(mask.sum(1))
                                                                                           / mask.shape[1])
    critic = {"accuracy": rep.accuracy, "chance": chance, "loss": rep.loss, "mean_reward": float(rewards.mean()),
              "reward_std": float(rewards.std()), "n": n, "reward_bound": 3.0 / math.sqrt(n)}
    geometry = geometry_diagnostics(setup.enc_spec, params, held)

    # Diversity: held-out critic identification among the skills present.
    rng = seeds.rng("diversity")
    zs = setup.skills.draw(rng, ev.diversity_skills)
    tr = rollout_batch(world, policy, np.repeat(zs, ev.diversity_episodes, axis=0), cfg.env.horizon, rng)
    # Repeated draws from a small fixed set are one skill; chance is over distinct vectors.
    if len(np.unique(zs, axis=0)) >= 2:
        diversity = diversity_score(tr, setup.enc_spec, params)
    else:
        diversity = {"score": float("nan"), "chance": 1.0, "num_skills": 1, "near_duplicates": 0, "n": len(tr)}

    # Coverage and zero-shot transfer from the origin.
    rng = seeds.rng("coverage")
    zc = setup.skills.draw(rng, ev.oracle_skills)
    cov_tr = rollout_batch(world, policy, zc, ev.eval_horizon, rng, starts=np.zeros((ev.oracle_skills, cfg.env.d)))
    cov = state_coverage(cov_tr, ev.coverage_grid, cfg.env.B)
    coverage = {"grid": cov.grid, "cell_length": cov.cell_length, "occupied": cov.occupied,
                "cells": sorted(cov.cells)}
    orr = oracle_return(world, policy, zc, setup.task_w, ev.eval_horizon, seeds.rng("oracle"), gamma=cfg.gamma)
    oracle = {"w": orr.w, "returns": orr.returns, "best_skill": orr.best_skill, "oracle_return": orr.oracle_return}

    cond_skills = setup.skills.skills if setup.skills.mode == FIXED_SET else sample_uniform_sphere(
        d_lat, seeds.rng("conditioning"), size=max(cfg.skills.count, cfg.train.negatives))
    check = is_affine_generator(cond_skills)
    conditioning = {"affine_generator": check.is_generator, "rank": check.rank,
                    "smallest_nonzero_singular": check.smallest_nonzero_singular,
                    "centered_min_singular": skill_conditioning(cond_skills) if len(cond_skills) >= 2 else 0.0,
                    "num_skills": int(len(cond_skills)), "mode": setup.skills.mode,
                    "assumption_i_violated": not check.is_generator}
    return {"r2_state": pr.r2_state, "r2_diff": pr.r2_diff, "probe": probe, "critic": critic,
            "geometry": geometry, "diversity": diversity, "coverage": coverage, "oracle": oracle,
            "conditioning": conditioning}


def _write_history(path: Path, rows: list[dict], columns) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, np.integer)) else repr(float(r[c])) for c in columns])


def run_csf(config: RunConfig, out_dir=None) -> RunReport:
    """Train an encoder with interleaved rollout collection, evaluate it, and write the artifacts.

    Files under ``out_dir``: config.json, metrics.csv, coverage.csv,
    report.json, timing.json and checkpoints/encoder_{init,final}.{json,bin}.
    """
    t0 = time.perf_counter()
    with threadpool_limits(1):
        setup = _Setup(config)
        seeds = setup.seeds
        col = config.collection
        state = {"round": -1, "pool": None, "parts": [], "cells": set()}
        coverage_history = []

        def collect(round_idx, params):
            rng = seeds.rng("collect", round_idx)
            z = setup.skills.draw(rng, col.episodes_per_round)
            tr = rollout_batch(setup.world(params), config.policy, z, config.env.horizon, rng,
                               episode_offset=round_idx * col.episodes_per_round)
            cov = state_coverage(tr, config.eval.coverage_grid, config.env.B)
            state["cells"] |= cov.cells
            state["parts"].append(tr)
            while sum(len(p) for p in state["parts"]) - len(state["parts"][0]) >= col.pool_size:
                state["parts"].pop(0)
            state["pool"] = Transitions.concat(state["parts"])
            state["round"] = round_idx

        def data(step, params):
            r = step // col.every if col.every else 0
            if r != state["round"]:
                collect(r, params)
            return state["pool"]

        def on_eval(step, params):
            coverage_history.append({"step": step, "coverage": len(state["cells"])})

        failed = None
        try:
            result = train_encoder(data, setup.enc_spec, config.train, setup.skills,
                                   seeds.rng("train", config.train.seed), params=setup.params0,
                                   probe=lambda p: tuple(setup.probe(p)[:2]), on_eval=on_eval)
            params = result.params
            failed = result.failed
        except TrainingFailed as exc:
            result, params, failed = None, setup.params0, exc.reason
        metrics = evaluate_params(setup, params)

    report = RunReport(
        status="failed" if failed else "ok", reason=failed,
        r2_state=metrics["r2_state"], r2_diff=metrics["r2_diff"], diversity=metrics["diversity"],
        coverage=metrics["coverage"], oracle=metrics["oracle"], geometry=metrics["geometry"],
        conditioning=metrics["conditioning"], critic=metrics["critic"],
        rejected_steps=result.rejected_steps if result else 0, steps=result.steps if result else 0,
        config={**config.to_dict(), "effective_generator_seed": setup.gen_spec.seed,
                "effective_encoder": dataclasses.asdict(setup.enc_spec)},
        sub_seeds=dict(sorted(seeds.derived.items())), config_hash=config.digest(), probe=metrics["probe"],
        history=result.history if result else [], coverage_history=coverage_history)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
        save_checkpoint(out / "checkpoints" / "encoder_init", setup.enc_spec, setup.params0, config.seed, 0)
        _, bin_path = save_checkpoint(out / "checkpoints" / "encoder_final", setup.enc_spec, params, config.seed,
                                      report.steps)
        report.checkpoint_hash = git_blob_hash(bin_path.read_bytes())
        _write_history(out / "metrics.csv", report.history, HISTORY_COLUMNS)
        _write_history(out / "coverage.csv", coverage_history, ("step", "coverage"))
    report.wall_time_s = time.perf_counter() - t0
    if out_dir is not None:
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_time_s": report.wall_time_s}) + "\n")
    return report


def evaluate_run(run_dir) -> dict:
    """Recompute end-of-run metrics from a run directory's config and final checkpoint."""
    run_dir = Path(run_dir)
    config = RunConfig.load(run_dir / "config.json")
    _, params, header = load_checkpoint(run_dir / "checkpoints" / "encoder_final")
    with threadpool_limits(1):
        metrics = evaluate_params(_Setup(config), params)
    metrics = _jsonable({**metrics, "checkpoint_step": header["step"]})
    (run_dir / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


# ---------------------------------------------------------------- ablations


def check_single_factor(configs: list[RunConfig], allowed: set[str]) -> None:
    """Abort unless the configs differ only in the ``allowed`` dotted fields."""
    base = flatten(configs[0].to_dict())
    for c in configs[1:]:
        other = flatten(c.to_dict())
        diff = {k for k in base.keys() | other.keys() if base.get(k) != other.get(k)}
        if not diff <= allowed:
            raise AblationConfigError(f"ablation cells differ in {sorted(diff - allowed)}")


def _run_cell(args):
    config_dict, out_dir = args
    return run_csf(RunConfig.from_dict(config_dict), out_dir)


def run_cells(configs: list[RunConfig], out_dirs: list, workers: int = 1) -> list[RunReport]:
    """Run independent cells, in-process or in a worker pool; results come back in cell order."""
    jobs = [(c.to_dict(), None if o is None else str(o)) for c, o in zip(configs, out_dirs)]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


def _cell_dirs(out_dir, labels):
    return [None if out_dir is None else Path(out_dir) / str(lab) for lab in labels]


def _summary_row(label, rep: RunReport) -> dict:
    return {"label": label, "status": rep.status, "r2_state": rep.r2_state, "r2_diff": rep.r2_diff,
            "coverage": rep.coverage["occupied"], "oracle_return": rep.oracle["oracle_return"],
            "critic_accuracy": rep.critic["accuracy"], "diversity": rep.diversity["score"],
            "affine_generator": rep.conditioning["affine_generator"],
            "centered_min_singular": rep.conditioning["centered_min_singular"]}


def _write_table(out_dir, name: str, table: dict) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(_jsonable(table), indent=2, sort_keys=True) + "\n")
    rows = table["rows"]
    if rows:
        with (out / f"{name}.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(_jsonable(rows))


def _nondecreasing(xs) -> bool:
    return all(b >= a for a, b in zip(xs, xs[1:]))


def ablate_skills(base: RunConfig, counts=(2, 4, 8, 16, 64, "resample"), out_dir=None, workers: int = 1) -> dict:
    """Vary only the skill set: fixed sets of each count (drawn once) and the resampling mode."""
    configs, labels = [], []
    for c in counts:
        if c == "resample":
            configs.append(base.replace(**{"skills.mode": RESAMPLE}))
            labels.append("resample")
        else:
            configs.append(base.replace(**{"skills.mode": FIXED_SET, "skills.count": int(c)}))
            labels.append(f"fixed-{int(c)}")
    check_single_factor(configs, {"skills.mode", "skills.count"})
    reports = run_cells(configs, _cell_dirs(out_dir, labels), workers)
    covs = coverage_fractions([_cov(r) for r in reports])
    rows = []
    for lab, rep, cov in zip(labels, reports, covs):
        row = _summary_row(lab, rep)
        row["coverage_fraction"] = cov.fraction
        row["assumption_i_violated"] = rep.conditioning["assumption_i_violated"]
        rows.append(row)
    fixed = [r for r in rows if r["label"] != "resample"]
    trend = {"label": "trend",
             "r2_diff_nondecreasing_in_count": _nondecreasing([r["r2_diff"] for r in fixed]),
             "coverage_nondecreasing_in_count": _nondecreasing([r["coverage"] for r in fixed])}
    res = [r for r in rows if r["label"] == "resample"]
    if res and fixed:
        trend["resample_r2_diff_at_least_fixed_max"] = res[0]["r2_diff"] >= max(r["r2_diff"] for r in fixed)
    table = {"kind": "ablate-skills", "rows": rows, "trend": trend, "reports": [r.to_json() for r in reports]}
    _write_table(out_dir, "ablate_skills", table)
    return table


def _cov(rep: RunReport):
    from .evaluation import CoverageReport
    cells = frozenset(tuple(c) for c in rep.coverage["cells"])
    return CoverageReport(rep.coverage["grid"], rep.coverage["cell_length"], rep.coverage["occupied"], cells)


def ablate_dim(base: RunConfig, dims=(2, 3, 4, 8, 16), out_dir=None, workers: int = 1) -> dict:
    """Vary only the encoder output (= skill) dimension."""
    configs = [base.replace(**{"encoder.output_dim": int(k)}) for k in dims]
    check_single_factor(configs, {"encoder.output_dim"})
    labels = [f"dim-{int(k)}" for k in dims]
    reports = run_cells(configs, _cell_dirs(out_dir, labels), workers)
    rows = []
    for k, lab, rep in zip(dims, labels, reports):
        row = _summary_row(lab, rep)
        row["dim"] = int(k)
        row["A_shape"] = rep.probe["A_shape"]
        row["bottleneck"] = int(k) < base.env.d
        rows.append(row)
    table = {"kind": "ablate-dim", "rows": rows, "reports": [r.to_json() for r in reports]}
    _write_table(out_dir, "ablate_dim", table)
    return table


def ablate_objective(base: RunConfig, out_dir=None, workers: int = 1) -> dict:
    """Same data streams, three critic parametrizations; geometry diagnostics side by side."""
    kinds = (FUTURE_DIFF, MARGINAL, ANCHOR_DIFF)
    configs = [base.replace(**{"train.objective": k}) for k in kinds]
    check_single_factor(configs, {"train.objective"})
    reports = run_cells(configs, _cell_dirs(out_dir, kinds), workers)
    rows = []
    for k, rep in zip(kinds, reports):
        row = _summary_row(k, rep)
        row.update({"mean_abs_cos_phi": rep.geometry["mean_abs_cos_phi"],
                    "mean_cos_diff_z": rep.geometry["mean_cos_diff_z"],
                    "diff_norm_mean": rep.geometry["diff_norm_mean"],
                    "passes_identifiability": rep.r2_diff >= R2_DIFF_MIN and rep.r2_state >= R2_STATE_MIN})
        rows.append(row)
    by = {r["label"]: r for r in rows}
    checks = {
        "marginal_more_collapsed_than_future_diff":
            by[MARGINAL]["mean_abs_cos_phi"] > by[FUTURE_DIFF]["mean_abs_cos_phi"],
        "future_diff_passes": by[FUTURE_DIFF]["passes_identifiability"],
        "marginal_fails": not by[MARGINAL]["passes_identifiability"],
    }
    table = {"kind": "ablate-objective", "rows": rows, "checks": checks,
             "reports": [r.to_json() for r in reports]}
    _write_table(out_dir, "ablate_objective", table)
    return table


def lemma_check(base: RunConfig, out_dir=None, workers: int = 1) -> dict:
    """Uniform (maximum-entropy) policy against the scripted vMF policy on the same budget."""
    configs = [base.replace(**{"policy.kind": UNIFORM}), base.replace(**{"policy.kind": SCRIPTED_VMF})]
    check_single_factor(configs, {"policy.kind"})
    reports = run_cells(configs, _cell_dirs(out_dir, [UNIFORM, SCRIPTED_VMF]), workers)
    rows = []
    for k, rep in zip((UNIFORM, SCRIPTED_VMF), reports):
        c = rep.critic
        rows.append({"label": k, "critic_accuracy": c["accuracy"], "chance": c["chance"],
                     "mean_reward": c["mean_reward"], "reward_bound": c["reward_bound"], "n": c["n"],
                     "diversity": rep.diversity["score"], "diversity_chance": rep.diversity["chance"],
                     "r2_diff": rep.r2_diff})
    uni, scr = rows
    checks = {
        "uniform_accuracy_at_chance": abs(uni["critic_accuracy"] - uni["chance"]) <= 0.03,
        "uniform_reward_zero": abs(uni["mean_reward"]) <= uni["reward_bound"],
        "scripted_accuracy_above_5x_chance": scr["critic_accuracy"] > 5 * scr["chance"],
        "scripted_diversity_at_least_half": scr["diversity"] >= 0.5,
    }
    table = {"kind": "lemma-check", "rows": rows, "checks": checks, "reports": [r.to_json() for r in reports]}
    _write_table(out_dir, "lemma_check", table)
    return table


__all__ = ["RunReport", "run_csf", "evaluate_run", "ablate_skills", "ablate_dim", "ablate_objective",
           "lemma_check", "check_single_factor", "run_cells", "AblationConfigError", "GREEDY"]
