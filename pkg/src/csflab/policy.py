"""Skill-conditioned behaviour: scripted vMF steps, uniform steps, and greedy reward maximization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgp import EnvConfig, Generator, Transitions, env_step, sample_episode_start
from .geometry import sample_uniform_sphere, sample_vmf_batch
from .neural import MlpSpec
from .objective import encode, logits_from_features

SCRIPTED_VMF = "scripted-vmf"
UNIFORM = "uniform"
GREEDY = "greedy"
POLICY_KINDS = (SCRIPTED_VMF, UNIFORM, GREEDY)


class PolicyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyKind:
    kind: str = SCRIPTED_VMF
    kappa_act: float = 10.0
    candidates: int = 16
    epsilon: float = 0.05

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyConfigError(f"unknown policy kind {self.kind!r}")
        if not self.kappa_act >= 0:
            raise PolicyConfigError("kappa_act must be >= 0")
        if self.candidates < 2:
            raise PolicyConfigError("greedy policy needs at least 2 candidates")
        if not 0 <= self.epsilon <= 1:
            raise PolicyConfigError("epsilon must lie in [0, 1]")


@dataclass
class World:
    """What a policy may consult: the environment, the generator and (greedy only) the encoder."""

    env: EnvConfig
    generator: Generator
    encoder: MlpSpec | None = None
    params: np.ndarray | None = None
    # (d_state, d_skill) map from skill space to step directions; None means identity.
    skill_map: np.ndarray | None = None

    def step_direction(self, z: np.ndarray) -> np.ndarray:
        if self.skill_map is None:
            return z
        u = z @ self.skill_map.T
        return u / np.linalg.norm(u, axis=-1, keepdims=True)


def skill_embedding(d_state: int, d_skill: int, rng: np.random.Generator) -> np.ndarray | None:
    """Random orthonormal map between skill space and state space (None when the dims agree).

    With d_skill > d_state the rows are orthonormal, so a uniform skill maps to
    a uniform direction; with d_skill < d_state skills span a d_skill-dim subspace.
    """
    if d_state == d_skill:
        return None
    q, _ = np.linalg.qr(rng.standard_normal((max(d_state, d_skill), min(d_state, d_skill))))
    return q if d_state > d_skill else q.T


def act(policy: PolicyKind, world: World, s: np.ndarray, z: np.ndarray, rng: np.random.Generator,
        o: np.ndarray | None = None) -> np.ndarray:
    """Choose unit step directions for a batch of states ``s`` under skills ``z``.

    The greedy policy simulates each of M uniform candidate steps with the true
    environment (simulator privilege), scores (phi(o') - phi(o)) . z and takes
    the best one; with probability epsilon it steps uniformly instead.
    """
    s = np.atleast_2d(s)
    z = np.atleast_2d(z)
    n, d = s.shape
    if z.shape[0] != n:
        raise ValueError(f"{z.shape[0]} skills for {n} states")
    if policy.kind == SCRIPTED_VMF:
        direction = world.step_direction(z)
        if direction.shape[1] != d:
            raise ValueError(f"skill dim {z.shape[1]} needs a skill map to reach state dim {d}")
        return sample_vmf_batch(direction, policy.kappa_act, rng)
    if policy.kind == UNIFORM:
        return sample_uniform_sphere(d, rng, size=n)
    if world.encoder is None or world.params is None:
        raise PolicyConfigError("greedy policy needs an encoder and its parameters")
    m = policy.candidates
    cand = sample_uniform_sphere(d, rng, size=n * m).reshape(n, m, d)
    nxt, _ = env_step(world.env, np.repeat(s, m, axis=0), cand.reshape(n * m, d))
    if o is None:
        o = world.generator(s)
    phi_o = encode(world.encoder, world.params, o)
    phi_next = encode(world.encoder, world.params, world.generator(nxt)).reshape(n, m, -1)
    if phi_o.shape[1] != z.shape[1]:
        raise PolicyConfigError("greedy policy needs encoder output dim equal to the skill dim")
    rewards = np.einsum("nmd,nd->nm", phi_next - phi_o[:, None, :], z)
    chosen = cand[np.arange(n), np.argmax(rewards, axis=1)]
    explore = rng.uniform(size=n) < policy.epsilon
    if np.any(explore):
        chosen[explore] = sample_uniform_sphere(d, rng, size=int(explore.sum()))
    return chosen


@dataclass
class Trajectory:
    skill: np.ndarray
    transitions: Transitions
    seed: int | None = None


def rollout_batch(world: World, policy: PolicyKind, skills: np.ndarray, horizon: int, rng: np.random.Generator,
                  starts: np.ndarray | None = None, episode_offset: int = 0) -> Transitions:
    """Roll out one episode per row of ``skills`` in lockstep.

    Rows are ordered by time step then episode; use :func:`by_episode` to regroup.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    skills = np.atleast_2d(skills)
    n = skills.shape[0]
    s = sample_episode_start(world.env, rng, n) if starts is None else np.array(np.atleast_2d(starts), dtype=float)
    o = world.generator(s)
    o0 = o
    cols = {k: [] for k in ("s", "o", "a", "s_next", "o_next", "boundary")}
    for _ in range(horizon):
        a = act(policy, world, s, skills, rng, o=o)
        s_next, hit = env_step(world.env, s, a)
        o_next = world.generator(s_next)
        for k, v in zip(cols, (s, o, a, s_next, o_next, hit)):
            cols[k].append(v)
        s, o = s_next, o_next
    episode = np.tile(np.arange(n) + episode_offset, horizon)
    t = np.repeat(np.arange(horizon), n)
    return Transitions(**{k: np.concatenate(v) for k, v in cols.items()}, z=np.tile(skills, (horizon, 1)),
                       episode=episode, t=t, o_anchor=np.tile(o0, (horizon, 1)))


def by_episode(tr: Transitions) -> Transitions:
    """Reorder rows so each episode's steps are contiguous and in time order."""
    order = np.lexsort((tr.t, tr.episode))
    return tr[order]


def rollout(world: World, policy: PolicyKind, skill: np.ndarray, horizon: int, rng: np.random.Generator,
            start: np.ndarray | None = None, seed: int | None = None) -> Trajectory:
    skill = np.asarray(skill, dtype=float)
    tr = rollout_batch(world, policy, skill[None, :], horizon, rng,
                       starts=None if start is None else np.asarray(start, dtype=float)[None, :])
    return Trajectory(skill=skill, transitions=tr, seed=seed)


def distinct_skills(z: np.ndarray):
    """Unique skill vectors in first-seen order and each row's index into them."""
    uniq, first, inverse = np.unique(z, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return uniq[order], remap[np.ravel(inverse)]


def diversity_score(transitions: Transitions, encoder: MlpSpec, params: np.ndarray, labels=None) -> dict:
    """Held-out accuracy of the critic at naming the generating skill among all skills present.

    Classes are the distinct skill vectors, or ``labels`` (one class id per
    row) when given; then duplicate vectors under different ids tie and cap
    the score, and are counted in ``near_duplicates``. Boundary-contact rows
    are ignored and ties split credit uniformly.
    """
    keep = ~transitions.boundary
    tr = transitions[np.flatnonzero(keep)]
    if labels is None:
        skills, label = distinct_skills(tr.z)
    else:
        ids, label = np.unique(np.asarray(labels)[keep], return_inverse=True)
        label = np.ravel(label)
        skills = np.stack([tr.z[np.flatnonzero(label == i)[0]] for i in range(ids.size)])
    k = skills.shape[0]
    if k < 2:
        raise ValueError("diversity needs at least two distinct skills")
    diff = encode(encoder, params, tr.o_next) - encode(encoder, params, tr.o)
    logits = logits_from_features(diff, skills)
    top = logits.max(axis=1, keepdims=True)
    at_top = logits == top
    credit = at_top[np.arange(len(tr)), label] / at_top.sum(axis=1)
    gram = skills @ skills.T - np.eye(k)
    near_dupes = int(np.sum(np.triu(gram > 1 - 1e-9, 1)))
    return {"score": float(credit.mean()), "chance": 1.0 / k, "num_skills": k, "near_duplicates": near_dupes,
            "n": int(len(tr))}
