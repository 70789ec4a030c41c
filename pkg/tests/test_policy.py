import math

import numpy as np
import pytest
from scipy import stats

from csflab.dgp import EnvConfig, GeneratorSpec, generate_assumption1_dataset, make_generator
from csflab.geometry import mean_resultant_length, sample_uniform_sphere
from csflab.neural import Layout, MlpSpec
from csflab.policy import (
    GREEDY,
    SCRIPTED_VMF,
    UNIFORM,
    PolicyConfigError,
    PolicyKind,
    World,
    act,
    by_episode,
    diversity_score,
    rollout,
    rollout_batch,
    skill_embedding,
)


def identity_world(d=4, B=50.0, horizon=20):
    g = make_generator(GeneratorSpec(d=d, D=d, hidden_layers=(), identity=True))
    spec = MlpSpec(d, d, hidden=(), skip_connections=False)
    params = np.zeros(Layout.for_spec(spec).size)
    Layout.for_spec(spec).unpack(params)["W0"][...] = np.eye(d)
    return World(EnvConfig(d=d, B=B, horizon=horizon), g, spec, params)


def test_policy_kind_validation():
    with pytest.raises(PolicyConfigError):
        PolicyKind(kind="sac")
    with pytest.raises(PolicyConfigError):
        PolicyKind(kind=GREEDY, candidates=1)
    with pytest.raises(PolicyConfigError):
        PolicyKind(epsilon=1.5)


def test_scripted_infinite_kappa_follows_skill(rng):
    w = identity_world()
    z = sample_uniform_sphere(4, rng, size=10)
    a = act(PolicyKind(SCRIPTED_VMF, kappa_act=math.inf), w, np.zeros((10, 4)), z, rng)
    np.testing.assert_array_equal(a, z)


def test_uniform_actions_have_no_mean(rng):
    w = identity_world()
    n = 1_000_000
    a = act(PolicyKind(UNIFORM), w, np.zeros((n, 4)), np.tile(np.eye(4)[0], (n, 1)), rng)
    assert np.linalg.norm(a.mean(axis=0)) <= 0.003


def test_greedy_picks_brute_force_best_candidate(rng):
    w = identity_world()
    pol = PolicyKind(GREEDY, candidates=16, epsilon=0.0)
    s = rng.uniform(-10, 10, size=(200, 4))
    z = sample_uniform_sphere(4, rng, size=200)
    seed = 99
    chosen = act(pol, w, s, z, np.random.default_rng(seed))
    cand = sample_uniform_sphere(4, np.random.default_rng(seed), size=200 * 16).reshape(200, 16, 4)
    best = np.max(np.einsum("nmd,nd->nm", cand, z), axis=1)
    np.testing.assert_allclose(np.sum(chosen * z, axis=1), best, atol=1e-12)


def test_greedy_needs_encoder(rng):
    w = identity_world()
    w.params = None
    with pytest.raises(PolicyConfigError):
        act(PolicyKind(GREEDY), w, np.zeros((1, 4)), np.eye(4)[:1], rng)


def test_greedy_reward_grows_with_candidates(rng):
    w = identity_world()
    z = sample_uniform_sphere(4, rng, size=20_000)
    s = np.zeros_like(z)
    means = [np.mean(np.sum(act(PolicyKind(GREEDY, candidates=m, epsilon=0.0), w, s, z, rng) * z, axis=1))
             for m in (2, 8, 32)]
    assert means[0] < means[1] < means[2]


def test_rollout_shapes_and_chaining(rng):
    w = identity_world()
    pol = PolicyKind(SCRIPTED_VMF)
    one = rollout(w, pol, np.eye(4)[0], 1, rng)
    assert len(one.transitions) == 1
    tr = by_episode(rollout_batch(w, pol, sample_uniform_sphere(4, rng, size=1000), 15, rng))
    s = tr.s.reshape(1000, 15, 4)
    nxt = tr.s_next.reshape(1000, 15, 4)
    np.testing.assert_array_equal(s[:, 1:], nxt[:, :-1])
    np.testing.assert_array_equal(tr.o_anchor.reshape(1000, 15, 4)[:, :, :], np.repeat(s[:, :1], 15, axis=1))


def test_straight_line_rollout(rng):
    w = identity_world()
    z = sample_uniform_sphere(4, rng)
    tr = rollout(w, PolicyKind(SCRIPTED_VMF, kappa_act=math.inf), z, 30, rng, start=np.zeros(4)).transitions
    np.testing.assert_allclose(tr.s_next[-1] - tr.s[0], 30 * z, atol=1e-6)
    assert not tr.boundary.any()


def test_rollouts_are_deterministic():
    w = identity_world()
    pol = PolicyKind(GREEDY, candidates=4)
    z = sample_uniform_sphere(4, np.random.default_rng(0), size=8)
    a = rollout_batch(w, pol, z, 10, np.random.default_rng(3))
    b = rollout_batch(w, pol, z, 10, np.random.default_rng(3))
    assert a.s_next.tobytes() == b.s_next.tobytes()


def test_boundary_flags_set(rng):
    w = identity_world(B=3.0, horizon=20)
    tr = rollout_batch(w, PolicyKind(SCRIPTED_VMF, kappa_act=math.inf), np.tile(np.eye(4)[0], (5, 1)), 20, rng,
                       starts=np.zeros((5, 4)))
    assert tr.boundary.any()
    assert np.all(np.abs(tr.s_next) <= 3)


def test_scripted_rollouts_match_assumption1_data(rng):
    w = identity_world()
    # one step per episode keeps the rows independent, as the KS test assumes
    z = sample_uniform_sphere(4, rng, size=200_000)
    tr = rollout_batch(w, PolicyKind(SCRIPTED_VMF, kappa_act=10.0), z, 1, rng).interior()
    zz, s, s2 = generate_assumption1_dataset(len(tr), 4, 10.0, rng)
    step_a, step_b = tr.s_next - tr.s, s2 - s
    assert stats.ks_2samp(np.sum(step_a * tr.z, 1), np.sum(step_b * zz, 1)).pvalue > 1e-3
    for ax in sample_uniform_sphere(4, rng, size=5):
        assert stats.ks_2samp(step_a @ ax, step_b @ ax).pvalue > 1e-3


def test_mean_reward_uniform_vs_scripted(rng):
    w = identity_world()
    z = sample_uniform_sphere(4, rng, size=5000)
    uni = rollout_batch(w, PolicyKind(UNIFORM), z, 20, rng).interior()
    r = np.sum((uni.s_next - uni.s) * uni.z, axis=1)
    assert abs(r.mean()) <= 3 / math.sqrt(len(r))
    scr = rollout_batch(w, PolicyKind(SCRIPTED_VMF, kappa_act=10.0), z, 20, rng).interior()
    r = np.sum((scr.s_next - scr.s) * scr.z, axis=1)
    assert r.mean() >= 0.7
    assert abs(r.mean() - mean_resultant_length(4, 10.0)) < 0.01


def test_diversity_separable_and_uninformative(rng):
    w = identity_world()
    skills = np.vstack([np.eye(4), -np.eye(4)])
    z = np.repeat(skills, 50, axis=0)
    tr = rollout_batch(w, PolicyKind(SCRIPTED_VMF, kappa_act=math.inf), z, 10, rng)
    res = diversity_score(tr, w.encoder, w.params)
    assert res["score"] == 1.0 and res["num_skills"] == 8 and res["chance"] == 1 / 8
    tr = rollout_batch(w, PolicyKind(UNIFORM), z, 10, rng)
    assert abs(diversity_score(tr, w.encoder, w.params)["score"] - 1 / 8) <= 0.03


def test_diversity_duplicates_cap_score(rng):
    w = identity_world()
    skills = np.vstack([np.eye(4), np.eye(4)[:1]])  # label 4 duplicates label 0
    z = np.repeat(skills, 40, axis=0)
    tr = rollout_batch(w, PolicyKind(SCRIPTED_VMF, kappa_act=math.inf), z, 5, rng)
    labels = np.tile(np.repeat(np.arange(5), 40), 5)
    res = diversity_score(tr, w.encoder, w.params, labels=labels)
    assert res["near_duplicates"] == 1
    # the two copies split credit: 3 clean classes + 2 half-credit classes out of 5
    assert res["score"] == pytest.approx((3 + 0.5 + 0.5) / 5)


def test_diversity_needs_two_skills(rng):
    w = identity_world()
    tr = rollout_batch(w, PolicyKind(SCRIPTED_VMF), np.tile(np.eye(4)[0], (3, 1)), 5, rng)
    with pytest.raises(ValueError):
        diversity_score(tr, w.encoder, w.params)


@pytest.mark.parametrize("d_state,d_skill", [(4, 2), (4, 16), (4, 4)])
def test_skill_embedding(rng, d_state, d_skill):
    M = skill_embedding(d_state, d_skill, rng)
    if d_state == d_skill:
        assert M is None
        return
    assert M.shape == (d_state, d_skill)
    small = min(d_state, d_skill)
    gram = M.T @ M if d_state > d_skill else M @ M.T
    np.testing.assert_allclose(gram, np.eye(small), atol=1e-12)
