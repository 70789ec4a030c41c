import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from csflab.geometry import (
    FIXED_SET,
    RESAMPLE,
    InvalidDimensionError,
    SkillSet,
    VmfParams,
    householder_from_e1,
    is_affine_generator,
    log_bessel_iv,
    mean_resultant_length,
    sample_uniform_sphere,
    sample_vmf,
    sample_vmf_batch,
    skill_conditioning,
    vmf_log_density,
)


def simplex(d):
    # d+1 unit vectors with pairwise inner product -1/d
    e = np.eye(d + 1) - 1.0 / (d + 1)
    u, s, vt = np.linalg.svd(e)
    pts = e @ vt[:d].T
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def test_zero_dimension_rejected(rng):
    with pytest.raises(InvalidDimensionError):
        sample_uniform_sphere(0, rng)


def test_d1_is_a_fair_sign(rng):
    x = sample_uniform_sphere(1, rng, size=100_000)
    assert set(np.unique(x)) == {-1.0, 1.0}
    assert abs(np.mean(x == 1.0) - 0.5) < 0.01


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 32), seed=st.integers(0, 2**32 - 1))
def test_uniform_draws_are_unit(d, seed):
    x = sample_uniform_sphere(d, np.random.default_rng(seed), size=50)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)


def test_uniform_mean_vanishes(rng):
    x = sample_uniform_sphere(3, rng, size=1_000_000)
    assert np.linalg.norm(x.mean(axis=0)) <= 0.003


def test_householder_maps_e1(rng):
    for d in (2, 5, 9):
        m = sample_uniform_sphere(d, rng)
        H = householder_from_e1(m)
        np.testing.assert_allclose(H[:, 0], m, atol=1e-14)
        np.testing.assert_allclose(H @ H.T, np.eye(d), atol=1e-13)


def test_vmf_kappa_zero_is_uniform(rng):
    x = sample_vmf(VmfParams(np.array([0.0, 0.6, 0.8]), 0.0), rng, size=1_000_000)
    assert np.linalg.norm(x.mean(axis=0)) <= 0.003


def test_vmf_huge_kappa_concentrates(rng):
    e1 = np.eye(4)[0]
    x = sample_vmf(VmfParams(e1, 1e6), rng, size=10_000)
    assert np.max(np.linalg.norm(x - e1, axis=1)) < 0.01


def test_vmf_infinite_kappa_is_point_mass(rng):
    m = sample_uniform_sphere(5, rng)
    x = sample_vmf(VmfParams(m, math.inf), rng, size=10)
    np.testing.assert_array_equal(x, np.tile(m, (10, 1)))


def test_vmf_mean_resultant_length_d3(rng):
    x = sample_vmf(VmfParams(np.array([0.0, 0.0, 1.0]), 2.0), rng, size=1_000_000)
    langevin = 1 / math.tanh(2.0) - 0.5
    assert abs(np.linalg.norm(x.mean(axis=0)) - langevin) <= 0.01
    assert abs(langevin - 0.5373) < 1e-4


@pytest.mark.parametrize("d", [2, 3, 4, 7, 16])
@pytest.mark.parametrize("kappa", [0.0, 1e-3, 1.0, 10.0, 1e6])
def test_vmf_unit_norm_and_direction(d, kappa):
    rng = np.random.default_rng(d * 1000 + int(min(kappa, 1e3)))
    m = sample_uniform_sphere(d, rng)
    x = sample_vmf(VmfParams(m, kappa), rng, size=100_000)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-9)
    mean = x.mean(axis=0)
    if kappa >= 10:
        assert mean @ m / np.linalg.norm(mean) >= 0.99
    # first moment matches the Bessel ratio
    assert abs(np.mean(x @ m) - mean_resultant_length(d, kappa)) < 0.01


def test_vmf_batch_matches_per_row_means(rng):
    means = sample_uniform_sphere(3, rng, size=4)
    x = sample_vmf_batch(np.repeat(means, 50_000, axis=0), 5.0, rng).reshape(4, 50_000, 3)
    for i in range(4):
        assert abs(np.mean(x[i] @ means[i]) - mean_resultant_length(3, 5.0)) < 0.01


def test_mixture_over_uniform_skills_is_rotation_invariant(rng):
    n = 1_000_000
    z = sample_uniform_sphere(3, rng, size=n)
    x = sample_vmf_batch(z, 10.0, rng)
    axes = sample_uniform_sphere(3, rng, size=10)
    # projection of a uniform point on S^2 onto any axis is Uniform[-1, 1]
    for ax in axes:
        ks = stats.kstest(x @ ax, "uniform", args=(-1, 2)).statistic
        assert ks <= 0.01


@pytest.mark.parametrize("nu", [0.0, 0.5, 1.0, 1.5, 7.0])
@pytest.mark.parametrize("x", [1e-8, 0.3, 2.0, 25.0, 49.9, 50.1, 300.0, 1e5])
def test_log_bessel_matches_scipy(nu, x):
    ref = math.log(special.ive(nu, x)) + x
    assert abs(log_bessel_iv(nu, x) - ref) <= 1e-10 * max(1.0, abs(ref))


def test_log_density_uniform_case(rng):
    p = VmfParams(np.array([1.0, 0.0, 0.0]), 0.0)
    x = sample_uniform_sphere(3, rng, size=20)
    np.testing.assert_allclose(vmf_log_density(p, x), math.log(1 / (4 * math.pi)), atol=1e-12)


def test_log_density_depends_only_on_cosine(rng):
    m = np.array([0.0, 0.0, 1.0])
    p = VmfParams(m, 3.0)
    x = sample_uniform_sphere(3, rng, size=50)
    th = 0.7
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
    np.testing.assert_allclose(vmf_log_density(p, x), vmf_log_density(p, x @ rot.T), atol=1e-12)


@pytest.mark.parametrize("d,kappa", [(3, 2.0), (4, 10.0), (8, 60.0)])
def test_log_density_normalizes(rng, d, kappa):
    p = VmfParams(np.eye(d)[0], kappa)
    if d == 3:
        # Monte Carlo over the uniform sphere times its area
        x = sample_uniform_sphere(3, rng, size=1_000_000)
        assert abs(np.mean(np.exp(vmf_log_density(p, x))) * 4 * math.pi - 1) <= 0.01
    # quadrature over the cosine marginal: area(S^{d-2}) (1-t^2)^{(d-3)/2} dt
    t = np.linspace(-1, 1, 200_001)
    area = 2 * math.pi ** ((d - 1) / 2) / math.gamma((d - 1) / 2)
    x = np.zeros((t.size, d))
    x[:, 0] = t
    x[:, 1] = np.sqrt(1 - t ** 2)
    f = np.exp(vmf_log_density(p, x)) * area * (1 - t ** 2) ** ((d - 3) / 2)
    assert abs(np.trapezoid(f, t) - 1) < 1e-3


def test_log_density_dimension_mismatch():
    with pytest.raises(ValueError):
        vmf_log_density(VmfParams(np.eye(3)[0], 1.0), np.eye(4)[0])


def test_non_unit_mean_rejected():
    with pytest.raises(ValueError):
        VmfParams(np.array([1.0, 1.0]), 1.0)
    with pytest.raises(ValueError):
        VmfParams(np.array([1.0, 0.0]), -1.0)


@pytest.mark.parametrize("d", [2, 3, 4, 6])
def test_simplex_is_affine_generator(d):
    res = is_affine_generator(simplex(d))
    assert res.is_generator and res.rank == d
    assert res.centered_min_singular > 0


def test_degenerate_sets_fail(rng):
    z = sample_uniform_sphere(4, rng)
    assert not is_affine_generator(np.tile(z, (4, 1))).is_generator
    # four points, i.e. at most 3 independent differences in R^4
    assert not is_affine_generator(sample_uniform_sphere(4, rng, size=4)).is_generator
    line = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    assert not is_affine_generator(line).is_generator
    assert abs(skill_conditioning(line)) <= 1e-12


def test_64_uniform_skills_match_svd_oracle(rng):
    z = sample_uniform_sphere(4, rng, size=64)
    res = is_affine_generator(z)
    assert res.is_generator
    assert np.linalg.matrix_rank(z[1:] - z[0]) == 4
    oracle = np.linalg.svd(z - z.mean(0), compute_uv=False)[3]
    assert skill_conditioning(z) == pytest.approx(oracle, rel=1e-12)


def _well_conditioned(rng, d):
    q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
    q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q1 @ np.diag(rng.uniform(0.5, 2.0, d)) @ q2


@pytest.mark.parametrize("d", [3, 4])
def test_verdict_invariant_under_linear_images(rng, d):
    sets = [simplex(d), np.tile(simplex(d)[:1], (5, 1)), simplex(d)[:d]]
    for z in sets:
        base = is_affine_generator(z).is_generator
        for _ in range(100):
            img = z @ _well_conditioned(rng, d).T
            img /= np.linalg.norm(img, axis=1, keepdims=True)
            assert is_affine_generator(img).is_generator == base


def test_skillset_modes(rng):
    fixed = SkillSet.uniform(3, 4, rng, FIXED_SET)
    before = fixed.skills.copy()
    fixed.refresh(rng)
    np.testing.assert_array_equal(fixed.skills, before)
    drawn = fixed.draw(rng, 100)
    assert all(any(np.array_equal(r, s) for s in before) for r in drawn)
    res = SkillSet.uniform(3, 4, rng, RESAMPLE)
    before = res.skills.copy()
    res.refresh(rng)
    assert not np.array_equal(res.skills, before)
    with pytest.raises(ValueError):
        SkillSet(np.array([[2.0, 0.0]]))
