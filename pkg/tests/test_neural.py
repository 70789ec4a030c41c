import numpy as np
import pytest

from csflab.neural import (
    Layout,
    MlpSpec,
    OptimState,
    backward,
    forward,
    init_params,
    leaky_relu,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)

ARCHS = [
    MlpSpec(16, 4),
    MlpSpec(16, 2),
    MlpSpec(16, 3),
    MlpSpec(16, 8),
    MlpSpec(16, 16),
    MlpSpec(16, 4, skip_connections=False),
    MlpSpec(5, 3, hidden=(7,)),
    MlpSpec(4, 4, hidden=()),
]


def naive_forward(spec, params, x):
    # layer-by-layer re-implementation with explicit loops over units
    p = Layout.for_spec(spec).unpack(params)
    h = list(x)
    n_layers = len(spec.hidden) + 1
    for i in range(n_layers):
        W, b = p[f"W{i}"], p[f"b{i}"]
        z = [sum(W[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(W.shape[0])]
        h = [v if v > 0 or i == n_layers - 1 else spec.negative_slope * v for v in z]
    if spec.skip_connections:
        Ws = p["W_skip"]
        h = [h[r] + sum(Ws[r, c] * x[c] for c in range(len(x))) for r in range(len(h))]
    return np.array(h)


def random_params(spec, rng):
    return rng.normal(size=Layout.for_spec(spec).size) * 0.3


def test_zero_params_give_zero_output(rng):
    spec = MlpSpec(16, 4)
    y, _ = forward(spec, np.zeros(Layout.for_spec(spec).size), rng.normal(size=(5, 16)))
    np.testing.assert_array_equal(y, 0)


def test_single_linear_layer(rng):
    spec = MlpSpec(3, 2, hidden=(), skip_connections=False)
    params = random_params(spec, rng)
    p = Layout.for_spec(spec).unpack(params)
    x = rng.normal(size=3)
    y, _ = forward(spec, params, x)
    np.testing.assert_allclose(y, p["W0"] @ x + p["b0"], atol=1e-15)


@pytest.mark.parametrize("spec", [MlpSpec(6, 3, hidden=(5, 4)), MlpSpec(6, 3, hidden=(5,), skip_connections=False)])
def test_forward_matches_naive(spec, rng):
    params = random_params(spec, rng)
    for x in rng.normal(size=(10, spec.input_dim)):
        np.testing.assert_allclose(forward(spec, params, x)[0], naive_forward(spec, params, x), atol=1e-12)


def test_forward_is_pure(rng):
    spec = MlpSpec(16, 4)
    params = random_params(spec, rng)
    x = rng.normal(size=(8, 16))
    a, _ = forward(spec, params, x)
    b, _ = forward(spec, params, x)
    assert a.tobytes() == b.tobytes()


def test_dimension_mismatch(rng):
    spec = MlpSpec(16, 4)
    with pytest.raises(ValueError):
        forward(spec, init_params(spec, rng), np.zeros(15))
    _, tape = forward(spec, init_params(spec, rng), np.zeros(16))
    with pytest.raises(ValueError):
        backward(spec, init_params(spec, rng), tape, np.zeros(3))


def test_zero_upstream_gives_zero_gradient(rng):
    spec = MlpSpec(16, 4)
    params = random_params(spec, rng)
    _, tape = forward(spec, params, rng.normal(size=(3, 16)))
    g, gx = backward(spec, params, tape, np.zeros((3, 4)))
    assert not g.any() and not gx.any()


def test_linear_weight_gradient_is_outer_product(rng):
    spec = MlpSpec(3, 2, hidden=(), skip_connections=False)
    params = random_params(spec, rng)
    x, u = rng.normal(size=3), rng.normal(size=2)
    _, tape = forward(spec, params, x)
    g, _ = backward(spec, params, tape, u)
    np.testing.assert_allclose(Layout.for_spec(spec).unpack(g)["W0"], np.outer(u, x), atol=1e-15)


def finite_difference_check(spec, rng, n_coords=1000, h=1e-5):
    params = init_params(spec, rng)
    params += rng.normal(size=params.size) * 0.05  # nonzero biases
    x = rng.normal(size=(4, spec.input_dim))
    u = rng.normal(size=(4, spec.output_dim))
    _, tape = forward(spec, params, x)
    g, gx = backward(spec, params, tape, u)

    def f(p, xx=x):
        return float(np.sum(forward(spec, p, xx)[0] * u))

    def f_diff(p_plus, p_minus):
        # difference the outputs before reducing, which keeps rounding noise near 1e-10
        return float(np.sum((forward(spec, p_plus, x)[0] - forward(spec, p_minus, x)[0]) * u))

    worst, used = 0.0, 0
    for i in rng.permutation(params.size):
        if used == n_coords:
            break
        e = np.zeros_like(params)
        e[i] = h
        # a step across an activation kink has no derivative to compare against
        if any(np.any((a > 0) != (b > 0)) for a, b in zip(forward(spec, params + e, x)[1]["pres"],
                                                           forward(spec, params - e, x)[1]["pres"])):
            continue
        used += 1
        num = f_diff(params + e, params - e) / (2 * h)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-4))
    for j in range(spec.input_dim):
        e = np.zeros_like(x)
        e[:, j] = h
        num = (f(params, x + e) - f(params, x - e)) / (2 * h)
        worst = max(worst, abs(num - gx[:, j].sum()) / max(abs(num), 1e-4))
    return worst


@pytest.mark.parametrize("spec", ARCHS, ids=lambda s: f"{s.input_dim}-{s.hidden}-{s.output_dim}-skip{int(s.skip_connections)}")
def test_gradient_matches_finite_differences(spec, rng):
    assert finite_difference_check(spec, rng) < 1e-5


def test_init_scale(rng):
    spec = MlpSpec(64, 4, hidden=(512,))
    p = Layout.for_spec(spec).unpack(init_params(spec, rng))
    assert p["W0"].std() == pytest.approx(1 / 8, rel=0.02)
    assert not p["b0"].any()


def test_optimizer_zero_gradient(rng):
    params = rng.normal(size=10)
    st = OptimState.zeros_like(params)
    new, _ = optimizer_step(st, params, np.zeros(10))
    np.testing.assert_array_equal(new, params)


def test_optimizer_moves_against_constant_gradient(rng):
    params = rng.normal(size=5)
    g = rng.normal(size=5)
    st = OptimState.zeros_like(params, lr=1e-2)
    prev = params
    for _ in range(100):
        new, st = optimizer_step(st, prev, g)
        assert np.all(np.sign(new - prev) == -np.sign(g))
        prev = new


def test_optimizer_solves_quadratic_bowl(rng):
    H = np.diag([1.0, 3.0, 10.0])
    target = rng.normal(size=3)
    x = np.zeros(3)
    st = OptimState.zeros_like(x, lr=0.05)
    for _ in range(5000):
        grad = H @ (x - target)
        if np.linalg.norm(grad) < 1e-6:
            break
        x, st = optimizer_step(st, x, grad)
    assert np.linalg.norm(H @ (x - target)) < 1e-6


def test_optimizer_rejects_non_finite(rng):
    params = rng.normal(size=4)
    st = OptimState.zeros_like(params)
    bad = np.array([1.0, np.nan, 0.0, 1.0])
    new, st = optimizer_step(st, params, bad)
    np.testing.assert_array_equal(new, params)
    assert st.rejected == 1 and st.step == 0


def test_checkpoint_round_trip(tmp_path, rng):
    spec = MlpSpec(16, 4)
    params = random_params(spec, rng)
    json_path, bin_path = save_checkpoint(tmp_path / "enc", spec, params, seed=9, step=12)
    assert bin_path.stat().st_size == 8 * params.size
    assert np.frombuffer(bin_path.read_bytes(), dtype="<f8")[0] == params[0]
    spec2, params2, header = load_checkpoint(tmp_path / "enc")
    assert spec2 == spec and header["step"] == 12 and header["seed"] == 9
    np.testing.assert_array_equal(params2, params)


def test_leaky_relu():
    np.testing.assert_array_equal(leaky_relu(np.array([-2.0, 0.0, 3.0]), 0.2), [-0.4, 0.0, 3.0])
