import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorapre import regressor as reg
from lorapre.errors import NumericError, ShapeError
from lorapre.linalg import abs_elementwise


def random_state(seed, p=6, q=4, r=2, lam=1e-8):
    rng = np.random.default_rng(seed)
    return reg.LowRankMoment(rng.normal(size=(p, r)), rng.normal(size=(r, q)), lam), rng


def test_coupling_values():
    assert reg.coupling_from_beta(0.0).gamma == 1.0
    assert reg.coupling_from_beta(0.9).gamma == pytest.approx(0.0513167, abs=1e-7)
    assert reg.coupling_from_beta(0.95, "second").gamma == pytest.approx(0.0127415, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.9999))
def test_coupling_constraints(beta):
    g1 = reg.coupling_from_beta(beta, "first").gamma
    g2 = reg.coupling_from_beta(beta, "second").gamma
    assert (1 - g1) ** 2 == pytest.approx(beta, abs=1e-15)
    assert (1 - g2) ** 4 == pytest.approx(beta, abs=1e-15)


@pytest.mark.parametrize("beta", [-0.1, 1.0, 1.5])
def test_coupling_rejects_out_of_range(beta):
    with pytest.raises(ValueError):
        reg.coupling_from_beta(beta)


def test_init_low_rank():
    st_ = reg.init_low_rank(5, 4, 2, seed=3)
    assert np.array_equal(st_.b, np.zeros((5, 2)))
    assert np.array_equal(reg.reconstruct(st_), np.zeros((5, 4)))
    a1 = reg.init_low_rank(4, 4, 2, seed=42).a
    a2 = reg.init_low_rank(4, 4, 2, seed=42).a
    assert np.array_equal(a1, a2)
    assert st_.num_entries == (5 + 4) * 2
    with pytest.raises(ValueError):
        reg.init_low_rank(4, 3, 4)


def test_init_sampler_std():
    pooled = np.concatenate([reg.init_low_rank(8, 6, 2, seed=s).a.ravel() for s in range(8334)])
    assert pooled.size >= 100_000
    assert 0.018 <= pooled.std() <= 0.022


def test_full_rank_allowed():
    assert reg.init_low_rank(4, 3, 3).rank == 3


def test_loss_and_grads_at_minimum_and_zero_b():
    state, rng = random_state(0)
    g = reg.reconstruct(state)
    assert reg.regression_loss(state, g) == 0.0
    for grad in reg.regression_grads(state, g):
        assert np.array_equal(grad, np.zeros_like(grad))
    state = reg.LowRankMoment(np.zeros((6, 2)), rng.normal(size=(2, 4)))
    g = rng.normal(size=(6, 4))
    assert reg.regression_loss(state, g) == pytest.approx(0.5 * np.sum(g * g))
    gb, ga = reg.regression_grads(state, g)
    np.testing.assert_allclose(gb, -g @ state.a.T)
    assert np.array_equal(ga, np.zeros_like(ga))


def fd_grads(state, g, mu=0.0, h=1e-6):
    out = []
    for which in ("b", "a"):
        base = getattr(state, which)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            if which == "b":
                lu = reg.regression_loss(reg.LowRankMoment(up, state.a), g, mu)
                ld = reg.regression_loss(reg.LowRankMoment(down, state.a), g, mu)
            else:
                lu = reg.regression_loss(reg.LowRankMoment(state.b, up), g, mu)
                ld = reg.regression_loss(reg.LowRankMoment(state.b, down), g, mu)
            grad[idx] = (lu - ld) / (2 * h)
        out.append(grad)
    return out


@pytest.mark.parametrize("mu", [0.0, 0.9])
def test_grads_match_finite_differences(mu):
    state, rng = random_state(1)
    g = rng.normal(size=(6, 4))
    for exact, fd in zip(reg.regression_grads(state, g, mu), fd_grads(state, g, mu)):
        assert np.linalg.norm(exact - fd) / np.linalg.norm(exact) <= 1e-6


def test_grad_shape_error():
    state, _ = random_state(2)
    with pytest.raises(ShapeError):
        reg.regression_grads(state, np.zeros((4, 6)))


def vec(x):
    return x.reshape(-1, order="F")


@pytest.mark.parametrize("mu", [0.0, 0.5, 0.95])
def test_newton_direction_kronecker(mu):
    state, rng = random_state(3, lam=1e-12)
    g = rng.normal(size=(6, 4))
    gb, ga = reg.regression_grads(state, g, mu)
    db, da = reg.newton_directions(state, g, mu)
    h_bb = np.kron(state.a @ state.a.T, np.eye(6))
    h_aa = np.kron(np.eye(4), state.b.T @ state.b)
    assert np.linalg.norm(h_bb @ vec(db) - vec(gb)) / np.linalg.norm(gb) <= 1e-8
    assert np.linalg.norm(h_aa @ vec(da) - vec(ga)) / np.linalg.norm(ga) <= 1e-8


def test_zero_gradient_decay_exact():
    state, _ = random_state(4)
    beta = 0.9
    gamma = reg.coupling_from_beta(beta).gamma
    new = reg.first_moment_update(state, np.zeros((6, 4)), gamma)
    np.testing.assert_array_equal(new.b, (1 - gamma) * state.b)
    np.testing.assert_array_equal(new.a, (1 - gamma) * state.a)
    old = reg.reconstruct(state)
    assert np.linalg.norm(reg.reconstruct(new) - beta * old) <= 1e-12 * np.linalg.norm(old)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 10_000))
def test_zero_gradient_decay_all_variants(beta, seed):
    state, _ = random_state(seed)
    old = reg.reconstruct(state)
    zero = np.zeros((6, 4))
    g1 = reg.coupling_from_beta(beta).gamma
    g2 = reg.coupling_from_beta(beta, "second").gamma
    if g1 > 0:
        first = reg.reconstruct(reg.first_moment_update(state, zero, g1))
        muon = reg.reconstruct(reg.muon_moment_update(state, zero, beta, g1))
        assert np.linalg.norm(first - beta * old) <= 1e-12 * np.linalg.norm(old)
        assert np.linalg.norm(muon - beta * old) <= 1e-12 * np.linalg.norm(old)
    if g2 > 0:
        second = reg.reconstruct(reg.second_moment_update(state, zero, g2))
        assert np.linalg.norm(second ** 2 - beta * old ** 2) <= 1e-12 * np.linalg.norm(old ** 2)


def test_identity_right_factor_case():
    rng = np.random.default_rng(5)
    state = reg.LowRankMoment(rng.normal(size=(5, 3)), np.eye(3), 1e-12)
    g = rng.normal(size=(5, 3))
    new = reg.first_moment_update(state, g, 1.0)
    np.testing.assert_allclose(new.b, g, atol=1e-10)
    expected_a = np.linalg.solve(state.b.T @ state.b + 1e-12 * np.eye(3), state.b.T @ g)
    np.testing.assert_allclose(new.a, expected_a, atol=1e-10)


def best_rank_error(g, r):
    s = np.linalg.svd(g, compute_uv=False)
    return math.sqrt(np.sum(s[r:] ** 2))


def test_first_moment_als_converges_to_eckart_young():
    g = np.random.default_rng(6).normal(size=(8, 6))
    floor = best_rank_error(g, 2)
    state = reg.init_low_rank(8, 6, 2, 1e-10, seed=0)
    for _ in range(2000):
        state = reg.first_moment_update(state, g, 0.05)
    assert abs(np.linalg.norm(reg.reconstruct(state) - g) - floor) <= 1e-3
    # alternating-least-squares stationarity
    from lorapre.linalg import damped_left_pinv, damped_right_pinv
    assert np.linalg.norm(state.b - g @ damped_right_pinv(state.a, 1e-10)) <= 1e-6
    assert np.linalg.norm(state.a - damped_left_pinv(state.b, 1e-10) @ g) <= 1e-6


def test_second_moment_is_first_moment_on_abs():
    state, rng = random_state(7)
    g = rng.normal(size=(6, 4))
    a = reg.second_moment_update(state, g, 0.1)
    b = reg.first_moment_update(state, abs_elementwise(g), 0.1)
    assert np.array_equal(a.b, b.b) and np.array_equal(a.a, b.a)


def test_second_moment_converges_to_best_rank_of_abs():
    g = np.random.default_rng(8).normal(size=(8, 6))
    state = reg.init_low_rank(8, 6, 2, 1e-10, seed=1)
    for _ in range(2000):
        state = reg.second_moment_update(state, g, 0.05)
    assert abs(np.linalg.norm(reg.reconstruct(state) - np.abs(g)) - best_rank_error(np.abs(g), 2)) <= 1e-3


def test_muon_update_mu_zero_is_first_moment_bitwise():
    state, rng = random_state(9)
    g = rng.normal(size=(6, 4))
    a = reg.muon_moment_update(state, g, 0.0, 0.3)
    b = reg.first_moment_update(state, g, 0.3)
    assert np.array_equal(a.b, b.b) and np.array_equal(a.a, b.a)


def test_update_rejects_bad_rate_and_reports_factor():
    state, rng = random_state(10)
    with pytest.raises(ValueError):
        reg.first_moment_update(state, np.zeros((6, 4)), 0.0)
    # a tiny right factor has a huge pseudo-inverse, so g @ A^+ overflows
    tiny = reg.LowRankMoment(state.b, 1e-3 * state.a, 1e-12)
    huge = np.full((6, 4), 1e307)
    with pytest.raises(NumericError, match="factor B"):
        with np.errstate(all="ignore"):
            reg.first_moment_update(tiny, huge, 1.0)


def test_reconstruct_cases():
    u = np.array([[1.0], [2.0], [3.0]])
    v = np.array([[4.0, 5.0]])
    assert np.array_equal(reg.reconstruct(reg.LowRankMoment(u, v)), np.outer(u, v))
    state, _ = random_state(11)
    np.testing.assert_allclose(reg.reconstruct(state), state.b @ state.a, rtol=0, atol=0)


def test_effective_moments():
    state, rng = random_state(12)
    g = rng.normal(size=(6, 4))
    fresh = reg.init_low_rank(6, 4, 2)
    np.testing.assert_array_equal(reg.effective_first_moment(fresh, g, 0.9), (1 - 0.9) * g)
    m = reg.reconstruct(state)
    np.testing.assert_allclose(reg.effective_first_moment(state, m, 0.9), m, rtol=1e-15)
    eff = reg.effective_first_moment(state, g, 0.8)
    for i in range(6):
        for j in range(4):
            assert eff[i, j] == pytest.approx(0.8 * m[i, j] + 0.2 * g[i, j], rel=1e-15)
    v0 = reg.effective_second_moment(fresh, g, 0.95)
    np.testing.assert_allclose(v0, (1 - 0.95) * g * g, rtol=1e-15)
    assert np.all(reg.effective_second_moment(state, np.zeros((6, 4)), 0.95) >= 0)
    np.testing.assert_allclose(reg.effective_muon_moment(state, g, 0.9), 0.9 * m + g)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.999))
def test_effective_second_moment_nonnegative(seed, beta2):
    state, rng = random_state(seed)
    g = rng.normal(size=(6, 4)) * 10 ** rng.uniform(-5, 5)
    assert np.all(reg.effective_second_moment(state, g, beta2) >= 0)


def test_dense_ema():
    g = np.random.default_rng(13).normal(size=(3, 2))
    out = reg.dense_ema_update(reg.DenseMoment(np.zeros((3, 2))), g, 0.9)
    np.testing.assert_allclose(out.value, 0.1 * g)
    same = reg.dense_ema_update(reg.DenseMoment(g), g, 0.9)
    np.testing.assert_allclose(same.value, g, rtol=1e-15)


def test_dense_ema_matches_weighted_sum():
    rng = np.random.default_rng(14)
    gs = rng.normal(size=(100, 3, 3))
    state = reg.DenseMoment(np.zeros((3, 3)))
    for g in gs:
        state = reg.dense_ema_update(state, g, 0.9)
    direct = sum((1 - 0.9) * 0.9 ** (100 - t) * gs[t - 1] for t in range(1, 101))
    assert np.linalg.norm(state.value - direct) / np.linalg.norm(direct) <= 1e-12


def test_projections():
    eye = reg.LowRankMoment(np.ones((3, 3)), np.eye(3), 1e-12)
    np.testing.assert_allclose(reg.projection_row(eye), np.eye(3), atol=1e-10)
    zero_b = reg.LowRankMoment(np.zeros((5, 2)), np.ones((2, 3)))
    assert np.array_equal(reg.projection_col(zero_b), np.zeros((5, 5)))
    state, _ = random_state(15, p=7, q=5, r=2, lam=1e-12)
    for proj in (reg.projection_row(state), reg.projection_col(state)):
        np.testing.assert_allclose(proj @ proj, proj, atol=1e-8)
        np.testing.assert_allclose(proj, proj.T, atol=1e-8)
        eig = np.linalg.eigvalsh((proj + proj.T) / 2)
        assert np.sum(eig > 0.5) == 2
        assert np.all(np.minimum(np.abs(eig), np.abs(eig - 1)) <= 1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-6, 1e-1), st.floats(0.01, 0.5))
def test_expansion_identity_and_quadratic_bound(seed, lam, gamma):
    state, rng = random_state(seed, lam=lam)
    g = rng.normal(size=(6, 4))
    new = reg.reconstruct(reg.first_moment_update(state, g, gamma))
    proj = reg.projection_col(state) @ g + g @ reg.projection_row(state)
    quad = reg.quadratic_term(state, g)
    expected = (1 - gamma) ** 2 * reg.reconstruct(state) + gamma * (1 - gamma) * proj + gamma ** 2 * quad
    assert np.linalg.norm(new - expected) <= 1e-10 * np.linalg.norm(expected)
    assert np.linalg.norm(quad) <= np.sum(g * g) / (4 * lam) * (1 + 1e-12)


def test_subspace_residuals():
    rng = np.random.default_rng(16)
    u = rng.normal(size=(8, 2))
    v = rng.normal(size=(2, 6))
    g = u @ v
    # factors spanning exactly the column and row spaces of g
    state = reg.LowRankMoment(u, v, 1e-12)
    # the two-projector expression counts P_B g P_A twice, leaving ||g||
    assert reg.subspace_residual(state, g) == pytest.approx(np.linalg.norm(g), rel=1e-8)
    assert reg.subspace_capture_residual(state, g) <= 1e-8 * np.linalg.norm(g)
    fresh = reg.init_low_rank(8, 6, 2)
    assert reg.subspace_residual(fresh, g) <= np.linalg.norm(g) * (1 + 1e-12)


def test_state_shapes_and_memory():
    state = reg.init_low_rank(16, 12, 3)
    assert state.shape == (16, 12)
    assert state.num_entries == (16 + 12) * 3 < 16 * 12
    with pytest.raises(ShapeError):
        reg.LowRankMoment(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        reg.LowRankMoment(np.zeros((3, 2)), np.zeros((2, 4)), damping=0.0)
