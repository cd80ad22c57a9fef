import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorapre.diagnostics import (
    compute_bounds,
    error_bound,
    intrinsic_variance,
    memory_report,
    moment_error_report,
    popoviciu_check,
    popoviciu_gap,
    quadratic_ceiling,
    residual_ceiling,
    run_bounds,
)
from lorapre.optimizers import DENSE_ADAM, LOW_RANK_ADAM, AdamConfig, ParamSpec
from lorapre.problems import Problem, low_rank_sensing_problem, quadratic_problem
from lorapre.training import run_training


@pytest.fixture(scope="module")
def sensing_run():
    pb = low_rank_sensing_problem(16, 12, 2, seed=0)
    return run_training(pb, "lorapre_adam", AdamConfig(lr=0.01, rank=2), steps=1000, shadow_oracle=True)


def test_error_bound_hand_values():
    # delta = 0 and a vanishing quadratic term
    assert error_bound(0.9, 1.0, 0.0, 0.0) == pytest.approx(0.51317, abs=1e-5)
    assert error_bound(0.9, 1.0, 0.0, quadratic_ceiling(1.0, 1e12)) == pytest.approx(1 / (1 + math.sqrt(0.9)))
    assert error_bound(0.0, 2.0, 5.0, 3.0) == 2.0 + 3.0
    assert quadratic_ceiling(2.0, 0.5) == 2.0
    assert intrinsic_variance(16, 2.0) == 4.0


def test_error_bound_is_residual_over_one_minus_beta():
    rng = np.random.default_rng(0)
    for _ in range(100):
        beta, G, delta, cq = rng.uniform(0, 0.999), *rng.uniform(0, 10, size=3)
        lhs = error_bound(beta, G, delta, cq)
        rhs = residual_ceiling(beta, G, delta, cq) / (1 - beta)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_sensing_run_bounds(sensing_run):
    rep = compute_bounds(sensing_run, 0.9, 1e-8)
    assert rep.recursion_violations == 0
    assert rep.recursion_violations_measured == 0
    assert rep.E_ss <= rep.E_bound
    assert rep.C_Q == quadratic_ceiling(rep.G, 1e-8)
    assert rep.Delta_res == residual_ceiling(0.9, rep.G, rep.delta, rep.C_Q)
    assert rep.floor_term == (rep.E_bound + rep.sigma_total_sq) ** 2
    assert set(rep.as_dict()) >= {"G", "G_inf", "delta", "C_Q", "Delta_res", "E_bound", "E_ss", "recursion_violations"}
    # pure function of the run
    assert compute_bounds(sensing_run, 0.9, 1e-8) == rep
    assert set(run_bounds(sensing_run)) == {"theta"}


def test_bounds_need_shadow():
    rec = run_training(quadratic_problem(4, 3), "adam", AdamConfig(), steps=3)
    with pytest.raises(ValueError):
        compute_bounds(rec, 0.9, 1e-8)
    with pytest.raises(ValueError):
        moment_error_report(rec)
    assert run_bounds(rec) == {}


def test_moment_error_identity(sensing_run):
    rep = moment_error_report(sensing_run)
    assert rep.delta_m[0] == 0.0 and rep.delta_v[0] == 0.0
    assert rep.identity_error <= 1e-12
    assert rep.delta_v_violations == 0
    assert len(rep.delta_v_step_ceiling) == len(rep.delta_v) == 1000


class BurstThenSilence(Problem):
    """Random gradients for the first ``burst`` steps, then exact zeros."""

    def __init__(self, shape, burst):
        self.shape = shape
        self.burst = burst
        self.param_specs = [ParamSpec("theta", shape)]

    def init_params(self):
        return [np.zeros(self.shape)]

    def loss(self, params):
        return 0.0

    def exact_grads(self, params):
        return [np.zeros(self.shape)]

    def grads(self, params, step=0):
        if step > self.burst:
            return [np.zeros(self.shape)]
        return [np.random.default_rng(step).normal(size=self.shape)]


def test_zero_gradient_stream_decays_delta_m():
    rec = run_training(BurstThenSilence((8, 6), 20), "lorapre_adam", AdamConfig(rank=2), steps=40, shadow_oracle=True)
    dm = moment_error_report(rec).delta_m
    for t in range(22, 40):
        assert dm[t] == pytest.approx(0.9 * dm[t - 1], rel=1e-10)


def test_popoviciu_scalar_and_constant_cases():
    gaps, g_inf = popoviciu_gap(np.random.default_rng(1).uniform(0, 1, size=500), 0.9)
    assert max(gaps) <= 0.25 and g_inf <= 1
    gaps, _ = popoviciu_gap([np.full((3, 3), 2.0)] * 400, 0.9)
    assert gaps[-1] <= 1e-12


def test_popoviciu_alternating_extremes():
    G = 3.0
    stream = [np.full((4, 4), G * (t % 2)) for t in range(400)]
    gaps, g_inf = popoviciu_gap(stream, 0.95)
    ceiling = intrinsic_variance(16, g_inf)
    assert max(gaps) <= ceiling
    # the variance regime is genuinely exercised
    assert max(gaps) >= 0.5 * ceiling


def test_popoviciu_check_on_run(sensing_run):
    rep = popoviciu_check(sensing_run)
    assert rep.ok and rep.max_gap <= rep.ceiling


def test_memory_report_examples():
    rep = memory_report([("w", (512, 512), LOW_RANK_ADAM)], 128)
    assert rep["total_entries"] == 262144
    assert rep["dense_total_entries"] == 524288
    assert rep["ratio"] == 0.5 and rep["ratio_exact"] == "1/2"
    # break-even rank pq/(p+q)
    rep = memory_report([("w", (12, 6), LOW_RANK_ADAM)], 4)
    assert rep["ratio_exact"] == "1/1"
    rep = memory_report([("bias", (37,), DENSE_ADAM)], 8)
    assert rep["total_entries"] == 74


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 4096), st.integers(2, 4096), st.integers(1, 512))
def test_memory_ratio_exact(p, q, r):
    rep = memory_report([("w", (p, q), LOW_RANK_ADAM)], r)
    assert rep["total_entries"] == 2 * (p + q) * r
    assert Fraction(rep["ratio_exact"]) == Fraction((p + q) * r, p * q)
