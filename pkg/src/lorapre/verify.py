"""Named invariant checks behind ``lorapre verify``.

Every check builds its own seeded inputs and compares the implementation
against an independent construction (explicit Kronecker Hessians, finite
differences, an SVD oracle, integer arithmetic). Each returns a
:class:`CheckResult`; nothing here raises on a failed invariant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from . import regressor as reg
from .diagnostics import compute_bounds, memory_report, moment_error_report
from .linalg import damped_left_pinv, damped_right_pinv, newton_schulz5, svd_small
from .optimizers import (
    DENSE_ADAM,
    LOW_RANK_ADAM,
    AdamConfig,
    dense_adam_step,
    init_slot,
    lorapre_adam_step,
)
from .problems import gradient_self_test, low_rank_sensing_problem, quadratic_problem, tiny_mlp_problem

TABLE_SHAPES = ((512, 128), (768, 256), (1024, 256), (2048, 512))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class VerifyContext:
    """Shared state for one verification pass.

    ``corrupt_coupling`` swaps the factor rate for the plain EMA rate
    ``1 - beta``; it exists only as a negative control for the suite.
    """

    corrupt_coupling: bool = False
    _cache: Dict[str, object] = field(default_factory=dict)

    def gamma(self, beta: float, order: str = "first") -> float:
        if self.corrupt_coupling:
            return 1.0 - beta
        return reg.coupling_from_beta(beta, order).gamma

    def shadow_run(self):
        if "run" not in self._cache:
            from .training import run_training

            problem = low_rank_sensing_problem(16, 12, 2, 0.0, seed=0)
            cfg = AdamConfig(lr=0.01, rank=2)
            self._cache["run"] = run_training(problem, "lorapre_adam", cfg, steps=1000, shadow_oracle=True, seed=0)
        return self._cache["run"]


def _rel(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(x - y) / max(np.linalg.norm(y), 1e-300))


def _random_state(rng, p, q, r, lam=1e-8) -> reg.LowRankMoment:
    return reg.LowRankMoment(b=rng.normal(size=(p, r)), a=rng.normal(size=(r, q)), damping=lam)


def _random_dims(rng, max_p=8, max_q=6, max_r=3):
    p = int(rng.integers(2, max_p + 1))
    q = int(rng.integers(2, max_q + 1))
    r = int(rng.integers(1, min(p, q, max_r) + 1))
    return p, q, r


def check_coupling_values(ctx: VerifyContext) -> CheckResult:
    g1 = ctx.gamma(0.9, "first")
    g2 = ctx.gamma(0.95, "second")
    ok = abs(g1 - 0.0513167) < 1e-7 and abs(g2 - 0.0127415) < 1e-7
    return CheckResult("coupling_values", ok, f"gamma1(0.9)={g1:.7f} gamma2(0.95)={g2:.7f}")


def _decay_check(ctx, name, update, factor, order, power) -> CheckResult:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        beta = float(rng.uniform(0.5, 0.999))
        p, q, r = _random_dims(rng)
        state = _random_state(rng, p, q, r)
        new = update(state, np.zeros((p, q)), beta, ctx.gamma(beta, order))
        before = reg.reconstruct(state) ** power
        after = reg.reconstruct(new) ** power
        worst = max(worst, _rel(after, factor(beta) * before))
    return CheckResult(name, worst <= 1e-12, f"max rel err {worst:.2e} over 50 states")


def check_decay_first(ctx):
    return _decay_check(ctx, "decay_identity_first_moment",
                        lambda s, g, b, gm: reg.first_moment_update(s, g, gm), lambda b: b, "first", 1)


def check_decay_second(ctx):
    # the magnitude history decays by sqrt(beta2), its square by beta2
    return _decay_check(ctx, "decay_identity_second_moment",
                        lambda s, g, b, gm: reg.second_moment_update(s, g, gm), lambda b: b, "second", 2)


def check_decay_muon(ctx):
    return _decay_check(ctx, "decay_identity_muon",
                        lambda s, g, b, gm: reg.muon_moment_update(s, g, b, gm), lambda b: b, "first", 1)


def _fd_grads(state, g, mu, h=1e-6):
    def loss(b, a):
        return reg.regression_loss(reg.LowRankMoment(b, a, state.damping), g, mu)

    out = []
    for which in ("b", "a"):
        base = getattr(state, which)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            if which == "b":
                grad[idx] = (loss(up, state.a) - loss(down, state.a)) / (2 * h)
            else:
                grad[idx] = (loss(state.b, up) - loss(state.b, down)) / (2 * h)
        out.append(grad)
    return out


def _grad_check(name, muon: bool) -> CheckResult:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        p, q, r = _random_dims(rng)
        state = _random_state(rng, p, q, r)
        g = rng.normal(size=(p, q))
        mu = float(rng.uniform(0.5, 0.95)) if muon else 0.0
        exact = reg.regression_grads(state, g, mu)
        fd = _fd_grads(state, g, mu)
        worst = max(worst, *(_rel(f, e) for f, e in zip(fd, exact)))
    return CheckResult(name, worst <= 1e-6, f"max rel err {worst:.2e} over 20 instances")


def check_grads_plain(ctx):
    return _grad_check("regression_grads_finite_difference", muon=False)


def check_grads_muon(ctx):
    return _grad_check("muon_grads_finite_difference", muon=True)


def _vec(x):
    return np.reshape(x, -1, order="F")


def _newton_check(name, muon: bool) -> CheckResult:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        p, q, r = _random_dims(rng)
        state = _random_state(rng, p, q, r, lam=1e-12)
        g = rng.normal(size=(p, q))
        mu = float(rng.uniform(0.5, 0.95)) if muon else 0.0
        grad_b, grad_a = reg.regression_grads(state, g, mu)
        d_b, d_a = reg.newton_directions(state, g, mu)
        h_bb = np.kron(state.a @ state.a.T, np.eye(p))
        h_aa = np.kron(np.eye(q), state.b.T @ state.b)
        worst = max(worst, _rel(h_bb @ _vec(d_b), _vec(grad_b)), _rel(h_aa @ _vec(d_a), _vec(grad_a)))
    return CheckResult(name, worst <= 1e-8, f"max rel err {worst:.2e} over 20 instances")


def check_newton_plain(ctx):
    return _newton_check("newton_direction_kronecker_plain", muon=False)


def check_newton_muon(ctx):
    return _newton_check("newton_direction_kronecker_muon", muon=True)


def check_expansion(ctx) -> CheckResult:
    rng = np.random.default_rng(4)
    worst = 0.0
    q_ok = True
    for _ in range(50):
        p, q, r = _random_dims(rng)
        lam = float(10.0 ** rng.uniform(-6, -1))
        state = _random_state(rng, p, q, r, lam)
        g = rng.normal(size=(p, q))
        gamma = ctx.gamma(float(rng.uniform(0.5, 0.99)))
        new = reg.first_moment_update(state, g, gamma)
        proj = reg.projection_col(state) @ g + g @ reg.projection_row(state)
        quad = reg.quadratic_term(state, g)
        expected = (1 - gamma) ** 2 * reg.reconstruct(state) + gamma * (1 - gamma) * proj + gamma ** 2 * quad
        worst = max(worst, _rel(reg.reconstruct(new), expected))
        G = float(np.linalg.norm(g))
        q_ok &= float(np.linalg.norm(quad)) <= G * G / (4 * lam) * (1 + 1e-12)
    return CheckResult("expansion_identity", worst <= 1e-10 and q_ok,
                       f"max rel err {worst:.2e}; Q bound {'held' if q_ok else 'violated'} on 50 instances")


def check_pinv_bound(ctx) -> CheckResult:
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        r, q = int(rng.integers(1, 4)), int(rng.integers(4, 9))
        lam = float(10.0 ** rng.uniform(-8, 0))
        # singular values straddle sqrt(lam), where the bound is tight
        a = rng.normal(size=(r, q)) * math.sqrt(lam) * float(10.0 ** rng.uniform(-1, 1))
        ceiling = 1.0 / (2.0 * math.sqrt(lam))
        for pinv in (damped_right_pinv(a, lam), damped_left_pinv(a.T, lam)):
            worst = max(worst, float(np.linalg.norm(pinv, 2)) / ceiling)
    return CheckResult("damped_pinv_spectral_bound", worst <= 1 + 1e-12, f"max ||pinv||/(1/(2 sqrt(lam))) = {worst:.6f}")


def check_ns5_contract(ctx) -> CheckResult:
    rng = np.random.default_rng(6)
    lo, hi = np.inf, 0.0
    for _ in range(100):
        p, q = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        k = min(p, q)
        u, _ = np.linalg.qr(rng.normal(size=(p, k)))
        v, _ = np.linalg.qr(rng.normal(size=(q, k)))
        s = 10.0 ** rng.uniform(0, 1, size=k) * float(10.0 ** rng.uniform(-2, 2))
        s[0] = s.max()
        s[-1] = s[0] / 10.0 if k > 1 else s[0]
        out = newton_schulz5((u * s) @ v.T, 5)
        sv = svd_small(out).singular_values[:k]
        lo, hi = min(lo, float(sv.min())), max(hi, float(sv.max()))
    ok = 0.7 <= lo and hi <= 1.3
    return CheckResult("newton_schulz_contract", ok, f"singular values in [{lo:.4f}, {hi:.4f}] over 100 matrices")


def check_ns5_zero_transpose(ctx) -> CheckResult:
    rng = np.random.default_rng(7)
    zero_ok = bool(np.all(newton_schulz5(np.zeros((5, 3))) == 0))
    worst = 0.0
    for _ in range(20):
        m = rng.normal(size=(int(rng.integers(1, 17)), int(rng.integers(1, 17))))
        worst = max(worst, float(np.max(np.abs(newton_schulz5(m.T) - newton_schulz5(m).T))))
    return CheckResult("newton_schulz_zero_and_transpose", zero_ok and worst <= 1e-10,
                       f"NS5(0)=0 {zero_ok}; max transpose gap {worst:.2e}")


def check_svd_oracle(ctx) -> CheckResult:
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(int(rng.integers(1, 10)), int(rng.integers(1, 10))))
        res = svd_small(x)
        ortho = max(_rel(res.u.T @ res.u, np.eye(res.u.shape[1])), _rel(res.v.T @ res.v, np.eye(res.v.shape[1])))
        worst = max(worst, _rel(res.reconstruct(), x), ortho)
    return CheckResult("jacobi_svd_reconstruction", worst <= 1e-12, f"max rel err {worst:.2e}")


def check_als(ctx) -> CheckResult:
    rng = np.random.default_rng(9)
    g = rng.normal(size=(8, 6))
    floor = float(np.sqrt(np.sum(svd_small(g).singular_values[2:] ** 2)))
    worst = 0.0
    for seed in range(10):
        state = reg.init_low_rank(8, 6, 2, 1e-10, seed=seed)
        for _ in range(2000):
            state = reg.first_moment_update(state, g, 0.05)
        worst = max(worst, abs(float(np.linalg.norm(reg.reconstruct(state) - g)) - floor))
    return CheckResult("als_eckart_young", worst <= 1e-3, f"max |err - floor| {worst:.2e} over 10 seeds")


def check_first_step(ctx) -> CheckResult:
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(20):
        p, q, r = _random_dims(rng)
        cfg = AdamConfig(lr=1e-3, rank=r, damping=1e-12, scale=1.0)
        theta = rng.normal(size=(p, q))
        g = rng.normal(size=(p, q))
        dense, _ = dense_adam_step(init_slot(DENSE_ADAM, (p, q)), theta, g, cfg)
        low, _ = lorapre_adam_step(init_slot(LOW_RANK_ADAM, (p, q), r, 1e-12, seed=i), theta, g, cfg)
        worst = max(worst, float(np.max(np.abs(low - dense))))
    return CheckResult("first_step_equivalence", worst <= 1e-8, f"max |delta theta| gap {worst:.2e}")


def check_memory(ctx) -> CheckResult:
    ok = True
    for n, r in TABLE_SHAPES:
        rep = memory_report([("w", (n, n), LOW_RANK_ADAM)], r)
        dense = memory_report([("w", (n, n), DENSE_ADAM)], r)
        ok &= rep["total_entries"] == 2 * (n + n) * r and dense["total_entries"] == 2 * n * n
        ok &= rep["dense_total_entries"] == 2 * n * n
    return CheckResult("memory_accounting", bool(ok), f"shapes {[f'{n}/{r}' for n, r in TABLE_SHAPES]}")


def check_gradient_self_test(ctx) -> CheckResult:
    problems = {
        "quadratic": quadratic_problem(6, 5, condition=100.0, seed=0),
        "sensing": low_rank_sensing_problem(6, 5, 2, 0.0, seed=0),
        "mlp": tiny_mlp_problem(4, 5, 3, 12, seed=0),
    }
    worst = {k: gradient_self_test(pb, points=20, seed=0) for k, pb in problems.items()}
    return CheckResult("problem_gradient_self_test", max(worst.values()) <= 1e-6,
                       ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def check_recursion(ctx) -> CheckResult:
    run = ctx.shadow_run()
    rep = compute_bounds(run, run.config["beta1"], run.config["damping"])
    ok = rep.recursion_violations == 0 and rep.recursion_violations_measured == 0 and rep.E_ss <= rep.E_bound
    return CheckResult("error_recursion", ok,
                       f"violations {rep.recursion_violations}/{rep.recursion_violations_measured}; "
                       f"E_ss {rep.E_ss:.3e} <= E_bound {rep.E_bound:.3e}")


def check_moment_identity(ctx) -> CheckResult:
    run = ctx.shadow_run()
    rep = moment_error_report(run)
    ok = rep.identity_error <= 1e-12 and rep.delta_v_violations == 0
    return CheckResult("effective_moment_errors", ok,
                       f"|delta_m - beta1 E_prev| {rep.identity_error:.2e}; delta_v violations {rep.delta_v_violations}")


def check_positivity(ctx) -> CheckResult:
    run = ctx.shadow_run()
    lowest = min(min(s["v_eff_min"]) for s in run.shadow.values())
    finite = all(math.isfinite(x) for x in run.loss) and run.error is None
    return CheckResult("second_moment_positivity", lowest >= 0 and finite, f"min effective v {lowest:.3e}")


CHECKS: List[Callable[[VerifyContext], CheckResult]] = [
    check_coupling_values,
    check_decay_first,
    check_decay_second,
    check_decay_muon,
    check_grads_plain,
    check_grads_muon,
    check_newton_plain,
    check_newton_muon,
    check_expansion,
    check_pinv_bound,
    check_svd_oracle,
    check_ns5_contract,
    check_ns5_zero_transpose,
    check_als,
    check_first_step,
    check_memory,
    check_gradient_self_test,
    check_recursion,
    check_moment_identity,
    check_positivity,
]


def run_checks(corrupt_coupling: bool = False) -> List[CheckResult]:
    ctx = VerifyContext(corrupt_coupling=corrupt_coupling)
    results = []
    for check in CHECKS:
        try:
            result = check(ctx)
        except Exception as exc:  # a crashing check is a failed check
            result = CheckResult(check.__name__.removeprefix("check_"), False, f"raised {type(exc).__name__}: {exc}")
        results.append(result)
    return results
