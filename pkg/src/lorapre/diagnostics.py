"""Empirical checks of the factor-tracking error bounds on recorded runs.

All constants are computed from quantities measured on the run itself
(largest gradient norms, largest subspace residual), so every check is
self-contained.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

RECURSION_TOL = 1e-9
STEADY_FRACTION = 0.1

_DENSE_EQUIVALENT = {
    "DenseAdam": 2, "LowRankAdam": 2, "DenseMuon": 1, "LowRankMuon": 1,
}


def residual_ceiling(beta1: float, G: float, delta: float, C_Q: float) -> float:
    s = math.sqrt(beta1)
    return (1 - s) * G + s * (1 - s) * delta + (1 - s) ** 2 * C_Q


def error_bound(beta1: float, G: float, delta: float, C_Q: float) -> float:
    """Steady-state ceiling on ``||m_t - mhat_t||_F``; equals ``residual_ceiling / (1 - beta1)``."""
    s = math.sqrt(beta1)
    return (G + s * delta + (1 - s) * C_Q) / (1 + s)


def quadratic_ceiling(G: float, lam: float) -> float:
    return G * G / (4.0 * lam)


def intrinsic_variance(d: int, G_inf: float) -> float:
    """Frobenius ceiling on the mean-of-squares minus square-of-mean gap."""
    return math.sqrt(d) / 4.0 * G_inf * G_inf


@dataclass(frozen=True)
class BoundReport:
    G: float
    G_inf: float
    delta: float
    C_Q: float
    Delta_res: float
    E_bound: float
    E_ss: float
    sigma_total_sq: float
    recursion_violations: int
    recursion_violations_measured: int
    # (E_bound + sigma_total_sq)^2; the floor itself needs unknown constants
    floor_term: float

    def as_dict(self) -> dict:
        return asdict(self)


def _series(run, param: Optional[str]) -> Tuple[str, Dict[str, list]]:
    if not getattr(run, "shadow", None):
        raise ValueError("run has no shadow-oracle series; rerun with shadow_oracle=True")
    if param is None:
        if len(run.shadow) != 1:
            raise ValueError(f"run has several low-rank parameters {sorted(run.shadow)}; name one")
        param = next(iter(run.shadow))
    if param not in run.shadow:
        raise ValueError(f"no shadow series for parameter {param!r}")
    return param, run.shadow[param]


def _param_size(run, param: str) -> int:
    for entry in run.memory["parameters"]:
        if entry["name"] == param:
            return math.prod(entry["shape"])
    raise ValueError(f"unknown parameter {param!r}")


def steady_state(values: Sequence[float], fraction: float = STEADY_FRACTION) -> float:
    """Largest value over the trailing ``fraction`` of the series."""
    n = max(1, int(round(len(values) * fraction)))
    return max(values[-n:])


def compute_bounds(run, beta1: float, lam: float, param: Optional[str] = None) -> BoundReport:
    param, s = _series(run, param)
    G = max(s["g_fro"])
    G_inf = max(s["g_inf"])
    delta = max(s["delta"])
    C_Q = quadratic_ceiling(G, lam)
    d_res = residual_ceiling(beta1, G, delta, C_Q)
    e_bound = error_bound(beta1, G, delta, C_Q)
    sigma = intrinsic_variance(_param_size(run, param), G_inf)
    violations = 0
    measured = 0
    for e_t, e_prev, r_t in zip(s["e_m"], s["e_prev"], s["residual"]):
        if e_t > beta1 * e_prev + d_res + RECURSION_TOL:
            violations += 1
        if e_t > beta1 * e_prev + r_t + RECURSION_TOL:
            measured += 1
    return BoundReport(
        G=G, G_inf=G_inf, delta=delta, C_Q=C_Q, Delta_res=d_res, E_bound=e_bound,
        E_ss=steady_state(s["e_m"]), sigma_total_sq=sigma,
        recursion_violations=violations, recursion_violations_measured=measured,
        floor_term=(e_bound + sigma) ** 2,
    )


def run_bounds(run) -> Dict[str, BoundReport]:
    """Bound reports for every low-rank Adam parameter, using the run's own config."""
    if run.optimizer != "lorapre_adam" or not run.shadow:
        return {}
    return {
        name: compute_bounds(run, run.config["beta1"], run.config["damping"], name)
        for name in run.shadow
    }


@dataclass(frozen=True)
class MomentErrorReport:
    delta_m: list
    delta_v: list
    # max |delta_m_t - beta1 * E_{t-1}|; the gradient terms cancel exactly
    identity_error: float
    delta_m_ceiling: float
    delta_v_ceiling: float
    # per step: beta2 * (2 G_inf ||h_{t-1} - hhat_{t-1}|| + sigma_total_sq)
    delta_v_step_ceiling: list
    delta_v_violations: int
    delta_m_violations: int


def moment_error_report(run, param: Optional[str] = None) -> MomentErrorReport:
    param, s = _series(run, param)
    beta1, beta2 = run.config["beta1"], run.config["beta2"]
    bounds = compute_bounds(run, beta1, run.config["damping"], param)
    identity = max(abs(dm - beta1 * ep) for dm, ep in zip(s["delta_m"], s["e_prev"]))
    step_ceiling = [
        beta2 * (2.0 * bounds.G_inf * eh + bounds.sigma_total_sq) for eh in s["e_h_prev"]
    ]
    dv_viol = sum(dv > c + RECURSION_TOL for dv, c in zip(s["delta_v"], step_ceiling))
    dm_ceiling = beta1 * bounds.E_bound
    return MomentErrorReport(
        delta_m=list(s["delta_m"]),
        delta_v=list(s["delta_v"]),
        identity_error=identity,
        delta_m_ceiling=dm_ceiling,
        delta_v_ceiling=beta2 * (2.0 * bounds.G_inf * bounds.E_bound + bounds.sigma_total_sq),
        delta_v_step_ceiling=step_ceiling,
        delta_v_violations=int(dv_viol),
        delta_m_violations=int(sum(dm > dm_ceiling + RECURSION_TOL for dm in s["delta_m"])),
    )


def popoviciu_gap(stream: Iterable[np.ndarray], beta: float) -> Tuple[list, float]:
    """Track ``||v - h^2||_F`` for EMAs of ``g^2`` and ``|g|`` over ``stream``.

    Returns the per-step gaps (measured before each update, as the moment
    error analysis uses them) and the largest ``|g|`` entry seen.
    """
    v = h = None
    gaps = []
    g_inf = 0.0
    for g in stream:
        g = np.atleast_1d(np.asarray(g, dtype=np.float64))
        if v is None:
            v = np.zeros_like(g)
            h = np.zeros_like(g)
        gaps.append(float(np.linalg.norm(v - h * h)))
        g_inf = max(g_inf, float(np.max(np.abs(g))))
        v = beta * v + (1.0 - beta) * g * g
        h = beta * h + (1.0 - beta) * np.abs(g)
    return gaps, g_inf


@dataclass(frozen=True)
class PopoviciuReport:
    max_gap: float
    ceiling: float
    ok: bool


def popoviciu_check(run, param: Optional[str] = None) -> PopoviciuReport:
    param, s = _series(run, param)
    ceiling = intrinsic_variance(_param_size(run, param), max(s["g_inf"]))
    gap = max(s["popoviciu"])
    return PopoviciuReport(max_gap=gap, ceiling=ceiling, ok=gap <= ceiling)


def memory_report(assignments: Sequence[Tuple[str, Sequence[int], str]], rank: int) -> dict:
    """Optimizer-state entry counts per parameter and in total, as exact integers.

    ``assignments`` holds ``(name, shape, slot_kind)`` triples.
    """
    from .optimizers import state_entries

    rows = []
    total = dense_total = 0
    for name, shape, kind in assignments:
        entries = state_entries(kind, shape, rank)
        dense = _DENSE_EQUIVALENT[kind] * math.prod(shape)
        rows.append({"name": name, "shape": list(shape), "kind": kind, "entries": entries, "dense_entries": dense})
        total += entries
        dense_total += dense
    ratio = Fraction(total, dense_total) if dense_total else Fraction(0)
    return {
        "parameters": rows,
        "total_entries": total,
        "dense_total_entries": dense_total,
        "ratio": float(ratio),
        "ratio_exact": f"{ratio.numerator}/{ratio.denominator}",
    }
