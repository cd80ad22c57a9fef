"""Training loop producing :class:`RunRecord` time series.

With ``shadow_oracle=True`` every low-rank parameter gets a dense EMA twin
fed the *same* gradients as the low-rank run, so the recorded errors measure
how well the factors track the dense moments rather than how far two
trajectories drift apart. Trajectory drift against an independent dense run
is kept as a separate informational series.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from . import regressor as reg
from .diagnostics import memory_report
from .errors import NumericError
from .optimizers import (
    LOW_RANK_ADAM,
    LOW_RANK_MUON,
    AdamConfig,
    MuonConfig,
    Optimizer,
)
from .problems import Problem

SHADOW_SERIES = (
    "e_m", "e_v", "e_h_prev", "residual", "delta", "delta_abs", "quad_norm",
    "delta_m", "delta_v", "e_prev", "popoviciu", "g_fro", "g_inf", "v_eff_min",
)


@dataclass
class RunRecord:
    optimizer: str
    seed: int
    steps: int
    config: dict
    routing: Dict[str, str]
    memory: dict
    loss: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)
    # aggregated over low-rank parameters (root of summed squares)
    e_m: List[Optional[float]] = field(default_factory=list)
    e_v: List[Optional[float]] = field(default_factory=list)
    delta_subspace: List[Optional[float]] = field(default_factory=list)
    divergence: List[Optional[float]] = field(default_factory=list)
    # per low-rank parameter: series name -> list
    shadow: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def has_shadow(self) -> bool:
        return bool(self.shadow)

    @property
    def final_loss(self) -> float:
        return self.loss[-1]

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings, for equality checks."""
        return {
            "optimizer": self.optimizer, "seed": self.seed, "steps": self.steps,
            "config": self.config, "routing": self.routing, "memory": self.memory,
            "loss": self.loss, "grad_norm": self.grad_norm, "e_m": self.e_m,
            "e_v": self.e_v, "delta_subspace": self.delta_subspace,
            "divergence": self.divergence, "shadow": self.shadow, "error": self.error,
        }


def warmup_cosine(step: int, total: int, warmup: int) -> float:
    """Multiplier on the base learning rate; ``step`` counts from 1."""
    if warmup > 0 and step <= warmup:
        return step / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class _Shadow:
    """Dense EMA twins for one low-rank parameter."""

    def __init__(self, kind: str, shape, cfg):
        self.kind = kind
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.h = np.zeros(shape)
        self.series = {name: [] for name in SHADOW_SERIES}

    def observe(self, before, after, g):
        cfg = self.cfg
        s = self.series
        abs_g = np.abs(g)
        prev_err = self.m - reg.reconstruct(before.m_factors)
        s["e_prev"].append(float(np.linalg.norm(prev_err)))
        s["g_fro"].append(float(np.linalg.norm(g)))
        s["g_inf"].append(float(np.max(abs_g)))
        s["delta"].append(reg.subspace_residual(before.m_factors, g))
        s["quad_norm"].append(float(np.linalg.norm(reg.quadratic_term(before.m_factors, g))))
        if self.kind == LOW_RANK_ADAM:
            beta = cfg.beta1
            m_eff = reg.effective_first_moment(before.m_factors, g, cfg.beta1)
            v_eff = reg.effective_second_moment(before.v_factors, g, cfg.beta2)
            h_prev_hat = reg.reconstruct(before.v_factors)
            s["e_h_prev"].append(float(np.linalg.norm(self.h - h_prev_hat)))
            s["popoviciu"].append(float(np.linalg.norm(self.v - self.h * self.h)))
            s["delta_abs"].append(reg.subspace_residual(before.v_factors, abs_g))
            s["v_eff_min"].append(float(np.min(v_eff)))
            self.m = beta * self.m + (1.0 - beta) * g
            self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * (g * g)
            self.h = cfg.beta2 * self.h + (1.0 - cfg.beta2) * abs_g
            s["delta_m"].append(float(np.linalg.norm(self.m - m_eff)))
            s["delta_v"].append(float(np.linalg.norm(self.v - v_eff)))
            s["e_v"].append(float(np.linalg.norm(self.h - reg.reconstruct(after.v_factors))))
        else:
            beta = cfg.momentum
            m_eff = reg.effective_muon_moment(before.m_factors, g, cfg.momentum)
            self.m = beta * self.m + g
            s["delta_m"].append(float(np.linalg.norm(self.m - m_eff)))
            for name in ("e_h_prev", "popoviciu", "delta_abs", "v_eff_min", "delta_v", "e_v"):
                s[name].append(0.0)
        err = self.m - reg.reconstruct(after.m_factors)
        s["e_m"].append(float(np.linalg.norm(err)))
        # R_t = (m_t - mhat_t) - beta (m_{t-1} - mhat_{t-1})
        s["residual"].append(float(np.linalg.norm(err - beta * prev_err)))


def _root_sum_squares(values) -> Optional[float]:
    values = list(values)
    if not values:
        return None
    return math.sqrt(sum(v * v for v in values))


def run_training(
    problem: Problem,
    optimizer: str,
    config: Union[AdamConfig, MuonConfig],
    steps: int = 1000,
    shadow_oracle: bool = False,
    seed: int = 0,
    schedule: str = "constant",
    warmup_steps: int = 0,
    timing: bool = False,
) -> RunRecord:
    """Run ``steps`` optimizer steps on ``problem`` and record every step.

    A non-finite loss or a numeric failure stops the run; the partial record
    is returned with ``error`` set.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if schedule not in ("constant", "warmup_cosine"):
        raise ValueError(f"unknown schedule {schedule!r}")
    opt = Optimizer(problem.param_specs, optimizer, config, seed=seed)
    specs = problem.param_specs
    record = RunRecord(
        optimizer=optimizer,
        seed=seed,
        steps=steps,
        config=_config_echo(config),
        routing=dict(opt.routing),
        memory=memory_report([(s.name, s.shape, opt.routing[s.name]) for s in specs], config.rank),
    )
    low_rank = [s.name for s in specs if opt.routing[s.name] in (LOW_RANK_ADAM, LOW_RANK_MUON)]
    shadows = {}
    twin = None
    if shadow_oracle and low_rank:
        shadows = {n: _Shadow(opt.routing[n], opt.slots[n].m_factors.shape, config) for n in low_rank}
        dense_name = "muon" if optimizer.endswith("muon") else "adam"
        twin = Optimizer(specs, dense_name, config, seed=seed)
        twin_params = problem.init_params()

    params = problem.init_params()
    for t in range(1, steps + 1):
        start = time.perf_counter()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = problem.loss(params)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {t}")
            grads = problem.grads(params, step=t)
            before = {n: opt.slots[n] for n in low_rank}
            lr_scale = 1.0 if schedule == "constant" else warmup_cosine(t, steps, warmup_steps)
            params = opt.step(params, grads, lr_scale=lr_scale)
            if twin is not None:
                twin_params = twin.step(twin_params, problem.grads(twin_params, step=t), lr_scale=lr_scale)
        except (NumericError, FloatingPointError) as exc:
            record.error = str(exc)
            break
        record.loss.append(loss)
        record.grad_norm.append(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        for k, spec in enumerate(specs):
            if spec.name in shadows:
                shadows[spec.name].observe(before[spec.name], opt.slots[spec.name], grads[k])
        if shadows:
            record.e_m.append(_root_sum_squares(sh.series["e_m"][-1] for sh in shadows.values()))
            record.e_v.append(_root_sum_squares(sh.series["e_v"][-1] for sh in shadows.values()))
            record.delta_subspace.append(_root_sum_squares(sh.series["delta"][-1] for sh in shadows.values()))
            record.divergence.append(math.sqrt(sum(float(np.sum((a - b) ** 2)) for a, b in zip(params, twin_params))))
        else:
            record.e_m.append(None)
            record.e_v.append(None)
            record.delta_subspace.append(None)
            record.divergence.append(None)
        record.wall_ms.append((time.perf_counter() - start) * 1e3 if timing else 0.0)
    record.shadow = {name: sh.series for name, sh in shadows.items()}
    return record


def _config_echo(config) -> dict:
    from dataclasses import asdict

    echo = asdict(config)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in echo.items()}
