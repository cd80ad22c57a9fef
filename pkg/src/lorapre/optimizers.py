"""Dense and low-rank-momentum Adam / Muon steps.

Each ``*_step`` function is pure: ``(slot, theta, g, cfg) -> (theta, slot)``.
:class:`Optimizer` routes a list of parameters to slot kinds and drives the
steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import regressor as reg
from .errors import NumericError, ShapeError
from .linalg import Coefficients, newton_schulz5
from .regressor import LowRankMoment

DENSE_ADAM = "DenseAdam"
DENSE_MUON = "DenseMuon"
LOW_RANK_ADAM = "LowRankAdam"
LOW_RANK_MUON = "LowRankMuon"
SLOT_KINDS = (DENSE_ADAM, DENSE_MUON, LOW_RANK_ADAM, LOW_RANK_MUON)

OPTIMIZERS = ("adam", "muon", "lorapre_adam", "lorapre_muon")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    gamma1: Optional[float] = None
    gamma2: Optional[float] = None
    rank: int = 8
    damping: float = reg.DEFAULT_DAMPING
    scale: float = 0.25
    # False switches to the m / (sqrt(v) + eps) placement
    eps_inside_sqrt: bool = True

    def __post_init__(self):
        _validate_common(self.lr, self.weight_decay, self.rank, self.damping)
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        for name in ("gamma1", "gamma2"):
            value = getattr(self, name)
            if value is not None and not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")

    @property
    def factor_rate1(self) -> float:
        return self.gamma1 if self.gamma1 is not None else reg.coupling_from_beta(self.beta1, "first").gamma

    @property
    def factor_rate2(self) -> float:
        return self.gamma2 if self.gamma2 is not None else reg.coupling_from_beta(self.beta2, "second").gamma


@dataclass(frozen=True)
class MuonConfig:
    lr: float = 0.02
    momentum: float = 0.95
    weight_decay: float = 0.0
    gamma1: Optional[float] = None
    rank: int = 8
    damping: float = reg.DEFAULT_DAMPING
    ns_iterations: int = 5
    ns_coefficients: Coefficients = "schedule"
    # used for 1-D parameters, which Muon does not handle
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        _validate_common(self.lr, self.weight_decay, self.rank, self.damping)
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.gamma1 is not None and not 0.0 < self.gamma1 <= 1.0:
            raise ValueError(f"gamma1 must lie in (0, 1], got {self.gamma1}")
        if self.ns_iterations < 1:
            raise ValueError(f"ns_iterations must be >= 1, got {self.ns_iterations}")

    @property
    def factor_rate1(self) -> float:
        return self.gamma1 if self.gamma1 is not None else reg.coupling_from_beta(self.momentum, "first").gamma


def _validate_common(lr, weight_decay, rank, damping):
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not weight_decay >= 0:
        raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if not damping > 0:
        raise ValueError(f"damping must be positive, got {damping}")


@dataclass(frozen=True)
class ParamSpec:
    """A named parameter. ``route="low_rank"`` marks it eligible for factorized momentum."""

    name: str
    shape: Tuple[int, ...]
    route: str = "low_rank"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) not in (1, 2) or min(self.shape) < 1:
            raise ShapeError(f"{self.name}: parameters must be 1-D or 2-D, got {self.shape}")
        if self.route not in ("low_rank", "dense"):
            raise ValueError(f"{self.name}: unknown route {self.route!r}")
        if len(self.shape) == 1:
            object.__setattr__(self, "route", "dense")


@dataclass(frozen=True)
class OptimizerSlot:
    kind: str
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    m_factors: Optional[LowRankMoment] = None
    v_factors: Optional[LowRankMoment] = None

    @property
    def num_entries(self) -> int:
        total = 0
        for arr in (self.m, self.v):
            if arr is not None:
                total += arr.size
        for fac in (self.m_factors, self.v_factors):
            if fac is not None:
                total += fac.num_entries
        return total


def init_slot(kind: str, shape: Sequence[int], rank: int = 0, damping: float = reg.DEFAULT_DAMPING, seed=0) -> OptimizerSlot:
    shape = tuple(shape)
    if kind == DENSE_ADAM:
        return OptimizerSlot(kind, m=np.zeros(shape), v=np.zeros(shape))
    if kind == DENSE_MUON:
        return OptimizerSlot(kind, m=np.zeros(shape))
    if len(shape) != 2:
        raise ShapeError(f"{kind} needs a 2-D parameter, got {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p, q = shape
    if kind == LOW_RANK_ADAM:
        return OptimizerSlot(
            kind,
            m_factors=reg.init_low_rank(p, q, rank, damping, rng),
            v_factors=reg.init_low_rank(p, q, rank, damping, rng),
        )
    if kind == LOW_RANK_MUON:
        return OptimizerSlot(kind, m_factors=reg.init_low_rank(p, q, rank, damping, rng))
    raise ValueError(f"unknown slot kind {kind!r}")


def _finite_or_raise(theta: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(theta)):
        raise NumericError(f"{name}: non-finite parameter update")
    return theta


def _adam_direction(m, v, t, cfg: AdamConfig) -> np.ndarray:
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    if cfg.eps_inside_sqrt:
        return m_hat / np.sqrt(v_hat + cfg.eps)
    return m_hat / (np.sqrt(v_hat) + cfg.eps)


def _apply(theta, direction, lr, weight_decay, name) -> np.ndarray:
    # decoupled decay: theta - lr * (direction + wd * theta)
    return _finite_or_raise(theta * (1.0 - lr * weight_decay) - lr * direction, name)


def dense_adam_step(slot: OptimizerSlot, theta, g, cfg: AdamConfig, lr: Optional[float] = None, name: str = "param"):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape:
        raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
    t = slot.step + 1
    m = cfg.beta1 * slot.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * (g * g)
    direction = _adam_direction(m, v, t, cfg)
    theta = _apply(theta, direction, cfg.lr if lr is None else lr, cfg.weight_decay, name)
    return theta, replace(slot, step=t, m=m, v=v)


def lorapre_adam_step(slot: OptimizerSlot, theta, g, cfg: AdamConfig, lr: Optional[float] = None, name: str = "param"):
    """Adam whose moment histories live in two factor pairs.

    The effective moments blend the pre-update reconstructions with the exact
    gradient; only then do the factors advance. ``cfg.scale`` multiplies the
    normalized direction, not the weight decay.
    """
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape or theta.ndim != 2:
        raise ShapeError(f"{name}: expected matching 2-D parameter and gradient, got {theta.shape}, {g.shape}")
    t = slot.step + 1
    m = reg.effective_first_moment(slot.m_factors, g, cfg.beta1)
    v = reg.effective_second_moment(slot.v_factors, g, cfg.beta2)
    m_factors = reg.first_moment_update(slot.m_factors, g, cfg.factor_rate1)
    v_factors = reg.second_moment_update(slot.v_factors, g, cfg.factor_rate2)
    direction = cfg.scale * _adam_direction(m, v, t, cfg)
    theta = _apply(theta, direction, cfg.lr if lr is None else lr, cfg.weight_decay, name)
    return theta, replace(slot, step=t, m_factors=m_factors, v_factors=v_factors)


def dense_muon_step(slot: OptimizerSlot, theta, g, cfg: MuonConfig, lr: Optional[float] = None, name: str = "param"):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape or theta.ndim != 2:
        raise ShapeError(f"{name}: expected matching 2-D parameter and gradient, got {theta.shape}, {g.shape}")
    # no (1 - mu) normalization and no bias correction
    m = cfg.momentum * slot.m + g
    ortho = newton_schulz5(m, cfg.ns_iterations, cfg.ns_coefficients)
    theta = _apply(theta, ortho, cfg.lr if lr is None else lr, cfg.weight_decay, name)
    return theta, replace(slot, step=slot.step + 1, m=m)


def lorapre_muon_step(slot: OptimizerSlot, theta, g, cfg: MuonConfig, lr: Optional[float] = None, name: str = "param"):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape or theta.ndim != 2:
        raise ShapeError(f"{name}: expected matching 2-D parameter and gradient, got {theta.shape}, {g.shape}")
    m = reg.effective_muon_moment(slot.m_factors, g, cfg.momentum)
    m_factors = reg.muon_moment_update(slot.m_factors, g, cfg.momentum, cfg.factor_rate1)
    ortho = newton_schulz5(m, cfg.ns_iterations, cfg.ns_coefficients)
    theta = _apply(theta, ortho, cfg.lr if lr is None else lr, cfg.weight_decay, name)
    return theta, replace(slot, step=slot.step + 1, m_factors=m_factors)


def param_routing(specs: Sequence[ParamSpec], optimizer: str, rank: int) -> Dict[str, str]:
    """Map parameter names to slot kinds.

    Low-rank momentum goes to eligible 2-D parameters whose smaller side
    exceeds ``rank``; everything else keeps dense state. Muon only handles
    matrices, so 1-D parameters always fall back to dense Adam.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; expected one of {OPTIMIZERS}")
    muon = optimizer.endswith("muon")
    low_rank = optimizer.startswith("lorapre")
    routing = {}
    for spec in specs:
        if len(spec.shape) == 1:
            routing[spec.name] = DENSE_ADAM
        elif low_rank and spec.route == "low_rank" and min(spec.shape) > rank:
            routing[spec.name] = LOW_RANK_MUON if muon else LOW_RANK_ADAM
        else:
            routing[spec.name] = DENSE_MUON if muon else DENSE_ADAM
    return routing


_STEPS = {
    DENSE_ADAM: dense_adam_step,
    LOW_RANK_ADAM: lorapre_adam_step,
    DENSE_MUON: dense_muon_step,
    LOW_RANK_MUON: lorapre_muon_step,
}


class Optimizer:
    """Owns one slot per parameter and applies the routed step to each.

    Not thread-safe: one caller at a time may call :meth:`step`.
    """

    def __init__(self, specs: Sequence[ParamSpec], optimizer: str, config: Union[AdamConfig, MuonConfig], seed: int = 0):
        muon = optimizer.endswith("muon")
        if muon and not isinstance(config, MuonConfig):
            raise TypeError(f"{optimizer} needs a MuonConfig")
        if not muon and not isinstance(config, AdamConfig):
            raise TypeError(f"{optimizer} needs an AdamConfig")
        self.name = optimizer
        self.config = config
        self.specs = list(specs)
        self.routing = param_routing(self.specs, optimizer, config.rank)
        self.slots: Dict[str, OptimizerSlot] = {}
        for index, spec in enumerate(self.specs):
            rng = np.random.default_rng([seed, index])
            self.slots[spec.name] = init_slot(self.routing[spec.name], spec.shape, config.rank, config.damping, rng)

    def _config_for(self, kind: str):
        if isinstance(self.config, MuonConfig) and kind == DENSE_ADAM:
            return self.config.adam
        return self.config

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr_scale: float = 1.0) -> List[np.ndarray]:
        if len(params) != len(self.specs) or len(grads) != len(self.specs):
            raise ShapeError("params and grads must match the parameter specs")
        new_params = []
        for spec, theta, g in zip(self.specs, params, grads):
            slot = self.slots[spec.name]
            cfg = self._config_for(slot.kind)
            theta, self.slots[spec.name] = _STEPS[slot.kind](slot, theta, g, cfg, lr=cfg.lr * lr_scale, name=spec.name)
            new_params.append(theta)
        return new_params

    @property
    def num_state_entries(self) -> int:
        return sum(slot.num_entries for slot in self.slots.values())


def state_entries(kind: str, shape: Sequence[int], rank: int) -> int:
    """Optimizer-state entry count for one parameter, by integer arithmetic."""
    size = math.prod(shape)
    if kind == DENSE_ADAM:
        return 2 * size
    if kind == DENSE_MUON:
        return size
    p, q = shape
    if kind == LOW_RANK_ADAM:
        return 2 * (p + q) * rank
    if kind == LOW_RANK_MUON:
        return (p + q) * rank
    raise ValueError(f"unknown slot kind {kind!r}")
