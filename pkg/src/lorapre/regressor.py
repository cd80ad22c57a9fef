"""Momentum as an online low-rank linear regressor.

An EMA step ``m <- beta m + (1 - beta) g`` is one gradient step of size
``1 - beta`` on ``0.5 * ||m - g||^2``.  Factorizing ``m = B @ A`` and taking a
damped Newton step on each factor gives EMA-shaped updates for ``B`` and
``A`` that need only ``r x r`` solves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from .errors import NumericError, ShapeError
from .linalg import abs_elementwise, as_matrix, damped_left_pinv, damped_right_pinv

DEFAULT_DAMPING = 1e-8
INIT_STD = 0.02


@dataclass(frozen=True)
class Coupling:
    beta: float
    gamma: float
    order: str = "first"


def coupling_from_beta(beta: float, order: Literal["first", "second"] = "first") -> Coupling:
    """Factor learning rate whose zero-gradient decay matches an EMA with ``beta``.

    Both factors shrink by ``1 - gamma`` per step, so the reconstruction ``B A``
    shrinks by ``(1 - gamma)**2``.  The second moment is used squared, hence
    the fourth root.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if order == "first":
        gamma = 1.0 - math.sqrt(beta)
    elif order == "second":
        gamma = 1.0 - beta ** 0.25
    else:
        raise ValueError(f"order must be 'first' or 'second', got {order!r}")
    return Coupling(beta=beta, gamma=gamma, order=order)


@dataclass(frozen=True)
class LowRankMoment:
    b: np.ndarray
    a: np.ndarray
    damping: float = DEFAULT_DAMPING

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"factor shapes {self.b.shape} and {self.a.shape} do not chain")
        if not self.damping > 0:
            raise ValueError(f"damping must be positive, got {self.damping}")

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    @property
    def num_entries(self) -> int:
        return self.b.size + self.a.size


@dataclass(frozen=True)
class DenseMoment:
    value: np.ndarray


def init_low_rank(p: int, q: int, r: int, lam: float = DEFAULT_DAMPING, seed=0) -> LowRankMoment:
    """Zero left factor and N(0, 0.02^2) right factor, so the reconstruction starts at 0.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    if min(p, q, r) < 1:
        raise ValueError(f"dimensions must be positive, got p={p}, q={q}, r={r}")
    if r > min(p, q):
        raise ValueError(f"rank {r} exceeds min({p}, {q})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return LowRankMoment(b=np.zeros((p, r)), a=rng.normal(0.0, INIT_STD, size=(r, q)), damping=lam)


def reconstruct(state: LowRankMoment) -> np.ndarray:
    return state.b @ state.a


def _check_grad(state: LowRankMoment, g) -> np.ndarray:
    g = as_matrix(g, "g")
    if g.shape != state.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match moment shape {state.shape}")
    return g


def _shift(mu: float) -> float:
    if not 0.0 <= mu < 1.0:
        raise ValueError(f"mu must lie in [0, 1), got {mu}")
    return mu / (1.0 - mu)


def regression_loss(state: LowRankMoment, g, mu: float = 0.0) -> float:
    """``0.5 ||B A - g||^2 - mu / (1 - mu) <B A, g>``; ``mu = 0`` is the plain fit."""
    g = _check_grad(state, g)
    m = reconstruct(state)
    loss = 0.5 * float(np.sum((m - g) ** 2))
    if mu:
        loss -= _shift(mu) * float(np.sum(m * g))
    return loss


def regression_grads(state: LowRankMoment, g, mu: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    g = _check_grad(state, g)
    resid = reconstruct(state) - g
    if mu:
        resid = resid - _shift(mu) * g
    return resid @ state.a.T, state.b.T @ resid


def newton_directions(state: LowRankMoment, g, mu: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Damped Newton directions for both factors, each with the other held fixed."""
    g = _check_grad(state, g)
    target = g / (1.0 - mu) if mu else g
    d_b = state.b - target @ damped_right_pinv(state.a, state.damping)
    d_a = state.a - damped_left_pinv(state.b, state.damping) @ target
    return d_b, d_a


def _factor_step(state: LowRankMoment, target: np.ndarray, gamma: float, inject: float) -> LowRankMoment:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"factor learning rate must lie in (0, 1], got {gamma}")
    # both factors advance from the old pair
    a_pinv = damped_right_pinv(state.a, state.damping)
    b_pinv = damped_left_pinv(state.b, state.damping)
    keep = 1.0 - gamma
    new_b = keep * state.b + inject * (target @ a_pinv)
    new_a = keep * state.a + inject * (b_pinv @ target)
    if not np.all(np.isfinite(new_b)):
        raise NumericError("low-rank update produced non-finite entries in factor B")
    if not np.all(np.isfinite(new_a)):
        raise NumericError("low-rank update produced non-finite entries in factor A")
    return LowRankMoment(b=new_b, a=new_a, damping=state.damping)


def first_moment_update(state: LowRankMoment, g, gamma1: float) -> LowRankMoment:
    g = _check_grad(state, g)
    return _factor_step(state, g, gamma1, gamma1)


def second_moment_update(state: LowRankMoment, g, gamma2: float) -> LowRankMoment:
    """Fit the factors to ``|g|``; the second moment is the squared reconstruction."""
    g = _check_grad(state, g)
    return _factor_step(state, abs_elementwise(g), gamma2, gamma2)


def muon_moment_update(state: LowRankMoment, g, mu: float, gamma1: float) -> LowRankMoment:
    """Factor step for Muon's unnormalized momentum ``m <- mu m + g``."""
    g = _check_grad(state, g)
    _shift(mu)
    return _factor_step(state, g, gamma1, gamma1 / (1.0 - mu))


def effective_first_moment(state: LowRankMoment, g, beta1: float) -> np.ndarray:
    g = _check_grad(state, g)
    return beta1 * reconstruct(state) + (1.0 - beta1) * g


def effective_second_moment(state: LowRankMoment, g, beta2: float) -> np.ndarray:
    g = _check_grad(state, g)
    h = reconstruct(state)
    return beta2 * (h * h) + (1.0 - beta2) * (g * g)


def effective_muon_moment(state: LowRankMoment, g, mu: float) -> np.ndarray:
    g = _check_grad(state, g)
    return mu * reconstruct(state) + g


def dense_ema_update(state: DenseMoment, g, beta: float, squared: bool = False) -> DenseMoment:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.value.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match moment shape {state.value.shape}")
    u = g * g if squared else g
    return DenseMoment(beta * state.value + (1.0 - beta) * u)


def projection_row(state: LowRankMoment) -> np.ndarray:
    """Damped projector onto the row space of ``A`` (``q x q``)."""
    return damped_right_pinv(state.a, state.damping) @ state.a


def projection_col(state: LowRankMoment) -> np.ndarray:
    """Damped projector onto the column space of ``B`` (``p x p``)."""
    return state.b @ damped_left_pinv(state.b, state.damping)


def quadratic_term(state: LowRankMoment, g) -> np.ndarray:
    """Cross term ``g A^+ B^+ g`` of a one-step expansion of the reconstruction."""
    g = _check_grad(state, g)
    return (g @ damped_right_pinv(state.a, state.damping)) @ (damped_left_pinv(state.b, state.damping) @ g)


def subspace_residual(state: LowRankMoment, g) -> float:
    """``||g - (P_B g + g P_A)||_F`` without forming either projector."""
    g = _check_grad(state, g)
    col = state.b @ (damped_left_pinv(state.b, state.damping) @ g)
    row = (g @ damped_right_pinv(state.a, state.damping)) @ state.a
    return float(np.linalg.norm(g - col - row))


def subspace_capture_residual(state: LowRankMoment, g) -> float:
    """``||g - P_B g P_A||_F``: the part of ``g`` outside both tracked subspaces.

    Unlike :func:`subspace_residual` this vanishes when ``g`` lies in them.
    """
    g = _check_grad(state, g)
    inner = damped_left_pinv(state.b, state.damping) @ g @ damped_right_pinv(state.a, state.damping)
    return float(np.linalg.norm(g - state.b @ inner @ state.a))
