"""Deterministic desk-scale objectives with closed-form gradients."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .optimizers import ParamSpec


class Problem:
    """Base class: subclasses define ``param_specs``, ``loss`` and ``exact_grads``."""

    param_specs: List[ParamSpec]
    noise_std: float = 0.0
    noise_seed: Optional[int] = None

    def init_params(self) -> List[np.ndarray]:
        raise NotImplementedError

    def loss(self, params: Sequence[np.ndarray]) -> float:
        raise NotImplementedError

    def exact_grads(self, params: Sequence[np.ndarray]) -> List[np.ndarray]:
        raise NotImplementedError

    def grads(self, params: Sequence[np.ndarray], step: int = 0) -> List[np.ndarray]:
        """Gradients, plus seeded Gaussian noise keyed on ``step`` when enabled."""
        grads = self.exact_grads(params)
        if self.noise_std > 0:
            rng = np.random.default_rng([self.noise_seed or 0, step])
            grads = [g + rng.normal(0.0, self.noise_std, size=g.shape) for g in grads]
        return grads

    def _check(self, params):
        if len(params) != len(self.param_specs):
            raise ShapeError(f"expected {len(self.param_specs)} parameters, got {len(params)}")
        for spec, theta in zip(self.param_specs, params):
            if tuple(np.shape(theta)) != spec.shape:
                raise ShapeError(f"{spec.name}: expected shape {spec.shape}, got {np.shape(theta)}")


class QuadraticProblem(Problem):
    """``0.5 * <theta, H * theta>`` with a fixed positive curvature field ``H``."""

    def __init__(self, p: int, q: int, condition: float = 1.0, seed: int = 0):
        if condition < 1:
            raise ValueError(f"condition must be >= 1, got {condition}")
        rng = np.random.default_rng(seed)
        self.curvature = rng.permutation(np.logspace(0.0, np.log10(condition), p * q)).reshape(p, q)
        self.theta0 = rng.normal(size=(p, q))
        self.param_specs = [ParamSpec("theta", (p, q))]

    def init_params(self):
        return [self.theta0.copy()]

    def loss(self, params):
        self._check(params)
        (theta,) = params
        return 0.5 * float(np.sum(self.curvature * theta * theta))

    def exact_grads(self, params):
        self._check(params)
        return [self.curvature * params[0]]


class SensingProblem(Problem):
    """``0.5 * ||theta - M*||^2`` towards a hidden rank-``true_rank`` target."""

    def __init__(self, p: int, q: int, true_rank: int, noise_std: float = 0.0, seed: int = 0):
        if not 1 <= true_rank <= min(p, q):
            raise ValueError(f"true_rank must lie in [1, {min(p, q)}], got {true_rank}")
        if noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {noise_std}")
        rng = np.random.default_rng(seed)
        u, _ = np.linalg.qr(rng.normal(size=(p, true_rank)))
        v, _ = np.linalg.qr(rng.normal(size=(q, true_rank)))
        strengths = np.linspace(3.0, 1.0, true_rank)
        self.target = (u * strengths) @ v.T
        self.true_rank = true_rank
        self.noise_std = noise_std
        self.noise_seed = seed
        self.param_specs = [ParamSpec("theta", (p, q))]

    def init_params(self):
        return [np.zeros_like(self.target)]

    def loss(self, params):
        self._check(params)
        return 0.5 * float(np.sum((params[0] - self.target) ** 2))

    def exact_grads(self, params):
        self._check(params)
        return [params[0] - self.target]


def gaussian_blobs(n_samples: int, input_dim: int, classes: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    centers = 2.0 * rng.normal(size=(classes, input_dim))
    labels = np.arange(n_samples) % classes
    x = centers[labels] + rng.normal(size=(n_samples, input_dim))
    return x, labels


class TinyMLPProblem(Problem):
    """Full-batch softmax cross-entropy of ``tanh(x @ W1) @ W2``."""

    def __init__(self, x: np.ndarray, labels: np.ndarray, hidden_dim: int, classes: int, seed: int = 0):
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels)
        if x.ndim != 2 or labels.shape != (x.shape[0],):
            raise ShapeError("x must be (n, d) and labels (n,)")
        if max(x.shape[1], hidden_dim, classes) > 256:
            raise ValueError("tiny_mlp dimensions must not exceed 256")
        self.x = x
        self.labels = labels
        self.classes = classes
        self.onehot = np.eye(classes)[labels]
        d = x.shape[1]
        rng = np.random.default_rng([seed, 1])
        self.w1_0 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden_dim))
        self.w2_0 = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, classes))
        self.param_specs = [ParamSpec("W1", (d, hidden_dim)), ParamSpec("W2", (hidden_dim, classes))]

    def init_params(self):
        return [self.w1_0.copy(), self.w2_0.copy()]

    def _forward(self, params):
        self._check(params)
        w1, w2 = params
        hidden = np.tanh(self.x @ w1)
        logits = hidden @ w2
        logits = logits - logits.max(axis=1, keepdims=True)
        log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return hidden, log_probs

    def loss(self, params):
        _, log_probs = self._forward(params)
        return -float(np.mean(np.sum(self.onehot * log_probs, axis=1)))

    def exact_grads(self, params):
        hidden, log_probs = self._forward(params)
        d_logits = (np.exp(log_probs) - self.onehot) / self.x.shape[0]
        d_w2 = hidden.T @ d_logits
        d_hidden = (d_logits @ params[1].T) * (1.0 - hidden * hidden)
        d_w1 = self.x.T @ d_hidden
        return [d_w1, d_w2]


def quadratic_problem(p: int, q: int, condition: float = 1.0, seed: int = 0) -> QuadraticProblem:
    return QuadraticProblem(p, q, condition, seed)


def low_rank_sensing_problem(p: int, q: int, true_rank: int, noise_std: float = 0.0, seed: int = 0) -> SensingProblem:
    return SensingProblem(p, q, true_rank, noise_std, seed)


def tiny_mlp_problem(input_dim: int, hidden_dim: int, classes: int, n_samples: int, seed: int = 0) -> TinyMLPProblem:
    x, labels = gaussian_blobs(n_samples, input_dim, classes, seed)
    return TinyMLPProblem(x, labels, hidden_dim, classes, seed)


def gradient_self_test(problem: Problem, points: int = 20, seed: int = 0, h: float = 1e-6, max_coords: int = 40) -> float:
    """Worst relative error between ``exact_grads`` and central differences.

    Each point is a random Gaussian parameter set; at most ``max_coords``
    randomly chosen entries per parameter are differenced.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        params = [rng.normal(size=spec.shape) for spec in problem.param_specs]
        grads = problem.exact_grads(params)
        for k, theta in enumerate(params):
            flat = theta.reshape(-1)
            coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
            fd = np.empty(coords.size)
            for i, c in enumerate(coords):
                saved = flat[c]
                flat[c] = saved + h
                up = problem.loss(params)
                flat[c] = saved - h
                down = problem.loss(params)
                flat[c] = saved
                fd[i] = (up - down) / (2 * h)
            exact = grads[k].reshape(-1)[coords]
            err = np.linalg.norm(fd - exact) / max(np.linalg.norm(exact), 1e-12)
            worst = max(worst, err)
    return worst
