"""Synthetic federated objectives with known smoothness and noise constants.

Stochastic gradients are the exact client gradient plus isotropic Gaussian
noise of total variance ``sigma2`` (``sigma2 / d`` per coordinate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


@dataclass
class Objective:
    """Base class: ``f(w) = mean_i f_i(w)`` over ``n`` clients.

    Subclasses implement :meth:`client_gradient` and :meth:`value`.
    """

    n: int
    dim: int
    L: float
    sigma2: float = 0.0
    G2: float | None = None

    def client_gradient(self, i: int, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def client_gradients(self, w: np.ndarray) -> np.ndarray:
        """Exact gradients of every client, shape ``(n, dim)``."""
        return np.stack([self.client_gradient(i, w) for i in range(self.n)])

    def value(self, w: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.client_gradients(w).mean(axis=0)

    def stochastic_gradient(self, i: int, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.client_gradient(i, w)
        if self.sigma2 > 0:
            g = g + rng.normal(scale=np.sqrt(self.sigma2 / self.dim), size=self.dim)
        return g

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass
class QuadraticObjective(Objective):
    """``f_i(w) = 0.5 ||w - b_i||^2``; the minimizer of ``f`` is ``mean(b_i)``."""

    centers: np.ndarray = field(default=None)

    def __post_init__(self):
        b = np.asarray(self.centers, dtype=float)
        if b.shape != (self.n, self.dim):
            raise ValueError(f"centers must have shape ({self.n}, {self.dim}), got {b.shape}")
        self.centers = b
        self._mean = b.mean(axis=0)
        if self.G2 is None:
            # grad f_i - grad f = mean(b) - b_i does not depend on w
            self.G2 = float(np.max(np.sum((b - self._mean) ** 2, axis=1)))

    @classmethod
    def build(cls, centers, sigma2: float = 0.0) -> "QuadraticObjective":
        b = np.atleast_2d(np.asarray(centers, dtype=float))
        return cls(n=b.shape[0], dim=b.shape[1], L=1.0, sigma2=sigma2, centers=b)

    @classmethod
    def homogeneous(cls, n: int, dim: int, sigma2: float = 0.0, center=None) -> "QuadraticObjective":
        c = np.ones(dim) if center is None else np.asarray(center, dtype=float)
        return cls.build(np.tile(c, (n, 1)), sigma2)

    @classmethod
    def heterogeneous(cls, n: int, dim: int, spread: float = 1.0, sigma2: float = 0.0,
                      seed=None) -> "QuadraticObjective":
        rng = np.random.default_rng(seed)
        return cls.build(spread * rng.standard_normal((n, dim)), sigma2)

    @property
    def minimizer(self) -> np.ndarray:
        return self._mean.copy()

    def client_gradient(self, i, w):
        return w - self.centers[i]

    def client_gradients(self, w):
        return w[None, :] - self.centers

    def gradient(self, w):
        return w - self._mean

    def value(self, w):
        return float(0.5 * np.mean(np.sum((w[None, :] - self.centers) ** 2, axis=1)))


@dataclass
class LogisticObjective(Objective):
    """L2-regularized binary logistic regression on per-client data."""

    features: list = field(default=None)
    labels: list = field(default=None)
    reg: float = 1e-3

    def __post_init__(self):
        if len(self.features) != self.n or len(self.labels) != self.n:
            raise ValueError("need one (features, labels) pair per client")
        # the Hessian of the mean loss is at most ||X||_2^2 / (4 m) + reg
        self.L = float(max(np.linalg.norm(x, 2) ** 2 / (4 * len(x)) for x in self.features) + self.reg)

    @classmethod
    def synthetic(cls, n: int, dim: int, samples: int = 50, skew: float = 0.8,
                  separation: float = 1.0, sigma2: float = 0.0, reg: float = 1e-3,
                  seed=None) -> "LogisticObjective":
        """Gaussian-mixture clients with label-distribution skew.

        Client ``i`` draws label 1 with probability ``skew`` for even ``i`` and
        ``1 - skew`` for odd ``i``; class means sit at ``+-separation`` along a
        random direction.
        """
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        xs, ys = [], []
        for i in range(n):
            share = skew if i % 2 == 0 else 1.0 - skew
            y = (rng.random(samples) < share).astype(float)
            x = rng.standard_normal((samples, dim)) + np.outer(2 * y - 1, separation * direction)
            xs.append(x)
            ys.append(y)
        return cls(n=n, dim=dim, L=0.0, sigma2=sigma2, features=xs, labels=ys, reg=reg)

    def client_gradient(self, i, w):
        x, y = self.features[i], self.labels[i]
        return x.T @ (expit(x @ w) - y) / len(y) + self.reg * w

    def value(self, w):
        total = 0.0
        for x, y in zip(self.features, self.labels):
            z = x @ w
            # log(1 + e^z) - y z, stable in both tails
            total += np.mean(np.logaddexp(0.0, z) - y * z)
        return float(total / self.n + 0.5 * self.reg * w @ w)
