"""Canonical exponential-family primitives for streaming GLM blocks.

Only the part of the log-density that depends on the coefficients is
evaluated, ``y * eta - d(eta)``; the normalizer ``c(y; phi)`` never enters
the optimization and the dispersion is held at 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

MU_CLIP = 1e-12


class DomainError(ValueError):
    """Raised when a primitive receives a non-finite argument."""


class Kind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class GlmFamily:
    kind: Kind = Kind.GAUSSIAN
    dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")

    @classmethod
    def gaussian(cls) -> "GlmFamily":
        return cls(Kind.GAUSSIAN)

    @classmethod
    def logistic(cls) -> "GlmFamily":
        return cls(Kind.LOGISTIC)

    # ``d``, ``d'`` and ``d''`` evaluated elementwise on a linear predictor.

    def d(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind is Kind.GAUSSIAN:
            return 0.5 * eta * eta
        return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))

    def mean(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind is Kind.GAUSSIAN:
            return eta
        # exp(-|eta|) keeps both branches overflow-free
        e = np.exp(-np.abs(eta))
        return np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def variance(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind is Kind.GAUSSIAN:
            return np.ones_like(eta)
        mu = np.clip(self.mean(eta), MU_CLIP, 1.0 - MU_CLIP)
        return mu * (1.0 - mu)

    @property
    def max_variance(self) -> float:
        """Global upper bound on ``d''``; used for Lipschitz step sizes."""
        return 1.0 if self.kind is Kind.GAUSSIAN else 0.25


@dataclass
class Batch:
    """One ``(X, y)`` block observed by one source at one time step."""

    source_id: int
    batch_index: int
    X: np.ndarray
    y: np.ndarray
    family: GlmFamily | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float).reshape(-1)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        if self.X.shape[0] < 1:
            raise ValueError("a batch needs at least one row")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]} entries"
            )
        if self.batch_index < 1:
            raise ValueError("batch_index starts at 1")
        if self.family is not None and self.family.kind is Kind.LOGISTIC:
            if not np.all((self.y == 0.0) | (self.y == 1.0)):
                raise ValueError("logistic responses must be exactly 0 or 1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _check_beta(beta, batch: Batch) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != batch.p:
        raise ValueError(f"beta has length {beta.shape[0]}, batch has p={batch.p}")
    return beta


def cumulant(family: GlmFamily, theta: float) -> float:
    theta = float(theta)
    if not np.isfinite(theta):
        raise DomainError(f"cumulant needs a finite argument, got {theta}")
    return float(family.d(theta))


def log_likelihood(family: GlmFamily, beta, batch: Batch) -> float:
    beta = _check_beta(beta, batch)
    eta = batch.X @ beta
    return float(batch.y @ eta - family.d(eta).sum())


def score(family: GlmFamily, beta, batch: Batch) -> np.ndarray:
    beta = _check_beta(beta, batch)
    eta = batch.X @ beta
    return batch.X.T @ (batch.y - family.mean(eta))


def hessian(family: GlmFamily, beta, batch: Batch) -> np.ndarray:
    """Exact Hessian ``-X^T diag(d''(X beta)) X`` of :func:`log_likelihood`."""
    beta = _check_beta(beta, batch)
    w = family.variance(batch.X @ beta)
    H = -(batch.X.T * w) @ batch.X
    return 0.5 * (H + H.T)


def stack_batches(batches: list[Batch], batch_index: int | None = None) -> Batch:
    """Concatenate blocks of one source into a single pooled block."""
    if not batches:
        raise ValueError("nothing to stack")
    first = batches[0]
    return Batch(
        source_id=first.source_id,
        batch_index=batch_index or batches[-1].batch_index,
        X=np.vstack([b.X for b in batches]),
        y=np.concatenate([b.y for b in batches]),
        family=first.family,
    )
