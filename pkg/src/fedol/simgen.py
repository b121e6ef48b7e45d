"""Synthetic multisource streams with planted subgroups, and evaluation metrics.

Three coefficient layouts share one support: two disjoint sets ``C1`` and
``C2`` of four covariates each, with magnitudes 0.6.

* ``ex1``: every source uses ``(+C1, -C2)``.
* ``ex2``: the first half uses ``(+C1, -C2)``, the second half ``(-C1, +C2)``.
* ``ex3``: four equal blocks with sign patterns ``(+,+)``, ``(-,+)``,
  ``(+,-)``, ``(-,-)`` on ``(C1, C2)``.

Covariates are N(0, Sigma) with ``Sigma[i, j] = 0.5 ** |i - j|``. Every
random draw is keyed by ``(seed, stream, source, batch)`` so batches can be
regenerated independently and in any order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import adjusted_rand_score, roc_auc_score

from .glm import Batch, GlmFamily, Kind
from .prox import Partition

SIGNAL = 0.6
SUPPORT_BLOCK = 4
AR_RHO = 0.5
TEST_SIZE = 2000

_STREAM_DESIGN = 0
_STREAM_TRAIN = 1
_STREAM_TEST = 2


class Example(str, enum.Enum):
    EX1 = "ex1"
    EX2 = "ex2"
    EX3 = "ex3"


@dataclass(frozen=True)
class SimDesign:
    example_id: Example = Example.EX2
    K: int = 8
    p: int = 50
    n_first: int = 100
    n_later: int = 80
    n_batches: int = 10
    family: GlmFamily = GlmFamily.logistic()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "example_id", Example(self.example_id))
        if self.K < 1 or self.n_batches < 1 or self.n_first < 1 or self.n_later < 1:
            raise ValueError("K, n_batches and batch sizes must be positive")
        if self.example_id is Example.EX2 and self.K % 2:
            raise ValueError("example 2 needs an even number of sources")
        if self.example_id is Example.EX3 and self.K % 4:
            raise ValueError("example 3 needs K divisible by 4")
        if self.p < 2 * SUPPORT_BLOCK:
            raise ValueError(f"p must be at least {2 * SUPPORT_BLOCK}")

    def batch_size(self, u: int) -> int:
        return self.n_first if u == 1 else self.n_later


@dataclass
class TrueModel:
    B_star: np.ndarray
    partition_star: Partition
    support_star: list[np.ndarray]
    C1: np.ndarray
    C2: np.ndarray


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *key]))


_PATTERNS = {
    Example.EX1: [(1, -1)],
    Example.EX2: [(1, -1), (-1, 1)],
    Example.EX3: [(1, 1), (-1, 1), (1, -1), (-1, -1)],
}


def gen_design(design: SimDesign) -> TrueModel:
    rng = _rng(design.seed, _STREAM_DESIGN)
    picks = rng.choice(design.p, size=2 * SUPPORT_BLOCK, replace=False)
    C1 = np.sort(picks[:SUPPORT_BLOCK])
    C2 = np.sort(picks[SUPPORT_BLOCK:])
    patterns = _PATTERNS[design.example_id]
    block = design.K // len(patterns)
    B = np.zeros((design.p, design.K))
    labels = np.repeat(np.arange(len(patterns)), block)
    for k, g in enumerate(labels):
        s1, s2 = patterns[g]
        B[C1, k] = s1 * SIGNAL
        B[C2, k] = s2 * SIGNAL
    support = [np.flatnonzero(B[:, k]) for k in range(design.K)]
    return TrueModel(B, Partition.from_labels(labels), support, C1, C2)


def ar1_cholesky(p: int, rho: float = AR_RHO) -> np.ndarray:
    idx = np.arange(p)
    sigma = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(sigma)


def _draw(model: TrueModel, design: SimDesign, k: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    Z = rng.standard_normal((n, design.p))
    X = Z @ ar1_cholesky(design.p).T
    eta = X @ model.B_star[:, k]
    if design.family.kind is Kind.GAUSSIAN:
        y = eta + rng.standard_normal(n)
    else:
        y = (rng.random(n) < design.family.mean(eta)).astype(float)
    return X, y


def gen_batch(model: TrueModel, design: SimDesign, k: int, u: int) -> Batch:
    """Batch ``u`` (1-based) of source ``k`` (0-based)."""
    if not 0 <= k < design.K or u < 1:
        raise ValueError(f"invalid source {k} or batch {u}")
    rng = _rng(design.seed, _STREAM_TRAIN, k, u)
    X, y = _draw(model, design, k, design.batch_size(u), rng)
    return Batch(k, u, X, y, design.family)


def gen_test(model: TrueModel, design: SimDesign, n: int = TEST_SIZE) -> list[Batch]:
    out = []
    for k in range(design.K):
        X, y = _draw(model, design, k, n, _rng(design.seed, _STREAM_TEST, k))
        out.append(Batch(k, 1, X, y, design.family))
    return out


@dataclass
class MetricsRecord:
    TPR: float
    FPR: float
    SSE: float
    prediction: float  # AUC for logistic, MSE for Gaussian
    Ghat: float
    ARI: float
    auc_undefined: int = 0

    def as_dict(self) -> dict[str, float]:
        return {
            "TPR": self.TPR,
            "FPR": self.FPR,
            "SSE": self.SSE,
            "AUC_or_MSE": self.prediction,
            "Ghat": self.Ghat,
            "ARI": self.ARI,
        }


def selection_rates(B_hat, support_star, p: int) -> tuple[float, float]:
    tpr, fpr = [], []
    for k, truth in enumerate(support_star):
        chosen = set(np.flatnonzero(B_hat[:, k]).tolist())
        truth = set(np.asarray(truth).tolist())
        tpr.append(len(chosen & truth) / len(truth) if truth else 1.0)
        negatives = p - len(truth)
        fpr.append(len(chosen - truth) / negatives if negatives else 0.0)
    return float(np.mean(tpr)), float(np.mean(fpr))


def metrics(fit, model: TrueModel, test: list[Batch], family: GlmFamily, clustering: bool = True) -> MetricsRecord:
    """Selection, estimation, prediction and clustering scores for one fit.

    ``clustering=False`` reports NaN for the subgroup count and ARI (methods
    that cannot cluster sources).
    """
    B_hat = np.asarray(getattr(fit, "B_hat", fit), dtype=float)
    p, K = B_hat.shape
    tpr, fpr = selection_rates(B_hat, model.support_star, p)
    sse = float(np.sum((B_hat - model.B_star) ** 2) / K)
    undefined = 0
    if family.kind is Kind.GAUSSIAN:
        pred = float(np.mean([np.mean((t.y - t.X @ B_hat[:, k]) ** 2) for k, t in enumerate(test)]))
    else:
        aucs = []
        for k, t in enumerate(test):
            if np.unique(t.y).size < 2:
                undefined += 1
                continue
            aucs.append(roc_auc_score(t.y, t.X @ B_hat[:, k]))
        pred = float(np.mean(aucs)) if aucs else math.nan
    if clustering:
        labels = fit.partition.labels
        ghat = float(fit.partition.n_groups)
        ari = float(adjusted_rand_score(model.partition_star.labels, labels))
    else:
        ghat = ari = math.nan
    return MetricsRecord(tpr, fpr, sse, pred, ghat, ari, undefined)
