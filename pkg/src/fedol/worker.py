"""Per-source computation: everything that touches raw rows lives here."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .glm import Batch, GlmFamily, hessian, stack_batches
from .renewable import (
    SourceState,
    absorb_batch,
    approx_value_and_gradient,
    lipschitz_bound,
)


@dataclass(frozen=True)
class BatchInfo:
    source_id: int
    n_batch: int
    n_cum: int
    lipschitz: float
    beta_prev: np.ndarray


class SourceWorker:
    """Holds one source's renewable state and its current batch.

    With ``keep_history=True`` the worker retains every raw batch and
    evaluates the exact cumulative likelihood instead of the renewable
    surrogate; this is the offline benchmark and never the streaming method.
    """

    def __init__(self, state: SourceState, family: GlmFamily, keep_history: bool = False):
        self.state = state
        self.family = family
        self.keep_history = keep_history
        self.history: list[Batch] = []
        self.batch: Batch | None = None
        self._active: tuple[SourceState, Batch] | None = None

    @property
    def source_id(self) -> int:
        return self.state.source_id

    def start_batch(self, batch: Batch) -> BatchInfo:
        if batch.source_id != self.state.source_id:
            raise ValueError(
                f"worker for source {self.state.source_id} got a batch from {batch.source_id}"
            )
        if batch.batch_index != self.state.batches_seen + 1:
            raise ValueError(
                f"source {self.source_id} expects batch {self.state.batches_seen + 1}, "
                f"got {batch.batch_index}"
            )
        self.batch = batch
        if self.keep_history:
            self.history.append(batch)
            pooled = stack_batches(self.history)
            self._active = (SourceState.fresh(self.source_id, batch.p), pooled)
        else:
            self._active = (self.state, batch)
        st, bt = self._active
        return BatchInfo(
            self.source_id,
            batch.n,
            self.state.n_cum + batch.n,
            lipschitz_bound(st, self.family, bt),
            self.state.beta_prev.copy(),
        )

    def local_update(self, beta, omega: float, n_total: int) -> tuple[np.ndarray, float]:
        """One gradient step from ``beta``; also reports ``-approx_loglik(beta)``."""
        if self._active is None:
            raise RuntimeError("start_batch must be called first")
        st, bt = self._active
        beta = np.asarray(beta, dtype=float)
        value, g = approx_value_and_gradient(st, self.family, beta, bt, n_total)
        return beta - omega * g, -value

    def hessian_summary(self, beta_hat) -> tuple[np.ndarray, int]:
        """Accumulated Hessian including the current batch, at ``beta_hat``."""
        st, bt = self._active
        J = st.J_acc + hessian(self.family, beta_hat, bt)
        return J, self.state.n_cum + self.batch.n

    def absorb(self, beta_hat) -> SourceState:
        if self.batch is None:
            raise RuntimeError("no batch to absorb")
        beta_hat = np.asarray(beta_hat, dtype=float)
        if self.keep_history:
            self.state = replace(
                self.state,
                beta_prev=beta_hat.copy(),
                n_cum=self.state.n_cum + self.batch.n,
                batches_seen=self.state.batches_seen + 1,
            )
        else:
            self.state = absorb_batch(self.state, self.family, beta_hat, self.batch)
        # raw rows of the current batch are released here
        self.batch = None
        self._active = None
        return self.state


class LocalPool:
    """In-memory set of workers with the interface the solver drives."""

    def __init__(self, workers: list[SourceWorker]):
        self.workers = workers

    @property
    def K(self) -> int:
        return len(self.workers)

    def start_batch(self, batches: list[Batch]) -> list[BatchInfo]:
        if len(batches) != self.K:
            raise ValueError(f"expected {self.K} batches, got {len(batches)}")
        return [w.start_batch(b) for w, b in zip(self.workers, batches)]

    def local_update(self, B, omega, n_total, sources=None):
        sources = range(self.K) if sources is None else sources
        cols, losses = [], []
        for c, k in enumerate(sources):
            beta_bar, loss = self.workers[k].local_update(B[:, c], omega, n_total)
            cols.append(beta_bar)
            losses.append(loss)
        return np.column_stack(cols), np.array(losses)

    def hessian_summaries(self, B):
        return [w.hessian_summary(B[:, k]) for k, w in enumerate(self.workers)]

    def absorb(self, B) -> list[SourceState]:
        return [w.absorb(B[:, k]) for k, w in enumerate(self.workers)]
