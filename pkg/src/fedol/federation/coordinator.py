"""Coordinator side: the proximal aggregation and all tuning decisions.

:class:`RemotePool` gives the solver in :mod:`fedol.fol` the same interface
as the in-memory pool, but every Step I request becomes a
``GlobalBroadcast`` / ``LocalUpdate`` round trip. Each round is a barrier:
the coordinator waits for every addressed client before the prox step.
"""

from __future__ import annotations

import enum
import time
from typing import Callable, Iterable, Sequence

import numpy as np

from ..fol import FitResult, FolConfig, fit_pool, homo_pool, ind_pool, tune_pool
from ..glm import Batch, GlmFamily
from ..prox import FusionState, PenaltyConfig, prox_operator
from ..worker import BatchInfo
from .client import FederatedClient
from .messages import (
    Absorbed,
    BatchReady,
    BatchStart,
    Converged,
    Failure,
    FitSummary,
    GlobalBroadcast,
    LocalUpdate,
    ProtocolError,
    Shutdown,
    SummaryReport,
    SummaryRequest,
    encode,
)
from .transport import Channel, ChannelTimeout, Transport


class StragglerError(TimeoutError):
    """A client missed the round deadline; the round is aborted."""

    def __init__(self, source_id: int, round_: int | str):
        super().__init__(f"source {source_id} did not reply in round {round_}")
        self.source_id = source_id
        self.round = round_


class ClientFailure(RuntimeError):
    def __init__(self, source_id: int, reason: str):
        super().__init__(f"source {source_id} failed: {reason}")
        self.source_id = source_id


class FeedError(ValueError):
    """The batch feed broke the synchronous-arrival assumption."""


class Method(str, enum.Enum):
    PROPOSED = "proposed"
    ORACLE = "oracle"
    IND = "ind"
    HOMO = "homo"
    FIXED = "fixed"


_SOLVERS: dict[Method, Callable] = {
    Method.PROPOSED: tune_pool,
    Method.ORACLE: tune_pool,
    Method.IND: ind_pool,
    Method.HOMO: homo_pool,
    Method.FIXED: fit_pool,
}


class RemotePool:
    def __init__(self, channels: list[Channel], timeout: float):
        self.channels = channels
        self.timeout = timeout
        self.round = 0

    @property
    def K(self) -> int:
        return len(self.channels)

    def _gather(self, sources: Sequence[int], kind: type, label) -> list:
        deadline = time.monotonic() + self.timeout
        replies = []
        for k in sources:
            try:
                msg = self.channels[k].recv(max(deadline - time.monotonic(), 1e-3))
            except ChannelTimeout:
                raise StragglerError(k, label) from None
            if isinstance(msg, Failure):
                raise ClientFailure(msg.source_id, msg.reason)
            if not isinstance(msg, kind):
                raise ProtocolError(f"source {k}: expected {kind.__name__}, got {type(msg).__name__}")
            if getattr(msg, "source_id", k) != k:
                raise ProtocolError(f"channel {k} answered as source {msg.source_id}")
            replies.append(msg)
        return replies

    def open_batch(self, batch_index: int, penalty: PenaltyConfig) -> list[BatchInfo]:
        start = BatchStart(batch_index, penalty.lambda1, penalty.lambda2, 0.0)
        for ch in self.channels:
            ch.send(start)
        infos = []
        for msg in self._gather(range(self.K), BatchReady, f"open {batch_index}"):
            if msg.batch_index != batch_index:
                raise ProtocolError(f"source {msg.source_id} opened batch {msg.batch_index}")
            infos.append(BatchInfo(msg.source_id, msg.n_batch, msg.n_cum, msg.lipschitz, msg.beta_prev))
        return infos

    def local_update(self, B, omega, n_total, sources=None):
        sources = list(range(self.K)) if sources is None else list(sources)
        self.round += 1
        B = np.ascontiguousarray(B, dtype=float)
        for c, k in enumerate(sources):
            self.channels[k].send(GlobalBroadcast(self.round, c, float(omega), int(n_total), B))
        replies = self._gather(sources, LocalUpdate, self.round)
        for msg in replies:
            if msg.round != self.round:
                raise ProtocolError(f"source {msg.source_id} answered round {msg.round}")
        return (
            np.column_stack([m.beta_bar for m in replies]),
            np.array([m.loss for m in replies]),
        )

    def hessian_summaries(self, B):
        for k, ch in enumerate(self.channels):
            ch.send(SummaryRequest(np.asarray(B[:, k], dtype=float)))
        return [(m.J, m.n_cum) for m in self._gather(range(self.K), SummaryReport, "summary")]

    def absorb(self, fit: FitResult, batch_index: int):
        B = fit.B_local
        lam1 = np.atleast_1d(fit.lambda1)
        for k, ch in enumerate(self.channels):
            ch.send(
                Converged(
                    batch_index,
                    float(lam1[k] if lam1.size == self.K else lam1[0]),
                    float(fit.lambda2),
                    float(fit.mbic),
                    fit.partition.n_groups,
                    np.asarray(B[:, k], dtype=float),
                )
            )
        return self._gather(range(self.K), Absorbed, f"absorb {batch_index}")

    def shutdown(self):
        for ch in self.channels:
            try:
                ch.send(Shutdown())
            except OSError:
                pass
            ch.close()


class Coordinator:
    """Holds the penalty configuration and drives clients batch by batch."""

    def __init__(
        self,
        cfg: FolConfig,
        method: Method | str = Method.PROPOSED,
        transport: Transport | None = None,
    ):
        self.cfg = cfg
        self.method = Method(method)
        self.transport = transport or Transport()
        self.pool: RemotePool | None = None
        self._threads = []

    def connect(self, clients: Sequence[FederatedClient]) -> "Coordinator":
        channels, self._threads = self.transport.connect(clients)
        self.pool = RemotePool(channels, self.transport.timeout)
        return self

    @property
    def K(self) -> int:
        return self.pool.K

    def open_batch(self, batch_index: int) -> list[BatchInfo]:
        return self.pool.open_batch(batch_index, self.cfg.penalty)

    def run_round(
        self,
        B,
        omega: float,
        n_total: int,
        penalty: PenaltyConfig | None = None,
        fusion: FusionState | None = None,
    ) -> tuple[np.ndarray, FusionState, np.ndarray]:
        """One synchronous round: broadcast B, collect Step I, apply Step II.

        Returns the new coefficients, the fusion state for warm starts and
        the per-source losses at ``B``.
        """
        B_bar, losses = self.pool.local_update(B, omega, n_total)
        B_new, fusion = prox_operator(B_bar, penalty or self.cfg.penalty, fusion, step=omega)
        return B_new, fusion, losses

    def run_batch(self, batch_index: int) -> FitResult:
        infos = self.open_batch(batch_index)
        fit = _SOLVERS[self.method](self.pool, infos, self.cfg)
        self.pool.absorb(fit, batch_index)
        return fit

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
        for t in self._threads:
            t.join(timeout=self.transport.timeout)
        self.pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_clients(
    K: int,
    p: int,
    family: GlmFamily,
    method: Method | str = Method.PROPOSED,
    checkpoint_dir=None,
) -> list[FederatedClient]:
    keep = Method(method) is Method.ORACLE
    return [
        FederatedClient.fresh(k, p, family, keep_history=keep, checkpoint_dir=checkpoint_dir)
        for k in range(K)
    ]


def run_stream(
    coordinator: Coordinator,
    clients: Sequence[FederatedClient],
    batch_feed: Iterable[Sequence[Batch]],
    cfg: FolConfig | None = None,
    on_batch: Callable[[int, FitResult], None] | None = None,
) -> list[FitResult]:
    """Feed batches to their sources and fit each time step in turn.

    ``batch_feed`` yields one list of K batches per time step. Each client
    receives only its own batch; the coordinator sees summaries. Clients are
    shut down when the feed ends or an error aborts the stream.
    """
    if cfg is not None:
        coordinator.cfg = cfg
    if coordinator.pool is None:
        coordinator.connect(clients)
    K = len(clients)
    results = []
    try:
        for step in batch_feed:
            step = list(step)
            if len(step) != K or any(b is None for b in step):
                missing = [k for k in range(K) if k >= len(step) or step[k] is None]
                raise FeedError(f"sources {missing} have no batch at this step")
            indices = {b.batch_index for b in step}
            if len(indices) != 1:
                raise FeedError(f"batches at one step carry indices {sorted(indices)}")
            for client, batch in zip(clients, step):
                if batch.n < 1:
                    raise FeedError(f"source {client.source_id} delivered an empty batch")
                client.deliver(batch)
            b = indices.pop()
            fit = coordinator.run_batch(b)
            results.append(fit)
            if on_batch is not None:
                on_batch(b, fit)
    finally:
        coordinator.close()
    return results


def fit_summary_bytes(fit: FitResult) -> bytes:
    """Canonical bytes of a fit; equal bytes mean bit-identical results."""
    return encode(
        FitSummary(
            float(np.atleast_1d(fit.lambda1)[0]) if np.ndim(fit.lambda1) else float(fit.lambda1),
            float(fit.lambda2),
            float(fit.mbic),
            float(fit.objective),
            int(bool(fit.converged)),
            int(fit.outer_iters),
            np.asarray(fit.partition.labels, dtype=float),
            np.asarray(fit.B_hat, dtype=float),
        )
    )
