"""Client side of the protocol: one data source.

Raw batches arrive locally through :meth:`FederatedClient.deliver` (not over
the coordinator channel) and never leave the client; only p-vectors and the
p x p summary for the divide-and-conquer baseline are sent back.
"""

from __future__ import annotations

import logging
import queue
from pathlib import Path

import numpy as np

from ..glm import Batch, GlmFamily
from ..renewable import SourceState, load_checkpoint, save_checkpoint
from ..worker import SourceWorker
from .messages import (
    PROTOCOL_VERSION,
    Absorbed,
    BatchReady,
    BatchStart,
    Converged,
    Failure,
    GlobalBroadcast,
    Hello,
    LocalUpdate,
    Shutdown,
    SummaryReport,
    SummaryRequest,
    Welcome,
)
from .transport import Channel, ChannelClosed

log = logging.getLogger(__name__)


def checkpoint_path(directory: str | Path, source_id: int) -> Path:
    return Path(directory) / f"source_{source_id}.ckpt"


class FederatedClient:
    """Serves protocol requests for one source until told to shut down.

    With ``checkpoint_dir`` set, the renewable state is written after every
    absorbed batch, and :meth:`resume` rebuilds a client from that file.
    """

    def __init__(
        self,
        state: SourceState,
        family: GlmFamily,
        keep_history: bool = False,
        checkpoint_dir: str | Path | None = None,
        protocol_version: int = PROTOCOL_VERSION,
    ):
        self.worker = SourceWorker(state, family, keep_history)
        self.checkpoint_dir = checkpoint_dir
        self.protocol_version = protocol_version
        self._arrivals: queue.Queue[Batch] = queue.Queue()
        self.error: BaseException | None = None

    @classmethod
    def fresh(cls, source_id: int, p: int, family: GlmFamily, **kw) -> "FederatedClient":
        return cls(SourceState.fresh(source_id, p), family, **kw)

    @classmethod
    def resume(cls, directory: str | Path, source_id: int, family: GlmFamily, **kw) -> "FederatedClient":
        state = load_checkpoint(checkpoint_path(directory, source_id))
        return cls(state, family, checkpoint_dir=directory, **kw)

    @property
    def source_id(self) -> int:
        return self.worker.source_id

    @property
    def state(self) -> SourceState:
        return self.worker.state

    def deliver(self, batch: Batch) -> None:
        """A new local batch has arrived at this source."""
        self._arrivals.put(batch)

    def serve(self, channel: Channel) -> None:
        try:
            channel.send(Hello(self.protocol_version, self.source_id, self.state.p))
            welcome = channel.recv()
            if not isinstance(welcome, Welcome):
                raise RuntimeError(f"expected Welcome, got {type(welcome).__name__}")
            channel.p = self.state.p
            while True:
                msg = channel.recv()
                if isinstance(msg, Shutdown):
                    break
                try:
                    reply = self.handle(msg)
                except Exception as exc:  # reported to the coordinator, which aborts
                    log.exception("source %d failed on %s", self.source_id, type(msg).__name__)
                    reply = Failure(self.source_id, f"{type(exc).__name__}: {exc}")
                channel.send(reply)
        except ChannelClosed:
            pass
        except BaseException as exc:
            self.error = exc
            log.exception("client for source %d stopped", self.source_id)
        finally:
            channel.close()

    def handle(self, msg):
        w = self.worker
        if isinstance(msg, BatchStart):
            try:
                batch = self._arrivals.get_nowait()
            except queue.Empty:
                raise RuntimeError(f"no data arrived for batch {msg.batch_index}") from None
            if batch.batch_index != msg.batch_index:
                raise RuntimeError(
                    f"coordinator opened batch {msg.batch_index}, local batch is {batch.batch_index}"
                )
            info = w.start_batch(batch)
            return BatchReady(
                self.source_id, batch.batch_index, info.n_batch, info.n_cum, info.lipschitz, info.beta_prev
            )
        if isinstance(msg, GlobalBroadcast):
            beta_bar, loss = w.local_update(msg.B[:, msg.column], msg.omega, msg.n_total)
            return LocalUpdate(self.source_id, msg.round, beta_bar, loss)
        if isinstance(msg, SummaryRequest):
            J, n_cum = w.hessian_summary(msg.beta)
            return SummaryReport(self.source_id, n_cum, J)
        if isinstance(msg, Converged):
            state = w.absorb(np.asarray(msg.beta_hat))
            if self.checkpoint_dir is not None:
                save_checkpoint(state, checkpoint_path(self.checkpoint_dir, self.source_id))
            return Absorbed(self.source_id, state.batches_seen)
        raise RuntimeError(f"unexpected {type(msg).__name__}")
