"""Renewable summary statistics for one streaming source.

A source never revisits old batches. Everything it knows about them is the
accumulated Hessian ``J_acc`` (sum of per-batch Hessians evaluated at the
per-batch estimates), the previous estimate and the running sample count.
The history log-likelihood is replaced by the quadratic
``0.5 * (beta - beta_prev)^T J_acc (beta - beta_prev)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .glm import Batch, GlmFamily, hessian, log_likelihood, score

CHECKPOINT_MAGIC = b"FOLS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class SourceState:
    source_id: int
    J_acc: np.ndarray
    beta_prev: np.ndarray
    n_cum: int = 0
    batches_seen: int = 0

    def __post_init__(self):
        self.J_acc = np.asarray(self.J_acc, dtype=float)
        self.beta_prev = np.asarray(self.beta_prev, dtype=float).reshape(-1)
        p = self.beta_prev.shape[0]
        if self.J_acc.shape != (p, p):
            raise ValueError(f"J_acc must be {p}x{p}, got {self.J_acc.shape}")

    @classmethod
    def fresh(cls, source_id: int, p: int) -> "SourceState":
        return cls(source_id, np.zeros((p, p)), np.zeros(p))

    @property
    def p(self) -> int:
        return self.beta_prev.shape[0]


def _check(state: SourceState, beta, batch: Batch) -> np.ndarray:
    if batch.source_id != state.source_id:
        raise ValueError(
            f"batch from source {batch.source_id} given to state of source {state.source_id}"
        )
    if batch.p != state.p:
        raise ValueError(f"batch has p={batch.p}, state has p={state.p}")
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != state.p:
        raise ValueError(f"beta has length {beta.shape[0]}, state has p={state.p}")
    return beta


def approx_loglik(state: SourceState, family: GlmFamily, beta, batch: Batch) -> float:
    beta = _check(state, beta, batch)
    value = log_likelihood(family, beta, batch)
    if state.batches_seen:
        diff = beta - state.beta_prev
        value += 0.5 * diff @ state.J_acc @ diff
    return float(value)


def approx_gradient(
    state: SourceState, family: GlmFamily, beta, batch: Batch, N_total: int
) -> np.ndarray:
    """Gradient of ``-approx_loglik / N_total`` at ``beta``."""
    beta = _check(state, beta, batch)
    if N_total < batch.n:
        raise ValueError(f"N_total={N_total} is smaller than the batch size {batch.n}")
    U = score(family, beta, batch)
    if state.batches_seen:
        U = U + state.J_acc @ (beta - state.beta_prev)
    return -U / N_total


def approx_value_and_gradient(
    state: SourceState, family: GlmFamily, beta, batch: Batch, N_total: int
) -> tuple[float, np.ndarray]:
    """``approx_loglik`` and ``approx_gradient`` sharing one pass over the rows."""
    beta = _check(state, beta, batch)
    if N_total < batch.n:
        raise ValueError(f"N_total={N_total} is smaller than the batch size {batch.n}")
    eta = batch.X @ beta
    value = float(batch.y @ eta - family.d(eta).sum())
    U = batch.X.T @ (batch.y - family.mean(eta))
    if state.batches_seen:
        diff = beta - state.beta_prev
        Jd = state.J_acc @ diff
        value += 0.5 * float(diff @ Jd)
        U = U + Jd
    return value, -U / N_total


def absorb_batch(
    state: SourceState, family: GlmFamily, beta_hat, batch: Batch
) -> SourceState:
    beta_hat = _check(state, beta_hat, batch)
    return replace(
        state,
        J_acc=state.J_acc + hessian(family, beta_hat, batch),
        beta_prev=beta_hat.copy(),
        n_cum=state.n_cum + batch.n,
        batches_seen=state.batches_seen + 1,
    )


def lipschitz_bound(state: SourceState, family: GlmFamily, batch: Batch) -> float:
    """Upper bound on the curvature of ``-approx_loglik`` (not normalized by N)."""
    top = family.max_variance * np.linalg.eigvalsh(batch.X.T @ batch.X)[-1]
    if state.batches_seen:
        top += np.linalg.eigvalsh(-state.J_acc)[-1]
    return float(max(top, 0.0))


# -- checkpoints -------------------------------------------------------------


def dump_state(state: SourceState) -> bytes:
    p = state.p
    head = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        state.source_id,
        p,
        state.batches_seen,
        state.n_cum,
    )
    iu = np.triu_indices(p)
    body = np.concatenate([state.beta_prev, state.J_acc[iu]]).astype("<f8")
    return head + body.tobytes()


def load_state(data: bytes) -> SourceState:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, source_id, p, seen, n_cum = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    m = p * (p + 1) // 2
    expected = _HEADER.size + 8 * (p + m)
    if len(data) != expected:
        raise CheckpointError(f"checkpoint has {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    J = np.zeros((p, p))
    iu = np.triu_indices(p)
    J[iu] = body[p:]
    J = J + np.triu(J, 1).T
    return SourceState(source_id, J, body[:p].copy(), n_cum, seen)


def save_checkpoint(state: SourceState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dump_state(state))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> SourceState:
    return load_state(Path(path).read_bytes())
