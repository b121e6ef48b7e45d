"""MCP thresholding and the sparsity + pairwise-fusion proximal operator.

The proximal map

    argmin_B  ||B - B_bar||_F^2 / (2 * step)
              + sum_{j,k} MCP(|B[j, k]|; lambda1)
              + sum_{k1 < k2} MCP(||B[:, k1] - B[:, k2]||_2; lambda2)

is solved by ADMM on the splitting ``Gamma = B`` (sparsity copy) and
``delta_{k1 k2} = B[:, k1] - B[:, k2]`` (fusion copies). The B-update is a
closed-form linear solve, the Gamma-update is the scalar MCP threshold and
the delta-update is the group MCP threshold, so fused pairs come out with
exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ._admm import admm_loop


class PenaltyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PenaltyConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    a: float = 3.0
    admm_rho: float = 1.0
    max_admm_iters: int = 500
    tol_primal: float = 1e-5
    tol_dual: float = 1e-5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise PenaltyConfigError("penalty levels must be nonnegative")
        if not self.a > 1:
            raise PenaltyConfigError(f"MCP concavity a must exceed 1, got {self.a}")
        if not self.admm_rho > 0:
            raise PenaltyConfigError("admm_rho must be positive")
        if not self.a * self.admm_rho > 1:
            raise PenaltyConfigError(
                f"a * admm_rho = {self.a * self.admm_rho} must exceed 1"
            )
        if self.max_admm_iters < 1:
            raise PenaltyConfigError("max_admm_iters must be at least 1")

    def with_lambdas(self, lambda1: float, lambda2: float) -> "PenaltyConfig":
        return PenaltyConfig(
            lambda1,
            lambda2,
            self.a,
            self.admm_rho,
            self.max_admm_iters,
            self.tol_primal,
            self.tol_dual,
        )


# -- MCP primitives ------------------------------------------------------------


def mcp_value(x, lam: float, a: float):
    """``int_0^|x| (lam - t/a)_+ dt``, elementwise."""
    ax = np.abs(np.asarray(x, dtype=float))
    inner = lam * ax - ax * ax / (2.0 * a)
    out = np.where(ax <= a * lam, inner, 0.5 * a * lam * lam)
    return out if out.ndim else float(out)


def mcp_derivative(x, lam: float, a: float):
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.maximum(lam - np.abs(x) / a, 0.0)
    return out if out.ndim else float(out)


def _require_convex_threshold(a: float, rho: float):
    if not a * rho > 1:
        raise PenaltyConfigError(f"MCP threshold needs a * rho > 1, got {a * rho}")


def scalar_mcp_prox(z, lam: float, a: float, rho: float):
    """``argmin_x rho/2 (x - z)^2 + MCP(|x|; lam)`` (firm thresholding)."""
    _require_convex_threshold(a, rho)
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    shrunk = np.sign(z) * np.maximum(az - lam / rho, 0.0) / (1.0 - 1.0 / (a * rho))
    out = np.where(az <= a * lam, shrunk, z)
    return out if out.ndim else float(out)


def group_mcp_prox(z, lam: float, a: float, rho: float):
    """Group analogue of :func:`scalar_mcp_prox` on the Euclidean norm.

    ``z`` may be a single vector or a matrix whose columns are thresholded
    independently.
    """
    _require_convex_threshold(a, rho)
    z = np.asarray(z, dtype=float)
    norms = np.linalg.norm(z, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(norms > 0, np.maximum(1.0 - lam / (rho * norms), 0.0), 0.0)
    scale = np.where(norms <= a * lam, shrink / (1.0 - 1.0 / (a * rho)), 1.0)
    return z * scale


def _scalar_mcp_prox_global(z, lam: float, a: float, rho: float):
    # Also valid when a * rho <= 1, where the subproblem is nonconvex and the
    # minimizer jumps between 0 and the flat region.
    if a * rho > 1:
        return scalar_mcp_prox(z, lam, a, rho)
    z = np.asarray(z, dtype=float)
    edge = np.sign(z) * a * lam
    outside = np.where(np.abs(z) > a * lam, z, edge)

    def f(x):
        return 0.5 * rho * (x - z) ** 2 + mcp_value(x, lam, a)

    return np.where(f(outside) < f(np.zeros_like(z)), outside, 0.0)


def penalty_value(B, cfg: PenaltyConfig) -> float:
    B = np.asarray(B, dtype=float)
    total = float(np.sum(mcp_value(B, cfg.lambda1, cfg.a))) if cfg.lambda1 else 0.0
    K = B.shape[1]
    if cfg.lambda2 and K > 1:
        i, j = pair_index(K)
        diff = np.linalg.norm(B[:, i] - B[:, j], axis=0)
        total += float(np.sum(mcp_value(diff, cfg.lambda2, cfg.a)))
    return total


def prox_objective(B, B_bar, cfg: PenaltyConfig, step: float = 1.0) -> float:
    R = np.asarray(B, dtype=float) - np.asarray(B_bar, dtype=float)
    return float(np.sum(R * R)) / (2.0 * step) + penalty_value(B, cfg)


# -- pairs and partitions --------------------------------------------------------

_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def pair_index(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(i, j)`` over all pairs ``i < j`` in lexicographic order."""
    if K not in _PAIR_CACHE:
        pairs = list(combinations(range(K), 2))
        i = np.array([a for a, _ in pairs], dtype=int)
        j = np.array([b for _, b in pairs], dtype=int)
        _PAIR_CACHE[K] = (i, j)
    return _PAIR_CACHE[K]


def _incidence(K: int) -> np.ndarray:
    i, j = pair_index(K)
    D = np.zeros((len(i), K))
    D[np.arange(len(i)), i] = 1.0
    D[np.arange(len(i)), j] = -1.0
    return D


@dataclass
class FusionState:
    """ADMM split variables, kept between calls for warm starts.

    ``deltas[:, m]`` and ``duals[:, m]`` belong to pair ``pairs[m]``.
    """

    K: int
    deltas: np.ndarray
    duals: np.ndarray
    gamma: np.ndarray
    gamma_duals: np.ndarray
    converged: bool = True
    iterations: int = 0
    primal_residual: float = 0.0
    dual_residual: float = 0.0

    @property
    def pairs(self) -> list[tuple[int, int]]:
        i, j = pair_index(self.K)
        return list(zip(i.tolist(), j.tolist()))

    def delta(self, k1: int, k2: int) -> np.ndarray:
        if k1 == k2:
            raise ValueError("a pair needs two distinct sources")
        lo, hi = min(k1, k2), max(k1, k2)
        m = lo * self.K - lo * (lo + 1) // 2 + (hi - lo - 1)
        d = self.deltas[:, m]
        return d if k1 < k2 else -d

    def copy(self) -> "FusionState":
        return FusionState(
            self.K,
            self.deltas.copy(),
            self.duals.copy(),
            self.gamma.copy(),
            self.gamma_duals.copy(),
            self.converged,
            self.iterations,
            self.primal_residual,
            self.dual_residual,
        )


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> None:
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return
        if self.rank[rx] < self.rank[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        if self.rank[rx] == self.rank[ry]:
            self.rank[rx] += 1

    def components(self) -> list[tuple[int, ...]]:
        groups: dict[int, list[int]] = {}
        for x in range(len(self.parent)):
            groups.setdefault(self.find(x), []).append(x)
        return sorted((tuple(g) for g in groups.values()), key=lambda g: g[0])


@dataclass
class Partition:
    """Disjoint groups of 0-based source indices, ordered by smallest member."""

    groups: list[tuple[int, ...]]
    labels: np.ndarray = field(default=None)
    centers: np.ndarray | None = None

    def __post_init__(self):
        self.groups = [tuple(sorted(g)) for g in self.groups]
        self.groups.sort(key=lambda g: g[0])
        K = sum(len(g) for g in self.groups)
        members = sorted(k for g in self.groups for k in g)
        if members != list(range(K)) or any(not g for g in self.groups):
            raise ValueError("groups must be nonempty and partition 0..K-1")
        labels = np.empty(K, dtype=int)
        for gid, g in enumerate(self.groups):
            labels[list(g)] = gid
        if self.labels is not None and not np.array_equal(np.asarray(self.labels), labels):
            raise ValueError("labels disagree with groups")
        self.labels = labels

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        groups: dict[int, list[int]] = {}
        for k, g in enumerate(np.asarray(labels).tolist()):
            groups.setdefault(g, []).append(k)
        return cls(list(groups.values()))

    @classmethod
    def singletons(cls, K: int) -> "Partition":
        return cls([(k,) for k in range(K)])

    @property
    def K(self) -> int:
        return len(self.labels)

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def fuse_columns(B, labels, weights=None) -> np.ndarray:
    """Replace the columns of each group by their weighted average.

    A coordinate stays exactly zero when at least half of the group weight
    has it at zero, so averaging never creates dust from near-threshold
    disagreements.
    """
    B = np.asarray(B, dtype=float)
    labels = np.asarray(labels)
    K = B.shape[1]
    w = np.ones(K) if weights is None else np.asarray(weights, dtype=float)
    out = B.copy()
    for g in np.unique(labels):
        members = np.flatnonzero(labels == g)
        if len(members) == 1:
            continue
        wg = w[members] / w[members].sum()
        center = B[:, members] @ wg
        zero_weight = (B[:, members] == 0.0).astype(float) @ wg
        center[zero_weight >= 0.5] = 0.0
        out[:, members] = center[:, None]
    return out


def extract_partition(
    fusion: FusionState, B_hat, merge_tol: float = 0.0, weights=None
) -> Partition:
    """Connected components of the graph whose edges are fused pairs."""
    B_hat = np.asarray(B_hat, dtype=float)
    K = fusion.K
    uf = UnionFind(K)
    if K > 1:
        norms = np.linalg.norm(fusion.deltas, axis=0)
        i, j = pair_index(K)
        for m in np.flatnonzero(norms <= merge_tol):
            uf.union(int(i[m]), int(j[m]))
    part = Partition(uf.components())
    fused = fuse_columns(B_hat, part.labels, weights)
    part.centers = fused[:, [g[0] for g in part.groups]]
    return part


# -- the proximal operator ----------------------------------------------------


def _fresh_fusion(B_bar: np.ndarray) -> FusionState:
    p, K = B_bar.shape
    i, j = pair_index(K)
    deltas = B_bar[:, i] - B_bar[:, j]
    return FusionState(K, deltas, np.zeros_like(deltas), B_bar.copy(), np.zeros_like(B_bar))


def _admm_numpy(B_bar, cfg: PenaltyConfig, rho_q: float, st: FusionState):
    # plain numpy version of the compiled loop, kept as a readable reference
    K = B_bar.shape[1]
    i, j = pair_index(K)
    th = cfg.admm_rho
    D = _incidence(K)
    c = rho_q + th + th * K
    coupling = th / (rho_q + th)
    Gam, W, Dl, U = st.gamma, st.gamma_duals, st.deltas, st.duals
    primal = dual = np.inf
    converged = False
    it = 0
    for it in range(1, cfg.max_admm_iters + 1):
        rhs = rho_q * B_bar + th * (Gam - W) + th * ((Dl - U) @ D)
        B = (rhs + coupling * rhs.sum(axis=1, keepdims=True)) / c

        V = B + W
        Gam_new = scalar_mcp_prox(V, cfg.lambda1, cfg.a, th) if cfg.lambda1 else V
        DB = B[:, i] - B[:, j]
        Dl_new = group_mcp_prox(DB + U, cfg.lambda2, cfg.a, th)

        rG = B - Gam_new
        rD = DB - Dl_new
        W = W + rG
        U = U + rD
        primal = max(np.max(np.abs(rG)), np.max(np.linalg.norm(rD, axis=0)))
        dual = th * max(
            np.max(np.abs(Gam_new - Gam)), np.max(np.linalg.norm(Dl_new - Dl, axis=0))
        )
        Gam, Dl = Gam_new, Dl_new
        if primal <= cfg.tol_primal and dual <= cfg.tol_dual:
            converged = True
            break
    return Gam, W, Dl, U, it, converged, primal, dual


def prox_operator(
    B_bar,
    cfg: PenaltyConfig,
    warm: FusionState | None = None,
    step: float = 1.0,
    _reference: bool = False,
) -> tuple[np.ndarray, FusionState]:
    """Minimize the penalized proximal objective around ``B_bar``.

    ``step`` scales the quadratic (``1 / (2 * step)``), which is how a
    proximal-gradient step of size ``step`` enters; ``step=1`` is the plain
    proximal map. The returned state carries ``converged`` and can be passed
    back as ``warm`` on the next call.
    """
    B_bar = np.asarray(B_bar, dtype=float)
    if B_bar.ndim != 2:
        raise ValueError("B_bar must be a p x K matrix")
    if not step > 0:
        raise ValueError("step must be positive")
    p, K = B_bar.shape
    i, j = pair_index(K)
    rho_q = 1.0 / step

    if K == 1 or cfg.lambda2 == 0.0:
        G = _scalar_mcp_prox_global(B_bar, cfg.lambda1, cfg.a, rho_q) if cfg.lambda1 else B_bar.copy()
        deltas = G[:, i] - G[:, j]
        return G, FusionState(K, deltas, np.zeros_like(deltas), G.copy(), np.zeros_like(G))

    if warm is not None and warm.K == K and warm.gamma.shape == (p, K):
        st = warm.copy()
    else:
        st = _fresh_fusion(B_bar)

    if _reference:
        Gam, W, Dl, U, it, converged, primal, dual = _admm_numpy(B_bar, cfg, rho_q, st)
    else:
        Gam, W, Dl, U = (np.ascontiguousarray(x, dtype=float) for x in (st.gamma, st.gamma_duals, st.deltas, st.duals))
        it, converged, primal, dual = admm_loop(
            np.ascontiguousarray(B_bar), float(cfg.lambda1), float(cfg.lambda2), float(cfg.a),
            rho_q, float(cfg.admm_rho), int(cfg.max_admm_iters), float(cfg.tol_primal),
            float(cfg.tol_dual), Gam, W, Dl, U, i, j,
        )

    state = FusionState(K, Dl, U, Gam, W, converged, it, float(primal), float(dual))
    part = extract_partition(state, Gam)
    return fuse_columns(Gam, part.labels), state
