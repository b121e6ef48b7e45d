"""Federated online estimator: proximal gradient over the renewable objective.

One outer iteration is a local gradient step at every source followed by the
sparsity + fusion proximal map at the coordinator. The solver only talks to
sources through a *pool* object exposing ``local_update(B, omega, n_total,
sources)``; :class:`fedol.worker.LocalPool` runs the sources in memory and
:mod:`fedol.federation` runs them behind a transport, with identical
arithmetic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .glm import Batch, GlmFamily
from .prox import (
    FusionState,
    Partition,
    PenaltyConfig,
    extract_partition,
    fuse_columns,
    pair_index,
    penalty_value,
    prox_operator,
)
from .renewable import SourceState
from .worker import BatchInfo, LocalPool, SourceWorker

log = logging.getLogger(__name__)


class StepSizeError(RuntimeError):
    pass


class TuningError(RuntimeError):
    pass


@dataclass
class FolConfig:
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    learning_rate: float | str = "auto"
    max_outer_iters: int = 200
    tol_outer: float = 1e-5
    grid_lambda1: Sequence[float] | None = None
    grid_lambda2: Sequence[float] | None = None
    n_grid: int = 8
    merge_tol: float = 0.0
    max_halvings: int = 30
    descent_tol: float = 1e-10
    accelerate: bool = True
    grid_reach: float = 10.0
    ascent_from: float = 0.25
    n_bisect: int = 3
    mbic_cn: float | None = 1.0

    def __post_init__(self):
        if isinstance(self.learning_rate, str):
            if self.learning_rate != "auto":
                raise ValueError("learning_rate must be a positive number or 'auto'")
        elif not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_outer_iters < 1 or not self.tol_outer > 0:
            raise ValueError("max_outer_iters >= 1 and tol_outer > 0 required")
        for grid in (self.grid_lambda1, self.grid_lambda2):
            if grid is not None and (len(grid) == 0 or min(grid) < 0):
                raise ValueError("tuning grids must be nonempty and nonnegative")


@dataclass
class FitResult:
    B_hat: np.ndarray
    partition: Partition
    selected: list[np.ndarray]
    lambda1: float
    lambda2: float
    mbic: float
    converged: bool
    outer_iters: int
    objective: float = float("nan")
    omega: float = float("nan")
    losses: np.ndarray | None = None
    n_total: int = 0
    # columns each source folds into its renewable state; differs from
    # B_hat only for the divide-and-conquer baseline
    B_local: np.ndarray | None = None
    fusion: FusionState | None = field(default=None, repr=False)
    trace: list[float] = field(default_factory=list, repr=False)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.B_local is None:
            self.B_local = self.B_hat

    @property
    def n_groups(self) -> int:
        return self.partition.n_groups


# -- helpers -----------------------------------------------------------------


def selected_sets(B) -> list[np.ndarray]:
    return [np.flatnonzero(col) for col in np.asarray(B).T]


def mbic(
    losses, B_hat, partition: Partition, n_total: int, p: int, K: int, cn: float | None = None
) -> float:
    """Modified BIC: deviance plus distinct nonzero coefficients per subgroup.

    ``losses`` are the per-source negative (approximate) log-likelihoods.
    """
    df = sum(int(np.count_nonzero(B_hat[:, g[0]])) for g in partition.groups)
    if cn is None:
        cn = max(1.0, math.log(math.log(p * K))) if p * K > math.e else 1.0
    return 2.0 * float(np.sum(losses)) / n_total + cn * math.log(n_total) / n_total * df


def lambda1_max(pool, p: int, n_total: int, sources=None) -> float:
    """Smallest lambda1 at which the all-zero coefficient matrix is stationary."""
    K = pool.K if sources is None else len(sources)
    Z = np.zeros((p, K))
    B_bar, _ = pool.local_update(Z, 1.0, n_total, sources)
    return float(np.abs(B_bar).max())


def lambda1_grid(
    lam_max: float, n_grid: int = 10, span: float = 0.05, reach: float = 1.0
) -> np.ndarray:
    """Log-spaced sparsity levels from ``span * lam_max`` to ``reach * lam_max``.

    ``reach > 1`` matters for concave penalties: started from a dense point,
    large coefficients survive well above ``lam_max``.
    """
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(span * lam_max, reach * lam_max, n_grid)


def _infos_arrays(infos: Sequence[BatchInfo]):
    B0 = np.column_stack([info.beta_prev for info in infos])
    n_cum = np.array([info.n_cum for info in infos], dtype=float)
    lips = np.array([info.lipschitz for info in infos])
    return B0, n_cum, lips


# -- core solver -------------------------------------------------------------


def proximal_gradient(
    pool,
    B0,
    penalty: PenaltyConfig,
    cfg: FolConfig,
    n_total: int,
    lipschitz: float,
    weights=None,
    sources=None,
    warm: FusionState | None = None,
) -> FitResult:
    """Iterate local gradient steps and the coordinator's proximal map."""
    B = np.array(B0, dtype=float)
    p, K = B.shape
    if cfg.learning_rate == "auto":
        omega = n_total / lipschitz if lipschitz > 0 else 1.0
    else:
        omega = float(cfg.learning_rate)

    def objective(losses, B):
        return float(np.sum(losses)) / n_total + penalty_value(B, penalty)

    # x: current iterate; y: extrapolated point whose gradient step feeds
    # the prox (y == x whenever momentum is off or has just been reset)
    B_bar, losses = pool.local_update(B, omega, n_total, sources)
    F = objective(losses, B)
    if not np.isfinite(F):
        raise StepSizeError("objective is not finite at the starting point")
    X_bar = B_bar
    trace = [F]
    fusion = warm
    converged = False
    halvings = 0
    theta = 1.0
    extrapolated = False
    t = 0
    while t < cfg.max_outer_iters:
        t += 1
        B_new, fusion_new = prox_operator(B_bar, penalty, fusion, step=omega)
        B_bar_new, losses_new = pool.local_update(B_new, omega, n_total, sources)
        F_new = objective(losses_new, B_new)
        if not np.isfinite(F_new) or F_new > F + cfg.descent_tol:
            if extrapolated:
                # adaptive restart: drop the momentum and retry from x
                theta, extrapolated, B_bar = 1.0, False, X_bar
                continue
            halvings += 1
            if halvings > cfg.max_halvings:
                if not np.isfinite(F_new):
                    raise StepSizeError(
                        f"objective diverged with learning rate {omega:.3g}; "
                        "use a smaller learning_rate"
                    )
                log.debug("no descent after %d halvings; stopping", halvings)
                break
            omega *= 0.5
            X_bar, losses = pool.local_update(B, omega, n_total, sources)
            B_bar = X_bar
            continue
        change = np.linalg.norm(B_new - B) / max(1.0, np.linalg.norm(B))
        B_prev = B
        B, X_bar, losses, F, fusion = B_new, B_bar_new, losses_new, F_new, fusion_new
        trace.append(F)
        if change < cfg.tol_outer:
            converged = True
            break
        B_bar, extrapolated = X_bar, False
        if cfg.accelerate:
            theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            momentum = (theta - 1.0) / theta_next
            theta = theta_next
            if momentum > 0:
                Y = B + momentum * (B - B_prev)
                B_bar, _ = pool.local_update(Y, omega, n_total, sources)
                extrapolated = True

    if fusion is None:
        fusion = prox_operator(B, PenaltyConfig())[1]
    part = extract_partition(fusion, B, cfg.merge_tol, weights)
    B_hat = part.centers[:, part.labels]
    if not np.array_equal(B_hat, B):
        _, losses = pool.local_update(B_hat, omega, n_total, sources)
        F = objective(losses, B_hat)
    return FitResult(
        B_hat=B_hat,
        partition=part,
        selected=selected_sets(B_hat),
        lambda1=penalty.lambda1,
        lambda2=penalty.lambda2,
        mbic=mbic(losses, B_hat, part, n_total, p, K, cfg.mbic_cn),
        converged=converged,
        outer_iters=t,
        objective=F,
        omega=omega,
        losses=np.asarray(losses),
        n_total=int(n_total),
        fusion=fusion,
        trace=trace,
    )


def fit_pool(pool, infos: Sequence[BatchInfo], cfg: FolConfig, warm=None) -> FitResult:
    """Fit at the penalty levels stored in ``cfg.penalty``."""
    B0, n_cum, lips = _infos_arrays(infos)
    n_total = int(n_cum.sum())
    return proximal_gradient(
        pool, B0, cfg.penalty, cfg, n_total, float(lips.max()), n_cum, warm=warm
    )


def ridge_fit(pool, B0, n_total: int, lipschitz: float, strength: float = 0.02,
              max_iters: int = 500, tol: float = 1e-6, sources=None) -> np.ndarray:
    """Per-source ridge estimates, used only to seed the penalized fits.

    The ridge weight is ``strength * lipschitz / n_total``, a fixed fraction
    of the largest curvature of the normalized loss, which keeps the
    estimates finite under (quasi-)separation in small batches.
    """
    omega = n_total / lipschitz if lipschitz > 0 else 1.0
    shrink = 1.0 / (1.0 + omega * strength * lipschitz / n_total)
    B = np.array(B0, dtype=float)
    B_prev, theta = B, 1.0
    for _ in range(max_iters):
        theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
        Y = B + (theta - 1.0) / theta_next * (B - B_prev)
        theta = theta_next
        B_bar, _ = pool.local_update(Y, omega, n_total, sources)
        B_prev, B = B, B_bar * shrink
        if np.linalg.norm(B - B_prev) <= tol * max(1.0, np.linalg.norm(B)):
            break
    return B


def cluster_starts(B, weights, max_groups: int | None = None) -> list[np.ndarray]:
    """Group-mean starting points from Ward clustering of the columns of ``B``.

    Returns one p x K matrix per distinct partition with 1 to ``max_groups``
    groups (default K), columns within a group replaced by their weighted
    mean.
    """
    p, K = B.shape
    if K < 2:
        return [np.array(B, dtype=float)]
    max_groups = K if max_groups is None else min(max_groups, K)
    tree = linkage(B.T, method="ward")
    seen, starts = set(), []
    for G in range(1, max_groups + 1):
        labels = fcluster(tree, G, criterion="maxclust") - 1
        key = tuple(Partition.from_labels(labels).labels)
        if key in seen:
            continue
        seen.add(key)
        starts.append(fuse_columns(B, key, weights))
    return starts


def seed_lambda2(
    S, grid, a: float, spread: float, margin: float = 0.9, ratio: float = 1.1
) -> float:
    """Fusion level that keeps the groups of a seed apart and fuses within.

    Distinct columns of ``S`` should sit in MCP's flat region, so
    ``a * lambda2`` stays below ``margin`` times their smallest distance. A
    fully fused seed gets ``spread / a`` (every pair of the ridge estimates
    inside the concave region). The value is snapped down to ``grid`` when
    given (the smallest grid point when none is below), otherwise to the
    log lattice ``spread / a * ratio**-m`` so nearby seeds share a level.
    """
    K = S.shape[1]
    if K < 2:
        return 0.0
    i, j = pair_index(K)
    dist = np.linalg.norm(S[:, i] - S[:, j], axis=0)
    dist = dist[dist > 0]
    top = spread / a
    bound = margin * float(dist.min()) / a if dist.size else top
    if grid is not None:
        below = [g for g in grid if g <= bound]
        return float(max(below)) if below else float(min(grid))
    if top <= 0 or bound <= 0:
        return bound
    steps = math.ceil(math.log(top / bound) / math.log(ratio) - 1e-9)
    return top * ratio ** -max(steps, 0)


def _same_fit(f1: FitResult, f2: FitResult, tol: float = 1e-4) -> bool:
    if not np.array_equal(f1.partition.labels, f2.partition.labels):
        return False
    if not np.array_equal(f1.B_hat != 0, f2.B_hat != 0):
        return False
    return float(np.abs(f1.B_hat - f2.B_hat).max()) <= tol * max(1.0, float(np.abs(f1.B_hat).max()))


def tune_pool(pool, infos: Sequence[BatchInfo], cfg: FolConfig) -> FitResult:
    """Search over (lambda1, lambda2) and keep the fit with the lowest mBIC.

    Candidate subgroup structures come from Ward clustering of per-source
    ridge estimates (one seed per number of groups) and, from the second
    batch on, from the previous estimate. For each seed, lambda2 is set so
    the seed's groups stay apart while their members stay fused. lambda1
    then climbs the grid until the fit is empty (bisecting the last gap) and
    comes back down from the sparsest nonempty fit; the downward pass lets
    strong coefficients re-enter without the noise the upward pass carried.
    A path stops as soon as it lands on a fit another seed already reached.

    Plain warm-started paths from a common start tend to stall: once
    opposite-signed subgroups fuse, their gradients cancel.
    """
    B0, n_cum, lips = _infos_arrays(infos)
    p, K = B0.shape
    n_total = int(n_cum.sum())
    lip = float(lips.max())
    a = cfg.penalty.a
    grid1 = cfg.grid_lambda1
    ascent_from = 0.0
    if grid1 is None:
        lam_max = lambda1_max(pool, p, n_total)
        grid1 = lambda1_grid(lam_max, cfg.n_grid, reach=cfg.grid_reach)
        ascent_from = cfg.ascent_from * lam_max
    grid1 = np.sort(np.asarray(grid1, dtype=float))
    grid2 = None if cfg.grid_lambda2 is None else sorted(cfg.grid_lambda2)
    if len(grid1) == 1 and grid2 is not None and len(grid2) == 1:
        return fit_pool(pool, infos, _at(cfg, grid1[0], grid2[0]))

    best: FitResult | None = None
    failures = 0
    visited: dict[tuple[float, float], list[FitResult]] = {}

    def run(lam1, lam2, start):
        # returns (fit or None, whether an earlier path already holds it)
        nonlocal best, failures
        pen = cfg.penalty.with_lambdas(lam1, lam2)
        try:
            fit = proximal_gradient(pool, start, pen, cfg, n_total, lip, n_cum)
        except StepSizeError as exc:
            log.warning("fit at lambda1=%g lambda2=%g failed: %s", lam1, lam2, exc)
            failures += 1
            return None, False
        seen = visited.setdefault((float(lam1), float(lam2)), [])
        if any(_same_fit(fit, other) for other in seen):
            return fit, True
        seen.append(fit)
        if best is None or _better(fit, best):
            best = fit
        return fit, False

    R = ridge_fit(pool, B0, n_total, lip)
    seeds = cluster_starts(R, n_cum)
    if np.any(B0):
        seeds.append(B0)
    spread = 0.0
    if K > 1:
        i, j = pair_index(K)
        spread = float(np.linalg.norm(R[:, i] - R[:, j], axis=0).max())
    start_at = min(int(np.searchsorted(grid1, ascent_from)), len(grid1) - 1)

    for seed in seeds:
        lam2 = seed_lambda2(seed, grid2, a, spread)
        prev, top, empty, merged = seed, None, None, False
        for lam1 in grid1[start_at:]:
            fit, merged = run(lam1, lam2, prev)
            if merged:
                break
            if fit is None:
                continue
            prev = fit.B_hat
            if not fit.B_hat.any():
                empty = lam1
                break
            top = fit
        if merged or top is None:
            continue
        if empty is not None and cfg.grid_lambda1 is None:
            lo, hi = top.lambda1, empty
            for _ in range(cfg.n_bisect):
                mid = math.sqrt(lo * hi)
                fit, _ = run(mid, lam2, top.B_hat)
                if fit is not None and fit.B_hat.any():
                    lo, top = mid, fit
                else:
                    hi = mid
        prev = top.B_hat
        for lam1 in grid1[grid1 < top.lambda1][::-1]:
            fit, merged = run(lam1, lam2, prev)
            if merged:
                break
            if fit is not None:
                prev = fit.B_hat
    if best is None:
        raise TuningError(f"all {failures} grid fits diverged")
    return best


def _at(cfg: FolConfig, lam1: float, lam2: float) -> FolConfig:
    return replace(cfg, penalty=cfg.penalty.with_lambdas(lam1, lam2))


def _better(fit: FitResult, best: FitResult) -> bool:
    if fit.mbic < best.mbic:
        return True
    if fit.mbic == best.mbic:
        return (fit.lambda1, fit.lambda2) > (best.lambda1, best.lambda2)
    return False


def ind_pool(pool, infos: Sequence[BatchInfo], cfg: FolConfig) -> FitResult:
    """Per-source sparse renewable fits with no fusion, each tuned on its own."""
    B0, n_cum, lips = _infos_arrays(infos)
    p, K = B0.shape
    cols, losses, lam1s, mbics, conv, iters = [], [], [], 0.0, True, 0
    for k in range(K):
        n_k = int(n_cum[k])
        grid = cfg.grid_lambda1
        if grid is None:
            grid = lambda1_grid(lambda1_max(pool, p, n_k, [k]), cfg.n_grid)
        best, prev = None, None
        for lam1 in sorted(grid, reverse=True):
            pen = cfg.penalty.with_lambdas(lam1, 0.0)
            start = B0[:, [k]] if prev is None else prev.B_hat
            fit = proximal_gradient(pool, start, pen, cfg, n_k, float(lips[k]), sources=[k])
            prev = fit
            # a fit that never settles is chasing a separating direction
            # (no finite minimizer); keep it only if nothing converged
            if (
                best is None
                or (fit.converged and not best.converged)
                or (fit.converged == best.converged and _better(fit, best))
            ):
                best = fit
        cols.append(best.B_hat[:, 0])
        losses.append(best.losses[0])
        lam1s.append(best.lambda1)
        mbics += best.mbic
        conv &= best.converged
        iters = max(iters, best.outer_iters)
    B_hat = np.column_stack(cols)
    return FitResult(
        B_hat=B_hat,
        partition=Partition.singletons(K),
        selected=selected_sets(B_hat),
        lambda1=np.array(lam1s),
        lambda2=0.0,
        mbic=mbics,
        converged=conv,
        outer_iters=iters,
        losses=np.array(losses),
        n_total=int(n_cum.sum()),
    )


def homo_pool(pool, infos: Sequence[BatchInfo], cfg: FolConfig) -> FitResult:
    """Individual fits aggregated into one Hessian-weighted common estimate."""
    ind = ind_pool(pool, infos, cfg)
    B_loc = ind.B_hat
    p, K = B_loc.shape
    summaries = pool.hessian_summaries(B_loc)
    A = np.zeros((p, p))
    r = np.zeros(p)
    for k, (J, _) in enumerate(summaries):
        A -= J
        r -= J @ B_loc[:, k]
    warnings = []
    try:
        A_reg = A + 1e-8 * np.eye(p)
        if np.linalg.cond(A_reg) > 1e12:
            raise np.linalg.LinAlgError("aggregate Hessian is numerically singular")
        beta = np.linalg.solve(A_reg, r)
    except np.linalg.LinAlgError:
        w = np.array([n for _, n in summaries], dtype=float)
        beta = B_loc @ (w / w.sum())
        warnings.append("singular aggregate Hessian; used sample-size weighted mean")
    B_hat = np.repeat(beta[:, None], K, axis=1)
    return FitResult(
        B_hat=B_hat,
        partition=Partition([tuple(range(K))]),
        selected=selected_sets(B_hat),
        lambda1=ind.lambda1,
        lambda2=0.0,
        mbic=ind.mbic,
        converged=ind.converged,
        outer_iters=ind.outer_iters,
        losses=ind.losses,
        n_total=ind.n_total,
        B_local=B_loc,
        warnings=warnings,
    )


# -- in-memory entry points ----------------------------------------------------


def _make_pool(states, batches, family, keep_history=False):
    if len(states) != len(batches):
        raise ValueError(f"{len(states)} states but {len(batches)} batches")
    idx = {b.batch_index for b in batches}
    if len(idx) != 1:
        raise ValueError(f"batches carry different batch indices {sorted(idx)}")
    pool = LocalPool([SourceWorker(s, family, keep_history) for s in states])
    infos = pool.start_batch(list(batches))
    return pool, infos


def fit_batch(
    states: Sequence[SourceState], batches: Sequence[Batch], family: GlmFamily, cfg: FolConfig
) -> FitResult:
    pool, infos = _make_pool(states, batches, family)
    return fit_pool(pool, infos, cfg)


def tune(
    states: Sequence[SourceState], batches: Sequence[Batch], family: GlmFamily, cfg: FolConfig
) -> FitResult:
    pool, infos = _make_pool(states, batches, family)
    return tune_pool(pool, infos, cfg)


def fit_ind(states, batches, family: GlmFamily, cfg: FolConfig) -> FitResult:
    pool, infos = _make_pool(states, batches, family)
    return ind_pool(pool, infos, cfg)


def fit_homo(states, batches, family: GlmFamily, cfg: FolConfig) -> FitResult:
    pool, infos = _make_pool(states, batches, family)
    return homo_pool(pool, infos, cfg)


def objective_value(states, batches, family: GlmFamily, B, cfg: FolConfig) -> float:
    """The renewable penalized objective at ``B`` (no optimization)."""
    pool, infos = _make_pool(states, batches, family)
    _, n_cum, _ = _infos_arrays(infos)
    B = np.asarray(B, dtype=float)
    _, losses = pool.local_update(B, 0.0, int(n_cum.sum()))
    return float(losses.sum()) / n_cum.sum() + penalty_value(B, cfg.penalty)


def fit_oracle(
    all_raw_batches: Sequence[Sequence[Batch]],
    family: GlmFamily,
    cfg: FolConfig,
    tuned: bool = True,
    B_start=None,
) -> FitResult:
    """Offline benchmark on the exact cumulative likelihood of every source.

    ``all_raw_batches[k]`` lists source ``k``'s batches in arrival order.
    """
    p = all_raw_batches[0][0].p
    workers = []
    for k, batches in enumerate(all_raw_batches):
        sid = batches[0].source_id
        st = SourceState.fresh(sid, p)
        w = SourceWorker(st, family, keep_history=True)
        for b in batches[:-1]:
            w.start_batch(b)
            w.absorb(np.zeros(p) if B_start is None else B_start[:, k])
        workers.append(w)
    pool = LocalPool(workers)
    infos = pool.start_batch([bs[-1] for bs in all_raw_batches])
    return tune_pool(pool, infos, cfg) if tuned else fit_pool(pool, infos, cfg)
