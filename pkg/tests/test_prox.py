import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from fedol.prox import (
    FusionState,
    Partition,
    PenaltyConfig,
    PenaltyConfigError,
    UnionFind,
    extract_partition,
    fuse_columns,
    group_mcp_prox,
    mcp_derivative,
    mcp_value,
    pair_index,
    prox_objective,
    prox_operator,
    scalar_mcp_prox,
)


def grid_argmin_1d(z, lam, a, rho, lo=-4.0, hi=4.0, step=1e-5):
    x = np.arange(lo, hi + step, step)
    f = 0.5 * rho * (x - z) ** 2 + mcp_value(x, lam, a)
    return x[np.argmin(f)]


def test_mcp_value_reference_points():
    assert mcp_value(0.0, 0.7, 3.0) == 0.0
    assert mcp_value(5.0, 1.0, 3.0) == pytest.approx(1.5)
    assert mcp_value(-2.1, 0.7, 3.0) == pytest.approx(3.0 * 0.49 / 2)
    # quadrature of (1 - t/3)_+ over [0, 1] gives 5/6
    integral, _ = quad(lambda t: max(1.0 - t / 3.0, 0.0), 0.0, 1.0)
    assert integral == pytest.approx(5 / 6, abs=1e-12)
    assert mcp_value(1.0, 1.0, 3.0) == pytest.approx(5 / 6, abs=1e-12)


@given(st.floats(-3, 3).filter(lambda x: min(abs(x), abs(abs(x) - 1.5)) > 1e-3))
def test_mcp_derivative_matches_finite_differences(x):
    h = 1e-7
    fd = (mcp_value(x + h, 0.5, 3.0) - mcp_value(x - h, 0.5, 3.0)) / (2 * h)
    assert float(mcp_derivative(x, 0.5, 3.0)) == pytest.approx(fd, abs=1e-6)


def test_scalar_prox_reference_value():
    # 1-D grid oracle (step 1e-6 on [-2, 2]) locates the minimizer at 0.42
    assert scalar_mcp_prox(0.5, 0.3, 3.0, 2.0) == pytest.approx(0.42, abs=1e-12)
    assert scalar_mcp_prox(2.0, 0.3, 3.0, 2.0) == 2.0
    assert scalar_mcp_prox(0.1, 0.3, 3.0, 2.0) == 0.0


@pytest.mark.parametrize("a_rho", [1.5, 3.0, 6.0])
@pytest.mark.parametrize("z", [-2.3, -0.9, -0.2, 0.05, 0.4, 1.1, 3.0])
@pytest.mark.parametrize("lam", [0.1, 0.6])
def test_scalar_prox_matches_grid_oracle(a_rho, z, lam):
    rho = 1.5
    a = a_rho / rho
    if a <= 1:
        rho, a = a_rho / 2.0, 2.0
    assert scalar_mcp_prox(z, lam, a, rho) == pytest.approx(grid_argmin_1d(z, lam, a, rho), abs=1e-4)


@pytest.mark.parametrize("a_rho", [1.5, 3.0, 6.0])
@pytest.mark.parametrize("z", [[0.3, -0.2], [1.0, 1.0], [-0.05, 0.02], [2.5, -1.0]])
def test_group_prox_matches_radial_grid_oracle(a_rho, z):
    z = np.array(z)
    lam, a = 0.5, 3.0
    rho = a_rho / a
    # the minimizer lies on the ray through z; search its length
    r = np.arange(0.0, 5.0, 1e-5)
    nz = np.linalg.norm(z)
    f = 0.5 * rho * (r - nz) ** 2 + mcp_value(r, lam, a)
    expected = z / nz * r[np.argmin(f)]
    np.testing.assert_allclose(group_mcp_prox(z, lam, a, rho), expected, atol=1e-4)


def test_group_prox_special_cases():
    z = np.array([3.0, 4.0])
    np.testing.assert_array_equal(group_mcp_prox(z, 1.0, 3.0, 1.0), z)
    np.testing.assert_array_equal(group_mcp_prox(np.zeros(3), 1.0, 3.0, 1.0), np.zeros(3))
    with pytest.raises(PenaltyConfigError):
        group_mcp_prox(z, 1.0, 3.0, 0.3)
    with pytest.raises(PenaltyConfigError):
        scalar_mcp_prox(1.0, 1.0, 2.0, 0.5)
    with pytest.raises(PenaltyConfigError):
        PenaltyConfig(a=1.0)


def test_prox_identity_without_penalty(rng):
    Bb = rng.standard_normal((4, 5))
    B, st = prox_operator(Bb, PenaltyConfig())
    np.testing.assert_array_equal(B, Bb)
    np.testing.assert_allclose(st.delta(1, 3), Bb[:, 1] - Bb[:, 3])
    np.testing.assert_allclose(st.delta(3, 1), Bb[:, 3] - Bb[:, 1])


def test_two_column_fusion_gives_average(rng):
    base = rng.standard_normal(3)
    Bb = np.column_stack([base, base + 0.1 * rng.standard_normal(3)])
    B, st = prox_operator(Bb, PenaltyConfig(0.0, 10.0))
    np.testing.assert_array_equal(B[:, 0], B[:, 1])
    np.testing.assert_allclose(B[:, 0], Bb.mean(axis=1), atol=1e-5)
    assert np.linalg.norm(st.deltas) == 0.0


@given(st.integers(0, 100_000))
def test_prox_descends_from_input(seed):
    rng = np.random.default_rng(seed)
    Bb = rng.normal(size=(3, 4))
    cfg = PenaltyConfig(rng.uniform(0, 0.5), rng.uniform(0, 1.0))
    B, _ = prox_operator(Bb, cfg)
    assert prox_objective(B, Bb, cfg) <= prox_objective(Bb, Bb, cfg) + 1e-12


@given(st.integers(0, 100_000))
def test_prox_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    Bb = rng.normal(size=(3, 5))
    perm = rng.permutation(5)
    cfg = PenaltyConfig(0.2, 0.4, tol_primal=1e-9, tol_dual=1e-9, max_admm_iters=5000)
    B, _ = prox_operator(Bb, cfg)
    Bp, _ = prox_operator(Bb[:, perm], cfg)
    np.testing.assert_allclose(Bp, B[:, perm], atol=1e-6)


@given(st.integers(0, 100_000))
def test_compiled_admm_matches_reference(seed):
    rng = np.random.default_rng(seed)
    Bb = rng.normal(size=(4, 6))
    cfg = PenaltyConfig(0.15, 0.5)
    B1, s1 = prox_operator(Bb, cfg)
    B2, s2 = prox_operator(Bb, cfg, _reference=True)
    np.testing.assert_allclose(B1, B2, atol=1e-12)
    assert s1.iterations == s2.iterations


def test_prox_warm_start_and_step(rng):
    Bb = rng.normal(size=(3, 4))
    cfg = PenaltyConfig(0.1, 0.3)
    B, st = prox_operator(Bb, cfg)
    B2, st2 = prox_operator(Bb, cfg, warm=st)
    np.testing.assert_allclose(B2, B, atol=1e-5)
    assert st2.iterations <= st.iterations
    # a step of 2 doubles the effective thresholds
    Bs, _ = prox_operator(Bb, PenaltyConfig(0.1, 0.0), step=2.0)
    np.testing.assert_array_equal(Bs, prox_operator(Bb, PenaltyConfig(0.2, 0.0))[0])


def test_nonconvergence_is_flagged(rng):
    Bb = rng.normal(size=(3, 4))
    _, st = prox_operator(Bb, PenaltyConfig(0.1, 0.3, max_admm_iters=1))
    assert not st.converged and st.iterations == 1


def _fusion_with_zero_pairs(K, zero_pairs, p=2):
    i, j = pair_index(K)
    deltas = np.ones((p, len(i)))
    for m, (a, b) in enumerate(zip(i, j)):
        if (a, b) in zero_pairs:
            deltas[:, m] = 0.0
    z = np.zeros_like(deltas)
    return FusionState(K, deltas, z, np.zeros((p, K)), np.zeros((p, K)))


def test_extract_partition_cases():
    K = 8
    B = np.arange(16.0).reshape(2, 8)
    all_pairs = set(zip(*map(list, pair_index(K))))
    assert extract_partition(_fusion_with_zero_pairs(K, all_pairs), B).n_groups == 1
    assert extract_partition(_fusion_with_zero_pairs(K, set()), B).n_groups == K
    ex2 = {(a, b) for a, b in all_pairs if (a < 4) == (b < 4)}
    part = extract_partition(_fusion_with_zero_pairs(K, ex2), B)
    assert part.groups == [(0, 1, 2, 3), (4, 5, 6, 7)]
    np.testing.assert_allclose(part.centers[:, 0], B[:, :4].mean(axis=1))
    # transitivity: 0~1 and 1~2 put 0, 1, 2 together although 0-2 is not fused
    part = extract_partition(_fusion_with_zero_pairs(3, {(0, 1), (1, 2)}), np.zeros((2, 3)))
    assert part.groups == [(0, 1, 2)]


def test_partition_and_union_find():
    p = Partition.from_labels([2, 2, 0, 1, 0])
    assert p.groups == [(0, 1), (2, 4), (3,)]
    np.testing.assert_array_equal(p.labels, [0, 0, 1, 2, 1])
    with pytest.raises(ValueError):
        Partition([(0, 1), (1, 2)])
    uf = UnionFind(4)
    uf.union(0, 3)
    assert uf.components() == [(0, 3), (1,), (2,)]


def test_fuse_columns_weighted():
    B = np.array([[1.0, 3.0, 5.0], [0.0, 0.0, 2.0]])
    out = fuse_columns(B, [0, 0, 1], weights=[1, 3, 1])
    np.testing.assert_allclose(out[:, 0], [2.5, 0.0])
    np.testing.assert_array_equal(out[:, 0], out[:, 1])
    np.testing.assert_array_equal(out[:, 2], B[:, 2])
