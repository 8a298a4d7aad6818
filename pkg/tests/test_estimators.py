import numpy as np
import pytest
from conftest import random_design
from hypothesis import given, settings
from hypothesis import strategies as st

from odefma.errors import InsufficientDataError, RankDeficiencyError, ShapeError
from odefma.estimators import (
    PartitionedDesign,
    SubmodelSpec,
    all_submodels,
    fit_full,
    fit_with_submodels,
    submodel_projection,
    sym_sqrt,
)


def _restricted_ols(design, spec):
    """Direct least squares on [X, Z_kept] with the h/6 scale folded in."""
    cols = np.column_stack([design.X, design.Z[:, list(spec.included)]])
    coef, *_ = np.linalg.lstsq(design.scale * cols, design.delta_y, rcond=None)
    resid = design.delta_y - design.scale * cols @ coef
    return coef[: design.k], coef[design.k :], float(resid @ resid) / design.n


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_full_fit_matches_joint_normal_equations(seed):
    d = random_design(np.random.default_rng(seed))
    fit = fit_full(d)
    R = d.scale * np.column_stack([d.X, d.Z])
    joint = np.linalg.solve(R.T @ R, R.T @ d.delta_y)
    np.testing.assert_allclose(fit.beta_u, joint[: d.k], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(fit.gamma, joint[d.k :], rtol=1e-8, atol=1e-10)
    resid = d.delta_y - R @ joint
    assert fit.sigma2 == pytest.approx(resid @ resid / d.n, rel=1e-10)
    assert fit.sigma2_unbiased == pytest.approx(resid @ resid / (d.n - d.k - d.m), rel=1e-10)
    # restricted estimator ignores Z entirely
    Xs = d.scale * d.X
    np.testing.assert_allclose(fit.beta_r, np.linalg.solve(Xs.T @ Xs, Xs.T @ d.delta_y), rtol=1e-8, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_every_submodel_matches_restricted_ols(seed):
    d = random_design(np.random.default_rng(seed))
    fit = fit_with_submodels(d)
    for sub in fit.submodels:
        beta, gamma_kept, s2 = _restricted_ols(d, sub.spec)
        np.testing.assert_allclose(sub.beta, beta, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(sub.gamma[list(sub.spec.included)], gamma_kept, rtol=1e-8, atol=1e-10)
        assert np.all(sub.gamma[list(sub.spec.excluded(d.m))] == 0)
        assert sub.sigma2 == pytest.approx(s2, rel=1e-8)
        assert sub.q == d.k + len(sub.spec.included)


def test_variance_identity_through_dropped_projector(rng):
    d = random_design(rng, k=2, m=3, n=50)
    fit = fit_with_submodels(d)
    th = fit.theta_hat
    for sub in fit.submodels:
        rhs = (d.n - d.k - d.m) * fit.sigma2_unbiased + th @ sub.W @ th
        assert sub.sigma2 * d.n == pytest.approx(rhs, rel=1e-10)


def test_projection_properties(rng):
    d = random_design(rng, k=2, m=4, n=60)
    fit = fit_full(d)
    for spec in all_submodels(4):
        P, W = submodel_projection(fit, spec)
        np.testing.assert_allclose(P, P.T, atol=1e-8)
        np.testing.assert_allclose(P @ P, P, atol=1e-8)
        np.testing.assert_allclose(P + W, np.eye(4), atol=1e-12)
        assert np.trace(P) == pytest.approx(len(spec.included), abs=1e-8)
    P0, _ = submodel_projection(fit, SubmodelSpec(()))
    P1, _ = submodel_projection(fit, SubmodelSpec((0, 1, 2, 3)))
    np.testing.assert_allclose(P0, 0, atol=1e-10)
    np.testing.assert_allclose(P1, np.eye(4), atol=1e-10)


def test_projection_equals_weighted_hat_matrix(rng):
    # P projects onto span(G^{1/2} S) for the kept columns S
    d = random_design(rng, k=1, m=3, n=40)
    fit = fit_full(d)
    spec = SubmodelSpec((0, 2))
    B = fit.zmz_half @ np.eye(3)[:, [0, 2]]
    hat = B @ np.linalg.solve(B.T @ B, B.T)
    P, _ = submodel_projection(fit, spec)
    np.testing.assert_allclose(P, hat, atol=1e-10)


def test_nesting_never_increases_variance(rng):
    d = random_design(rng, k=2, m=4, n=60)
    fit = fit_with_submodels(d)
    by_set = {frozenset(s.spec.included): s.sigma2 for s in fit.submodels}
    for small, v_small in by_set.items():
        for big, v_big in by_set.items():
            if small < big:
                assert v_big <= v_small * (1 + 1e-12)


def test_k_or_m_zero():
    rng = np.random.default_rng(3)
    n = 30
    d = PartitionedDesign(rng.normal(size=n), rng.normal(size=(n, 2)), np.empty((n, 0)), 2.0)
    fit = fit_with_submodels(d)
    assert len(fit.submodels) == 1
    np.testing.assert_allclose(fit.submodels[0].beta, fit.beta_u)
    d = PartitionedDesign(rng.normal(size=n), np.empty((n, 0)), rng.normal(size=(n, 2)), 2.0)
    fit = fit_with_submodels(d)
    assert fit.beta_u.shape == (0,)
    assert len(fit.submodels) == 4


def test_design_validation():
    with pytest.raises(InsufficientDataError):
        PartitionedDesign(np.zeros(3), np.ones((3, 2)), np.ones((3, 1)), 2.0)
    with pytest.raises(ShapeError):
        PartitionedDesign(np.zeros(10), np.ones((9, 1)), np.ones((10, 1)), 2.0)
    with pytest.raises(ValueError):
        PartitionedDesign(np.zeros(10), np.ones((10, 1)), np.ones((10, 1)), -1.0)


def test_rank_deficiency_detected(rng):
    n = 40
    X = rng.normal(size=(n, 2))
    Z = np.column_stack([rng.normal(size=n), X[:, 0] * 2.0])
    with pytest.raises(RankDeficiencyError) as info:
        fit_full(PartitionedDesign(rng.normal(size=n), X, Z, 2.0))
    assert "Z'MZ" in info.value.matrix
    X = np.column_stack([X[:, 0], X[:, 0]])
    with pytest.raises(RankDeficiencyError):
        fit_full(PartitionedDesign(rng.normal(size=n), X, Z[:, :1], 2.0))


def test_spec_handling():
    assert SubmodelSpec((2, 0)).included == (0, 2)
    with pytest.raises(ValueError):
        SubmodelSpec((1, 1))
    with pytest.raises(ValueError):
        SubmodelSpec((3,)).validate(3)
    assert SubmodelSpec((1,)).excluded(3) == (0, 2)
    np.testing.assert_array_equal(SubmodelSpec((1,)).selection_matrix(3), [[0], [1], [0]])
    specs = all_submodels(3)
    assert len(specs) == 8
    assert specs[0].included == () and specs[-1].included == (0, 1, 2)
    assert [len(s.included) for s in specs] == sorted(len(s.included) for s in specs)


def test_sym_sqrt(rng):
    B = rng.normal(size=(4, 4))
    G = B @ B.T + 0.1 * np.eye(4)
    half, inv_half = sym_sqrt(G)
    np.testing.assert_allclose(half @ half, G, atol=1e-10)
    np.testing.assert_allclose(half @ inv_half, np.eye(4), atol=1e-10)
    with pytest.raises(RankDeficiencyError):
        sym_sqrt(np.diag([1.0, 0.0]))
