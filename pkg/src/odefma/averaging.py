"""Optimal weight choice over the unified weight family.

Weights are ``lambda_i ∝ a^{q_i} (n - q_i)^b (sigma_i^2)^c`` and the three
parameters are chosen to minimise an estimate of the trace risk
``E||beta_f - beta||^2`` of the averaged main coefficients.

Projector naming follows :mod:`odefma.estimators`: ``P_i`` keeps, ``W_i``
drops. In that naming the risk estimate is::

    R = s2 tr(X~'X~)^{-1} - s2 tr(Q~Q~') + ||Q~ Wbar theta||^2 + 2 s2 tr(Q~ K Q~')
    K = Pbar + sum_i (d lambda_i / d theta) theta' P_i

with ``Q~ = (6/h) Q``, ``X~ = (h/6) X``, ``Wbar = sum_i lambda_i W_i`` and
``s2`` the unbiased full-model residual variance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DiagnosticUnavailableError,
    InfeasibleWeightsError,
    NonPositiveVarianceError,
    ShapeError,
)
from .estimators import PartitionedFit

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-10


@dataclass(frozen=True)
class WeightParams:
    a: float
    b: float
    c: float
    c_bar: float = 5.0

    def __post_init__(self):
        if not self.c_bar > 0:
            raise ValueError(f"c_bar must be positive, got {self.c_bar!r}")
        if not (self.a > 0 and self.b >= 0 and -self.c_bar <= self.c <= 0):
            raise ValueError(
                f"(a, b, c) = ({self.a!r}, {self.b!r}, {self.c!r}) is outside "
                f"a > 0, b >= 0, -{self.c_bar:g} <= c <= 0"
            )

    @classmethod
    def from_vector(cls, x, c_bar: float) -> "WeightParams":
        log_a, b, c = (float(v) for v in x)
        return cls(float(np.exp(log_a)), max(b, 0.0), min(max(c, -c_bar), 0.0), c_bar)


@dataclass(frozen=True)
class OptimizerConfig:
    rho: float = 0.0
    unbiased_set: tuple[int, ...] = ()
    c_bar: float = 5.0
    log_a_range: tuple[float, float] = (-3.0, 3.0)
    b_max: float = 4.0
    grid_log_a: int = 13
    grid_b: int = 9
    grid_c: int = 11
    refine: bool = True
    max_iter: int = 200
    tol: float = 1e-8
    restarts: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho!r}")
        if not self.c_bar > 0:
            raise ValueError("c_bar must be positive")
        if min(self.grid_log_a, self.grid_b, self.grid_c) < 1:
            raise ValueError("grid densities must be positive")
        object.__setattr__(self, "unbiased_set", tuple(int(i) for i in self.unbiased_set))

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return [self.log_a_range, (0.0, self.b_max), (-self.c_bar, 0.0)]

    def grid(self, densities: tuple[int, int, int] | None = None) -> np.ndarray:
        """Candidate rows ``(log a, b, c)`` on a product grid over the domain."""
        na, nb, nc = densities or (self.grid_log_a, self.grid_b, self.grid_c)
        lo, hi = self.log_a_range
        la = np.linspace(lo, hi, na) if na > 1 else np.array([0.0])
        bs = np.linspace(0.0, self.b_max, nb) if nb > 1 else np.array([0.0])
        cs = np.linspace(-self.c_bar, 0.0, nc) if nc > 1 else np.array([0.0])
        mesh = np.meshgrid(la, bs, cs, indexing="ij")
        return np.column_stack([g.ravel() for g in mesh])


@dataclass(frozen=True)
class AveragedFit:
    params: WeightParams
    weights: np.ndarray
    beta_f: np.ndarray
    gamma_f: np.ndarray
    risk: float


@dataclass(frozen=True)
class LossDiagnostic:
    n: int
    achieved_loss: float
    infimum_loss: float
    ratio: float
    max_single_loss: float
    min_single_loss: float
    params: WeightParams = field(repr=False, default=None)


def _log_weight_terms(q, n: int, sigma2_vec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=float)
    s2 = np.asarray(sigma2_vec, dtype=float)
    if q.shape != s2.shape:
        raise ShapeError(f"q has shape {q.shape} but sigma2 has shape {s2.shape}")
    bad = np.flatnonzero(~(s2 > 0))
    if bad.size:
        raise NonPositiveVarianceError(int(bad[0]), float(s2[bad[0]]))
    if np.any(q >= n):
        raise ValueError(f"every submodel size q must be below n={n}")
    return q, np.log(n - q), np.log(s2)


def _normalise_log(logw: np.ndarray) -> np.ndarray:
    logw = logw - logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=-1, keepdims=True)


def compute_weights(params: WeightParams, q, n: int, sigma2_vec) -> np.ndarray:
    q, log_nq, log_s2 = _log_weight_terms(q, n, sigma2_vec)
    logw = q * np.log(params.a) + params.b * log_nq + params.c * log_s2
    return _normalise_log(logw)


def batch_weights(candidates: np.ndarray, q, n: int, sigma2_vec) -> np.ndarray:
    """Weights for many ``(log a, b, c)`` rows at once; shape (G, N)."""
    q, log_nq, log_s2 = _log_weight_terms(q, n, sigma2_vec)
    cand = np.atleast_2d(candidates)
    logw = np.outer(cand[:, 0], q) + np.outer(cand[:, 1], log_nq) + np.outer(cand[:, 2], log_s2)
    return _normalise_log(logw)


def weight_jacobian(
    params: WeightParams, weights, theta_hat, sigma2_vec, W_list, n: int
) -> np.ndarray:
    """Row i is d lambda_i / d theta_hat, holding the full-model variance fixed.

    Submodel variances depend on theta through
    ``sigma_i^2 = (n-k-m) s2 / n + theta' W_i theta / n`` so the bracket uses
    the dropped-direction projectors ``W_i``.
    """
    lam = np.asarray(weights, dtype=float)
    theta = np.asarray(theta_hat, dtype=float)
    s2 = np.asarray(sigma2_vec, dtype=float)
    Ws = np.asarray(W_list, dtype=float)
    N, m = lam.shape[0], theta.shape[0]
    if s2.shape != (N,) or Ws.shape != (N, m, m):
        raise ShapeError(
            f"expected {N} variances and {N} matrices of shape ({m}, {m}); "
            f"got {s2.shape} and {Ws.shape}"
        )
    w_theta = Ws @ theta / s2[:, None]
    centre = lam @ w_theta
    return 2.0 * params.c / n * lam[:, None] * (w_theta - centre)


class _RiskEvaluator:
    """Precomputed pieces of the risk estimate for one fitted family."""

    def __init__(self, fit: PartitionedFit):
        if not fit.submodels:
            raise ValueError("fit carries no submodel records; call with_submodels first")
        design = fit.design
        inv_scale = 6.0 / design.h
        self.n = design.n
        self.s2 = fit.sigma2_unbiased
        self.q = np.array([s.q for s in fit.submodels], dtype=float)
        self.sigma2_vec = np.array([s.sigma2 for s in fit.submodels])
        theta = fit.theta_hat
        Qt = inv_scale * fit.Q
        A = Qt.T @ Qt
        Ps = np.array([s.P for s in fit.submodels]).reshape(len(fit.submodels), fit.m, fit.m)
        Ws = np.array([s.W for s in fit.submodels]).reshape(Ps.shape)
        self.W_list = Ws
        self.theta = theta
        self.w_theta = Ws @ theta
        p_theta = Ps @ theta
        self.base = self.s2 * (inv_scale**2 * np.trace(fit.xtx_inv) - np.trace(A)) if fit.k else 0.0
        self.A = A
        self.tr_AP = np.einsum("ij,nji->n", A, Ps)
        self.R = p_theta @ A
        self.u = np.einsum("nm,nm->n", self.R, self.w_theta)
        self.inv_s2 = 1.0 / self.sigma2_vec

    def weights(self, candidates: np.ndarray) -> np.ndarray:
        return batch_weights(candidates, self.q, self.n, self.sigma2_vec)

    def risk(self, candidates: np.ndarray, lam: np.ndarray | None = None) -> np.ndarray:
        cand = np.atleast_2d(candidates)
        if lam is None:
            lam = self.weights(cand)
        wbar_theta = lam @ self.w_theta
        bias = np.einsum("gi,ij,gj->g", wbar_theta, self.A, wbar_theta)
        v = (lam * self.inv_s2) @ self.w_theta
        deriv = 2.0 * cand[:, 2] / self.n * (
            lam @ (self.inv_s2 * self.u) - np.einsum("gm,gm->g", lam @ self.R, v)
        )
        return self.base + bias + 2.0 * self.s2 * (lam @ self.tr_AP + deriv)


def risk_trace(fit: PartitionedFit, params: WeightParams) -> float:
    ev = _RiskEvaluator(fit)
    x = np.array([[np.log(params.a), params.b, params.c]])
    return float(ev.risk(x)[0])


def averaged_estimate(fit: PartitionedFit, weights) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(weights, dtype=float)
    if lam.shape != (len(fit.submodels),):
        raise ShapeError(f"{lam.shape[0]} weights for {len(fit.submodels)} submodels")
    betas = np.array([s.beta for s in fit.submodels]).reshape(len(lam), fit.k)
    gammas = np.array([s.gamma for s in fit.submodels]).reshape(len(lam), fit.m)
    return lam @ betas, lam @ gammas


def _unbiased_mass(lam: np.ndarray, unbiased: Sequence[int]) -> np.ndarray:
    if not unbiased:
        return np.zeros(lam.shape[0])
    return lam[:, list(unbiased)].sum(axis=1)


def _grid_order(cand: np.ndarray, risk: np.ndarray) -> np.ndarray:
    # lowest risk, then smallest |log a|, b, |c|
    return np.lexsort((np.abs(cand[:, 2]), cand[:, 1], np.abs(cand[:, 0]), risk))


def optimize_weight_params(fit: PartitionedFit, config: OptimizerConfig | None = None) -> AveragedFit:
    """Grid search over (log a, b, c) followed by bounded Nelder-Mead refinement."""
    config = config or OptimizerConfig()
    ev = _RiskEvaluator(fit)
    N = len(fit.submodels)
    if any(i < 0 or i >= N for i in config.unbiased_set):
        raise ValueError(f"unbiased set {config.unbiased_set} out of range for {N} submodels")
    constrained = config.rho > 0 and bool(config.unbiased_set)
    cap = 1.0 - config.rho

    cand = config.grid()
    lam = ev.weights(cand)
    risk = ev.risk(cand, lam)
    if constrained:
        mass = _unbiased_mass(lam, config.unbiased_set)
        feasible = mass <= cap + SIMPLEX_TOL
        if not feasible.any():
            raise InfeasibleWeightsError(config.rho, float(mass.min()))
        risk = np.where(feasible, risk, np.inf)
    best = _grid_order(cand, risk)[0]
    x_best, r_best = cand[best], float(risk[best])

    if config.refine:
        lo = np.array([b[0] for b in config.bounds])
        hi = np.array([b[1] for b in config.bounds])

        def objective(x):
            x = np.clip(x, lo, hi)[None, :]
            lam_x = ev.weights(x)
            if constrained and _unbiased_mass(lam_x, config.unbiased_set)[0] > cap + SIMPLEX_TOL:
                return np.inf
            value = ev.risk(x, lam_x)[0]
            return value if np.isfinite(value) else np.inf

        starts = [x_best]
        if config.restarts:
            rng = np.random.default_rng(config.seed)
            starts += list(rng.uniform(lo, hi, size=(config.restarts, 3)))
        for x0 in starts:
            res = minimize(
                objective,
                x0,
                method="Nelder-Mead",
                bounds=config.bounds,
                options={"maxiter": config.max_iter, "xatol": config.tol, "fatol": config.tol},
            )
            x_new = np.clip(res.x, lo, hi)
            r_new = objective(x_new)
            if r_new < r_best:
                x_best, r_best = x_new, float(r_new)

    params = WeightParams.from_vector(x_best, config.c_bar)
    weights = compute_weights(params, ev.q, ev.n, ev.sigma2_vec)
    beta_f, gamma_f = averaged_estimate(fit, weights)
    return AveragedFit(params, weights, beta_f, gamma_f, r_best)


def fitted_means(fit: PartitionedFit) -> np.ndarray:
    """Rows are the in-sample fitted delta_y of each submodel."""
    d = fit.design
    return np.array([d.scale * (d.X @ s.beta + d.Z @ s.gamma) for s in fit.submodels])


def loss_ratio_diagnostic(
    fit: PartitionedFit,
    mu,
    config: OptimizerConfig | None = None,
    averaged: AveragedFit | None = None,
    eval_grid: np.ndarray | None = None,
    grid_densities: tuple[int, int, int] = (25, 17, 21),
) -> LossDiagnostic:
    """Compare the loss at the optimised weights with the best loss on a grid over D0.

    ``mu`` is the noiseless mean of delta_y, so this only works for
    synthetic data. The optimiser's own point is always part of the grid.
    """
    if mu is None:
        raise DiagnosticUnavailableError(
            "the loss-ratio diagnostic needs the noiseless mean, which only synthetic data provides"
        )
    config = config or OptimizerConfig()
    mu = np.asarray(mu, dtype=float)
    if averaged is None:
        averaged = optimize_weight_params(fit, config)
    ev = _RiskEvaluator(fit)
    errors = fitted_means(fit) - mu
    gram = errors @ errors.T

    own = np.array([[np.log(averaged.params.a), averaged.params.b, averaged.params.c]])
    grid = config.grid(grid_densities) if eval_grid is None else np.atleast_2d(eval_grid)
    cand = np.vstack([own, grid])
    lam = ev.weights(cand)
    if config.rho > 0 and config.unbiased_set:
        keep = _unbiased_mass(lam, config.unbiased_set) <= 1.0 - config.rho + SIMPLEX_TOL
        keep[0] = True
        lam = lam[keep]
    losses = np.einsum("gi,ij,gj->g", lam, gram, lam)
    achieved = float(losses[0])
    infimum = float(losses.min())
    single = np.diag(gram)
    ratio = achieved / infimum if infimum > 0 else (1.0 if achieved == 0 else np.inf)
    return LossDiagnostic(
        n=fit.n,
        achieved_loss=achieved,
        infimum_loss=infimum,
        ratio=float(ratio),
        max_single_loss=float(single.max()),
        min_single_loss=float(single.min()),
        params=averaged.params,
    )
