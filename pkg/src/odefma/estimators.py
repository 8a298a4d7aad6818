"""Full-model and submodel least-squares quantities for a partitioned design.

The regression is ``delta_y = (h/6) X beta + (h/6) Z gamma + e`` with X the
main regressors (kept in every submodel) and Z the auxiliaries. A submodel
keeps a subset of the auxiliary columns.

Projection naming: ``P`` is the projector onto the directions of the
transformed auxiliary vector ``theta = (h/6) (Z'MZ)^{1/2} gamma`` that a
submodel *keeps*, and ``W = I - P`` projects onto the directions it drops.
So the empty submodel has ``P = 0`` and the full one ``P = I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from ._util import frozen
from .errors import (
    InsufficientDataError,
    RankDeficiencyError,
    ShapeError,
    SubmodelCollinearityError,
)

DEFAULT_CONDITION_CAP = 1e10
EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class PartitionedDesign:
    delta_y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    h: float

    def __post_init__(self):
        dy = frozen(self.delta_y).reshape(-1)
        n = dy.shape[0]
        X, Z = (self._as_columns(a, n) for a in (self.X, self.Z))
        if X.shape[0] != n or Z.shape[0] != n:
            raise ShapeError(f"X {X.shape} and Z {Z.shape} must have {n} rows")
        if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise ValueError("design contains non-finite entries")
        if not self.h > 0:
            raise ValueError("step length h must be positive")
        if n <= X.shape[1] + Z.shape[1]:
            raise InsufficientDataError(
                f"n={n} rows cannot identify k+m={X.shape[1] + Z.shape[1]} coefficients"
            )
        object.__setattr__(self, "delta_y", dy)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "h", float(self.h))

    @staticmethod
    def _as_columns(a, n: int) -> np.ndarray:
        if not np.size(a):
            return frozen(np.empty((n, 0)))
        a = frozen(a)
        return frozen(a.reshape(-1, 1)) if a.ndim == 1 else a

    @property
    def n(self) -> int:
        return self.delta_y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    @property
    def scale(self) -> float:
        return self.h / 6.0


@dataclass(frozen=True)
class SubmodelSpec:
    """Auxiliary columns (0-based) kept by a submodel."""

    included: tuple[int, ...] = ()

    def __post_init__(self):
        inc = tuple(sorted(int(i) for i in self.included))
        if len(set(inc)) != len(inc):
            raise ValueError(f"duplicate auxiliary indices in {self.included!r}")
        object.__setattr__(self, "included", inc)

    def validate(self, m: int) -> None:
        if any(i < 0 or i >= m for i in self.included):
            raise ValueError(f"auxiliary indices {self.included} out of range for m={m}")

    def excluded(self, m: int) -> tuple[int, ...]:
        keep = set(self.included)
        return tuple(i for i in range(m) if i not in keep)

    def selection_matrix(self, m: int) -> np.ndarray:
        self.validate(m)
        return np.eye(m)[:, list(self.included)]


def all_submodels(m: int) -> list[SubmodelSpec]:
    """The 2^m auxiliary subsets, ordered by size then lexicographically."""
    return [SubmodelSpec(c) for r in range(m + 1) for c in combinations(range(m), r)]


@dataclass(frozen=True)
class SubmodelFit:
    spec: SubmodelSpec
    P: np.ndarray
    W: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    sigma2: float
    q: int


@dataclass(frozen=True)
class PartitionedFit:
    design: PartitionedDesign
    beta_r: np.ndarray
    beta_u: np.ndarray
    gamma: np.ndarray
    theta_hat: np.ndarray
    sigma2: float
    sigma2_unbiased: float
    Q: np.ndarray
    xtx_inv: np.ndarray
    zmz: np.ndarray
    zmz_half: np.ndarray
    zmz_inv_half: np.ndarray
    submodels: tuple[SubmodelFit, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def k(self) -> int:
        return self.design.k

    @property
    def m(self) -> int:
        return self.design.m

    @cached_property
    def M(self) -> np.ndarray:
        X = self.design.X
        return np.eye(self.n) - X @ self.xtx_inv @ X.T

    def with_submodels(self, specs: Iterable[SubmodelSpec]) -> "PartitionedFit":
        subs = tuple(submodel_estimates(self, s) for s in specs)
        return PartitionedFit(**{**self._fields(), "submodels": subs})

    def _fields(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def _check_condition(mat: np.ndarray, name: str, cap: float) -> None:
    if mat.size == 0:
        return
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > cap:
        raise RankDeficiencyError(name, float(cond))


def sym_sqrt(mat: np.ndarray, name: str = "matrix") -> tuple[np.ndarray, np.ndarray]:
    """Symmetric PSD square root and its inverse via eigendecomposition."""
    if mat.size == 0:
        return np.empty((0, 0)), np.empty((0, 0))
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    top = vals.max()
    if top <= 0 or vals.min() < EIGEN_FLOOR * top:
        cond = np.inf if vals.min() <= 0 else top / vals.min()
        raise RankDeficiencyError(name, float(cond))
    root = np.sqrt(vals)
    return (vecs * root) @ vecs.T, (vecs / root) @ vecs.T


def fit_full(design: PartitionedDesign, condition_cap: float = DEFAULT_CONDITION_CAP) -> PartitionedFit:
    X, Z, dy = design.X, design.Z, design.delta_y
    n, k, m = design.n, design.k, design.m
    inv_scale = 6.0 / design.h

    xtx = X.T @ X
    _check_condition(xtx, "X'X", condition_cap)
    xtx_inv = np.linalg.inv(xtx) if k else np.empty((0, 0))
    beta_r = inv_scale * (xtx_inv @ (X.T @ dy))

    MZ = Z - X @ (xtx_inv @ (X.T @ Z))
    zmz = Z.T @ MZ
    zmz = (zmz + zmz.T) / 2
    _check_condition(zmz, "Z'MZ", condition_cap)
    half, inv_half = sym_sqrt(zmz, "Z'MZ")
    if m:
        gamma = inv_scale * np.linalg.solve(zmz, MZ.T @ dy)
    else:
        gamma = np.empty(0)
    theta_hat = design.scale * (half @ gamma)
    Q = xtx_inv @ (X.T @ Z) @ inv_half
    beta_u = beta_r - inv_scale * (Q @ theta_hat)

    resid = dy - design.scale * (X @ beta_u + Z @ gamma)
    rss = float(resid @ resid)
    return PartitionedFit(
        design=design,
        beta_r=frozen(beta_r),
        beta_u=frozen(beta_u),
        gamma=frozen(gamma),
        theta_hat=frozen(theta_hat),
        sigma2=rss / n,
        sigma2_unbiased=rss / (n - k - m),
        Q=frozen(Q),
        xtx_inv=frozen(xtx_inv),
        zmz=frozen(zmz),
        zmz_half=frozen(half),
        zmz_inv_half=frozen(inv_half),
    )


def submodel_projection(fit: PartitionedFit, spec: SubmodelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(P, W)`` for a submodel.

    The dropped-direction projector is
    ``W = G^{-1/2} S {S' G^{-1} S}^{-1} S' G^{-1/2}`` with ``G = Z'MZ`` and
    ``S`` selecting the *excluded* auxiliaries; ``P = I - W``.
    """
    m = fit.m
    spec.validate(m)
    eye = np.eye(m)
    dropped = list(spec.excluded(m))
    if not dropped:
        return eye, np.zeros((m, m))
    S = eye[:, dropped]
    inv_half = fit.zmz_inv_half
    inner = S.T @ (inv_half @ inv_half) @ S
    cond = np.linalg.cond(inner)
    if not np.isfinite(cond) or cond > DEFAULT_CONDITION_CAP:
        raise SubmodelCollinearityError(spec.included, float(cond))
    left = inv_half @ S
    W = left @ np.linalg.solve(inner, left.T)
    W = (W + W.T) / 2
    return eye - W, W


def submodel_estimates(fit: PartitionedFit, spec: SubmodelSpec) -> SubmodelFit:
    design = fit.design
    P, W = submodel_projection(fit, spec)
    inv_scale = 6.0 / design.h
    beta = fit.beta_r - inv_scale * (fit.Q @ (P @ fit.theta_hat))
    gamma = inv_scale * (fit.zmz_inv_half @ (P @ fit.theta_hat))
    gamma[list(spec.excluded(fit.m))] = 0.0
    resid = design.delta_y - design.scale * (design.X @ beta + design.Z @ gamma)
    return SubmodelFit(
        spec=spec,
        P=frozen(P),
        W=frozen(W),
        beta=frozen(beta),
        gamma=frozen(gamma),
        sigma2=float(resid @ resid) / design.n,
        q=fit.k + len(spec.included),
    )


def fit_with_submodels(
    design: PartitionedDesign,
    specs: Sequence[SubmodelSpec] | None = None,
    condition_cap: float = DEFAULT_CONDITION_CAP,
) -> PartitionedFit:
    """Full fit plus per-submodel records (all 2^m subsets by default)."""
    fit = fit_full(design, condition_cap)
    return fit.with_submodels(all_submodels(design.m) if specs is None else specs)
