"""RK4 integration of linear ODE systems and the Simpson-combined regression design.

For dY/dt = AY one RK4 step of length h advances the state by
(h/6) A (Y_t + 4 Y_{t+h/2} + Y_{t+h}) to fourth order, so sampled
trajectories give a linear regression of the h-step difference on the
combined regressor rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._util import frozen as _frozen
from .errors import (
    InsufficientDataError,
    IntegrationOverflowError,
    RankDeficiencyError,
    ShapeError,
    StepAlignmentError,
    TruncatedTrajectoryError,
)

DEFAULT_DIVERGENCE_BOUND = 1e12
DEFAULT_CONDITION_CAP = 1e10

Derivative = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrajectoryGrid:
    """Uniformly sampled multivariate series; rows are time points."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times).reshape(-1)
        values = _frozen(self.values)
        if values.ndim == 1:
            values = _frozen(values.reshape(-1, 1))
        if values.ndim != 2 or values.shape[0] != times.shape[0]:
            raise ShapeError(
                f"values has shape {values.shape}; expected ({times.shape[0]}, d)"
            )
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(values)):
            raise ValueError("trajectory grid contains non-finite entries")
        if times.shape[0] >= 2:
            steps = np.diff(times)
            delta = steps[0]
            if delta <= 0 or not np.allclose(steps, delta, rtol=1e-9, atol=0.0):
                raise ValueError("times must be strictly increasing with constant spacing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def delta(self) -> float:
        if self.times.shape[0] < 2:
            raise InsufficientDataError("a grid with fewer than two points has no spacing")
        return float(self.times[1] - self.times[0])

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class OdeSystem:
    """dY/dt = A Y (+ noise of standard deviation ``sigma`` on observations)."""

    A: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        if A.ndim != 2 or not np.all(np.isfinite(A)):
            raise ValueError("coefficient matrix must be a finite 2-d array")
        if not self.sigma >= 0:
            raise ValueError(f"noise standard deviation must be >= 0, got {self.sigma!r}")
        object.__setattr__(self, "A", A)

    def derivative(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.A @ y


@dataclass(frozen=True)
class DiscretizedDesign:
    """Regression triple from a sampled trajectory.

    ``delta_y[i] = y(t_i + h) - y(t_i)`` and ``regressors[i]`` is
    ``Y(t_i) + 4 Y(t_i + h/2) + Y(t_i + h)``; ``start_index[i]`` is the grid
    row of ``t_i``.
    """

    delta_y: np.ndarray
    regressors: np.ndarray
    h: float
    start_index: np.ndarray
    half_steps: int

    @property
    def scale(self) -> float:
        return self.h / 6.0

    @property
    def n(self) -> int:
        return self.delta_y.shape[0]


def rk4_step(f: Derivative, t: float, y, h: float) -> np.ndarray:
    if not h > 0:
        raise ValueError(f"step length must be positive, got {h!r}")
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(t, y), dtype=float)
    if not np.all(np.isfinite(k1)):
        raise IntegrationOverflowError("k1", t)
    k2 = np.asarray(f(t + h / 2, y + h / 2 * k1), dtype=float)
    if not np.all(np.isfinite(k2)):
        raise IntegrationOverflowError("k2", t)
    k3 = np.asarray(f(t + h / 2, y + h / 2 * k2), dtype=float)
    if not np.all(np.isfinite(k3)):
        raise IntegrationOverflowError("k3", t)
    k4 = np.asarray(f(t + h, y + h * k3), dtype=float)
    if not np.all(np.isfinite(k4)):
        raise IntegrationOverflowError("k4", t)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_integrate(
    system: OdeSystem | Derivative,
    y0,
    t0: float,
    delta: float,
    steps: int,
    bound: float = DEFAULT_DIVERGENCE_BOUND,
) -> TrajectoryGrid:
    """Fixed-step RK4 trajectory with ``steps + 1`` rows starting at ``y0``.

    ``system`` may be an :class:`OdeSystem` or any derivative ``f(t, y)``.
    """
    if steps < 1 or int(steps) != steps:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    y = np.atleast_1d(np.asarray(y0, dtype=float))
    if isinstance(system, OdeSystem):
        A = system.A
        if A.shape[0] != A.shape[1] or A.shape[1] != y.shape[0]:
            raise ShapeError(f"A has shape {A.shape} but y0 has dimension {y.shape[0]}")
        f = system.derivative
    else:
        f = system
    steps = int(steps)
    out = np.empty((steps + 1, y.shape[0]))
    out[0] = y
    times = t0 + delta * np.arange(steps + 1)
    for i in range(steps):
        try:
            y = rk4_step(f, times[i], y, delta)
        except IntegrationOverflowError:
            raise TruncatedTrajectoryError(i, bound) from None
        if np.any(np.abs(y) > bound):
            raise TruncatedTrajectoryError(i, bound)
        out[i + 1] = y
    return TrajectoryGrid(times, out)


def half_step_count(h: float, delta: float) -> int:
    """Number of grid spacings in h/2; raises unless it is a positive integer."""
    if not h > 0:
        raise ValueError(f"step length must be positive, got {h!r}")
    ratio = h / (2.0 * delta)
    s = int(round(ratio))
    if s < 1 or abs(ratio - s) > 1e-9 * max(1.0, ratio):
        raise StepAlignmentError(h, delta)
    return s


def discretize(
    grid: TrajectoryGrid,
    response_index: int,
    h: float,
    stride: int = 1,
    regressor_indices: Sequence[int] | None = None,
) -> DiscretizedDesign:
    """Build (delta_y, combined regressors) from consecutive grid triplets.

    Triplets start at every ``stride``-th grid row. ``regressor_indices``
    defaults to every column of the grid.
    """
    if len(grid) < 2:
        raise InsufficientDataError("grid needs at least two rows to define a spacing")
    s = half_step_count(h, grid.delta)
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    T = len(grid)
    if T < 2 * s + 1:
        raise InsufficientDataError(
            f"grid has {T} rows; at least {2 * s + 1} are needed for h={h!r}"
        )
    values = grid.values
    if not -values.shape[1] <= response_index < values.shape[1]:
        raise ShapeError(f"response index {response_index} out of range for {values.shape[1]} columns")
    cols = list(range(values.shape[1])) if regressor_indices is None else list(regressor_indices)
    starts = np.arange(0, T - 2 * s, stride)
    y = values[:, response_index]
    delta_y = y[starts + 2 * s] - y[starts]
    reg = values[:, cols]
    regressors = reg[starts] + 4.0 * reg[starts + s] + reg[starts + 2 * s]
    return DiscretizedDesign(
        delta_y=_frozen(delta_y),
        regressors=_frozen(regressors),
        h=float(h),
        start_index=starts,
        half_steps=s,
    )


def closed_form_alpha(
    design: DiscretizedDesign, condition_cap: float = DEFAULT_CONDITION_CAP
) -> np.ndarray:
    """Centered least-squares estimate of one row of A.

    Solves ``(6/h) S_cc^{-1} S_cy`` where both moments are taken about the
    sample means of the combined regressors and of delta_y.
    """
    C = design.regressors
    dy = design.delta_y
    if C.shape[0] < 2:
        raise InsufficientDataError("at least two design rows are required")
    Cc = C - C.mean(axis=0)
    dyc = dy - dy.mean()
    gram = Cc.T @ Cc
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > condition_cap:
        raise RankDeficiencyError("centered Gram matrix of combined regressors", float(cond))
    return 6.0 / design.h * np.linalg.solve(gram, Cc.T @ dyc)
