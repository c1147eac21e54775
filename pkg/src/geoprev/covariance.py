"""Stationary isotropic correlation kernels and covariance-matrix assembly.

Variance bookkeeping convention used throughout the package:

* ``sigma2`` — variance of the primary spatial process S(x); ``phi`` its
  correlation scale.
* ``nu2`` — nugget ratio: the per-unit independent effect Z has variance
  ``sigma2 * nu2``.
* ``omega2`` — second-process ratio: whichever extra Gaussian process the
  model carries (survey bias B, temporal U, or suitability T) has variance
  ``sigma2 * omega2`` and its own scale ``psi``.
* ``alpha`` — cross-survey correlation matrix for surveys taken at
  different times; pairs taken at the same time are pinned at 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidAlpha, NotPositiveDefinite
from .geometry import as_xy, pairwise_distances

_FAMILIES = ("exponential",)


@dataclass(frozen=True)
class CorrelationFunction:
    """Isotropic correlation rho(u); only the exponential family is shipped."""

    scale: float
    family: str = "exponential"

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown correlation family {self.family!r}")
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")

    def __call__(self, u) -> np.ndarray:
        return correlation(self, u)


def correlation(cf: CorrelationFunction, u) -> np.ndarray:
    """rho(u) in (0, 1], with rho(0) = 1. Accepts scalars or arrays, u >= 0."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0.0):
        raise ValueError("distances must be nonnegative")
    return np.exp(-u / cf.scale)


@dataclass(frozen=True)
class CovarianceParams:
    """Variance components on the natural (positive) scale.

    ``nu2``/``omega2`` are variance ratios relative to ``sigma2``; ``psi``
    is the correlation scale of the second process. ``alpha`` is the
    cross-survey correlation matrix (``None`` when a single survey time is
    in play).
    """

    sigma2: float
    phi: float
    nu2: float = 0.0
    omega2: float = 0.0
    psi: float | None = None
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0.0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (np.isfinite(self.phi) and self.phi > 0.0):
            raise ValueError(f"phi must be positive, got {self.phi}")
        if self.nu2 < 0.0 or self.omega2 < 0.0:
            raise ValueError("variance ratios must be nonnegative")
        if self.psi is not None and not (np.isfinite(self.psi) and self.psi > 0.0):
            raise ValueError(f"psi must be positive, got {self.psi}")


def validate_alpha(alpha: np.ndarray, time_group: np.ndarray) -> np.ndarray:
    """Check a cross-survey correlation matrix against survey time groups."""
    alpha = np.asarray(alpha, dtype=np.float64)
    k = alpha.shape[0]
    if alpha.shape != (k, k) or time_group.shape != (k,):
        raise InvalidAlpha("alpha must be square with one time group per survey")
    if not np.allclose(alpha, alpha.T):
        raise InvalidAlpha("alpha must be symmetric")
    same_time = time_group[:, None] == time_group[None, :]
    if not np.all(alpha[same_time] == 1.0):
        raise InvalidAlpha("alpha must equal 1 for same-time survey pairs")
    off = alpha[~same_time]
    if off.size and np.any(np.abs(off) >= 1.0):
        raise InvalidAlpha("cross-survey correlations must lie in (-1, 1)")
    return alpha


def cov_matrix(
    locs, params: CovarianceParams, include_nugget: bool = False
) -> np.ndarray:
    """sigma2 * rho(d_ij) plus an optional nugget sigma2*nu2 on the diagonal."""
    xy = as_xy(locs)
    cf = CorrelationFunction(scale=params.phi)
    cov = params.sigma2 * correlation(cf, pairwise_distances(xy))
    if include_nugget:
        cov[np.diag_indices_from(cov)] += params.sigma2 * params.nu2
    return cov


def cov_spatiotemporal(locs, times, params: CovarianceParams) -> np.ndarray:
    """Additive space-time covariance: Sigma_S(locations) + Sigma_U(times).

    The temporal process U(t) carries variance sigma2*omega2 and scale psi;
    additivity holds because S(x) and U(t) are independent.
    """
    xy = as_xy(locs)
    t = np.asarray(times, dtype=np.float64)
    if t.shape[0] != xy.shape[0]:
        raise ValueError("locations and times must have equal length")
    if params.psi is None:
        raise ValueError("psi is required for a spatio-temporal covariance")
    cov = cov_matrix(xy, params)
    lag = np.abs(t[:, None] - t[None, :])
    cov += params.sigma2 * params.omega2 * np.exp(-lag / params.psi)
    return cov


def cov_multisurvey(
    locs, survey_index, time_group, params: CovarianceParams
) -> np.ndarray:
    """Cross-survey spatial covariance sigma2 * alpha_kk' * rho(d).

    ``survey_index`` maps each record to a survey (0-based); ``time_group``
    maps each survey to its time label so same-time pairs get alpha = 1.
    """
    xy = as_xy(locs)
    k_of = np.asarray(survey_index, dtype=np.intp)
    groups = np.asarray(time_group)
    if params.alpha is None:
        alpha = np.ones((groups.shape[0], groups.shape[0]))
    else:
        alpha = validate_alpha(params.alpha, groups)
    cf = CorrelationFunction(scale=params.phi)
    rho = correlation(cf, pairwise_distances(xy))
    return params.sigma2 * alpha[np.ix_(k_of, k_of)] * rho


def cholesky_factor(cov: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor; raises NotPositiveDefinite on failure.

    Jitter is off by default — a PD failure is an error, usually signalling
    duplicate locations with a zero nugget. When explicitly enabled, jitter
    is added once to the diagonal before factorizing.
    """
    mat = cov
    if jitter > 0.0:
        mat = cov + jitter * np.eye(cov.shape[0])
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            f"covariance matrix of order {cov.shape[0]} is not positive definite"
            + ("" if jitter else " (zero nugget with duplicate locations?)")
        ) from exc


# -- low-rank approximation ----------------------------------------------

def gaussian_kernel(width: float) -> Callable[[np.ndarray], np.ndarray]:
    """Gaussian bump f(u) = exp(-u^2 / (2 width^2)), the default basis kernel."""
    if width <= 0.0:
        raise ValueError("kernel width must be positive")

    def f(u):
        u = np.asarray(u, dtype=np.float64)
        return np.exp(-(u * u) / (2.0 * width * width))

    return f


@dataclass(frozen=True)
class LowRankBasis:
    """Anchor points with a shared distance kernel and anchor-weight variance.

    Approximates a stationary field by sum_k f(||x - x_k||) V_k with
    V_k ~ N(0, tau2) i.i.d. ``tau2`` here is the anchor-weight variance,
    distinct from the nugget variance sigma2*nu2.
    """

    anchors: np.ndarray  # (r, 2)
    kernel: Callable[[np.ndarray], np.ndarray]
    tau2: float

    def __post_init__(self):
        object.__setattr__(self, "anchors", as_xy(self.anchors))
        if self.anchors.shape[0] < 1:
            raise ValueError("need at least one anchor")
        if not (np.isfinite(self.tau2) and self.tau2 > 0.0):
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        f0 = float(np.asarray(self.kernel(np.array([0.0]))).ravel()[0])
        if not np.isfinite(f0):
            raise ValueError("kernel must be finite at distance 0")

    @classmethod
    def regular(
        cls,
        xmin: float,
        ymin: float,
        xmax: float,
        ymax: float,
        spacing: float,
        tau2: float = 1.0,
        kernel: Callable[[np.ndarray], np.ndarray] | None = None,
    ) -> "LowRankBasis":
        """Anchors on a regular lattice; Gaussian kernel width = spacing."""
        xs = np.arange(xmin, xmax + spacing / 2.0, spacing)
        ys = np.arange(ymin, ymax + spacing / 2.0, spacing)
        gx, gy = np.meshgrid(xs, ys)
        anchors = np.column_stack([gx.ravel(), gy.ravel()])
        return cls(anchors, kernel or gaussian_kernel(spacing), tau2)


def lowrank_value(basis: LowRankBasis, v: np.ndarray, x) -> float:
    """Realized field value sum_k f(||x - x_k||) v_k for anchor weights v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != basis.anchors.shape[0]:
        raise ValueError("v must carry one weight per anchor")
    d = pairwise_distances(as_xy([x]), basis.anchors)[0]
    return float(np.dot(basis.kernel(d), v))


def lowrank_cov(basis: LowRankBasis, x, x2) -> float:
    """Covariance of the low-rank field: tau2 * sum_k f(x - x_k) f(x2 - x_k)."""
    d1 = pairwise_distances(as_xy([x]), basis.anchors)[0]
    d2 = pairwise_distances(as_xy([x2]), basis.anchors)[0]
    return basis.tau2 * float(np.dot(basis.kernel(d1), basis.kernel(d2)))
