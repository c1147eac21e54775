"""Conditional observation densities and their linear-predictor derivatives.

Four families are supported:

* ``binomial`` — counts y out of m with success probability expit(eta1).
* ``zero_inflated`` — mixture: with probability 1 - pi the unit is
  unsuitable and y = 0; otherwise binomial. pi = expit(eta2).
* ``hurdle`` — zeros come only from the unsuitable state; positives follow
  a zero-truncated binomial.
* ``gaussian`` — real-valued y = eta1 + noise with known sd. Diagnostic
  family used to validate the latent-Gaussian machinery against closed
  forms; not part of the public modelling surface.

All functions broadcast, so they accept per-record vectors or
(samples x records) matrices. Derivatives are with respect to eta1
(prevalence predictor) and eta2 (suitability predictor); families without
a suitability part report zero eta2 derivatives.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

FAMILIES = ("binomial", "zero_inflated", "hurdle", "gaussian")
SUITABILITY_FAMILIES = ("zero_inflated", "hurdle")


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def log1mexp(log_p):
    """log(1 - exp(log_p)) for log_p <= 0, stable near both ends."""
    log_p = np.asarray(log_p, dtype=np.float64)
    out = np.empty_like(log_p)
    small = log_p < -0.6931471805599453  # log(2)
    out[small] = np.log1p(-np.exp(log_p[small]))
    rest = ~small
    out[rest] = np.log(-np.expm1(log_p[rest]))
    return out


def binom_logcoef(y, m):
    """log C(m, y), zero when m = 0."""
    return gammaln(m + 1.0) - gammaln(y + 1.0) - gammaln(m - y + 1.0)


def binom_logpmf(y, m, eta1):
    """Binomial log pmf at p = expit(eta1), stable in eta1."""
    # y*log p + (m-y)*log(1-p) = y*eta1 - m*softplus(eta1)
    return binom_logcoef(y, m) + y * eta1 - m * softplus(eta1)


def _zi_pieces(y, m, eta1, eta2):
    """Shared stable quantities for the mixture families."""
    p = expit(eta1)
    pi = expit(eta2)
    log_pi = -softplus(-eta2)
    log_1mpi = -softplus(eta2)
    log_a = -m * softplus(eta1)  # log Bin(0; m, p)
    return p, pi, log_pi, log_1mpi, log_a


def loglik(family: str, y, m, eta1, eta2=None, gaussian_sd: float = 1.0):
    """Log f(y | eta1, eta2), elementwise."""
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    eta1 = np.asarray(eta1, dtype=np.float64)
    if family == "binomial":
        return binom_logpmf(y, m, eta1)
    if family == "gaussian":
        z = (y - eta1) / gaussian_sd
        return -0.5 * z * z - np.log(gaussian_sd) - 0.5 * np.log(2.0 * np.pi)
    if eta2 is None:
        raise ValueError(f"family {family!r} needs a suitability predictor eta2")
    eta2 = np.asarray(eta2, dtype=np.float64)
    _, _, log_pi, log_1mpi, log_a = _zi_pieces(y, m, eta1, eta2)
    if family == "zero_inflated":
        zero = np.logaddexp(log_1mpi, log_pi + log_a)
        pos = log_pi + binom_logpmf(y, m, eta1)
        return np.where(y == 0, zero, pos)
    if family == "hurdle":
        zero = log_1mpi
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = log_pi + binom_logpmf(y, m, eta1) - log1mexp(log_a)
        return np.where(y == 0, zero, pos)
    raise ValueError(f"unknown family {family!r}")


def derivatives(family: str, y, m, eta1, eta2=None, gaussian_sd: float = 1.0):
    """Log-density and its first/second eta derivatives.

    Returns (l, d1, d2, d11, d22, d12) where d1 = dl/deta1, d11 the second
    derivative, d12 the cross term, all elementwise.
    """
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    eta1 = np.asarray(eta1, dtype=np.float64)
    zeros = np.zeros(np.broadcast_shapes(y.shape, eta1.shape))

    if family == "binomial":
        p = expit(eta1)
        l = binom_logpmf(y, m, eta1)
        d1 = y - m * p
        d11 = -m * p * (1.0 - p)
        return l, d1, zeros.copy(), d11, zeros.copy(), zeros.copy()

    if family == "gaussian":
        z = (y - eta1) / gaussian_sd
        l = -0.5 * z * z - np.log(gaussian_sd) - 0.5 * np.log(2.0 * np.pi)
        d1 = (y - eta1) / gaussian_sd**2
        d11 = np.full_like(zeros, -1.0 / gaussian_sd**2)
        return l, d1, zeros.copy(), d11, zeros.copy(), zeros.copy()

    if eta2 is None:
        raise ValueError(f"family {family!r} needs a suitability predictor eta2")
    eta2 = np.asarray(eta2, dtype=np.float64)
    p, pi, log_pi, log_1mpi, log_a = _zi_pieces(y, m, eta1, eta2)
    a = np.exp(log_a)
    l = loglik(family, y, m, eta1, eta2)

    if family == "zero_inflated":
        # y = 0 branch: f0 = (1 - pi) + pi * a
        log_f0 = np.logaddexp(log_1mpi, log_pi + log_a)
        q = np.exp(log_pi + log_a - log_f0)  # pi*a/f0 in (0, 1]
        r = np.exp(log_1mpi - log_f0)  # (1-pi)/f0 in (0, 1]
        d1_0 = -m * p * q
        d11_0 = -m * p * q * ((1.0 - p) - m * p) - (m * p * q) ** 2
        d2_0 = (a - 1.0) * pi * r
        d22_0 = (a - 1.0) * (1.0 - 2.0 * pi) * pi * r - d2_0**2
        d12_0 = -m * p * (1.0 - pi) * q - d1_0 * d2_0
        # y > 0 branch: log pi + binomial
        d1_pos = y - m * p
        d11_pos = -m * p * (1.0 - p)
        d2_pos = 1.0 - pi
        d22_pos = -pi * (1.0 - pi)
        is_zero = y == 0
        d1 = np.where(is_zero, d1_0, d1_pos)
        d11 = np.where(is_zero, d11_0, d11_pos)
        d2 = np.where(is_zero, d2_0, d2_pos)
        d22 = np.where(is_zero, d22_0, d22_pos)
        d12 = np.where(is_zero, d12_0, 0.0)
        return l, d1, d2, d11, d22, d12

    if family == "hurdle":
        # positive branch needs b = a / (1 - a)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            log_1ma = log1mexp(log_a)
            b = np.exp(log_a - log_1ma)
            d1_pos = y - m * p - m * p * b
            d11_pos = -m * p * (1.0 - p) - m * p * b * (
                (1.0 - p) - m * p * (1.0 + b)
            )
        is_zero = y == 0
        d1 = np.where(is_zero, 0.0, d1_pos)
        d11 = np.where(is_zero, 0.0, d11_pos)
        d2 = np.where(is_zero, -pi, 1.0 - pi)
        d22 = np.full_like(zeros, -pi * (1.0 - pi))
        d12 = zeros.copy()
        return l, d1, d2, d11, d22, d12

    raise ValueError(f"unknown family {family!r}")


def uses_suitability(family: str) -> bool:
    return family in SUITABILITY_FAMILIES
