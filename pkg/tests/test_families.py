"""Observation families: log likelihoods, mixture normalization, and
analytic derivatives against finite differences and scipy oracles."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit
from scipy.stats import binom, norm

from geoprev.families import (
    FAMILIES,
    binom_logpmf,
    derivatives,
    log1mexp,
    loglik,
    softplus,
    uses_suitability,
)

etas = st.floats(-6.0, 6.0, allow_nan=False)
COUNT_FAMILIES = ("binomial", "zero_inflated", "hurdle")


def direct_loglik(family, y, m, eta1, eta2):
    """Transparent reimplementation used as the oracle."""
    p = expit(eta1)
    pi = expit(eta2) if eta2 is not None else None
    base = binom.logpmf(y, m, p)
    if family == "binomial":
        return base
    if family == "zero_inflated":
        if y > 0:
            return np.log(pi) + base
        return np.log((1.0 - pi) + pi * (1.0 - p) ** m)
    if family == "hurdle":
        if y == 0:
            return np.log(1.0 - pi)
        trunc = base - np.log1p(-((1.0 - p) ** m))
        return np.log(pi) + trunc
    raise AssertionError(family)


class TestBinomLogpmf:
    @given(st.integers(1, 40), etas, st.data())
    def test_matches_scipy(self, m, eta, data):
        y = data.draw(st.integers(0, m))
        ours = float(binom_logpmf(y, m, eta))
        ref = float(binom.logpmf(y, m, expit(eta)))
        assert ours == pytest.approx(ref, rel=1e-10, abs=1e-10)

    def test_extreme_eta_stays_finite(self):
        assert np.isfinite(binom_logpmf(0, 50, -35.0))
        assert np.isfinite(binom_logpmf(50, 50, 35.0))
        # all-failure outcome under near-certain success is tiny, not -inf
        assert binom_logpmf(0, 10, 30.0) < -250.0


class TestLoglik:
    @given(
        st.sampled_from(COUNT_FAMILIES), st.integers(1, 25), etas, etas, st.data()
    )
    def test_matches_direct_formula(self, family, m, eta1, eta2, data):
        y = data.draw(st.integers(0, m))
        if family == "hurdle" and y > 0:
            # the truncated pmf needs at least one possible positive
            pass
        ours = float(loglik(family, y, m, eta1, eta2))
        ref = direct_loglik(family, y, m, eta1, eta2)
        assert ours == pytest.approx(float(ref), rel=1e-8, abs=1e-8)

    @given(st.sampled_from(COUNT_FAMILIES), st.integers(1, 8), etas, etas)
    def test_normalizes_to_one(self, family, m, eta1, eta2):
        total = sum(
            float(np.exp(loglik(family, y, m, eta1, eta2))) for y in range(m + 1)
        )
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_gaussian_matches_norm_logpdf(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=20)
        eta = rng.normal(size=20)
        ours = loglik("gaussian", y, np.ones(20), eta, gaussian_sd=0.7)
        ref = norm.logpdf(y, loc=eta, scale=0.7)
        assert np.allclose(ours, ref, atol=1e-12)

    def test_vectorized_batch(self):
        y = np.array([0, 3, 5])
        m = np.array([4, 6, 5])
        eta1 = np.array([-1.0, 0.5, 2.0])
        out = loglik("binomial", y, m, eta1)
        assert out.shape == (3,)
        for i in range(3):
            assert out[i] == pytest.approx(
                float(binom.logpmf(y[i], m[i], expit(eta1[i]))), rel=1e-10
            )


class TestDerivatives:
    @given(st.sampled_from(COUNT_FAMILIES), st.integers(1, 20), etas, etas, st.data())
    def test_first_derivatives_match_fd(self, family, m, eta1, eta2, data):
        y = data.draw(st.integers(0, m))
        h = 1e-6
        _, d1, d2, _, _, _ = derivatives(family, y, m, eta1, eta2)
        fd1 = (
            float(loglik(family, y, m, eta1 + h, eta2))
            - float(loglik(family, y, m, eta1 - h, eta2))
        ) / (2.0 * h)
        fd2 = (
            float(loglik(family, y, m, eta1, eta2 + h))
            - float(loglik(family, y, m, eta1, eta2 - h))
        ) / (2.0 * h)
        assert float(d1) == pytest.approx(fd1, rel=2e-5, abs=2e-6)
        assert float(d2) == pytest.approx(fd2, rel=2e-5, abs=2e-6)

    @given(st.sampled_from(COUNT_FAMILIES), st.integers(1, 20), etas, etas, st.data())
    def test_second_derivatives_match_fd(self, family, m, eta1, eta2, data):
        y = data.draw(st.integers(0, m))
        h = 1e-4
        _, _, _, d11, d22, _ = derivatives(family, y, m, eta1, eta2)
        mid = float(loglik(family, y, m, eta1, eta2))
        fd11 = (
            float(loglik(family, y, m, eta1 + h, eta2))
            - 2.0 * mid
            + float(loglik(family, y, m, eta1 - h, eta2))
        ) / (h * h)
        fd22 = (
            float(loglik(family, y, m, eta1, eta2 + h))
            - 2.0 * mid
            + float(loglik(family, y, m, eta1, eta2 - h))
        ) / (h * h)
        assert float(d11) == pytest.approx(fd11, rel=5e-4, abs=5e-5)
        assert float(d22) == pytest.approx(fd22, rel=5e-4, abs=5e-5)

    def test_binomial_closed_form(self):
        y, m, eta = 7, 10, 0.3
        _, d1, d2, d11, d22, d12 = derivatives("binomial", y, m, eta)
        p = expit(eta)
        assert float(d1) == pytest.approx(y - m * p, abs=1e-12)
        assert float(d11) == pytest.approx(-m * p * (1 - p), abs=1e-12)
        assert float(d2) == float(d22) == float(d12) == 0.0

    def test_gaussian_closed_form(self):
        _, d1, d2, d11, d22, d12 = derivatives(
            "gaussian", 1.3, 1.0, 0.4, gaussian_sd=0.5
        )
        assert float(d1) == pytest.approx((1.3 - 0.4) / 0.25, abs=1e-12)
        assert float(d11) == pytest.approx(-1.0 / 0.25, abs=1e-12)
        assert float(d2) == float(d22) == float(d12) == 0.0

    def test_mixture_cross_derivative_matches_fd(self):
        h = 1e-5
        for family in ("zero_inflated", "hurdle"):
            for y in (0, 2):
                _, _, _, _, _, d12 = derivatives(family, y, 5, 0.3, -0.2)
                fpp = float(loglik(family, y, 5, 0.3 + h, -0.2 + h))
                fpm = float(loglik(family, y, 5, 0.3 + h, -0.2 - h))
                fmp = float(loglik(family, y, 5, 0.3 - h, -0.2 + h))
                fmm = float(loglik(family, y, 5, 0.3 - h, -0.2 - h))
                fd = (fpp - fpm - fmp + fmm) / (4.0 * h * h)
                assert float(d12) == pytest.approx(fd, rel=1e-3, abs=1e-6)


class TestMixtureStructure:
    def test_zero_inflated_positive_count_factorizes(self):
        # positive counts: suitability enters as an additive log(pi)
        y, m, eta1, eta2 = 3, 8, 0.4, 1.1
        whole = float(loglik("zero_inflated", y, m, eta1, eta2))
        parts = float(np.log(expit(eta2))) + float(binom_logpmf(y, m, eta1))
        assert whole == pytest.approx(parts, abs=1e-12)

    def test_hurdle_zero_ignores_count_process(self):
        a = float(loglik("hurdle", 0, 5, -3.0, 0.7))
        b = float(loglik("hurdle", 0, 5, 2.5, 0.7))
        assert a == b == pytest.approx(float(np.log(1 - expit(0.7))), abs=1e-12)

    def test_suitability_flags(self):
        assert uses_suitability("zero_inflated")
        assert uses_suitability("hurdle")
        assert not uses_suitability("binomial")
        assert not uses_suitability("gaussian")

    def test_families_tuple(self):
        assert set(COUNT_FAMILIES) <= set(FAMILIES)
        assert "gaussian" in FAMILIES


class TestNumericHelpers:
    def test_log1mexp_accuracy(self):
        # log(1 - exp(x)) for x < 0, both branches
        for x in (-1e-12, -0.5, -5.0, -40.0):
            ref = float(np.log1p(-np.exp(x))) if x < -1e-6 else float(
                np.log(-np.expm1(x))
            )
            assert float(log1mexp(x)) == pytest.approx(ref, rel=1e-12)

    def test_softplus_asymptotics(self):
        assert float(softplus(800.0)) == 800.0
        assert float(softplus(-800.0)) == pytest.approx(0.0, abs=1e-300)
        assert float(softplus(0.0)) == pytest.approx(np.log(2.0), abs=1e-15)
