"""Predictive surfaces: conditional simulation at new sites, prevalence
maps, exceedance probabilities, village-level aggregation, and time
trends."""

import numpy as np
import pytest
from scipy.special import expit

from geoprev import (
    Effects,
    convex_hull,
    ExceedanceQuery,
    ModelSpec,
    SurveyDataset,
    conditional_simulate,
    exceedance,
    fit,
    prevalence_map,
    temporal_trend,
    village_prevalence,
)
from geoprev.predict import PredictionSurface

from conftest import fast_controls, simulate_spatial


@pytest.fixture(scope="module")
def nugget_free_fit():
    """Spatial-only fit: with no nugget, the latent field at a data site
    is exactly the stored draw, so interpolation there must be exact."""
    spec, theta, data, _ = simulate_spatial(seed=55, n=50, m=40, nu2=0.0)
    res = fit(spec, data, controls=fast_controls(), rng=8)
    return spec, data, res


class TestConditionalSimulate:
    def test_reproduces_stored_draws_at_data_sites(self, nugget_free_fit):
        spec, data, res = nugget_free_fit
        pick = [3, 17, 42]
        surf = conditional_simulate(res, spec, data, data.xy[pick], rng=0)
        assert surf.samples.shape == (res.samples.draws.shape[0], 3)
        for j, i in enumerate(pick):
            assert np.allclose(
                surf.samples[:, j], res.samples.draws[:, i], atol=1e-8
            )

    def test_predictive_sd_bounded_by_prior_sd(self, nugget_free_fit):
        spec, data, res = nugget_free_fit
        rng = np.random.default_rng(1)
        far = rng.uniform(0, 15, size=(40, 2))
        surf = conditional_simulate(res, spec, data, far, rng=2)
        sigma_hat = np.exp(res.estimates[list(res.param_names).index("log_sigma2")])
        # conditioning can only remove variance; allow sampling slack
        assert np.all(surf.sd <= np.sqrt(sigma_hat) * 1.25)

    def test_deterministic_under_seed(self, nugget_free_fit):
        spec, data, res = nugget_free_fit
        sites = np.array([[1.0, 1.0], [8.0, 3.0]])
        a = conditional_simulate(res, spec, data, sites, rng=5)
        b = conditional_simulate(res, spec, data, sites, rng=5)
        assert np.array_equal(a.samples, b.samples)

    def test_mean_decays_toward_zero_far_away(self, nugget_free_fit):
        # far outside the sampled window the conditional field reverts to
        # the prior, whose mean is zero
        spec, data, res = nugget_free_fit
        near = conditional_simulate(res, spec, data, data.xy[:10], rng=3)
        far_sites = np.full((10, 2), 300.0)
        far = conditional_simulate(res, spec, data, far_sites, rng=3)
        assert np.mean(np.abs(far.samples.mean(axis=0))) < np.mean(
            np.abs(near.samples.mean(axis=0))
        )
        assert np.abs(far.samples.mean()) < 0.2


class TestPrevalenceMap:
    def test_manual_recompute_intercept_model(self, nugget_free_fit):
        spec, data, res = nugget_free_fit
        sites = np.array([[2.0, 2.0], [9.0, 9.0]])
        surf = conditional_simulate(res, spec, data, sites, rng=4)
        elev = np.array([0.3, -1.2])
        prev = prevalence_map(surf, res, spec, {"elev": elev})
        b0, b1 = res.estimates[0], res.estimates[1]
        expected = expit(b0 + b1 * elev[None, :] + surf.samples)
        assert prev.kind == "prevalence"
        assert np.allclose(prev.samples, expected, atol=1e-12)

    def test_missing_covariate_raises(self, nugget_free_fit):
        spec, data, res = nugget_free_fit
        surf = conditional_simulate(res, spec, data, np.array([[1.0, 1.0]]), rng=4)
        from geoprev.errors import MissingCovariate

        with pytest.raises(MissingCovariate):
            prevalence_map(surf, res, spec, {"rain": np.array([0.0])})


class TestExceedance:
    def test_counting_is_exact(self):
        samples = np.array(
            [[0.1, 0.6], [0.3, 0.7], [0.5, 0.05], [0.9, 0.4], [0.2, 0.8]]
        )
        surf = PredictionSurface(
            sites=np.zeros((2, 2)), samples=samples, kind="prevalence"
        )
        out = exceedance(surf, ExceedanceQuery(threshold=0.4))
        assert out.kind == "exceedance"
        assert np.allclose(out.samples[0], [2 / 5, 3 / 5], atol=1e-15)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(6)
        surf = PredictionSurface(
            sites=rng.uniform(0, 1, (5, 2)),
            samples=rng.uniform(0, 1, (200, 5)),
            kind="prevalence",
        )
        probs = [
            exceedance(surf, ExceedanceQuery(threshold=c)).samples[0]
            for c in (0.2, 0.5, 0.8)
        ]
        assert np.all(probs[0] >= probs[1]) and np.all(probs[1] >= probs[2])

    def test_interval_query(self):
        samples = np.array([[0.5], [1.5], [2.5], [0.9], [1.1]])
        surf = PredictionSurface(sites=np.zeros((1, 2)), samples=samples, kind="ratio")
        out = exceedance(surf, ExceedanceQuery(interval=(0.8, 1.25)))
        # 0.5, 1.5, 2.5 fall outside (0.8, 1.25)
        assert out.samples[0, 0] == pytest.approx(3 / 5, abs=1e-15)

    def test_query_validation(self):
        with pytest.raises(ValueError):
            ExceedanceQuery()
        with pytest.raises(ValueError):
            ExceedanceQuery(threshold=0.3, interval=(0.8, 1.25))
        with pytest.raises(ValueError):
            ExceedanceQuery(threshold=1.5)
        with pytest.raises(ValueError):
            ExceedanceQuery(interval=(1.25, 0.8))
        assert ExceedanceQuery(threshold=0.2).direction == "above"
        assert ExceedanceQuery(interval=(0.8, 1.25)).direction == "outside-interval"


class TestSurface:
    def test_summary_quantiles(self):
        rng = np.random.default_rng(7)
        samples = rng.normal(size=(500, 3))
        surf = PredictionSurface(sites=rng.uniform(0, 1, (3, 2)), samples=samples)
        s = surf.summary()
        assert np.allclose(s["mean"], samples.mean(axis=0), atol=1e-15)
        assert np.allclose(
            s["q_0.5"], np.quantile(samples, 0.5, axis=0), atol=1e-15
        )

    def test_validation(self):
        with pytest.raises(ValueError):
            PredictionSurface(sites=np.zeros((2, 2)), samples=np.zeros((3, 5)))
        with pytest.raises(ValueError):
            PredictionSurface(
                sites=np.zeros((1, 2)),
                samples=np.array([[1.7]]),
                kind="prevalence",
            )


@pytest.fixture(scope="module")
def degenerate_intercept_fit():
    """Intercept-only model with the latent field switched off: every
    village estimate collapses to the same deterministic number."""
    rng = np.random.default_rng(77)
    n = 60
    xy = rng.uniform(0, 10, size=(n, 2))
    m = np.full(n, 25)
    y = rng.binomial(m, 0.3)
    data = SurveyDataset(
        unit_id=[f"u{i}" for i in range(n)], xy=xy, m=m, y=y,
        t=np.tile(np.arange(6.0), 10),
    )
    spec = ModelSpec(p_terms=("intercept",), effects=Effects(spatial=True))
    controls = fast_controls(fixed={"sigma2": 0.0, "phi": 1.0})
    res = fit(spec, data, controls=controls, rng=9)
    return spec, data, res


class TestVillagePrevalence:
    def test_degenerate_model_gives_constant(self, degenerate_intercept_fit):
        spec, data, res = degenerate_intercept_fit
        region = convex_hull([(1.0, 1.0), (4.0, 1.0), (4.0, 4.0), (1.0, 4.0)])
        out = village_prevalence(res, spec, data, region, rng=0, n_sims=50)
        flat = expit(res.estimates[0])
        assert out.estimate == pytest.approx(flat, abs=1e-12)
        assert out.lo == pytest.approx(flat, abs=1e-12)
        assert out.hi == pytest.approx(flat, abs=1e-12)
        assert out.n_grid > 1

    def test_latent_model_interval_brackets_estimate(self, nugget_free_fit):
        spec, data, res = nugget_free_fit
        region = convex_hull([(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)])
        out = village_prevalence(
            res, spec, data, region,
            covariate_policy={"elev": 0.0}, rng=1, n_sims=80,
        )
        assert 0.0 < out.lo <= out.estimate <= out.hi < 1.0
        assert out.samples.shape[0] == 80


class TestTemporalTrend:
    def test_degenerate_trend_is_flat(self, degenerate_intercept_fit):
        spec, data, res = degenerate_intercept_fit
        regions = {
            "a": convex_hull([(0.0, 0.0), (3.0, 0.0), (3.0, 3.0), (0.0, 3.0)]),
            "b": convex_hull([(5.0, 5.0), (9.0, 5.0), (9.0, 9.0), (5.0, 9.0)]),
        }
        rows = temporal_trend(
            res, spec, data, regions, months=[0.0, 6.0, 12.0], rng=2, n_sims=40
        )
        assert len(rows) == 6
        flat = expit(res.estimates[0])
        for row in rows:
            assert row["estimate"] == pytest.approx(flat, abs=1e-12)
        assert {r["region"] for r in rows} == {"a", "b"}
        assert sorted({r["t"] for r in rows}) == [0.0, 6.0, 12.0]
