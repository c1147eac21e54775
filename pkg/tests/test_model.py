"""Model specification, data validation, parameter packing, designs, and
the latent prior covariance."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from geoprev import Effects, ModelSpec, ParameterVector, SurveyDataset, param_layout
from geoprev.errors import MissingCovariate, NoBiasComponent
from geoprev.families import loglik
from geoprev.model import (
    alpha_matrix,
    build_design,
    covariance_params,
    latent_covariance,
    latent_layout,
    linear_offsets,
    log_cond_density,
    logit,
    modelled_prevalence,
    predictors,
    site_design,
)


def small_data(n=8, seed=0, **kw):
    rng = np.random.default_rng(seed)
    base = dict(
        unit_id=[f"u{i}" for i in range(n)],
        xy=rng.uniform(0, 10, size=(n, 2)),
        m=np.full(n, 20),
        y=rng.integers(0, 21, size=n),
        covariates={"elev": rng.normal(size=n)},
    )
    base.update(kw)
    return SurveyDataset(**base)


class TestSurveyDataset:
    def test_y_bounds_enforced_for_counts(self):
        with pytest.raises(ValueError):
            small_data(y=np.array([5, 5, 5, 5, 5, 5, 5, 25]))
        with pytest.raises(ValueError):
            small_data(y=np.array([5, 5, 5, 5, 5, 5, 5, -1]))

    def test_continuous_outcome_skips_bounds(self):
        d = small_data(y=np.array([-2.0, 3.5, 0.1, 40.0, 5, 5, 5, 5]), count_data=False)
        assert d.y[3] == 40.0

    def test_negative_m_rejected(self):
        with pytest.raises(ValueError):
            small_data(m=np.array([20, 20, 20, 20, 20, 20, 20, -1]),
                       y=np.zeros(8))

    def test_length_mismatches_rejected(self):
        with pytest.raises(ValueError):
            small_data(m=np.full(7, 20))
        with pytest.raises(ValueError):
            small_data(t=np.zeros(5))
        with pytest.raises(ValueError):
            small_data(covariates={"elev": np.zeros(3)})
        with pytest.raises(ValueError):
            small_data(village_id=["a"] * 4)

    def test_nonrandomised_needs_a_randomised_survey(self):
        with pytest.raises(ValueError):
            small_data(randomised=np.zeros(8, dtype=bool))
        # mixed is fine
        r = np.array([True] * 4 + [False] * 4)
        d = small_data(randomised=r, survey_id=["a"] * 4 + ["b"] * 4)
        assert d.randomised.sum() == 4

    def test_default_survey_and_randomised(self):
        d = small_data()
        assert np.all(d.randomised)
        assert np.unique(d.survey_id).size == 1

    def test_surveys_first_appearance_order(self):
        d = small_data(survey_id=["b", "b", "a", "a", "c", "c", "a", "b"])
        assert d.surveys().tolist() == ["b", "a", "c"]
        idx = d.survey_index()
        assert idx.tolist() == [0, 0, 1, 1, 2, 2, 1, 0]

    def test_subset_preserves_structure(self):
        d = small_data(
            t=np.arange(8.0),
            village_id=[f"v{i % 3}" for i in range(8)],
        )
        mask = d.y > np.median(d.y)
        sub = d.subset(mask)
        assert sub.n == int(mask.sum())
        assert np.array_equal(sub.t, d.t[mask])
        assert np.array_equal(sub.covariates["elev"], d.covariates["elev"][mask])
        assert sub.count_data is d.count_data


class TestEffects:
    def test_at_most_one_extra_process(self):
        with pytest.raises(ValueError):
            Effects(spatial=True, temporal=True, bias=True)
        with pytest.raises(ValueError):
            Effects(spatial=True, temporal=True, suitability=True)

    def test_needs_some_latent_effect(self):
        with pytest.raises(ValueError):
            Effects(spatial=False, nugget=False)

    def test_second_process_name(self):
        assert Effects(spatial=True).second_process is None
        assert Effects(spatial=True, temporal=True).second_process == "temporal"
        assert Effects(spatial=True, bias=True).second_process == "bias"
        assert Effects(spatial=True, suitability=True).second_process == "suitability"


class TestModelSpec:
    def test_unknown_family(self):
        with pytest.raises(ValueError):
            ModelSpec(family="poisson")

    def test_suitability_tied_to_mixture_families(self):
        with pytest.raises(ValueError):
            ModelSpec(family="binomial", effects=Effects(spatial=True, suitability=True))
        with pytest.raises(ValueError):
            ModelSpec(family="zero_inflated", pi_terms=("intercept",))
        spec = ModelSpec(
            family="zero_inflated",
            pi_terms=("intercept",),
            effects=Effects(spatial=True, suitability=True),
        )
        assert spec.effects.suitability

    def test_mixture_needs_pi_terms(self):
        with pytest.raises(ValueError):
            ModelSpec(
                family="hurdle",
                pi_terms=(),
                effects=Effects(spatial=True, suitability=True),
            )

    def test_bias_terms_default_and_guard(self):
        spec = ModelSpec(effects=Effects(spatial=True, bias=True))
        assert spec.bias_terms == ("intercept",)
        with pytest.raises(ValueError):
            ModelSpec(bias_terms=("intercept",), effects=Effects(spatial=True))

    def test_seasonal_and_sd_validation(self):
        with pytest.raises(ValueError):
            ModelSpec(seasonal_periods=(12.0, -1.0))
        with pytest.raises(ValueError):
            ModelSpec(gaussian_sd=0.0)

    def test_needs_time(self):
        assert not ModelSpec().needs_time()
        assert ModelSpec(seasonal_periods=(12.0,)).needs_time()
        assert ModelSpec(effects=Effects(spatial=True, temporal=True)).needs_time()
        assert ModelSpec(p_terms=("intercept", "t")).needs_time()

    def test_validate_against(self):
        d = small_data()
        with pytest.raises(MissingCovariate):
            ModelSpec(seasonal_periods=(12.0,)).validate_against(d)
        with pytest.raises(MissingCovariate):
            ModelSpec(p_terms=("intercept", "rainfall")).validate_against(d)
        with pytest.raises(NoBiasComponent):
            ModelSpec(effects=Effects(spatial=True, bias=True)).validate_against(d)
        ModelSpec(p_terms=("intercept", "elev")).validate_against(d)  # no raise


class TestParamLayout:
    def test_cov_names_track_effects(self):
        def names(eff):
            return param_layout(ModelSpec(effects=eff)).cov_names

        assert names(Effects(spatial=True)) == ("log_sigma2", "log_phi")
        assert names(Effects(spatial=True, nugget=True)) == (
            "log_sigma2", "log_phi", "log_nu2",
        )
        assert names(Effects(spatial=False, nugget=True)) == ("log_nu2",)
        assert names(Effects(spatial=True, temporal=True)) == (
            "log_sigma2", "log_phi", "log_omega2", "log_psi",
        )

    def test_names_order(self):
        spec = ModelSpec(
            p_terms=("intercept", "elev"),
            effects=Effects(spatial=True, nugget=True),
            seasonal_periods=(12.0,),
        )
        layout = param_layout(spec)
        assert layout.names == (
            "beta[intercept]", "beta[elev]", "beta[sin_12]", "beta[cos_12]",
            "log_sigma2", "log_phi", "log_nu2",
        )
        assert layout.size == 7

    def test_alpha_pairs_skip_contemporaneous_surveys(self):
        d = small_data(survey_id=["a", "a", "b", "b", "c", "c", "a", "b"])
        spec = ModelSpec(survey_times={"a": 0.0, "b": 0.0, "c": 24.0})
        layout = param_layout(spec, d)
        # a and b share a time, so only (a,c) and (b,c) get a correlation
        assert layout.alpha_pairs == ((0, 2), (1, 2))
        assert layout.names[-2:] == ("alpha_z[0,2]", "alpha_z[1,2]")

    def test_survey_times_must_cover_surveys(self):
        d = small_data(survey_id=["a"] * 4 + ["b"] * 4)
        with pytest.raises(ValueError):
            param_layout(ModelSpec(survey_times={"a": 0.0}), d)

    @given(st.data())
    def test_pack_unpack_roundtrip(self, data):
        eff = data.draw(
            st.sampled_from(
                [
                    Effects(spatial=True),
                    Effects(spatial=True, nugget=True),
                    Effects(spatial=True, temporal=True),
                    Effects(spatial=False, nugget=True),
                ]
            )
        )
        k = data.draw(st.integers(1, 3))
        terms = ("intercept",) + tuple(f"x{i}" for i in range(k - 1))
        spec = ModelSpec(p_terms=terms, effects=eff)
        layout = param_layout(spec)
        vec = np.array(
            data.draw(
                st.lists(
                    st.floats(-5, 5, allow_nan=False),
                    min_size=layout.size,
                    max_size=layout.size,
                )
            )
        )
        theta = layout.unpack(vec)
        assert np.array_equal(layout.pack(theta), vec)
        assert theta.beta.shape == (k,)

    def test_pack_errors(self):
        layout = param_layout(ModelSpec())
        with pytest.raises(ValueError):
            layout.pack(ParameterVector(beta=[0.0, 1.0], log_sigma2=0.0, log_phi=0.0))
        with pytest.raises(ValueError):
            layout.pack(ParameterVector(beta=[0.0]))  # cov params unset
        with pytest.raises(ValueError):
            layout.unpack(np.zeros(99))

    def test_natural_scale_properties(self):
        theta = ParameterVector(
            beta=[0.0], log_sigma2=np.log(2.0), log_phi=np.log(0.5), log_nu2=np.log(0.3)
        )
        assert theta.sigma2 == pytest.approx(2.0)
        assert theta.phi == pytest.approx(0.5)
        assert theta.nu2 == pytest.approx(0.3)
        assert theta.omega2 is None and theta.psi is None


class TestAlphaAndCovarianceParams:
    def test_alpha_matrix_tanh(self):
        spec = ModelSpec(survey_times={"a": 0.0, "b": 12.0})
        d = small_data(survey_id=["a"] * 4 + ["b"] * 4)
        layout = param_layout(spec, d)
        theta = layout.unpack(np.array([0.0, 0.0, 0.0, 0.8]))
        a = alpha_matrix(theta, layout, 2)
        assert a[0, 0] == a[1, 1] == 1.0
        assert a[0, 1] == a[1, 0] == pytest.approx(np.tanh(0.8))
        assert abs(a[0, 1]) < 1.0

    def test_covariance_params_spatial_off_uses_absolute_ratios(self):
        spec = ModelSpec(effects=Effects(spatial=False, nugget=True))
        theta = ParameterVector(beta=[0.0], log_nu2=np.log(0.7))
        cp = covariance_params(spec, theta)
        assert cp.sigma2 == 1.0 and cp.phi == 1.0
        assert cp.nu2 == pytest.approx(0.7)
        assert cp.omega2 == 0.0

    def test_logit_rejects_boundary(self):
        with pytest.raises(ValueError):
            logit(0.0)
        assert logit(0.5) == pytest.approx(0.0)


class TestDesign:
    def test_standardization_leaves_predictor_invariant(self):
        d = small_data(n=30, seed=5)
        spec = ModelSpec(p_terms=("intercept", "elev"))
        raw = build_design(spec, d, standardize=False)
        std = build_design(spec, d, standardize=True)
        rng = np.random.default_rng(1)
        coef_internal = rng.normal(size=2)
        # natural-scale coefficients implied by the internal ones
        coef_natural = std.p.natural_from_internal(coef_internal)
        eta_std = std.p.matrix @ coef_internal
        eta_raw = raw.p.matrix @ coef_natural
        assert np.allclose(eta_std, eta_raw, atol=1e-12)

    def test_binary_covariates_not_standardized(self):
        d = small_data(n=20, seed=2)
        d.covariates["itn"] = (np.arange(20) % 2).astype(float)
        spec = ModelSpec(p_terms=("intercept", "itn"))
        std = build_design(spec, d, standardize=True)
        j = std.p.names.index("itn")
        assert std.p.scale[j] == 1.0 and std.p.center[j] == 0.0
        assert set(np.unique(std.p.matrix[:, j])) == {0.0, 1.0}

    def test_bias_block_zeroed_on_randomised_rows(self):
        r = np.array([True] * 4 + [False] * 4)
        d = small_data(randomised=r, survey_id=["a"] * 4 + ["b"] * 4)
        spec = ModelSpec(effects=Effects(spatial=True, bias=True))
        design = build_design(spec, d)
        assert np.all(design.bias.matrix[r, :] == 0.0)
        assert np.all(design.bias.matrix[~r, 0] == 1.0)

    def test_transform_packed_block_structure(self):
        d = small_data(n=25, seed=3)
        spec = ModelSpec(p_terms=("intercept", "elev"))
        layout = param_layout(spec)
        std = build_design(spec, d, standardize=True)
        a = std.transform_packed(layout)
        assert a.shape == (4, 4)
        # covariance entries pass through untouched
        assert np.array_equal(a[2:, 2:], np.eye(2))
        assert np.all(a[2:, :2] == 0.0) and np.all(a[:2, 2:] == 0.0)

    def test_seasonal_columns(self):
        d = small_data(t=np.arange(8.0))
        spec = ModelSpec(seasonal_periods=(12.0,))
        design = build_design(spec, d)
        assert design.p.names == ("intercept", "sin_12", "cos_12")
        w = 2.0 * np.pi * d.t / 12.0
        assert np.allclose(design.p.matrix[:, 1], np.sin(w))
        assert np.allclose(design.p.matrix[:, 2], np.cos(w))


class TestPredictorsAndDensity:
    def test_linear_offsets_and_predictors(self):
        d = small_data(n=10, seed=7)
        spec = ModelSpec(
            p_terms=("intercept", "elev"), effects=Effects(spatial=True, nugget=True)
        )
        theta = ParameterVector(
            beta=[-0.5, 0.3], log_sigma2=0.0, log_phi=0.0, log_nu2=0.0
        )
        design = build_design(spec, d)
        off1, off2 = linear_offsets(design, theta)
        expected = -0.5 + 0.3 * d.covariates["elev"]
        assert np.allclose(off1, expected, atol=1e-12)
        assert off2 is None
        w = np.linspace(-1, 1, 10)
        eta1, eta2 = predictors(design, theta, w)
        assert np.allclose(eta1, expected + w, atol=1e-12)
        assert eta2 is None

    def test_log_cond_density_matches_family(self):
        d = small_data(n=10, seed=7)
        spec = ModelSpec(p_terms=("intercept", "elev"))
        theta = ParameterVector(beta=[-0.5, 0.3], log_sigma2=0.0, log_phi=0.0)
        w = np.linspace(-1, 1, 10)
        ll = log_cond_density(spec, theta, d, w)
        eta = -0.5 + 0.3 * d.covariates["elev"] + w
        assert np.allclose(ll, loglik("binomial", d.y, d.m, eta), atol=1e-12)

    def test_modelled_prevalence_plain_and_mixture(self):
        theta = ParameterVector(beta=[-1.0, 0.5], log_sigma2=0.0, log_phi=0.0)
        s = np.array([0.0, 0.4, -0.4])
        p = modelled_prevalence(
            ModelSpec(p_terms=("intercept", "elev")), theta, {"elev": 2.0}, s
        )
        assert np.allclose(p, expit(-1.0 + 0.5 * 2.0 + s), atol=1e-12)

        spec = ModelSpec(
            family="zero_inflated",
            p_terms=("intercept",),
            pi_terms=("intercept",),
            effects=Effects(spatial=True, suitability=True),
        )
        theta2 = ParameterVector(
            beta=[-1.0], gamma=[0.5],
            log_sigma2=0.0, log_phi=0.0, log_omega2=0.0, log_psi=0.0,
        )
        t = np.array([0.1, -0.2, 0.0])
        out = modelled_prevalence(spec, theta2, {}, s, t_sample=t)
        assert np.allclose(out, expit(0.5 + t) * expit(-1.0 + s), atol=1e-12)
        with pytest.raises(ValueError):
            modelled_prevalence(spec, theta2, {}, s)

    def test_site_design(self):
        cov = {"elev": np.array([1.0, 2.0])}
        x = site_design(("intercept", "elev"), (), cov)
        assert np.array_equal(x, np.array([[1.0, 1.0], [1.0, 2.0]]))
        x2 = site_design(("intercept",), (12.0,), {}, times=np.array([0.0, 3.0]))
        assert x2.shape == (2, 3)
        assert x2[1, 1] == pytest.approx(np.sin(2 * np.pi * 3.0 / 12.0))
        with pytest.raises(MissingCovariate):
            site_design(("intercept", "rain"), (), cov)
        with pytest.raises(MissingCovariate):
            site_design(("intercept",), (12.0,), cov)


class TestLatentCovariance:
    def test_spatial_plus_nugget_elementwise(self):
        d = small_data(n=6, seed=9)
        spec = ModelSpec(effects=Effects(spatial=True, nugget=True))
        theta = ParameterVector(
            beta=[0.0],
            log_sigma2=np.log(1.5), log_phi=np.log(2.0), log_nu2=np.log(0.4),
        )
        c = latent_covariance(spec, theta, d)
        u = np.sqrt(((d.xy[:, None, :] - d.xy[None, :, :]) ** 2).sum(-1))
        expect = 1.5 * np.exp(-u / 2.0) + np.eye(6) * (1.5 * 0.4)
        assert np.allclose(c, expect, atol=1e-12)

    def test_temporal_elementwise(self):
        d = small_data(n=6, seed=9, t=np.array([0.0, 0, 6, 6, 12, 12]))
        spec = ModelSpec(effects=Effects(spatial=True, temporal=True))
        theta = ParameterVector(
            beta=[0.0],
            log_sigma2=np.log(1.5), log_phi=np.log(2.0),
            log_omega2=np.log(0.5), log_psi=np.log(8.0),
        )
        c = latent_covariance(spec, theta, d)
        u = np.sqrt(((d.xy[:, None, :] - d.xy[None, :, :]) ** 2).sum(-1))
        dt = np.abs(d.t[:, None] - d.t[None, :])
        expect = 1.5 * np.exp(-u / 2.0) + 1.5 * 0.5 * np.exp(-dt / 8.0)
        assert np.allclose(c, expect, atol=1e-12)

    def test_bias_block_only_for_same_nonrandomised_survey(self):
        r = np.array([True, True, True, False, False, False])
        sid = ["g", "g", "g", "b1", "b1", "b2"]
        d = small_data(n=6, seed=9, randomised=r, survey_id=sid)
        spec = ModelSpec(effects=Effects(spatial=True, bias=True))
        theta = ParameterVector(
            beta=[0.0],
            log_sigma2=np.log(1.0), log_phi=np.log(2.0),
            log_omega2=np.log(0.6), log_psi=np.log(1.5),
        )
        c = latent_covariance(spec, theta, d)
        u = np.sqrt(((d.xy[:, None, :] - d.xy[None, :, :]) ** 2).sum(-1))
        base = np.exp(-u / 2.0)
        # randomised rows and cross-survey pairs carry only the shared field
        assert c[0, 3] == pytest.approx(base[0, 3], abs=1e-12)
        assert c[3, 5] == pytest.approx(base[3, 5], abs=1e-12)
        # same non-randomised survey gains the bias field
        assert c[3, 4] == pytest.approx(
            base[3, 4] + 0.6 * np.exp(-u[3, 4] / 1.5), abs=1e-12
        )
        assert c[5, 5] == pytest.approx(1.0 + 0.6, abs=1e-12)

    def test_multisurvey_alpha_scaling(self):
        sid = ["a"] * 3 + ["b"] * 3
        d = small_data(n=6, seed=9, survey_id=sid)
        spec = ModelSpec(survey_times={"a": 0.0, "b": 24.0})
        layout = param_layout(spec, d)
        z = np.arctanh(0.6)
        theta = layout.unpack(np.array([0.0, np.log(1.2), np.log(3.0), z]))
        c = latent_covariance(spec, theta, d, layout_p=layout)
        u = np.sqrt(((d.xy[:, None, :] - d.xy[None, :, :]) ** 2).sum(-1))
        assert c[0, 1] == pytest.approx(1.2 * np.exp(-u[0, 1] / 3.0), abs=1e-12)
        assert c[0, 4] == pytest.approx(0.6 * 1.2 * np.exp(-u[0, 4] / 3.0), abs=1e-12)

    def test_suitability_block_diagonal(self):
        d = small_data(n=5, seed=11)
        spec = ModelSpec(
            family="zero_inflated",
            pi_terms=("intercept",),
            effects=Effects(spatial=True, suitability=True),
        )
        theta = ParameterVector(
            beta=[0.0], gamma=[0.0],
            log_sigma2=np.log(1.0), log_phi=np.log(2.0),
            log_omega2=np.log(0.8), log_psi=np.log(4.0),
        )
        c = latent_covariance(spec, theta, d)
        assert c.shape == (10, 10)
        assert np.all(c[:5, 5:] == 0.0) and np.all(c[5:, :5] == 0.0)
        u = np.sqrt(((d.xy[:, None, :] - d.xy[None, :, :]) ** 2).sum(-1))
        assert np.allclose(c[5:, 5:], 0.8 * np.exp(-u / 4.0), atol=1e-12)

    def test_layout_split(self):
        spec = ModelSpec(
            family="hurdle",
            pi_terms=("intercept",),
            effects=Effects(spatial=True, suitability=True),
        )
        lay = latent_layout(spec, 4)
        assert lay.dim == 8
        w1, w2 = lay.split(np.arange(8.0))
        assert np.array_equal(w1, np.arange(4.0))
        assert np.array_equal(w2, np.arange(4.0, 8.0))
        lay2 = latent_layout(ModelSpec(), 4)
        assert lay2.dim == 4
        a, b = lay2.split(np.arange(4.0))
        assert b is None and np.array_equal(a, np.arange(4.0))
