"""Plug-in predictive inference at arbitrary sites.

Given a fitted model, the retained MCMC draws of the per-record latent
vector W are combined with the exact conditional Gaussian law of the
target component given W under theta_hat. For each retained draw w_s the
target C (spatial field S, bias field B, suitability field T, temporal
process U, or the space-time sum S+U) satisfies

    C | w_s ~ N(K w_s, Sigma_CC - K Sigma_WC),   K = Sigma_CW Sigma_WW^-1,

so one factorization of the conditional covariance serves every draw.
Prevalence maps apply the fixed-effect offsets and expit per sample;
summaries (mean, sd, quantiles) are computed across samples afterwards,
never by transforming a summary. Parameter uncertainty is deliberately
ignored here; the scenario engine is the one place that propagates it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .errors import EmptyGrid, NoBiasComponent, SingularConditioning
from .geometry import Region, as_xy, make_grid
from .inference import FitContext, FitResult
from .model import (
    ModelSpec,
    ParameterVector,
    SurveyDataset,
    alpha_matrix,
    site_design,
    uses_suitability,
)

DEFAULT_QUANTILES = (0.025, 0.5, 0.975)

_EIG_CLIP = 1e-12


@dataclass
class PredictionSurface:
    """Joint predictive samples of one quantity over a set of sites."""

    sites: np.ndarray
    samples: np.ndarray
    kind: str = "latent"
    times: np.ndarray | None = None
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES

    def __post_init__(self):
        self.sites = as_xy(self.sites)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.sites.shape[0]:
            raise ValueError("samples must be (n_sims, n_sites)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("predictive samples must be finite")
        if self.kind in ("prevalence", "exceedance"):
            if np.any(self.samples < 0.0) or np.any(self.samples > 1.0):
                raise ValueError(f"{self.kind} samples must lie in [0, 1]")

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def n_sims(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        if self.n_sims < 2:
            return np.zeros(self.n_sites)
        return self.samples.std(axis=0, ddof=1)

    def summary(self) -> dict:
        out = {"mean": self.mean, "sd": self.sd}
        for q in self.quantiles:
            out[f"q_{q:g}"] = np.quantile(self.samples, q, axis=0)
        return out


@dataclass(frozen=True)
class ExceedanceQuery:
    """Either a single threshold (prevalence above c) or an interval
    (value outside (a, b), used for the multiplicative bias ratio)."""

    threshold: float | None = None
    interval: tuple[float, float] | None = None

    def __post_init__(self):
        if (self.threshold is None) == (self.interval is None):
            raise ValueError("give exactly one of threshold or interval")
        if self.threshold is not None and not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.interval is not None:
            a, b = self.interval
            if not 0.0 < a < b:
                raise ValueError("interval needs 0 < a < b")

    @property
    def direction(self) -> str:
        return "above" if self.threshold is not None else "outside-interval"


# ---------------------------------------------------------------------------
# component covariances


def _predict_context(fit: FitResult, spec: ModelSpec, data: SurveyDataset):
    fixed = fit.controls.fixed if fit.controls is not None else {}
    ctx = FitContext(spec, data, standardize=False, fixed=fixed)
    theta = ctx.complete(fit.theta_hat)
    return ctx, theta


def _component_cov(
    ctx: FitContext,
    theta: ParameterVector,
    sites: np.ndarray,
    times: np.ndarray | None,
    component: str,
    survey=None,
):
    """(Sigma_CC, Sigma_CW) for the target component against the full
    latent vector."""
    from .model import covariance_params
    from .geometry import pairwise_distances

    spec = ctx.spec
    data = ctx.data
    params = covariance_params(spec, theta)
    lay = ctx.design.layout
    n = data.n
    k = sites.shape[0]
    u_ss = pairwise_distances(sites)
    u_sd = pairwise_distances(sites, data.xy)

    cc = np.zeros((k, k))
    cw1 = np.zeros((k, n))
    cw2 = np.zeros((k, n))

    if component in ("S", "S+U"):
        if not spec.effects.spatial:
            raise ValueError("model has no spatial field to predict")
        rho_ss = np.exp(-u_ss / params.phi)
        rho_sd = np.exp(-u_sd / params.phi)
        if ctx.layout.alpha_pairs:
            labels = data.surveys()
            alpha = alpha_matrix(theta, ctx.layout, labels.size)
            target = labels.size - 1 if survey is None else _survey_pos(labels, survey)
            idx = data.survey_index()
            cc += params.sigma2 * rho_ss
            cw1 += params.sigma2 * alpha[target, idx][None, :] * rho_sd
        else:
            cc += params.sigma2 * rho_ss
            cw1 += params.sigma2 * rho_sd
    if component in ("U", "S+U"):
        if not spec.effects.temporal:
            raise ValueError("model has no temporal process to predict")
        if times is None or data.t is None:
            raise ValueError("temporal prediction needs site times")
        dt_ss = np.abs(times[:, None] - times[None, :])
        dt_sd = np.abs(times[:, None] - data.t[None, :])
        var_u = params.sigma2 * params.omega2
        cc += var_u * np.exp(-dt_ss / params.psi)
        cw1 += var_u * np.exp(-dt_sd / params.psi)
    if component == "B":
        if not spec.effects.bias:
            raise NoBiasComponent("model has no bias field")
        labels = data.surveys()
        nonrand_labels = [
            lab
            for lab in labels.tolist()
            if not np.any(data.randomised[data.survey_id == lab])
        ]
        if survey is None:
            survey = nonrand_labels[0]
        var_b = params.sigma2 * params.omega2
        cc += var_b * np.exp(-u_ss / params.psi)
        rows = (data.survey_id == survey) & (~data.randomised)
        cw1[:, rows] = var_b * np.exp(-u_sd[:, rows] / params.psi)
    if component == "T":
        if not spec.effects.suitability:
            raise ValueError("model has no suitability field")
        var_t = params.sigma2 * params.omega2
        cc += var_t * np.exp(-u_ss / params.psi)
        cw2 += var_t * np.exp(-u_sd / params.psi)

    blocks = []
    if lay.has_eta1:
        blocks.append(cw1)
    if lay.has_suitability:
        blocks.append(cw2)
    cw = np.concatenate(blocks, axis=1) if blocks else np.zeros((k, 0))
    return cc, cw


def _survey_pos(labels: np.ndarray, survey) -> int:
    matches = np.where(labels == survey)[0]
    if matches.size == 0:
        raise ValueError(f"survey {survey!r} not present in the data")
    return int(matches[0])


def default_component(spec: ModelSpec) -> str:
    return "S+U" if spec.effects.temporal else "S"


# ---------------------------------------------------------------------------
# conditional simulation


def conditional_simulate(
    fit: FitResult,
    spec: ModelSpec,
    data: SurveyDataset,
    sites,
    n_sims: int | None = None,
    rng: np.random.Generator | int | None = None,
    times=None,
    component: str | None = None,
    survey=None,
) -> PredictionSurface:
    """Joint draws of a latent component at target sites.

    Each retained draw of the per-record latent vector W is extended to
    the sites with the exact conditional Gaussian under theta_hat. The
    nugget never enters site values: targets are smooth surfaces.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sites = as_xy(sites)
    if times is not None:
        times = np.asarray(times, dtype=np.float64)
        if times.shape != (sites.shape[0],):
            raise ValueError("times must give one value per site")
    component = component or default_component(spec)
    ctx, theta = _predict_context(fit, spec, data)
    draws = fit.samples.draws
    n_draws = draws.shape[0]
    if n_sims is None:
        n_sims = n_draws
    if ctx.degenerate:
        # every latent variance is pinned to zero, so the component is
        # identically zero everywhere
        samples = np.zeros((n_sims, sites.shape[0]))
        return PredictionSurface(
            sites=sites, samples=samples, kind="latent", times=times
        )
    cc, cw = _component_cov(ctx, theta, sites, times, component, survey=survey)

    if ctx.latent_dim == 0 or cw.shape[1] == 0:
        means_all = np.zeros((sites.shape[0], n_draws))
        cond = cc
    else:
        sigma_w = ctx.latent_cov(theta)
        try:
            factor = cho_factor(sigma_w, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularConditioning(
                "latent covariance at theta_hat is not positive definite"
            ) from exc
        gain = cho_solve(factor, cw.T).T
        means_all = gain @ draws.T
        cond = cc - gain @ cw.T
    cond = 0.5 * (cond + cond.T)
    vals, vecs = np.linalg.eigh(cond)
    top = max(float(vals.max(initial=0.0)), 1.0)
    vals = np.where(vals > _EIG_CLIP * top, vals, 0.0)
    root = vecs * np.sqrt(vals)

    idx = np.arange(n_sims) % n_draws
    noise = rng.standard_normal((n_sims, sites.shape[0]))
    samples = means_all[:, idx].T + noise @ root.T
    return PredictionSurface(sites=sites, samples=samples, kind="latent", times=times)


def prevalence_map(
    surface: PredictionSurface,
    fit: FitResult,
    spec: ModelSpec,
    covariate_raster: dict,
    times=None,
    suitability_surface: PredictionSurface | None = None,
) -> PredictionSurface:
    """Per-sample prevalence expit(d'beta + S), times the suitability
    probability for the mixture families."""
    theta = fit.theta_hat
    times = surface.times if times is None else np.asarray(times, dtype=np.float64)
    x = site_design(
        spec.p_terms, spec.seasonal_periods, covariate_raster, times,
        n_sites=surface.n_sites,
    )
    offset = x @ theta.beta
    p = expit(offset[None, :] + surface.samples)
    if uses_suitability(spec.family):
        if suitability_surface is None:
            raise ValueError("mixture families need a suitability surface")
        g = site_design(spec.pi_terms, (), covariate_raster, times,
                        n_sites=surface.n_sites)
        offset2 = g @ theta.gamma
        pi = expit(offset2[None, :] + suitability_surface.samples)
        p = pi * p
    return PredictionSurface(
        sites=surface.sites, samples=p, kind="prevalence", times=times
    )


def exceedance(surface: PredictionSurface, query: ExceedanceQuery) -> PredictionSurface:
    """Per-site predictive probability of exceeding the threshold, or of
    falling outside the interval (strict comparisons)."""
    if query.threshold is not None:
        probs = np.mean(surface.samples > query.threshold, axis=0)
    else:
        a, b = query.interval
        inside = (surface.samples > a) & (surface.samples < b)
        probs = 1.0 - np.mean(inside, axis=0)
    return PredictionSurface(
        sites=surface.sites,
        samples=probs[None, :],
        kind="exceedance",
        times=surface.times,
    )


def bias_surface(
    fit: FitResult,
    spec: ModelSpec,
    data: SurveyDataset,
    sites,
    n_sims: int | None = None,
    rng: np.random.Generator | int | None = None,
    survey=None,
) -> PredictionSurface:
    """Multiplicative bias ratio exp{B(x)} of a non-randomised survey,
    exponentiated per sample."""
    if not spec.effects.bias:
        raise NoBiasComponent("model has no bias field")
    latent = conditional_simulate(
        fit, spec, data, sites, n_sims=n_sims, rng=rng, component="B", survey=survey
    )
    return PredictionSurface(
        sites=latent.sites, samples=np.exp(latent.samples), kind="bias"
    )


# ---------------------------------------------------------------------------
# village-level prevalence


@dataclass(frozen=True)
class VillageEstimate:
    estimate: float
    lo: float
    hi: float
    n_grid: int
    samples: np.ndarray = field(repr=False, default=None)


def village_prevalence(
    fit: FitResult,
    spec: ModelSpec,
    data: SurveyDataset,
    region: Region,
    t: float | None = None,
    covariate_policy: dict | None = None,
    grid_spacing: float = 0.5,
    n_sims: int | None = None,
    rng: np.random.Generator | int | None = None,
) -> VillageEstimate:
    """Area-average prevalence over a region by cell-center quadrature.

    The average is taken per predictive sample over the quadrature
    points inside the region (equal weights, normalized by their sum, so
    a constant surface is reproduced exactly), then summarized.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    grid = make_grid(region, grid_spacing)
    if grid.n_points == 0:
        raise EmptyGrid("no quadrature points inside the region")
    covariate_policy = covariate_policy or {}
    points = grid.points
    k = points.shape[0]
    times = None
    if t is not None:
        times = np.full(k, float(t))
    raster = {}
    for name, value in covariate_policy.items():
        arr = np.asarray(value, dtype=np.float64)
        raster[name] = np.full(k, float(arr)) if arr.ndim == 0 else arr
    if times is not None:
        raster.setdefault("t", times)

    surface = conditional_simulate(
        fit, spec, data, points, n_sims=n_sims, rng=rng, times=times
    )
    suit = None
    if uses_suitability(spec.family):
        suit = conditional_simulate(
            fit, spec, data, points, n_sims=n_sims, rng=rng, component="T"
        )
    prev = prevalence_map(surface, fit, spec, raster, times=times,
                          suitability_surface=suit)
    village_samples = prev.samples.mean(axis=1)
    lo, hi = np.quantile(village_samples, [0.025, 0.975])
    return VillageEstimate(
        estimate=float(village_samples.mean()),
        lo=float(lo),
        hi=float(hi),
        n_grid=k,
        samples=village_samples,
    )


def temporal_trend(
    fit: FitResult,
    spec: ModelSpec,
    data: SurveyDataset,
    regions: dict,
    months,
    covariate_policy: dict | None = None,
    grid_spacing: float = 0.5,
    n_sims: int | None = None,
    rng: np.random.Generator | int | None = None,
) -> list[dict]:
    """Village prevalence per region per month, as plot-ready rows."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    rows = []
    for name, region in regions.items():
        for t in months:
            est = village_prevalence(
                fit,
                spec,
                data,
                region,
                t=float(t),
                covariate_policy=covariate_policy,
                grid_spacing=grid_spacing,
                n_sims=n_sims,
                rng=rng,
            )
            rows.append(
                {
                    "region": name,
                    "t": float(t),
                    "estimate": est.estimate,
                    "lo": est.lo,
                    "hi": est.hi,
                }
            )
    return rows
