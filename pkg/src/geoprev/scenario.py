"""Counterfactual intervention-coverage scenarios at village level.

One outer replicate runs the chain: (i) allocate unsampled children to
unsampled households, (ii) impute household locations and covariates,
(iii) draw model parameters from the estimator's asymptotic normal law,
(iv) short conditional latent re-sample given the observed data under
the drawn parameters, giving each child an infection probability,
(v) sum probabilities to a village infected-count estimate. Replicates
are summarized per village; two scenarios run comparatively share every
random input except the covariates the coverage rule changes, so paired
differences isolate the covariate effect.

Estimates are associational model projections under altered covariate
values. They carry no causal claim about what a real intervention
scale-up would do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .errors import EmptyEmpiricalDistribution, InfeasibleFrame
from .geometry import Region, uniform_sample
from .inference import FitContext, FitResult, laplace_mode, mala_sample
from .model import (
    ModelSpec,
    ParameterVector,
    SurveyDataset,
    site_design,
    uses_suitability,
)

CAUSALITY_NOTE = (
    "Scenario outputs are associational model projections under altered "
    "covariate values, not causal estimates of an intervention's effect."
)

_EIG_CLIP = 1e-12


@dataclass
class VillageFrame:
    """Enumeration data for one village plus its sampled households."""

    village_id: str
    region: Region
    n_children: int
    n_households: int
    sampled: SurveyDataset

    def __post_init__(self):
        if self.n_households < 1:
            raise ValueError("a village frame needs at least one household")
        if self.n_children < int(np.sum(self.sampled.m)):
            raise ValueError("enumerated children fewer than sampled children")

    @property
    def n_sampled_children(self) -> int:
        return int(np.sum(self.sampled.m))

    @property
    def n_unsampled_households(self) -> int:
        return self.n_households - self.sampled.n


@dataclass(frozen=True)
class ScenarioSpec:
    """Coverage rule for the intervention covariates plus imputation
    sources for everything else.

    coverage_rule: "empirical" keeps the donor household's intervention
    values, "full" sets every intervention covariate to 1, a dict maps
    covariate name to a fixed value.
    """

    name: str
    coverage_rule: object = "empirical"
    month: float | None = None
    intervention_terms: tuple[str, ...] = ("itn", "irs")
    imputation_sources: dict = field(default_factory=dict)

    def __post_init__(self):
        rule = self.coverage_rule
        if isinstance(rule, str):
            if rule not in ("empirical", "full"):
                raise ValueError("coverage_rule must be empirical, full, or a mapping")
        elif isinstance(rule, dict):
            missing = [t for t in self.intervention_terms if t not in rule]
            if missing:
                raise ValueError(
                    f"custom coverage must assign every intervention term: {missing}"
                )
        else:
            raise ValueError("coverage_rule must be empirical, full, or a mapping")


@dataclass
class ScenarioResult:
    scenario: str
    village_ids: list[str]
    n_children: np.ndarray
    prevalence: np.ndarray  # (n_replicates, n_villages)
    counts: np.ndarray

    def summary(self) -> dict:
        return {
            "village_id": list(self.village_ids),
            "n_children": self.n_children,
            "prev_mean": self.prevalence.mean(axis=0),
            "prev_sd": self.prevalence.std(axis=0, ddof=1),
            "prev_lo": np.quantile(self.prevalence, 0.025, axis=0),
            "prev_hi": np.quantile(self.prevalence, 0.975, axis=0),
            "count_mean": self.counts.mean(axis=0),
            "count_sd": self.counts.std(axis=0, ddof=1),
            "count_lo": np.quantile(self.counts, 0.025, axis=0),
            "count_hi": np.quantile(self.counts, 0.975, axis=0),
        }


@dataclass
class ScenarioComparison:
    base: ScenarioResult
    alternative: ScenarioResult

    def paired_difference(self) -> dict:
        """alternative minus base, per village over shared replicates."""
        diff_prev = self.alternative.prevalence - self.base.prevalence
        diff_count = self.alternative.counts - self.base.counts
        n = diff_prev.shape[0]
        return {
            "village_id": list(self.base.village_ids),
            "dprev_mean": diff_prev.mean(axis=0),
            "dprev_se": diff_prev.std(axis=0, ddof=1) / np.sqrt(n),
            "dprev_lo": np.quantile(diff_prev, 0.025, axis=0),
            "dprev_hi": np.quantile(diff_prev, 0.975, axis=0),
            "dcount_mean": diff_count.mean(axis=0),
            "dcount_se": diff_count.std(axis=0, ddof=1) / np.sqrt(n),
        }


# ---------------------------------------------------------------------------
# steps (i) - (iii)


def allocate_children(frame: VillageFrame, rng: np.random.Generator) -> np.ndarray:
    """Children per household: one guaranteed each, remainder spread by
    an equal-probability multinomial."""
    n_hh = frame.n_households
    if frame.n_children < n_hh:
        raise InfeasibleFrame(
            f"village {frame.village_id}: {frame.n_children} children cannot "
            f"cover {n_hh} households at one child each"
        )
    counts = np.ones(n_hh, dtype=np.int64)
    extra = frame.n_children - n_hh
    if extra > 0:
        counts += rng.multinomial(extra, np.full(n_hh, 1.0 / n_hh))
    return counts


def impute_household(
    frame: VillageFrame,
    scenario: ScenarioSpec,
    rng: np.random.Generator,
    n_new: int | None = None,
) -> dict:
    """Synthetic unsampled households: uniform locations over the village
    region, covariates copied from a uniformly drawn sampled household,
    then overridden by the coverage rule."""
    if n_new is None:
        n_new = frame.n_unsampled_households
    if n_new < 0:
        raise ValueError("more sampled households than enumerated households")
    sampled = frame.sampled
    names = list(sampled.covariates)
    if n_new > 0:
        if sampled.n == 0:
            raise EmptyEmpiricalDistribution(
                f"village {frame.village_id} has no sampled households to draw from"
            )
        xy = uniform_sample(frame.region, n_new, rng)
        donors = rng.integers(0, sampled.n, size=n_new)
        covs = {}
        for name in names:
            source = scenario.imputation_sources.get(name, "empirical")
            if source == "empirical":
                covs[name] = sampled.covariates[name][donors]
            else:
                covs[name] = np.full(n_new, float(source))
    else:
        xy = np.zeros((0, 2))
        covs = {name: np.zeros(0) for name in names}
    _apply_coverage(covs, scenario, n_new)
    return {"xy": xy, "covariates": covs}


def _apply_coverage(covs: dict, scenario: ScenarioSpec, n: int) -> None:
    rule = scenario.coverage_rule
    if rule == "empirical":
        return
    for term in scenario.intervention_terms:
        value = 1.0 if rule == "full" else float(rule[term])
        covs[term] = np.full(n, value)


def scenario_covariates(
    sampled: SurveyDataset, scenario: ScenarioSpec
) -> dict[str, np.ndarray]:
    """Sampled-household covariates with the coverage rule applied (the
    rule reaches sampled households too: full coverage means everyone)."""
    covs = {k: v.copy() for k, v in sampled.covariates.items()}
    rule = scenario.coverage_rule
    if rule != "empirical":
        for term in scenario.intervention_terms:
            value = 1.0 if rule == "full" else float(rule[term])
            covs[term] = np.full(sampled.n, value)
    return covs


def draw_theta(fit: FitResult, rng: np.random.Generator) -> ParameterVector:
    """One draw from N(theta_hat, vcov) on the packed reported scale."""
    est = fit.estimates
    vcov = 0.5 * (fit.vcov + fit.vcov.T)
    if not np.any(vcov):
        return fit.layout.unpack(est)
    vals, vecs = np.linalg.eigh(vcov)
    vals = np.clip(vals, 0.0, None)
    draw = est + vecs @ (np.sqrt(vals) * rng.standard_normal(est.size))
    return fit.layout.unpack(draw)


# ---------------------------------------------------------------------------
# step (iv): per-child probabilities under one theta draw


@dataclass(frozen=True)
class ScenarioControls:
    n_outer: int = 200
    inner_burn: int = 150
    inner_samples: int = 10
    inner_thin: int = 5


class _ThetaReplicate:
    """Latent re-sample for one parameter draw, reused across villages
    and scenarios within a replicate."""

    def __init__(
        self,
        spec: ModelSpec,
        data: SurveyDataset,
        theta_draw: ParameterVector,
        rng: np.random.Generator,
        controls: ScenarioControls,
        fixed: dict | None = None,
    ):
        self.spec = spec
        self.theta_draw = theta_draw
        self.ctx = FitContext(spec, data, standardize=False, fixed=fixed)
        self.theta = self.ctx.complete(theta_draw)
        lap = laplace_mode(spec, self.theta, data, ctx=self.ctx)
        self.sample = mala_sample(
            spec,
            self.theta,
            lap,
            controls.inner_samples,
            controls.inner_burn,
            controls.inner_thin,
            rng,
            ctx=self.ctx,
        )
        if self.ctx.latent_dim > 0:
            sigma_w = self.ctx.latent_cov(self.theta)
            self.factor = cho_factor(sigma_w, lower=True)
        else:
            self.factor = None

    def _conditional(self, sites: np.ndarray, times, component: str):
        from .predict import _component_cov

        cc, cw = _component_cov(self.ctx, self.theta, sites, times, component)
        if self.factor is None or cw.shape[1] == 0:
            means = np.zeros((sites.shape[0], self.sample.draws.shape[0]))
            cond = cc
        else:
            gain = cho_solve(self.factor, cw.T).T
            means = gain @ self.sample.draws.T
            cond = cc - gain @ cw.T
        cond = 0.5 * (cond + cond.T)
        vals, vecs = np.linalg.eigh(cond)
        top = max(float(vals.max(initial=0.0)), 1.0)
        vals = np.where(vals > _EIG_CLIP * top, vals, 0.0)
        return means, vecs * np.sqrt(vals)

    def child_probs(
        self, sites: np.ndarray, covariates: dict, times, rng: np.random.Generator
    ) -> np.ndarray:
        """Rao-Blackwellized infection probability per site: the average
        of expit(eta) over conditional latent draws."""
        from .predict import default_component

        sites = np.asarray(sites, dtype=np.float64)
        k = sites.shape[0]
        if k == 0:
            return np.zeros(0)
        spec = self.spec
        means, root = self._conditional(sites, times, default_component(spec))
        x = site_design(spec.p_terms, spec.seasonal_periods, covariates, times)
        offset1 = x @ self.theta_draw.beta
        mixture = uses_suitability(spec.family)
        if mixture:
            means2, root2 = self._conditional(sites, times, "T")
            g = site_design(spec.pi_terms, (), covariates, times)
            offset2 = g @ self.theta_draw.gamma
        n_draws = self.sample.draws.shape[0]
        probs = np.zeros(k)
        for s in range(n_draws):
            latent = means[:, s] + root @ rng.standard_normal(k)
            p = expit(offset1 + latent)
            if mixture:
                latent2 = means2[:, s] + root2 @ rng.standard_normal(k)
                p = p * expit(offset2 + latent2)
            probs += p
        return probs / n_draws


def simulate_infections(
    spec: ModelSpec,
    theta_draw: ParameterVector,
    data: SurveyDataset,
    sites: np.ndarray,
    covariates: dict[str, np.ndarray],
    rng: np.random.Generator,
    times=None,
    controls: ScenarioControls | None = None,
    fixed: dict | None = None,
) -> np.ndarray:
    """Per-child infection probabilities at synthetic locations given
    the observed data under one parameter draw."""
    controls = controls or ScenarioControls()
    sites = np.asarray(sites, dtype=np.float64)
    tarr = None
    if times is not None:
        tarr = np.broadcast_to(
            np.asarray(times, dtype=np.float64), (sites.shape[0],)
        ).copy()
    rep = _ThetaReplicate(spec, data, theta_draw, rng, controls, fixed=fixed)
    return rep.child_probs(sites, covariates, tarr, rng)


# ---------------------------------------------------------------------------
# step (v): the outer loop


def run_scenario(
    fit: FitResult,
    spec: ModelSpec,
    data: SurveyDataset,
    frames: list[VillageFrame],
    scenario: ScenarioSpec,
    n_outer: int | None = None,
    rng: np.random.Generator | int | None = None,
    controls: ScenarioControls | None = None,
) -> ScenarioResult:
    comparison = run_comparison(
        fit, spec, data, frames, scenario, None,
        n_outer=n_outer, rng=rng, controls=controls,
    )
    return comparison.base


def run_comparison(
    fit: FitResult,
    spec: ModelSpec,
    data: SurveyDataset,
    frames: list[VillageFrame],
    scenario_a: ScenarioSpec,
    scenario_b: ScenarioSpec | None,
    n_outer: int | None = None,
    rng: np.random.Generator | int | None = None,
    controls: ScenarioControls | None = None,
) -> ScenarioComparison:
    """Run one or two scenarios over shared replicate randomness.

    Both scenarios see identical parameter draws, child allocations,
    household locations, donor households, and latent noise; only the
    covariates touched by the coverage rules differ.
    """
    controls = controls or ScenarioControls()
    if n_outer is None:
        n_outer = controls.n_outer
    if n_outer < 2:
        raise ValueError("need at least two outer replicates")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    scenarios = [scenario_a] if scenario_b is None else [scenario_a, scenario_b]
    n_villages = len(frames)
    prev = np.zeros((len(scenarios), n_outer, n_villages))
    counts = np.zeros((len(scenarios), n_outer, n_villages))
    n_children = np.array([f.n_children for f in frames], dtype=np.int64)
    fixed = fit.controls.fixed if fit.controls is not None else {}

    for r in range(n_outer):
        theta_draw = draw_theta(fit, rng)
        rep_seed = int(rng.integers(0, 2**63 - 1))
        rep = _ThetaReplicate(
            spec, data, theta_draw,
            np.random.default_rng([rep_seed, 104729]),
            controls, fixed=fixed,
        )
        for v, frame in enumerate(frames):
            structure_rng = np.random.default_rng([rep_seed, v])
            unsampled_counts, locations, donors = _draw_structure(
                frame, structure_rng
            )
            for si, scen in enumerate(scenarios):
                noise_rng = np.random.default_rng([rep_seed, v, 7919])
                infected = _village_infected(
                    rep,
                    frame,
                    scen,
                    unsampled_counts,
                    locations,
                    donors,
                    noise_rng,
                )
                counts[si, r, v] = infected
                prev[si, r, v] = infected / frame.n_children
    results = [
        ScenarioResult(
            scenario=scen.name,
            village_ids=[f.village_id for f in frames],
            n_children=n_children,
            prevalence=prev[i],
            counts=counts[i],
        )
        for i, scen in enumerate(scenarios)
    ]
    if scenario_b is None:
        return ScenarioComparison(base=results[0], alternative=results[0])
    return ScenarioComparison(base=results[0], alternative=results[1])


def _draw_structure(frame: VillageFrame, rng: np.random.Generator):
    """Shared structural randomness: allocation over unsampled
    households, their locations, and donor indices."""
    n_unsampled = frame.n_unsampled_households
    remaining = frame.n_children - frame.n_sampled_children
    if n_unsampled > 0:
        if remaining < n_unsampled:
            raise InfeasibleFrame(
                f"village {frame.village_id}: {remaining} unsampled children "
                f"cannot cover {n_unsampled} unsampled households"
            )
        if frame.sampled.n == 0:
            raise EmptyEmpiricalDistribution(
                f"village {frame.village_id} has no sampled households to draw from"
            )
        sub = VillageFrame(
            village_id=frame.village_id,
            region=frame.region,
            n_children=remaining,
            n_households=n_unsampled,
            sampled=frame.sampled.subset(np.zeros(frame.sampled.n, dtype=bool)),
        )
        counts = allocate_children(sub, rng)
        locations = uniform_sample(frame.region, n_unsampled, rng)
        donors = rng.integers(0, frame.sampled.n, size=n_unsampled)
    else:
        counts = np.zeros(0, dtype=np.int64)
        locations = np.zeros((0, 2))
        donors = np.zeros(0, dtype=np.int64)
    return counts, locations, donors


def _village_infected(
    rep: _ThetaReplicate,
    frame: VillageFrame,
    scenario: ScenarioSpec,
    unsampled_counts: np.ndarray,
    locations: np.ndarray,
    donors: np.ndarray,
    rng: np.random.Generator,
) -> float:
    sampled = frame.sampled
    n_new = locations.shape[0]
    names = list(sampled.covariates)
    new_covs = {}
    for name in names:
        source = scenario.imputation_sources.get(name, "empirical")
        if source == "empirical":
            new_covs[name] = sampled.covariates[name][donors] if n_new else np.zeros(0)
        else:
            new_covs[name] = np.full(n_new, float(source))
    _apply_coverage(new_covs, scenario, n_new)
    samp_covs = scenario_covariates(sampled, scenario)

    sites = np.vstack([sampled.xy, locations])
    covs = {name: np.concatenate([samp_covs[name], new_covs[name]]) for name in names}
    child_counts = np.concatenate([sampled.m, unsampled_counts])
    times = None
    if scenario.month is not None:
        times = np.full(sites.shape[0], float(scenario.month))
    elif rep.spec.needs_time():
        raise ValueError("model uses time; the scenario needs a month")
    probs = rep.child_probs(sites, covs, times, rng)
    return float(np.sum(child_counts * probs))
