"""Exact generative simulation of the survey models.

Used both as the synthetic-data engine of the CLI and as the testing
oracle: every latent realization (spatial field S, nugget Z, temporal
process U, bias fields B, suitability field T) is returned alongside the
counts so recovery can be checked against truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NotPositiveDefinite
from .geometry import as_xy, pairwise_distances
from .model import (
    ModelSpec,
    ParameterVector,
    SurveyDataset,
    alpha_matrix,
    build_design,
    covariance_params,
    linear_offsets,
    param_layout,
    uses_suitability,
)


@dataclass
class SimulationDesign:
    """Where, when, and how hard to sample."""

    xy: np.ndarray
    m: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    t: np.ndarray | None = None
    survey_id: np.ndarray | None = None
    randomised: np.ndarray | None = None
    unit_id: np.ndarray | None = None
    village_id: np.ndarray | None = None

    def __post_init__(self):
        self.xy = as_xy(self.xy)
        n = self.xy.shape[0]
        self.m = np.broadcast_to(np.asarray(self.m, dtype=np.int64), (n,)).copy()
        if self.unit_id is None:
            self.unit_id = np.array([f"u{i:04d}" for i in range(n)])

    @property
    def n(self) -> int:
        return self.xy.shape[0]


def _draw_gaussian(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean draw; tolerates PSD-singular covariances."""
    try:
        chol = np.linalg.cholesky(cov)
        return chol @ rng.standard_normal(cov.shape[0])
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        top = float(vals.max(initial=0.0))
        if top <= 0.0 or vals.min() < -1e-8 * top:
            raise NotPositiveDefinite(
                "simulation covariance is not positive semidefinite"
            ) from None
        vals = np.clip(vals, 0.0, None)
        return vecs @ (np.sqrt(vals) * rng.standard_normal(cov.shape[0]))


def simulate_dataset(
    spec: ModelSpec,
    theta_true: ParameterVector,
    design: SimulationDesign,
    rng: np.random.Generator | int | None = None,
):
    """Draw one dataset from the generative model.

    Returns (SurveyDataset, truth) where truth maps component name to
    its realized per-record values ("S", "Z", "U", "B", "T", "eta1",
    "eta2", "p", "pi", "prevalence").
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if design.n == 0:
        raise ValueError("design is empty")
    eff = spec.effects
    n = design.n
    data = SurveyDataset(
        unit_id=design.unit_id,
        xy=design.xy,
        m=design.m,
        y=np.zeros(n),
        covariates=design.covariates,
        t=design.t,
        survey_id=design.survey_id,
        randomised=design.randomised,
        village_id=design.village_id,
    )
    layout_p = param_layout(spec, data)
    params = covariance_params(spec, theta_true)
    u = pairwise_distances(data.xy)
    truth: dict[str, np.ndarray] = {}

    s_vals = np.zeros(n)
    if eff.spatial:
        rho = np.exp(-u / params.phi)
        if layout_p.alpha_pairs:
            alpha = alpha_matrix(theta_true, layout_p, data.surveys().size)
            idx = data.survey_index()
            s_vals = _draw_gaussian(
                params.sigma2 * alpha[np.ix_(idx, idx)] * rho, rng
            )
        else:
            s_vals = _draw_gaussian(params.sigma2 * rho, rng)
        truth["S"] = s_vals
    z_vals = np.zeros(n)
    if eff.nugget:
        z_vals = np.sqrt(params.sigma2 * params.nu2) * rng.standard_normal(n)
        truth["Z"] = z_vals
    u_vals = np.zeros(n)
    if eff.temporal:
        dt = np.abs(data.t[:, None] - data.t[None, :])
        u_vals = _draw_gaussian(
            params.sigma2 * params.omega2 * np.exp(-dt / params.psi), rng
        )
        truth["U"] = u_vals
    b_vals = np.zeros(n)
    if eff.bias:
        var_b = params.sigma2 * params.omega2
        for lab in data.surveys().tolist():
            rows = (data.survey_id == lab) & (~data.randomised)
            if not np.any(rows):
                continue
            sub = np.where(rows)[0]
            cov_b = var_b * np.exp(-u[np.ix_(sub, sub)] / params.psi)
            b_vals[sub] = _draw_gaussian(cov_b, rng)
        truth["B"] = b_vals
    t_vals = np.zeros(n)
    if eff.suitability:
        cov_t = params.sigma2 * params.omega2 * np.exp(-u / params.psi)
        t_vals = _draw_gaussian(cov_t, rng)
        truth["T"] = t_vals

    dsg = build_design(spec, data)
    off1, off2 = linear_offsets(dsg, theta_true)
    eta1 = off1 + s_vals + z_vals + u_vals + b_vals
    truth["eta1"] = eta1
    p = expit(eta1)
    truth["p"] = p

    if spec.family == "gaussian":
        y = eta1 + spec.gaussian_sd * rng.standard_normal(n)
        data.y = y
        truth["prevalence"] = p
        return data, truth

    if uses_suitability(spec.family):
        eta2 = off2 + t_vals
        truth["eta2"] = eta2
        pi = expit(eta2)
        truth["pi"] = pi
        suitable = rng.random(n) < pi
        if spec.family == "zero_inflated":
            y = np.where(suitable, rng.binomial(data.m, p), 0)
        else:
            from scipy.stats import binom as binom_dist

            y = np.zeros(n, dtype=np.int64)
            pos = np.where(suitable & (data.m > 0))[0]
            if pos.size:
                # zero-truncated binomial via inverse cdf above F(0)
                f0 = binom_dist.cdf(0, data.m[pos], p[pos])
                uu = f0 + rng.random(pos.size) * (1.0 - f0)
                y[pos] = binom_dist.ppf(uu, data.m[pos], p[pos]).astype(np.int64)
                y[pos] = np.maximum(y[pos], 1)
        truth["prevalence"] = pi * p
    else:
        y = rng.binomial(data.m, p)
        truth["prevalence"] = p
    data.y = np.asarray(y, dtype=np.float64)
    return data, truth


def random_design(
    n: int,
    rng: np.random.Generator | int | None = None,
    side: float = 20.0,
    m: int = 60,
    covariates: tuple[str, ...] = (),
    times: tuple[float, float] | None = None,
) -> SimulationDesign:
    """Uniform locations in a square with optional standard-normal
    covariates and uniform month indices; test and script helper."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    xy = rng.uniform(0.0, side, size=(n, 2))
    covs = {name: rng.standard_normal(n) for name in covariates}
    t = None
    if times is not None:
        t = np.floor(rng.uniform(times[0], times[1] + 1.0, size=n))
    return SimulationDesign(xy=xy, m=np.full(n, m), covariates=covs, t=t)
