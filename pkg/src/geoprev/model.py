"""Model specification, survey data container, and parameter packing.

The modelled linear predictors for record i are

    eta1_i = d_i' beta [+ seasonal harmonics] [+ I(non-randomised) b_i' delta]
             + W1_i
    eta2_i = g_i' gamma + W2_i            (mixture families only)

where W1 collects every latent effect entering eta1 (spatial field S,
nugget Z, temporal process U, survey bias field B) as one scalar per
record, and W2 is the suitability field T. The prior over the stacked
vector (W1, W2) is the zero-mean Gaussian assembled by
``latent_covariance``; S and T are independent, so the covariance is
block diagonal.

Variance conventions follow the covariance module: sigma2/phi for the
spatial field, nu2 the nugget-to-sigma2 ratio, omega2/psi the relative
variance and scale of whichever second process the spec enables. When
the spatial field is switched off the ratios are absolute variances.

Parameters are packed into a flat vector ordered (beta, delta, gamma,
log cov params, Fisher-z alphas). Optimisation happens on that packed
scale; regression blocks are reported on the natural covariate scale
via ``DesignInfo`` back-transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.special import logit as _scipy_logit

from .covariance import CovarianceParams
from .errors import MissingCovariate, NoBiasComponent
from .families import FAMILIES, uses_suitability, loglik as family_loglik
from .geometry import as_xy, pairwise_distances

INTERCEPT = "intercept"
TIME_TERM = "t"

COV_PARAM_NAMES = ("log_sigma2", "log_phi", "log_nu2", "log_omega2", "log_psi")


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit needs probabilities strictly inside (0, 1)")
    return _scipy_logit(p)


# ---------------------------------------------------------------------------
# survey data


@dataclass
class SurveyDataset:
    """Column-oriented survey records.

    covariates maps name -> (n,) float array. t is the observation time in
    months (None for purely spatial data). randomised flags whether each
    record came from a randomised (gold standard) survey.
    """

    unit_id: np.ndarray
    xy: np.ndarray
    m: np.ndarray
    y: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    t: np.ndarray | None = None
    survey_id: np.ndarray | None = None
    randomised: np.ndarray | None = None
    village_id: np.ndarray | None = None
    count_data: bool = True  # False for the real-valued diagnostic family

    def __post_init__(self):
        self.xy = as_xy(self.xy)
        n = self.xy.shape[0]
        self.unit_id = np.asarray(self.unit_id).astype(str)
        self.m = np.asarray(self.m, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.unit_id.shape != (n,) or self.m.shape != (n,) or self.y.shape != (n,):
            raise ValueError("unit_id, m, y must each have one entry per record")
        if self.t is not None:
            self.t = np.asarray(self.t, dtype=np.float64)
            if self.t.shape != (n,):
                raise ValueError("t must have one entry per record")
        if self.survey_id is None:
            self.survey_id = np.zeros(n, dtype=np.int64)
        self.survey_id = np.asarray(self.survey_id).astype(str)
        if self.randomised is None:
            self.randomised = np.ones(n, dtype=bool)
        self.randomised = np.asarray(self.randomised, dtype=bool)
        if self.survey_id.shape != (n,) or self.randomised.shape != (n,):
            raise ValueError("survey_id and randomised must match record count")
        if self.village_id is not None:
            self.village_id = np.asarray(self.village_id).astype(str)
            if self.village_id.shape != (n,):
                raise ValueError("village_id must match record count")
        clean = {}
        for name, col in self.covariates.items():
            col = np.asarray(col, dtype=np.float64)
            if col.shape != (n,):
                raise ValueError(f"covariate {name!r} must have one entry per record")
            clean[name] = col
        self.covariates = clean
        if np.any(self.m < 0):
            raise ValueError("m must be non-negative")
        if self.count_data and (np.any(self.y < 0) or np.any(self.y > self.m)):
            raise ValueError("y must lie in [0, m]")
        if np.any(~self.randomised) and not np.any(self.randomised):
            raise ValueError(
                "non-randomised surveys need a randomised survey alongside"
            )

    @property
    def n(self) -> int:
        return self.xy.shape[0]

    def surveys(self) -> np.ndarray:
        """Distinct survey labels in first-appearance order."""
        _, idx = np.unique(self.survey_id, return_index=True)
        return self.survey_id[np.sort(idx)]

    def survey_index(self) -> np.ndarray:
        """Record -> position of its survey in ``surveys()``."""
        labels = self.surveys()
        lookup = {lab: k for k, lab in enumerate(labels.tolist())}
        return np.array([lookup[s] for s in self.survey_id.tolist()], dtype=np.int64)

    def subset(self, mask) -> "SurveyDataset":
        mask = np.asarray(mask)
        return SurveyDataset(
            unit_id=self.unit_id[mask],
            xy=self.xy[mask],
            m=self.m[mask],
            y=self.y[mask],
            covariates={k: v[mask] for k, v in self.covariates.items()},
            t=None if self.t is None else self.t[mask],
            survey_id=self.survey_id[mask],
            randomised=self.randomised[mask],
            village_id=None if self.village_id is None else self.village_id[mask],
            count_data=self.count_data,
        )


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class Effects:
    """Which latent components enter the model. At most one of temporal,
    bias, suitability may be active at a time."""

    spatial: bool = True
    nugget: bool = False
    temporal: bool = False
    bias: bool = False
    suitability: bool = False

    def __post_init__(self):
        extras = int(self.temporal) + int(self.bias) + int(self.suitability)
        if extras > 1:
            raise ValueError(
                "at most one of temporal, bias, suitability may be enabled"
            )
        if not (self.spatial or self.nugget or extras):
            raise ValueError("model needs at least one latent effect")

    @property
    def second_process(self) -> str | None:
        if self.temporal:
            return "temporal"
        if self.bias:
            return "bias"
        if self.suitability:
            return "suitability"
        return None


@dataclass(frozen=True)
class ModelSpec:
    family: str = "binomial"
    p_terms: tuple[str, ...] = (INTERCEPT,)
    bias_terms: tuple[str, ...] = ()
    pi_terms: tuple[str, ...] = ()
    effects: Effects = field(default_factory=Effects)
    seasonal_periods: tuple[float, ...] = ()
    survey_times: dict | None = None
    gaussian_sd: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        object.__setattr__(self, "p_terms", tuple(self.p_terms))
        object.__setattr__(self, "bias_terms", tuple(self.bias_terms))
        object.__setattr__(self, "pi_terms", tuple(self.pi_terms))
        object.__setattr__(self, "seasonal_periods", tuple(self.seasonal_periods))
        if self.effects.suitability != uses_suitability(self.family):
            raise ValueError(
                "suitability effect is available exactly for the mixture families"
            )
        if uses_suitability(self.family) and not self.pi_terms:
            raise ValueError("mixture families need at least one pi term")
        if self.effects.bias and not self.bias_terms:
            object.__setattr__(self, "bias_terms", (INTERCEPT,))
        if self.bias_terms and not self.effects.bias:
            raise ValueError("bias terms given but bias effect disabled")
        if self.seasonal_periods and any(p <= 0 for p in self.seasonal_periods):
            raise ValueError("seasonal periods must be positive")
        if self.gaussian_sd <= 0:
            raise ValueError("gaussian_sd must be positive")

    def needs_time(self) -> bool:
        return bool(
            self.seasonal_periods
            or self.effects.temporal
            or TIME_TERM in self.p_terms
            or TIME_TERM in self.pi_terms
        )

    def validate_against(self, data: SurveyDataset) -> None:
        if self.needs_time() and data.t is None:
            raise MissingCovariate("model uses time but dataset has no t column")
        if self.effects.bias and bool(np.all(data.randomised)):
            raise NoBiasComponent(
                "bias effect enabled but every record is from a randomised survey"
            )
        for name in set(self.p_terms) | set(self.bias_terms) | set(self.pi_terms):
            if name in (INTERCEPT, TIME_TERM):
                continue
            if name not in data.covariates:
                raise MissingCovariate(f"covariate {name!r} not present in dataset")


# ---------------------------------------------------------------------------
# latent layout


@dataclass(frozen=True)
class LatentLayout:
    n_units: int
    has_eta1: bool
    has_suitability: bool

    @property
    def dim(self) -> int:
        return self.n_units * (int(self.has_eta1) + int(self.has_suitability))

    def split(self, w: np.ndarray):
        """Return (w1, w2), either possibly None."""
        w = np.asarray(w, dtype=np.float64)
        n = self.n_units
        if self.has_eta1 and self.has_suitability:
            return w[..., :n], w[..., n:]
        if self.has_eta1:
            return w, None
        return None, w


def latent_layout(spec: ModelSpec, n_units: int) -> LatentLayout:
    eff = spec.effects
    has_eta1 = eff.spatial or eff.nugget or eff.temporal or eff.bias
    return LatentLayout(
        n_units=n_units, has_eta1=has_eta1, has_suitability=eff.suitability
    )


@dataclass
class LatentState:
    w: np.ndarray
    layout: LatentLayout

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (self.layout.dim,):
            raise ValueError("latent vector length does not match layout")


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParameterVector:
    """Model parameters. Regression blocks are plain arrays; covariance
    parameters live on the log scale; cross-survey correlations alpha are
    stored per free survey pair on the Fisher-z scale."""

    beta: np.ndarray
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_sigma2: float | None = None
    log_phi: float | None = None
    log_nu2: float | None = None
    log_omega2: float | None = None
    log_psi: float | None = None
    alpha_z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        self.alpha_z = np.atleast_1d(np.asarray(self.alpha_z, dtype=np.float64))

    def copy(self) -> "ParameterVector":
        return ParameterVector(
            beta=self.beta.copy(),
            delta=self.delta.copy(),
            gamma=self.gamma.copy(),
            log_sigma2=self.log_sigma2,
            log_phi=self.log_phi,
            log_nu2=self.log_nu2,
            log_omega2=self.log_omega2,
            log_psi=self.log_psi,
            alpha_z=self.alpha_z.copy(),
        )

    @property
    def sigma2(self):
        return None if self.log_sigma2 is None else float(np.exp(self.log_sigma2))

    @property
    def phi(self):
        return None if self.log_phi is None else float(np.exp(self.log_phi))

    @property
    def nu2(self):
        return None if self.log_nu2 is None else float(np.exp(self.log_nu2))

    @property
    def omega2(self):
        return None if self.log_omega2 is None else float(np.exp(self.log_omega2))

    @property
    def psi(self):
        return None if self.log_psi is None else float(np.exp(self.log_psi))


@dataclass(frozen=True)
class ParamLayout:
    """Fixed ordering of the packed parameter vector."""

    beta_names: tuple[str, ...]
    delta_names: tuple[str, ...]
    gamma_names: tuple[str, ...]
    cov_names: tuple[str, ...]
    alpha_pairs: tuple[tuple[int, int], ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        out = [f"beta[{n}]" for n in self.beta_names]
        out += [f"delta[{n}]" for n in self.delta_names]
        out += [f"gamma[{n}]" for n in self.gamma_names]
        out += list(self.cov_names)
        out += [f"alpha_z[{i},{j}]" for i, j in self.alpha_pairs]
        return tuple(out)

    @property
    def size(self) -> int:
        return (
            len(self.beta_names)
            + len(self.delta_names)
            + len(self.gamma_names)
            + len(self.cov_names)
            + len(self.alpha_pairs)
        )

    def pack(self, theta: ParameterVector) -> np.ndarray:
        nb, nd, ng = len(self.beta_names), len(self.delta_names), len(self.gamma_names)
        if theta.beta.shape != (nb,):
            raise ValueError("beta length does not match layout")
        if theta.delta.shape != (nd,):
            raise ValueError("delta length does not match layout")
        if theta.gamma.shape != (ng,):
            raise ValueError("gamma length does not match layout")
        covs = []
        for name in self.cov_names:
            value = getattr(theta, name)
            if value is None:
                raise ValueError(f"layout includes {name} but it is unset")
            covs.append(float(value))
        if theta.alpha_z.shape != (len(self.alpha_pairs),):
            raise ValueError("alpha_z length does not match layout")
        return np.concatenate(
            [theta.beta, theta.delta, theta.gamma, np.array(covs), theta.alpha_z]
        )

    def unpack(self, vec: np.ndarray) -> ParameterVector:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(
                f"packed vector has length {vec.shape}, layout needs {self.size}"
            )
        nb, nd, ng = len(self.beta_names), len(self.delta_names), len(self.gamma_names)
        pos = 0
        beta = vec[pos : pos + nb]
        pos += nb
        delta = vec[pos : pos + nd]
        pos += nd
        gamma = vec[pos : pos + ng]
        pos += ng
        covs = {name: float(vec[pos + i]) for i, name in enumerate(self.cov_names)}
        pos += len(self.cov_names)
        alpha_z = vec[pos:]
        return ParameterVector(
            beta=beta.copy(),
            delta=delta.copy(),
            gamma=gamma.copy(),
            alpha_z=alpha_z.copy(),
            **covs,
        )


def seasonal_names(periods) -> list[str]:
    out = []
    for p in periods:
        out.append(f"sin_{p:g}")
        out.append(f"cos_{p:g}")
    return out


def param_layout(spec: ModelSpec, data: SurveyDataset | None = None) -> ParamLayout:
    eff = spec.effects
    cov_names: list[str] = []
    if eff.spatial:
        cov_names += ["log_sigma2", "log_phi"]
    if eff.nugget:
        cov_names.append("log_nu2")
    if eff.second_process is not None:
        cov_names += ["log_omega2", "log_psi"]
    alpha_pairs: tuple[tuple[int, int], ...] = ()
    if spec.survey_times and data is not None:
        labels = data.surveys().tolist()
        times = [spec.survey_times.get(str(lab)) for lab in labels]
        if any(tv is None for tv in times):
            raise ValueError("survey_times must cover every survey in the data")
        pairs = []
        for i in range(len(labels)):
            for j in range(i + 1, len(labels)):
                if times[i] != times[j]:
                    pairs.append((i, j))
        alpha_pairs = tuple(pairs)
    return ParamLayout(
        beta_names=tuple(spec.p_terms) + tuple(seasonal_names(spec.seasonal_periods)),
        delta_names=tuple(spec.bias_terms) if eff.bias else (),
        gamma_names=tuple(spec.pi_terms) if eff.suitability else (),
        cov_names=tuple(cov_names),
        alpha_pairs=alpha_pairs,
    )


def alpha_matrix(theta: ParameterVector, layout: ParamLayout, n_surveys: int):
    """Cross-survey correlation matrix from the packed Fisher-z values."""
    alpha = np.ones((n_surveys, n_surveys))
    for z, (i, j) in zip(theta.alpha_z, layout.alpha_pairs):
        alpha[i, j] = alpha[j, i] = np.tanh(z)
    return alpha


def covariance_params(spec: ModelSpec, theta: ParameterVector) -> CovarianceParams:
    """Translate packed parameters into the covariance module's convention.

    When the spatial field is off, sigma2 is pinned to 1 so the ratio
    parameters act as absolute variances.
    """
    eff = spec.effects
    sigma2 = theta.sigma2 if eff.spatial else 1.0
    phi = theta.phi if eff.spatial else 1.0
    return CovarianceParams(
        sigma2=sigma2,
        phi=phi,
        nu2=theta.nu2 if eff.nugget else 0.0,
        omega2=theta.omega2 if eff.second_process else 0.0,
        psi=theta.psi if eff.second_process else None,
    )


# ---------------------------------------------------------------------------
# design matrices and covariate standardisation


@dataclass(frozen=True)
class BlockDesign:
    names: tuple[str, ...]
    matrix: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    @property
    def k(self) -> int:
        return len(self.names)

    def natural_from_internal(self, coef: np.ndarray) -> np.ndarray:
        """Map coefficients for the standardised matrix back to the raw
        covariate scale (the intercept absorbs the centering)."""
        return self.transform_matrix() @ coef

    def transform_matrix(self) -> np.ndarray:
        k = self.k
        a = np.diag(1.0 / self.scale)
        if INTERCEPT in self.names:
            row = self.names.index(INTERCEPT)
            for j in range(k):
                if j != row and self.center[j] != 0.0:
                    a[row, j] = -self.center[j] / self.scale[j]
        return a


def _term_column(name: str, data: SurveyDataset) -> np.ndarray:
    if name == INTERCEPT:
        return np.ones(data.n)
    if name == TIME_TERM:
        if data.t is None:
            raise MissingCovariate("term 't' needs a time column")
        return data.t.astype(np.float64)
    if name in data.covariates:
        return data.covariates[name]
    raise MissingCovariate(f"covariate {name!r} not present in dataset")


def _build_block(
    names,
    data: SurveyDataset,
    *,
    seasonal=(),
    rows: np.ndarray | None = None,
    standardize: bool = False,
) -> BlockDesign:
    names = tuple(names)
    cols = [_term_column(n, data) for n in names]
    harm_names = tuple(seasonal_names(seasonal))
    if harm_names:
        if data.t is None:
            raise MissingCovariate("seasonal terms need a time column")
        for p in seasonal:
            w = 2.0 * np.pi * data.t / p
            cols.append(np.sin(w))
            cols.append(np.cos(w))
    all_names = names + harm_names
    x = np.column_stack(cols) if cols else np.zeros((data.n, 0))
    center = np.zeros(len(all_names))
    scale = np.ones(len(all_names))
    support = rows if rows is not None else np.ones(data.n, dtype=bool)
    if standardize:
        has_intercept = INTERCEPT in all_names
        for j, name in enumerate(all_names):
            if name == INTERCEPT or name in harm_names:
                continue
            vals = x[support, j]
            if np.unique(vals).size <= 2:
                continue
            s = float(np.std(vals))
            if s == 0.0:
                continue
            mu = float(np.mean(vals)) if has_intercept else 0.0
            center[j] = mu
            scale[j] = s
            x[:, j] = (x[:, j] - mu) / s
    if rows is not None:
        x[~rows, :] = 0.0
    return BlockDesign(names=all_names, matrix=x, center=center, scale=scale)


@dataclass(frozen=True)
class ModelDesign:
    """Per-record design matrices on a common (possibly standardised)
    scale, plus the latent layout for the same records."""

    p: BlockDesign
    bias: BlockDesign
    pi: BlockDesign
    layout: LatentLayout
    standardized: bool

    def transform_packed(self, layout: ParamLayout) -> np.ndarray:
        """Block-diagonal matrix mapping internal packed parameters to the
        natural-scale packed parameters (identity on covariance entries)."""
        blocks = [
            self.p.transform_matrix(),
            self.bias.transform_matrix(),
            self.pi.transform_matrix(),
            np.eye(len(layout.cov_names) + len(layout.alpha_pairs)),
        ]
        sizes = [b.shape[0] for b in blocks]
        a = np.zeros((sum(sizes), sum(sizes)))
        pos = 0
        for b, s in zip(blocks, sizes):
            a[pos : pos + s, pos : pos + s] = b
            pos += s
        return a


def build_design(
    spec: ModelSpec, data: SurveyDataset, *, standardize: bool = False
) -> ModelDesign:
    spec.validate_against(data)
    eff = spec.effects
    p_block = _build_block(
        spec.p_terms, data, seasonal=spec.seasonal_periods, standardize=standardize
    )
    if eff.bias:
        nonrand = ~data.randomised
        bias_block = _build_block(
            spec.bias_terms, data, rows=nonrand, standardize=standardize
        )
    else:
        bias_block = BlockDesign(
            names=(), matrix=np.zeros((data.n, 0)), center=np.zeros(0), scale=np.ones(0)
        )
    if eff.suitability:
        pi_block = _build_block(spec.pi_terms, data, standardize=standardize)
    else:
        pi_block = BlockDesign(
            names=(), matrix=np.zeros((data.n, 0)), center=np.zeros(0), scale=np.ones(0)
        )
    return ModelDesign(
        p=p_block,
        bias=bias_block,
        pi=pi_block,
        layout=latent_layout(spec, data.n),
        standardized=standardize,
    )


def linear_offsets(design: ModelDesign, theta: ParameterVector):
    """Fixed-effect parts of (eta1, eta2); eta2 part is None when the
    model has no suitability component."""
    eta1 = design.p.matrix @ theta.beta
    if design.bias.k:
        eta1 = eta1 + design.bias.matrix @ theta.delta
    eta2 = design.pi.matrix @ theta.gamma if design.pi.k else None
    return eta1, eta2


def predictors(design: ModelDesign, theta: ParameterVector, w: np.ndarray):
    """Full linear predictors given one latent vector (or a stack of them
    with shape (..., dim))."""
    off1, off2 = linear_offsets(design, theta)
    w1, w2 = design.layout.split(w)
    eta1 = off1 + (w1 if w1 is not None else 0.0)
    eta2 = None
    if off2 is not None:
        eta2 = off2 + (w2 if w2 is not None else 0.0)
    return eta1, eta2


def linear_predictor(
    spec: ModelSpec, theta: ParameterVector, data: SurveyDataset, i: int, w1_i: float
) -> float:
    """eta1 for a single record, natural covariate scale."""
    design = build_design(spec, data)
    off1, _ = linear_offsets(design, theta)
    return float(off1[i] + w1_i)


def log_cond_density(
    spec: ModelSpec,
    theta: ParameterVector,
    data: SurveyDataset,
    w: np.ndarray,
) -> np.ndarray:
    """Per-record log f(y_i | W_i) at the given latent vector."""
    design = build_design(spec, data)
    eta1, eta2 = predictors(design, theta, np.asarray(w, dtype=np.float64))
    return family_loglik(
        spec.family, data.y, data.m, eta1, eta2, gaussian_sd=spec.gaussian_sd
    )


def modelled_prevalence(
    spec: ModelSpec,
    theta: ParameterVector,
    covariates: dict,
    s_sample,
    t_sample=None,
    pi_covariates: dict | None = None,
):
    """Per-sample prevalence at one site.

    For mixture families this is pi(x) * p(x), the modelled prevalence
    combining suitability and within-suitable prevalence; otherwise just
    p(x). Covariate dicts map term name -> value at the site.
    """
    eta1 = _site_offset(spec.p_terms, spec.seasonal_periods, theta.beta, covariates)
    p = expit(eta1 + np.asarray(s_sample, dtype=np.float64))
    if not uses_suitability(spec.family):
        return p
    if t_sample is None:
        raise ValueError("mixture families need suitability samples")
    gcov = pi_covariates if pi_covariates is not None else covariates
    eta2 = _site_offset(spec.pi_terms, (), theta.gamma, gcov)
    pi = expit(eta2 + np.asarray(t_sample, dtype=np.float64))
    return pi * p


def _site_offset(terms, seasonal, coef, covariates: dict) -> float:
    """Scalar fixed-effect offset at one site from a covariate dict."""
    values = []
    for name in terms:
        if name == INTERCEPT:
            values.append(1.0)
        elif name in covariates:
            values.append(float(covariates[name]))
        else:
            raise MissingCovariate(f"covariate {name!r} missing for prediction site")
    for p in seasonal:
        if TIME_TERM not in covariates:
            raise MissingCovariate("seasonal terms need 't' among site covariates")
        w = 2.0 * np.pi * float(covariates[TIME_TERM]) / p
        values.append(np.sin(w))
        values.append(np.cos(w))
    values = np.asarray(values)
    if values.shape != np.shape(coef):
        raise ValueError("coefficient length does not match term list")
    return float(values @ coef)


def site_design(
    terms, seasonal, covariates: dict[str, np.ndarray], times=None, n_sites=None
) -> np.ndarray:
    """Design matrix for prediction sites on the natural covariate scale.

    covariates maps term name -> (k,) array over sites; times supplies the
    't' term and seasonal harmonics. n_sites pins the row count when both
    are empty (intercept-only models).
    """
    k = n_sites
    for col in covariates.values():
        k = np.asarray(col).shape[0]
        break
    if k is None and times is not None:
        k = np.asarray(times).shape[0]
    if k is None:
        raise ValueError("need at least one covariate column, times, or n_sites")
    cols = []
    for name in terms:
        if name == INTERCEPT:
            cols.append(np.ones(k))
        elif name == TIME_TERM:
            if times is None:
                raise MissingCovariate("term 't' needs site times")
            cols.append(np.asarray(times, dtype=np.float64))
        elif name in covariates:
            cols.append(np.asarray(covariates[name], dtype=np.float64))
        else:
            raise MissingCovariate(f"covariate {name!r} missing for prediction sites")
    for p in seasonal:
        if times is None:
            raise MissingCovariate("seasonal terms need site times")
        w = 2.0 * np.pi * np.asarray(times, dtype=np.float64) / p
        cols.append(np.sin(w))
        cols.append(np.cos(w))
    return np.column_stack(cols) if cols else np.zeros((k, 0))


# ---------------------------------------------------------------------------
# latent covariance assembly


def latent_covariance(
    spec: ModelSpec,
    theta: ParameterVector,
    data: SurveyDataset,
    layout_p: ParamLayout | None = None,
) -> np.ndarray:
    """Prior covariance of the stacked latent vector (W1[, W2]).

    W1_i sums every eta1 latent effect at record i: spatial field values
    (with cross-survey correlation when alpha parameters are present),
    temporal process at the record time, survey-specific bias fields over
    non-randomised records, and an independent nugget. W2 is the
    suitability field, independent of W1.
    """
    eff = spec.effects
    params = covariance_params(spec, theta)
    layout = latent_layout(spec, data.n)
    n = data.n
    u = pairwise_distances(data.xy)

    blocks = []
    if layout.has_eta1:
        c = np.zeros((n, n))
        if eff.spatial:
            rho = np.exp(-u / params.phi)
            if layout_p is not None and layout_p.alpha_pairs:
                alpha = alpha_matrix(theta, layout_p, data.surveys().size)
                idx = data.survey_index()
                c += params.sigma2 * alpha[np.ix_(idx, idx)] * rho
            else:
                c += params.sigma2 * rho
        if eff.temporal:
            if data.t is None:
                raise MissingCovariate("temporal effect needs a time column")
            dt = np.abs(data.t[:, None] - data.t[None, :])
            c += params.sigma2 * params.omega2 * np.exp(-dt / params.psi)
        if eff.bias:
            nonrand = ~data.randomised
            same_survey = data.survey_id[:, None] == data.survey_id[None, :]
            mask = nonrand[:, None] & nonrand[None, :] & same_survey
            c += np.where(
                mask, params.sigma2 * params.omega2 * np.exp(-u / params.psi), 0.0
            )
        if eff.nugget:
            c[np.diag_indices(n)] += params.sigma2 * params.nu2
        blocks.append(c)
    if layout.has_suitability:
        c2 = params.sigma2 * params.omega2 * np.exp(-u / params.psi)
        blocks.append(c2)

    dim = layout.dim
    cov = np.zeros((dim, dim))
    pos = 0
    for b in blocks:
        cov[pos : pos + n, pos : pos + n] = b
        pos += n
    return cov
