"""Monte Carlo maximum likelihood for the latent Gaussian models.

The likelihood integrates the conditional density of the counts over the
latent field W. Writing g(w, y; theta) = N(w; 0, Sigma_theta) *
prod_i f(y_i | w_i), inference proceeds by

1. finding the mode w_hat of log g at a reference theta0 (Newton-Raphson
   with analytic gradient and Hessian),
2. sampling W | y; theta0 with a Langevin-Hastings chain on the
   standardized vector z = L' (w - w_hat), where L L' = -Hessian(w_hat),
3. maximizing the importance-sampled log likelihood ratio
   log (1/N) sum_s exp[log g(w_s; theta) - log g(w_s; theta0)],
   which is exactly 0 at theta = theta0,
4. refreshing theta0 at the maximizer and repeating until the update is
   small, then taking the curvature of the final objective as observed
   information.

Covariance parameters are optimized on the log scale, cross-survey
correlations on the Fisher-z scale; regression blocks are standardized
internally and reported on the natural covariate scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import (
    DivergentChain,
    GeoprevError,
    HessianIndefinite,
    NoConvergence,
    SingularInformation,
)
from .families import derivatives as family_derivatives
from .families import loglik as family_loglik
from .model import (
    ModelDesign,
    ModelSpec,
    ParamLayout,
    ParameterVector,
    SurveyDataset,
    build_design,
    latent_covariance,
    param_layout,
    linear_offsets,
)

LOG_2PI = float(np.log(2.0 * np.pi))

# natural-scale name -> packed log-scale name, for FitControls.fixed
_FIXABLE = {
    "sigma2": "log_sigma2",
    "phi": "log_phi",
    "nu2": "log_nu2",
    "omega2": "log_omega2",
    "psi": "log_psi",
}


@dataclass(frozen=True)
class LaplaceFit:
    w_hat: np.ndarray
    neg_hessian_chol: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float = 0.0


@dataclass(frozen=True)
class McmcSample:
    draws: np.ndarray
    acceptance_rate: float
    step_size: float


@dataclass(frozen=True)
class FitControls:
    """Tuning knobs for ``fit``. Defaults are conservative; the fast
    settings used by the test suite shrink the chain and refresh counts."""

    n_samples: int = 1000
    burn_in: int = 2000
    thin: int = 10
    max_refreshes: int = 10
    refresh_tol: float = 1e-3
    trust_radius: float = 3.0
    max_opt_iter: int = 100
    mode_tol: float = 1e-8
    mode_max_iter: int = 100
    target_accept: float = 0.57
    hessian_step: float = 1e-4
    # optional larger importance sample for the last polish of theta_hat;
    # extra draws there shrink the simulation noise in the point estimate
    final_samples: int | None = None
    final_thin: int | None = None
    # deterministic polish of the initial values on the gaussian-integral
    # marginal before any sampling starts
    prefit: bool = True
    fixed: dict = field(default_factory=dict)
    standardize: bool = True


@dataclass
class FitResult:
    theta_hat: ParameterVector
    param_names: tuple[str, ...]
    estimates: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    ci: np.ndarray
    objective_trace: list
    theta0_refreshes: int
    mc_samples_used: int
    converged: bool
    diagnostics: dict
    spec: ModelSpec = None
    layout: ParamLayout = None
    samples: McmcSample = None
    data: SurveyDataset = None
    controls: FitControls = None

    def summary(self) -> str:
        """Tabular report: Term, Estimate, 95% CI."""
        width = max(len(n) for n in self.param_names)
        lines = [f"{'Term':<{width}}  {'Estimate':>10}  95% CI"]
        for name, est, (lo, hi) in zip(self.param_names, self.estimates, self.ci):
            lines.append(f"{name:<{width}}  {est:>10.4f}  ({lo:.4f}, {hi:.4f})")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# fit context: everything precomputable from (spec, data, controls)


class FitContext:
    """Bundles design matrices, parameter layout, and fixed-parameter
    handling for one (spec, data) pair."""

    def __init__(
        self,
        spec: ModelSpec,
        data: SurveyDataset,
        *,
        standardize: bool = False,
        fixed: dict | None = None,
    ):
        spec.validate_against(data)
        self.spec = spec
        self.data = data
        self.design: ModelDesign = build_design(spec, data, standardize=standardize)
        self.fixed = dict(fixed or {})
        for key in self.fixed:
            if key not in _FIXABLE:
                raise ValueError(f"cannot fix parameter {key!r}")
        fixed_names = tuple(_FIXABLE[k] for k in self.fixed)
        full = param_layout(spec, data)
        self.layout = ParamLayout(
            beta_names=full.beta_names,
            delta_names=full.delta_names,
            gamma_names=full.gamma_names,
            cov_names=tuple(n for n in full.cov_names if n not in fixed_names),
            alpha_pairs=full.alpha_pairs,
        )
        self._fixed_log = {
            _FIXABLE[k]: (np.log(v) if v > 0 else -np.inf)
            for k, v in self.fixed.items()
        }
        self.degenerate = self._is_degenerate(full)
        self.latent_dim = 0 if self.degenerate else self.design.layout.dim

    def _is_degenerate(self, full_layout: ParamLayout) -> bool:
        eff = self.spec.effects
        sources = []
        if eff.spatial:
            sources.append(self.fixed.get("sigma2", None) == 0.0)
        if eff.nugget:
            sources.append(self.fixed.get("nu2", None) == 0.0)
        if eff.second_process is not None:
            sources.append(self.fixed.get("omega2", None) == 0.0)
        return bool(sources) and all(sources)

    def complete(self, theta: ParameterVector) -> ParameterVector:
        """Inject fixed covariance parameters (log scale)."""
        if not self._fixed_log:
            return theta
        theta = theta.copy()
        for name, logval in self._fixed_log.items():
            setattr(theta, name, logval)
        return theta

    def latent_cov(self, theta: ParameterVector) -> np.ndarray:
        return latent_covariance(
            self.spec, self.complete(theta), self.data, layout_p=self.layout
        )

    def offsets(self, theta: ParameterVector):
        return linear_offsets(self.design, theta)

    def data_loglik(self, theta: ParameterVector, w: np.ndarray) -> np.ndarray:
        """Summed conditional log density, broadcasting over stacked w."""
        off1, off2 = self.offsets(theta)
        w = np.asarray(w, dtype=np.float64)
        if self.latent_dim == 0:
            eta1, eta2 = off1, off2
            if w.ndim == 2:
                eta1 = np.broadcast_to(eta1, (w.shape[0],) + eta1.shape)
                if eta2 is not None:
                    eta2 = np.broadcast_to(eta2, (w.shape[0],) + eta2.shape)
        else:
            w1, w2 = self.design.layout.split(w)
            eta1 = off1 + (w1 if w1 is not None else 0.0)
            eta2 = None if off2 is None else off2 + (w2 if w2 is not None else 0.0)
        ll = family_loglik(
            self.spec.family,
            self.data.y,
            self.data.m,
            eta1,
            eta2,
            gaussian_sd=self.spec.gaussian_sd,
        )
        return np.sum(ll, axis=-1)

    def data_derivs(self, theta: ParameterVector, w: np.ndarray):
        """Gradient and Hessian diagonals of the data term in w."""
        off1, off2 = self.offsets(theta)
        w1, w2 = self.design.layout.split(w)
        eta1 = off1 + (w1 if w1 is not None else 0.0)
        eta2 = None if off2 is None else off2 + (w2 if w2 is not None else 0.0)
        l, d1, d2, d11, d22, d12 = family_derivatives(
            self.spec.family,
            self.data.y,
            self.data.m,
            eta1,
            eta2,
            gaussian_sd=self.spec.gaussian_sd,
        )
        lay = self.design.layout
        if lay.has_eta1 and lay.has_suitability:
            grad = np.concatenate([d1, d2])
            hess_diag = np.concatenate([d11, d22])
            hess_cross = d12
        elif lay.has_eta1:
            grad, hess_diag, hess_cross = d1, d11, None
        else:
            grad, hess_diag, hess_cross = d2, d22, None
        return float(np.sum(l)), grad, hess_diag, hess_cross


# ---------------------------------------------------------------------------
# joint density and Laplace approximation


def joint_log_density(
    spec: ModelSpec,
    theta: ParameterVector,
    w: np.ndarray,
    data: SurveyDataset,
    ctx: FitContext | None = None,
) -> float:
    """log g(w, y; theta) = log N(w; 0, Sigma) + sum_i log f(y_i | w_i)."""
    if ctx is None:
        ctx = FitContext(spec, data)
    w = np.asarray(w, dtype=np.float64)
    prior = 0.0
    if ctx.latent_dim > 0:
        sigma = ctx.latent_cov(theta)
        factor = cho_factor(sigma, lower=True)
        half_logdet = float(np.sum(np.log(np.diag(factor[0]))))
        quad = float(w @ cho_solve(factor, w))
        prior = -0.5 * (w.size * LOG_2PI + quad) - half_logdet
    return prior + float(ctx.data_loglik(theta, w))


def laplace_mode(
    spec: ModelSpec,
    theta0: ParameterVector,
    data: SurveyDataset,
    ctx: FitContext | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    w_init: np.ndarray | None = None,
) -> LaplaceFit:
    """Newton-Raphson mode of log g(w, y; theta0) with analytic curvature."""
    if ctx is None:
        ctx = FitContext(spec, data)
    dim = ctx.latent_dim
    if dim == 0:
        return LaplaceFit(
            w_hat=np.zeros(0),
            neg_hessian_chol=np.zeros((0, 0)),
            converged=True,
            iterations=0,
        )
    sigma = ctx.latent_cov(theta0)
    prior_factor = cho_factor(sigma, lower=True)
    prior_half_logdet = float(np.sum(np.log(np.diag(prior_factor[0]))))
    n = ctx.data.n

    def logg(w):
        quad = float(w @ cho_solve(prior_factor, w))
        return (
            -0.5 * (dim * LOG_2PI + quad)
            - prior_half_logdet
            + float(ctx.data_loglik(theta0, w))
        )

    def neg_hessian(w):
        _, _, hdiag, hcross = ctx.data_derivs(theta0, w)
        neg_h = cho_solve(prior_factor, np.eye(dim))
        idx = np.arange(dim)
        neg_h[idx, idx] -= hdiag
        if hcross is not None:
            j = np.arange(n)
            neg_h[j, n + j] -= hcross
            neg_h[n + j, j] -= hcross
        return neg_h

    if w_init is not None and w_init.shape == (dim,):
        w = np.asarray(w_init, dtype=np.float64).copy()
    else:
        w = np.zeros(dim)
    value = logg(w)
    grad_norm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        _, dgrad, _, _ = ctx.data_derivs(theta0, w)
        grad = dgrad - cho_solve(prior_factor, w)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < tol:
            converged = True
            break
        neg_h = neg_hessian(w)
        step = _damped_solve(neg_h, grad)
        scale = 1.0
        for _ in range(40):
            w_new = w + scale * step
            value_new = logg(w_new)
            if value_new > value - 1e-12:
                break
            scale *= 0.5
        else:
            break
        w, value = w_new, value_new
    if not converged:
        raise NoConvergence(
            "mode search did not converge",
            diagnostics={"grad_norm": grad_norm, "iterations": it},
        )
    neg_h = neg_hessian(w)
    try:
        chol = np.linalg.cholesky(neg_h)
    except np.linalg.LinAlgError:
        raise HessianIndefinite(
            "negative Hessian at the mode is not positive definite"
        ) from None
    return LaplaceFit(
        w_hat=w,
        neg_hessian_chol=chol,
        converged=True,
        iterations=it,
        grad_norm=grad_norm,
    )


def _damped_solve(neg_h: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Solve neg_h @ step = grad, adding ridge if the factorization fails."""
    lam = 0.0
    base = float(np.max(np.diag(neg_h)))
    for _ in range(12):
        try:
            mat = neg_h if lam == 0.0 else neg_h + lam * np.eye(neg_h.shape[0])
            factor = cho_factor(mat, lower=True)
            return cho_solve(factor, grad)
        except np.linalg.LinAlgError:
            lam = max(1e-8 * base, lam * 10 if lam else 1e-8 * base)
    raise HessianIndefinite("could not stabilize the Newton system")


def laplace_marginal_loglik(
    spec: ModelSpec,
    theta: ParameterVector,
    data: SurveyDataset,
    ctx: FitContext | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    w_init: np.ndarray | None = None,
) -> float:
    """Gaussian-integral approximation of the marginal log-likelihood.

    log L(theta) ~= log g(w_hat, y; theta) + (q/2) log 2pi
                    - log det chol(-H(w_hat))

    where w_hat is the conditional mode and H the curvature of log g there.
    Exact when the observation family is gaussian, and accurate to O(1/m)
    in the binomial denominators otherwise.  Unlike the importance-sampled
    objective this is a smooth deterministic function of theta, which makes
    it the right surface to difference twice for standard errors: curvature
    in directions confounded with the latent field is a small difference of
    two large terms, and simulation noise on that difference would swamp
    the signal at any affordable sample size.
    """
    if ctx is None:
        ctx = FitContext(spec, data)
    lap = laplace_mode(
        spec, theta, data, ctx=ctx, tol=tol, max_iter=max_iter, w_init=w_init
    )
    value = joint_log_density(spec, theta, lap.w_hat, data, ctx=ctx)
    dim = ctx.latent_dim
    if dim == 0:
        return float(value)
    half_logdet = float(np.sum(np.log(np.diag(lap.neg_hessian_chol))))
    return float(value + 0.5 * dim * LOG_2PI - half_logdet)


# ---------------------------------------------------------------------------
# Langevin-Hastings sampling on the standardized latent scale


def mala_sample(
    spec: ModelSpec,
    theta0: ParameterVector,
    laplace: LaplaceFit,
    n_samples: int,
    burn_in: int,
    thin: int,
    rng: np.random.Generator,
    data: SurveyDataset = None,
    ctx: FitContext | None = None,
    target_accept: float = 0.57,
) -> McmcSample:
    """Metropolis-adjusted Langevin chain for W | y; theta0.

    Runs on z = L'(w - w_hat) with L the Cholesky factor of the negative
    Hessian at the mode, so the target is approximately standard normal.
    The step size follows a Robbins-Monro recursion toward the target
    acceptance rate during burn-in and is frozen afterwards.
    """
    if ctx is None:
        ctx = FitContext(spec, data)
    if n_samples < 1 or thin < 1 or burn_in < 0:
        raise ValueError("need n_samples >= 1, thin >= 1, burn_in >= 0")
    dim = ctx.latent_dim
    if dim == 0:
        return McmcSample(
            draws=np.zeros((n_samples, 0)), acceptance_rate=1.0, step_size=0.0
        )
    chol_l = laplace.neg_hessian_chol
    w_hat = laplace.w_hat
    sigma = ctx.latent_cov(theta0)
    prior_factor = cho_factor(sigma, lower=True)

    def to_w(z):
        return w_hat + solve_triangular(chol_l, z, lower=True, trans="T")

    def logp_grad(z):
        w = to_w(z)
        quad = float(w @ cho_solve(prior_factor, w))
        _, dgrad, _, _ = ctx.data_derivs(theta0, w)
        logp = -0.5 * quad + float(ctx.data_loglik(theta0, w))
        grad_w = dgrad - cho_solve(prior_factor, w)
        grad_z = solve_triangular(chol_l, grad_w, lower=True)
        return logp, grad_z

    z = np.zeros(dim)
    logp, grad = logp_grad(z)
    if not np.isfinite(logp):
        raise DivergentChain("initial latent state has non-finite log density")

    h = 1.65 / dim ** (1.0 / 6.0)
    log_h = float(np.log(h))
    total_iters = burn_in + n_samples * thin
    draws = np.empty((n_samples, dim))
    kept = 0
    accepted = 0
    post_burn = 0
    for i in range(1, total_iters + 1):
        h = float(np.exp(log_h))
        noise = rng.standard_normal(dim)
        mean_fwd = z + 0.5 * h * h * grad
        z_prop = mean_fwd + h * noise
        logp_prop, grad_prop = logp_grad(z_prop)
        if np.any(np.isnan(grad_prop)) or np.isnan(logp_prop):
            raise DivergentChain("log density became non-finite during sampling")
        mean_rev = z_prop + 0.5 * h * h * grad_prop
        log_q_fwd = -0.5 * float(np.sum((z_prop - mean_fwd) ** 2)) / (h * h)
        log_q_rev = -0.5 * float(np.sum((z - mean_rev) ** 2)) / (h * h)
        log_alpha = (logp_prop - logp) + (log_q_rev - log_q_fwd)
        accept_prob = float(np.exp(min(0.0, log_alpha)))
        if rng.random() < accept_prob:
            z, logp, grad = z_prop, logp_prop, grad_prop
        if i <= burn_in:
            log_h += (accept_prob - target_accept) / i**0.51
        else:
            post_burn += 1
            accepted += accept_prob
            if post_burn % thin == 0 and kept < n_samples:
                draws[kept] = to_w(z)
                kept += 1
    rate = accepted / max(post_burn, 1)
    return McmcSample(
        draws=draws, acceptance_rate=float(rate), step_size=float(np.exp(log_h))
    )


# ---------------------------------------------------------------------------
# importance-sampled likelihood ratio objective


class MCObjective:
    """log (1/N) sum_s exp[log g(w_s; theta) - log g(w_s; theta0)].

    The prior term depends only on covariance parameters and the data
    term only on regression parameters, so per-sample terms are cached by
    sub-vector. Coordinate-wise finite differencing then recomputes just
    the block a perturbation touches.
    """

    def __init__(self, ctx: FitContext, theta0: ParameterVector, draws: np.ndarray):
        self.ctx = ctx
        self.layout = ctx.layout
        self.draws = np.asarray(draws, dtype=np.float64)
        self.n_draws = self.draws.shape[0]
        self._log_n = float(np.log(self.n_draws))
        self._n_reg = (
            len(self.layout.beta_names)
            + len(self.layout.delta_names)
            + len(self.layout.gamma_names)
        )
        self._prior_cache: dict[bytes, np.ndarray] = {}
        self._data_cache: dict[bytes, np.ndarray] = {}
        packed0 = self.layout.pack(theta0)
        self._ref = self._terms(packed0)

    def _terms(self, packed: np.ndarray):
        reg_key = packed[: self._n_reg].tobytes()
        cov_key = packed[self._n_reg :].tobytes()
        prior = self._prior_cache.get(cov_key)
        if prior is None:
            prior = self._prior_terms(packed)
            self._prior_cache[cov_key] = prior
        dat = self._data_cache.get(reg_key)
        if dat is None:
            theta = self.layout.unpack(packed)
            dat = self.ctx.data_loglik(theta, self.draws)
            self._data_cache[reg_key] = dat
        return prior, dat

    def _prior_terms(self, packed: np.ndarray) -> np.ndarray:
        if self.ctx.latent_dim == 0:
            return np.zeros(self.n_draws)
        theta = self.layout.unpack(packed)
        sigma = self.ctx.latent_cov(theta)
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            return np.full(self.n_draws, -np.inf)
        half_logdet = float(np.sum(np.log(np.diag(chol))))
        sol = solve_triangular(chol, self.draws.T, lower=True)
        quad = np.sum(sol * sol, axis=0)
        dim = self.ctx.latent_dim
        return -0.5 * (dim * LOG_2PI + quad) - half_logdet

    def value(self, packed: np.ndarray) -> float:
        prior, dat = self._terms(np.asarray(packed, dtype=np.float64))
        diff = (prior - self._ref[0]) + (dat - self._ref[1])
        if np.all(diff == 0.0):
            return 0.0
        if not np.any(np.isfinite(diff)):
            return -np.inf
        return float(logsumexp(diff) - self._log_n)

    def ess(self, packed: np.ndarray) -> float:
        """Effective sample size of the importance weights at theta."""
        prior, dat = self._terms(np.asarray(packed, dtype=np.float64))
        diff = (prior - self._ref[0]) + (dat - self._ref[1])
        w = np.exp(diff - np.max(diff))
        return float(np.sum(w) ** 2 / np.sum(w * w))


def mcml_objective(
    spec: ModelSpec,
    theta: ParameterVector,
    theta0: ParameterVector,
    samples: McmcSample,
    data: SurveyDataset,
    ctx: FitContext | None = None,
) -> float:
    """Importance-sampled log likelihood ratio of theta against theta0."""
    if ctx is None:
        ctx = FitContext(spec, data)
    obj = MCObjective(ctx, theta0, samples.draws)
    return obj.value(ctx.layout.pack(theta))


# ---------------------------------------------------------------------------
# initial values


def logistic_irls(
    x: np.ndarray, y: np.ndarray, m: np.ndarray, tol: float = 1e-10, max_iter: int = 100
) -> np.ndarray:
    """Plain iteratively reweighted least squares for binomial counts."""
    from scipy.special import expit

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = x @ beta
        p = expit(eta)
        wts = np.clip(m * p * (1.0 - p), 1e-10, None)
        z = eta + (y - m * p) / wts
        xtw = x.T * wts
        beta_new = np.linalg.solve(xtw @ x, xtw @ z)
        if np.max(np.abs(beta_new - beta)) < tol:
            return beta_new
        beta = beta_new
    return beta


def initial_theta(ctx: FitContext) -> ParameterVector:
    """Default starting point: regression blocks from ordinary logistic
    fits, unit variances, range at the median pairwise distance."""
    from scipy.special import logit as slogit

    data = ctx.data
    layout = ctx.layout
    spec = ctx.spec
    x = np.column_stack([ctx.design.p.matrix, ctx.design.bias.matrix])
    if spec.family == "gaussian":
        coef, *_ = np.linalg.lstsq(x, data.y, rcond=None)
    else:
        y = np.clip(data.y, 0.0, data.m)
        coef = logistic_irls(x, y, np.maximum(data.m, 1))
    nb = len(layout.beta_names)
    beta = coef[:nb]
    delta = coef[nb:]
    gamma = np.zeros(len(layout.gamma_names))
    if len(gamma):
        frac_pos = float(np.clip(np.mean(data.y > 0), 0.05, 0.95))
        names = layout.gamma_names
        if "intercept" in names:
            gamma[names.index("intercept")] = float(slogit(frac_pos))
    from .geometry import pairwise_distances

    u = pairwise_distances(data.xy)
    med = float(np.median(u[np.triu_indices(data.n, k=1)])) if data.n > 1 else 1.0
    med = max(med, 1e-6)
    covs = {}
    if "log_sigma2" in layout.cov_names:
        covs["log_sigma2"] = 0.0
    if "log_phi" in layout.cov_names:
        covs["log_phi"] = float(np.log(med))
    if "log_nu2" in layout.cov_names:
        covs["log_nu2"] = 0.0
    if "log_omega2" in layout.cov_names:
        covs["log_omega2"] = 0.0
    if "log_psi" in layout.cov_names:
        if spec.effects.temporal and data.t is not None:
            dt = np.abs(data.t[:, None] - data.t[None, :])
            medt = float(np.median(dt[np.triu_indices(data.n, k=1)]))
            covs["log_psi"] = float(np.log(max(medt, 1e-6)))
        else:
            covs["log_psi"] = float(np.log(med))
    alpha_z = np.full(len(layout.alpha_pairs), np.arctanh(0.5))
    return ParameterVector(
        beta=beta, delta=delta, gamma=gamma, alpha_z=alpha_z, **covs
    )


# ---------------------------------------------------------------------------
# numerical curvature


def numerical_hessian(f, x0: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian; f is called at O(p^2) points."""
    x0 = np.asarray(x0, dtype=np.float64)
    p = x0.size
    hs = step * np.maximum(1.0, np.abs(x0))
    hess = np.zeros((p, p))
    f0 = f(x0)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = hs[i]
        fp = f(x0 + ei)
        fm = f(x0 - ei)
        hess[i, i] = (fp - 2.0 * f0 + fm) / hs[i] ** 2
    for i in range(p):
        for j in range(i + 1, p):
            ei = np.zeros(p)
            ej = np.zeros(p)
            ei[i] = hs[i]
            ej[j] = hs[j]
            fpp = f(x0 + ei + ej)
            fpm = f(x0 + ei - ej)
            fmp = f(x0 - ei + ej)
            fmm = f(x0 - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * hs[i] * hs[j])
    return hess


# ---------------------------------------------------------------------------
# the outer fitting loop


def fit(
    spec: ModelSpec,
    data: SurveyDataset,
    theta_init: ParameterVector | None = None,
    controls: FitControls | None = None,
    rng: np.random.Generator | int | None = None,
) -> FitResult:
    """Monte Carlo maximum likelihood with iterative theta0 refreshes."""
    controls = controls or FitControls()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ctx = FitContext(
        spec, data, standardize=controls.standardize, fixed=controls.fixed
    )
    _check_design_rank(ctx)
    layout = ctx.layout
    if theta_init is not None:
        theta0_int = _to_internal(ctx, theta_init)
    else:
        theta0_int = initial_theta(ctx)
    packed0 = layout.pack(theta0_int)
    if not np.all(np.isfinite(packed0)):
        raise ValueError("theta_init contains non-finite entries")

    # deterministic pre-fit: polish the moment-based initials on the
    # gaussian-integral marginal before any sampling, so the importance
    # refreshes start near the answer and only have to apply the small
    # correction that the gaussian approximation leaves behind
    if controls.prefit and packed0.size:
        warm_state: dict = {"w": None}

        def _neg_marginal(packed):
            th = layout.unpack(packed)
            try:
                lap0 = laplace_mode(
                    spec,
                    th,
                    data,
                    ctx=ctx,
                    tol=controls.mode_tol,
                    max_iter=controls.mode_max_iter,
                    w_init=warm_state["w"],
                )
            except GeoprevError:
                return 1e10
            warm_state["w"] = lap0.w_hat
            value = joint_log_density(spec, th, lap0.w_hat, data, ctx=ctx)
            if ctx.latent_dim:
                value += 0.5 * ctx.latent_dim * LOG_2PI
                value -= float(np.sum(np.log(np.diag(lap0.neg_hessian_chol))))
            return -float(value)

        pre = minimize(
            _neg_marginal,
            packed0,
            method="L-BFGS-B",
            bounds=_prefit_bounds(layout),
            options={"maxiter": 200, "ftol": 1e-12},
        )
        if np.all(np.isfinite(pre.x)) and pre.fun < 1e10:
            packed0 = np.asarray(pre.x, dtype=np.float64)

    trace = []
    refreshes = 0
    converged = False
    samples_used = 0
    t_start = time.perf_counter()
    obj = None
    for _ in range(controls.max_refreshes):
        theta0 = layout.unpack(packed0)
        lap = laplace_mode(
            spec,
            theta0,
            data,
            ctx=ctx,
            tol=controls.mode_tol,
            max_iter=controls.mode_max_iter,
        )
        sample = mala_sample(
            spec,
            theta0,
            lap,
            controls.n_samples,
            controls.burn_in,
            controls.thin,
            rng,
            ctx=ctx,
            target_accept=controls.target_accept,
        )
        samples_used += sample.draws.shape[0]
        obj = MCObjective(ctx, theta0, sample.draws)
        bounds = [
            (v - controls.trust_radius, v + controls.trust_radius) for v in packed0
        ]
        res = minimize(
            lambda v: -obj.value(v),
            packed0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": controls.max_opt_iter, "ftol": 1e-10},
        )
        packed_new = np.asarray(res.x, dtype=np.float64)
        trace.append(float(-res.fun))
        refreshes += 1
        delta = float(np.max(np.abs(packed_new - packed0)))
        packed0 = packed_new
        if delta < controls.refresh_tol:
            converged = True
            break

    # final stage: one more refresh with a (possibly larger) importance
    # sample and a polish of theta_hat on it.  The extra draws shrink the
    # simulation noise in the point estimate itself, which otherwise
    # inflates the sampling variability of theta_hat beyond what the
    # standard errors account for.
    n_final = controls.final_samples or controls.n_samples
    thin_final = controls.final_thin or controls.thin
    theta0 = layout.unpack(packed0)
    lap = laplace_mode(
        spec,
        theta0,
        data,
        ctx=ctx,
        tol=controls.mode_tol,
        max_iter=controls.mode_max_iter,
    )
    final_sample = mala_sample(
        spec,
        theta0,
        lap,
        n_final,
        controls.burn_in,
        thin_final,
        rng,
        ctx=ctx,
        target_accept=controls.target_accept,
    )
    samples_used += final_sample.draws.shape[0]
    obj = MCObjective(ctx, theta0, final_sample.draws)
    bounds = [
        (v - controls.trust_radius, v + controls.trust_radius) for v in packed0
    ]
    res = minimize(
        lambda v: -obj.value(v),
        packed0,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": controls.max_opt_iter, "ftol": 1e-10},
    )
    packed_hat = np.asarray(res.x, dtype=np.float64)
    trace.append(float(-res.fun))
    refreshes += 1
    converged = float(np.max(np.abs(packed_hat - packed0))) < controls.refresh_tol
    packed0 = packed_hat

    theta_hat_int = layout.unpack(packed0)
    # Standard errors come from the curvature of the (deterministic)
    # gaussian-integral marginal rather than the sampled objective; see
    # laplace_marginal_loglik for why the latter cannot be differenced
    # twice at realistic sample sizes.
    warm = lap.w_hat if ctx.latent_dim else None

    def _marginal(packed):
        return laplace_marginal_loglik(
            spec,
            layout.unpack(packed),
            data,
            ctx=ctx,
            tol=controls.mode_tol,
            max_iter=controls.mode_max_iter,
            w_init=warm,
        )

    hess = numerical_hessian(_marginal, packed0, step=controls.hessian_step)
    info = -hess
    vcov_int = _invert_information(info, layout)
    ess_at_hat = obj.ess(packed0)

    # re-sample at the maximizer so the stored draws for prediction are
    # conditioned at theta_hat exactly
    lap = laplace_mode(
        spec,
        theta_hat_int,
        data,
        ctx=ctx,
        tol=controls.mode_tol,
        max_iter=controls.mode_max_iter,
    )
    sample = mala_sample(
        spec,
        theta_hat_int,
        lap,
        controls.n_samples,
        controls.burn_in,
        controls.thin,
        rng,
        ctx=ctx,
        target_accept=controls.target_accept,
    )
    samples_used += sample.draws.shape[0]

    transform = ctx.design.transform_packed(layout)
    estimates = transform @ packed0
    vcov = transform @ vcov_int @ transform.T
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    ci = np.column_stack([estimates - 1.96 * se, estimates + 1.96 * se])
    theta_hat = layout.unpack(estimates)

    elapsed = time.perf_counter() - t_start
    diagnostics = {
        "acceptance_rate": sample.acceptance_rate,
        "step_size": sample.step_size,
        "ess": ess_at_hat,
        "elapsed_seconds": elapsed,
        "mode_iterations": lap.iterations,
        "degenerate": ctx.degenerate,
    }
    return FitResult(
        theta_hat=theta_hat,
        param_names=layout.names,
        estimates=estimates,
        vcov=vcov,
        se=se,
        ci=ci,
        objective_trace=trace,
        theta0_refreshes=refreshes,
        mc_samples_used=samples_used,
        converged=converged,
        diagnostics=diagnostics,
        spec=spec,
        layout=layout,
        samples=sample,
        data=data,
        controls=controls,
    )


def _to_internal(ctx: FitContext, theta_nat: ParameterVector) -> ParameterVector:
    """Map a natural-scale parameter vector onto the (possibly
    standardized) internal design scale."""
    layout = ctx.layout
    packed_nat = layout.pack(theta_nat)
    transform = ctx.design.transform_packed(layout)
    packed_int = np.linalg.solve(transform, packed_nat)
    return layout.unpack(packed_int)


def _prefit_bounds(layout: ParamLayout) -> list[tuple[float, float]]:
    """Wide boxes keeping the pre-fit away from numerically hostile
    corners (variances between e^-12 and e^8, correlations inside (-1, 1))."""
    bounds = []
    for name in layout.names:
        if name.startswith("log_"):
            bounds.append((-12.0, 8.0))
        elif name.startswith("alpha"):
            bounds.append((-6.0, 6.0))
        else:
            bounds.append((-25.0, 25.0))
    return bounds


def _check_design_rank(ctx: FitContext) -> None:
    """Structural identifiability of the regression blocks, checked before
    any sampling starts.  The covariate and bias designs feed the same
    linear predictor, so they are stacked for the rank test; the
    suitability design is a separate predictor."""
    design = ctx.design
    checks = []
    eta1_cols = []
    eta1_names: list[str] = []
    if design.p.k:
        eta1_cols.append(design.p.matrix)
        eta1_names += [f"beta[{n}]" for n in design.p.names]
    if design.bias.k:
        eta1_cols.append(design.bias.matrix)
        eta1_names += [f"delta[{n}]" for n in design.bias.names]
    if eta1_cols:
        checks.append((np.column_stack(eta1_cols), eta1_names))
    if design.pi.k:
        checks.append(
            (design.pi.matrix, [f"gamma[{n}]" for n in design.pi.names])
        )
    for mat, names in checks:
        if mat.shape[1] == 0:
            continue
        u_svals = np.linalg.svd(mat, compute_uv=False)
        if u_svals[-1] > 1e-10 * max(u_svals[0], 1.0):
            continue
        _, _, vt = np.linalg.svd(mat)
        null = np.abs(vt[-1])
        flagged = [
            names[j] for j in np.where(null > 0.5 * null.max())[0]
        ]
        raise SingularInformation(
            "design is rank deficient; parameters not identified",
            parameters=sorted(flagged),
        )


def _invert_information(info: np.ndarray, layout: ParamLayout) -> np.ndarray:
    if info.size == 0:
        return info
    vals, vecs = np.linalg.eigh(info)
    top = float(np.max(vals))
    if top <= 0.0:
        raise SingularInformation(
            "observed information has no positive curvature",
            parameters=list(layout.names),
        )
    bad = vals < -0.05 * top
    if np.any(bad):
        # materially negative curvature means the quadratic summary was
        # taken too far from the optimum to mean anything
        flat = []
        for k in np.where(bad)[0]:
            load = np.abs(vecs[:, k])
            for j in np.where(load > 0.5 * load.max())[0]:
                flat.append(layout.names[j])
        raise SingularInformation(
            "observed information is indefinite", parameters=sorted(set(flat))
        )
    # near-zero curvature directions (boundary-flat variance components)
    # get a huge but finite variance rather than an error; structural rank
    # problems were already rejected before sampling started
    vals = np.maximum(vals, 1e-8 * top)
    return (vecs / vals) @ vecs.T
