"""Shared fixtures and small numerical helpers for the test suite.

Model fits are the expensive part, so the suite builds a few of them once
per session with deliberately light sampler settings and reuses them in
the prediction and scenario tests. Statistical assertions size their
tolerances to those settings.
"""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import geoprev as gp

settings.register_profile(
    "suite",
    max_examples=20,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


# light sampler settings: fast, still accurate enough for smoke-level
# statistical checks
FAST = dict(
    n_samples=150,
    burn_in=150,
    thin=1,
    max_refreshes=2,
    refresh_tol=5e-3,
    final_samples=400,
)


def fast_controls(**over) -> gp.FitControls:
    kw = dict(FAST)
    kw.update(over)
    return gp.FitControls(**kw)


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2.0 * e[i])
    return g


def spatial_spec(nugget=True, extra_terms=()):
    return gp.ModelSpec(
        p_terms=("intercept",) + tuple(extra_terms),
        effects=gp.Effects(spatial=True, nugget=nugget),
    )


def simulate_spatial(seed=0, n=60, side=15.0, m=40, covariates=("elev",),
                     beta=(-1.0, 0.5), sigma2=1.0, phi=2.0, nu2=0.3,
                     village_id=None):
    """One spatial binomial dataset plus the truth record."""
    rng = np.random.default_rng(seed)
    design = gp.random_design(n=n, side=side, m=m, covariates=covariates, rng=rng)
    if village_id is not None:
        design.village_id = np.asarray(village_id)
    spec = gp.ModelSpec(
        p_terms=("intercept",) + tuple(covariates),
        effects=gp.Effects(spatial=True, nugget=nu2 > 0),
    )
    theta = gp.ParameterVector(
        beta=np.asarray(beta, dtype=np.float64),
        log_sigma2=np.log(sigma2),
        log_phi=np.log(phi),
        log_nu2=np.log(nu2) if nu2 > 0 else None,
    )
    data, truth = gp.simulate_dataset(spec, theta, design, rng=rng)
    return spec, theta, data, truth


@pytest.fixture(scope="session")
def spatial_fit_bundle():
    """A fitted spatial binomial model reused across prediction tests."""
    spec, theta, data, truth = simulate_spatial(seed=703)
    fit = gp.fit(spec, data, controls=fast_controls(), rng=np.random.default_rng(42))
    return {"spec": spec, "theta": theta, "data": data, "truth": truth, "fit": fit}


@pytest.fixture(scope="session")
def village_fit_bundle():
    """Fit with villages and an intervention covariate, for scenarios.

    The itn effect is made strong (-1.5) so directional checks have
    plenty of signal at light fitting settings.
    """
    rng = np.random.default_rng(314)
    n = 60
    design = gp.random_design(n=n, side=12.0, m=30, covariates=(), rng=rng)
    design.covariates["itn"] = (rng.random(n) < 0.5).astype(np.float64)
    design.village_id = np.array([f"v{i % 6}" for i in range(n)])
    spec = gp.ModelSpec(
        p_terms=("intercept", "itn"),
        effects=gp.Effects(spatial=True, nugget=False),
    )
    theta = gp.ParameterVector(
        beta=np.array([-0.7, -1.5]), log_sigma2=np.log(0.8), log_phi=np.log(2.5)
    )
    data, truth = gp.simulate_dataset(spec, theta, design, rng=rng)
    fit = gp.fit(spec, data, controls=fast_controls(), rng=rng)
    frames = []
    for vid in sorted(set(design.village_id)):
        mask = design.village_id == vid
        sub = data.subset(mask)
        region = gp.convex_hull(sub.xy)
        frames.append(
            gp.VillageFrame(
                village_id=vid,
                region=region,
                n_children=int(sub.m.sum()) + 40,
                n_households=sub.n + 4,
                sampled=sub,
            )
        )
    return {"spec": spec, "theta": theta, "data": data, "truth": truth,
            "fit": fit, "frames": frames}
