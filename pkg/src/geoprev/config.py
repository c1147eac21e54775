"""Run configuration: a TOML file with nested sections.

Sections: top-level ``seed`` (mandatory, no wall-clock fallback),
``[paths]``, ``[model]`` (+ ``[model.effects]``, ``[model.survey_times]``),
``[fit]`` (+ ``[fit.fixed]``), ``[simulate]`` (+ ``[simulate.theta]``),
``[predict]``, ``[scenario]`` (+ ``[[scenario.runs]]``), ``[trend]``.
The full grammar with defaults is documented in the README. Errors carry
the offending line when the parser reports one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .inference import FitControls
from .model import Effects, ModelSpec

_KNOWN_SECTIONS = {
    "seed", "paths", "model", "fit", "simulate", "predict", "scenario", "trend",
}


@dataclass
class RunConfig:
    seed: int
    paths: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    trend: dict = field(default_factory=dict)
    text: str = ""
    base_dir: Path = Path(".")

    def resolve(self, key: str, default=None) -> Path | None:
        """Path entry resolved against the config file's directory."""
        raw = self.paths.get(key, default)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = None
        found = re.search(r"line (\d+)", str(exc))
        if found:
            line = int(found.group(1))
        raise ConfigError(str(exc), line=line) from None
    unknown = set(raw) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "seed" not in raw:
        raise ConfigError("config must set a top-level integer 'seed'")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("'seed' must be an integer")
    cfg = RunConfig(
        seed=seed,
        paths=dict(raw.get("paths", {})),
        model=dict(raw.get("model", {})),
        fit=dict(raw.get("fit", {})),
        simulate=dict(raw.get("simulate", {})),
        predict=dict(raw.get("predict", {})),
        scenario=dict(raw.get("scenario", {})),
        trend=dict(raw.get("trend", {})),
        text=text,
        base_dir=path.parent,
    )
    return cfg


def model_spec(cfg: RunConfig) -> ModelSpec:
    m = cfg.model
    eff = m.get("effects", {})
    if not isinstance(eff, dict):
        raise ConfigError("[model.effects] must be a table of booleans")
    survey_times = m.get("survey_times")
    if survey_times is not None:
        survey_times = {str(k): float(v) for k, v in survey_times.items()}
    try:
        return ModelSpec(
            family=m.get("family", "binomial"),
            p_terms=tuple(m.get("p_terms", ["intercept"])),
            bias_terms=tuple(m.get("bias_terms", [])),
            pi_terms=tuple(m.get("pi_terms", [])),
            effects=Effects(
                spatial=bool(eff.get("spatial", True)),
                nugget=bool(eff.get("nugget", False)),
                temporal=bool(eff.get("temporal", False)),
                bias=bool(eff.get("bias", False)),
                suitability=bool(eff.get("suitability", False)),
            ),
            seasonal_periods=tuple(m.get("seasonal_periods", [])),
            survey_times=survey_times,
            gaussian_sd=float(m.get("gaussian_sd", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [model] section: {exc}") from None


def fit_controls(cfg: RunConfig) -> FitControls:
    f = cfg.fit
    known = {
        "n_samples", "burn_in", "thin", "max_refreshes", "refresh_tol",
        "trust_radius", "max_opt_iter", "mode_tol", "mode_max_iter",
        "target_accept", "hessian_step", "final_samples", "final_thin",
        "prefit", "fixed", "standardize",
    }
    unknown = set(f) - known
    if unknown:
        raise ConfigError(f"unknown [fit] keys: {sorted(unknown)}")
    fixed = {str(k): float(v) for k, v in f.get("fixed", {}).items()}
    try:
        return FitControls(
            n_samples=int(f.get("n_samples", 1000)),
            burn_in=int(f.get("burn_in", 2000)),
            thin=int(f.get("thin", 10)),
            max_refreshes=int(f.get("max_refreshes", 10)),
            refresh_tol=float(f.get("refresh_tol", 1e-3)),
            trust_radius=float(f.get("trust_radius", 3.0)),
            max_opt_iter=int(f.get("max_opt_iter", 100)),
            mode_tol=float(f.get("mode_tol", 1e-8)),
            mode_max_iter=int(f.get("mode_max_iter", 100)),
            target_accept=float(f.get("target_accept", 0.57)),
            hessian_step=float(f.get("hessian_step", 1e-4)),
            final_samples=(
                int(f["final_samples"]) if "final_samples" in f else None
            ),
            final_thin=int(f["final_thin"]) if "final_thin" in f else None,
            prefit=bool(f.get("prefit", True)),
            fixed=fixed,
            standardize=bool(f.get("standardize", True)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [fit] section: {exc}") from None


def true_theta(cfg: RunConfig, spec: ModelSpec):
    """[simulate.theta] natural-scale values -> ParameterVector."""
    import numpy as np

    from .model import ParameterVector

    t = cfg.simulate.get("theta", {})
    if not t:
        raise ConfigError("[simulate.theta] section is required to simulate")

    def _log(name):
        value = t.get(name)
        if value is None:
            return None
        value = float(value)
        if value <= 0:
            raise ConfigError(f"[simulate.theta] {name} must be positive")
        return float(np.log(value))

    alpha = t.get("alpha", [])
    if isinstance(alpha, (int, float)):
        alpha = [alpha]
    alpha_z = np.arctanh(np.asarray(alpha, dtype=np.float64)) if len(alpha) else np.zeros(0)
    return ParameterVector(
        beta=np.asarray(t.get("beta", [0.0]), dtype=np.float64),
        delta=np.asarray(t.get("delta", []), dtype=np.float64),
        gamma=np.asarray(t.get("gamma", []), dtype=np.float64),
        log_sigma2=_log("sigma2"),
        log_phi=_log("phi"),
        log_nu2=_log("nu2"),
        log_omega2=_log("omega2"),
        log_psi=_log("psi"),
        alpha_z=alpha_z,
    )


def validate_config(cfg: RunConfig, command: str) -> list[str]:
    """All validation problems for the given command; empty means OK."""
    problems: list[str] = []
    needs_data = command in ("fit", "predict", "scenario", "trend")
    if needs_data:
        data_path = cfg.resolve("data")
        if data_path is None:
            problems.append("missing [paths] data entry")
        elif not data_path.exists():
            problems.append(f"data file does not exist: {data_path}")
    if command == "predict":
        raster = cfg.resolve("raster")
        if raster is None:
            problems.append("missing [paths] raster entry (prediction sites)")
        elif not raster.exists():
            problems.append(f"raster file does not exist: {raster}")
    if command in ("predict", "scenario", "trend"):
        fit_path = cfg.resolve("fit")
        if fit_path is None:
            problems.append("missing [paths] fit entry (stored fit result)")
        elif not fit_path.exists():
            problems.append(f"fit file does not exist: {fit_path}")
    if command == "scenario":
        enum_path = cfg.resolve("enumeration")
        if enum_path is None:
            problems.append("missing [paths] enumeration entry (village frames)")
        elif not enum_path.exists():
            problems.append(f"enumeration file does not exist: {enum_path}")
        runs = cfg.scenario.get("runs", [])
        if not runs:
            problems.append("[scenario] needs at least one [[scenario.runs]] block")
        for run in runs:
            if "name" not in run:
                problems.append("every [[scenario.runs]] block needs a name")
    if command == "trend":
        months = cfg.trend.get("months")
        if not months:
            problems.append("[trend] needs a months list")
    if command == "simulate":
        if "n" not in cfg.simulate and "locations" not in cfg.simulate:
            problems.append("[simulate] needs n (random design) or a locations file")
        if "theta" not in cfg.simulate:
            problems.append("[simulate.theta] section is required")
    try:
        spec = model_spec(cfg)
    except ConfigError as exc:
        problems.append(str(exc))
        spec = None
    try:
        fit_controls(cfg)
    except ConfigError as exc:
        problems.append(str(exc))
    if spec is not None and command == "simulate" and "theta" in cfg.simulate:
        try:
            theta = true_theta(cfg, spec)
        except ConfigError as exc:
            problems.append(str(exc))
            theta = None
        if theta is not None:
            n_p = len(spec.p_terms) + 2 * len(spec.seasonal_periods)
            if theta.beta.size != n_p:
                problems.append(
                    f"[simulate.theta] beta has {theta.beta.size} entries, "
                    f"model needs {n_p}"
                )
            if spec.effects.bias and theta.delta.size != len(spec.bias_terms):
                problems.append(
                    f"[simulate.theta] delta has {theta.delta.size} entries, "
                    f"model needs {len(spec.bias_terms)}"
                )
            if spec.effects.suitability and theta.gamma.size != len(spec.pi_terms):
                problems.append(
                    f"[simulate.theta] gamma has {theta.gamma.size} entries, "
                    f"model needs {len(spec.pi_terms)}"
                )
            needed = []
            if spec.effects.spatial:
                needed += [("sigma2", theta.log_sigma2), ("phi", theta.log_phi)]
            if spec.effects.nugget:
                needed.append(("nu2", theta.log_nu2))
            if spec.effects.second_process:
                needed += [("omega2", theta.log_omega2), ("psi", theta.log_psi)]
            for name, value in needed:
                if value is None:
                    problems.append(f"[simulate.theta] missing {name}")
    return problems
