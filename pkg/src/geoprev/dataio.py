"""CSV ingestion, result serialization, and run manifests.

All files are UTF-8 with LF line endings and plain decimal-point
numbers. Survey CSVs are row-validated with positional error reporting;
fit results serialize to JSON (including the retained latent draws, so
prediction and scenarios can reuse a stored fit); every CLI run writes a
manifest holding the configuration hash and seed that reproduce the
outputs byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ParseError
from .inference import FitControls, FitResult, McmcSample
from .model import ModelSpec, Effects, ParameterVector, ParamLayout, SurveyDataset

FORMAT_VERSION = "1"

_CORE_COLUMNS = ("unit_id", "x", "y", "t", "m", "y_pos", "survey_id", "randomised",
                 "village_id")
_TRUE_STRINGS = {"1", "true", "True", "TRUE", "yes"}
_FALSE_STRINGS = {"0", "false", "False", "FALSE", "no"}


def _float(value: str, row: int, column: str, *, finite: bool = True) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ParseError(row, column, f"not a number: {value!r}") from None
    if finite and not np.isfinite(out):
        raise ParseError(row, column, "must be finite")
    return out


def _int(value: str, row: int, column: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(row, column, f"not an integer: {value!r}") from None


def load_survey(path) -> SurveyDataset:
    """Read a survey CSV with columns
    unit_id,x,y,[t],m,y_pos,survey_id,randomised,<covariates...>."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(1, "", "empty file, header row required")
        header = list(reader.fieldnames)
        for required in ("unit_id", "x", "y", "m", "y_pos"):
            if required not in header:
                raise ParseError(1, required, "missing required column")
        has_t = "t" in header
        has_survey = "survey_id" in header
        has_rand = "randomised" in header
        has_village = "village_id" in header
        cov_names = [c for c in header if c not in _CORE_COLUMNS]
        rows = {
            "unit_id": [], "x": [], "y": [], "t": [], "m": [], "y_pos": [],
            "survey_id": [], "randomised": [], "village_id": [],
        }
        covs = {name: [] for name in cov_names}
        for idx, record in enumerate(reader, start=2):
            if None in record or any(v is None for v in record.values()):
                raise ParseError(idx, "", "wrong number of fields")
            rows["unit_id"].append(record["unit_id"])
            rows["x"].append(_float(record["x"], idx, "x"))
            rows["y"].append(_float(record["y"], idx, "y"))
            m = _int(record["m"], idx, "m")
            if m <= 0:
                raise ParseError(idx, "m", f"tested count must be positive, got {m}")
            y_pos = _int(record["y_pos"], idx, "y_pos")
            if y_pos < 0:
                raise ParseError(idx, "y_pos", "positive count cannot be negative")
            if y_pos > m:
                raise ParseError(idx, "y_pos", f"y_pos={y_pos} exceeds m={m}")
            rows["m"].append(m)
            rows["y_pos"].append(y_pos)
            if has_t:
                rows["t"].append(_float(record["t"], idx, "t"))
            if has_survey:
                rows["survey_id"].append(record["survey_id"])
            if has_rand:
                raw = record["randomised"].strip()
                if raw in _TRUE_STRINGS:
                    rows["randomised"].append(True)
                elif raw in _FALSE_STRINGS:
                    rows["randomised"].append(False)
                else:
                    raise ParseError(idx, "randomised", f"not a boolean: {raw!r}")
            if has_village:
                rows["village_id"].append(record["village_id"])
            for name in cov_names:
                covs[name].append(_float(record[name], idx, name))
    n = len(rows["unit_id"])
    if n == 0:
        raise ParseError(2, "", "no data rows")
    dataset = SurveyDataset(
        unit_id=np.array(rows["unit_id"]),
        xy=np.column_stack([rows["x"], rows["y"]]),
        m=np.array(rows["m"], dtype=np.int64),
        y=np.array(rows["y_pos"], dtype=np.float64),
        covariates={k: np.array(v) for k, v in covs.items()},
        t=np.array(rows["t"]) if has_t else None,
        survey_id=np.array(rows["survey_id"]) if has_survey else None,
        randomised=np.array(rows["randomised"]) if has_rand else None,
        village_id=np.array(rows["village_id"]) if has_village else None,
    )
    if np.any(~dataset.randomised) and not np.any(dataset.randomised):
        raise ParseError(
            2, "randomised",
            "non-randomised surveys need at least one randomised survey present",
        )
    return dataset


def ingest_summary(data: SurveyDataset) -> dict:
    """Quick facts reported after loading a survey file."""
    zero_fraction = float(np.mean(data.y == 0))
    return {
        "n_records": data.n,
        "n_surveys": int(data.surveys().size),
        "n_randomised": int(np.sum(data.randomised)),
        "total_tested": int(np.sum(data.m)),
        "total_positive": int(np.sum(data.y)),
        "zero_count_fraction": zero_fraction,
        "crude_prevalence": float(np.sum(data.y) / np.sum(data.m)),
        "has_time": data.t is not None,
    }


def write_survey(path, data: SurveyDataset) -> None:
    """Inverse of load_survey; numbers use repr-exact formatting."""
    path = Path(path)
    cov_names = sorted(data.covariates)
    header = ["unit_id", "x", "y"]
    if data.t is not None:
        header.append("t")
    header += ["m", "y_pos", "survey_id", "randomised"]
    if data.village_id is not None:
        header.append("village_id")
    header += cov_names
    lines = [",".join(header)]
    for i in range(data.n):
        row = [str(data.unit_id[i]), _num(data.xy[i, 0]), _num(data.xy[i, 1])]
        if data.t is not None:
            row.append(_num(data.t[i]))
        row += [str(int(data.m[i])), str(int(data.y[i])),
                str(data.survey_id[i]), "1" if data.randomised[i] else "0"]
        if data.village_id is not None:
            row.append(str(data.village_id[i]))
        row += [_num(data.covariates[c][i]) for c in cov_names]
        lines.append(",".join(row))
    _write_text(path, "\n".join(lines) + "\n")


def _num(value: float) -> str:
    """Shortest exact decimal representation."""
    return repr(float(value))


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# raster CSV


def write_raster(path, sites: np.ndarray, columns: dict, times=None) -> None:
    """Long-format surface table: x, y, [t], then one column per summary."""
    sites = np.asarray(sites, dtype=np.float64)
    header = ["x", "y"]
    if times is not None:
        header.append("t")
    header += list(columns)
    lines = [",".join(header)]
    k = sites.shape[0]
    for i in range(k):
        row = [_num(sites[i, 0]), _num(sites[i, 1])]
        if times is not None:
            row.append(_num(times[i]))
        row += [_num(np.asarray(columns[c]).reshape(k)[i]) for c in columns]
        lines.append(",".join(row))
    _write_text(path, "\n".join(lines) + "\n")


def read_raster(path):
    """Returns (sites, times or None, columns dict)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(1, "", "empty raster file")
        names = list(reader.fieldnames)
        for required in ("x", "y"):
            if required not in names:
                raise ParseError(1, required, "missing required column")
        values = {name: [] for name in names}
        for idx, record in enumerate(reader, start=2):
            for name in names:
                if record[name] is None:
                    raise ParseError(idx, name, "missing field")
                values[name].append(_float(record[name], idx, name))
    sites = np.column_stack([values.pop("x"), values.pop("y")])
    seen = set()
    times = np.array(values.pop("t")) if "t" in values else None
    key_t = times if times is not None else np.zeros(sites.shape[0])
    for i in range(sites.shape[0]):
        key = (sites[i, 0], sites[i, 1], key_t[i])
        if key in seen:
            raise ParseError(i + 2, "x", "duplicate (x, y, t) key")
        seen.add(key)
    return sites, times, {k: np.array(v) for k, v in values.items()}


# ---------------------------------------------------------------------------
# fit serialization


def _spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "family": spec.family,
        "p_terms": list(spec.p_terms),
        "bias_terms": list(spec.bias_terms),
        "pi_terms": list(spec.pi_terms),
        "effects": {
            "spatial": spec.effects.spatial,
            "nugget": spec.effects.nugget,
            "temporal": spec.effects.temporal,
            "bias": spec.effects.bias,
            "suitability": spec.effects.suitability,
        },
        "seasonal_periods": list(spec.seasonal_periods),
        "survey_times": spec.survey_times,
        "gaussian_sd": spec.gaussian_sd,
    }


def spec_from_dict(payload: dict) -> ModelSpec:
    eff = payload.get("effects", {})
    survey_times = payload.get("survey_times")
    if survey_times is not None:
        survey_times = dict(survey_times)
    return ModelSpec(
        family=payload.get("family", "binomial"),
        p_terms=tuple(payload.get("p_terms", ("intercept",))),
        bias_terms=tuple(payload.get("bias_terms", ())),
        pi_terms=tuple(payload.get("pi_terms", ())),
        effects=Effects(
            spatial=eff.get("spatial", True),
            nugget=eff.get("nugget", False),
            temporal=eff.get("temporal", False),
            bias=eff.get("bias", False),
            suitability=eff.get("suitability", False),
        ),
        seasonal_periods=tuple(payload.get("seasonal_periods", ())),
        survey_times=survey_times,
        gaussian_sd=payload.get("gaussian_sd", 1.0),
    )


def save_fit(path, fit: FitResult) -> None:
    """Text serialization of everything prediction and scenarios need."""
    layout = fit.layout
    payload = {
        "format_version": FORMAT_VERSION,
        "spec": _spec_to_dict(fit.spec),
        "layout": {
            "beta_names": list(layout.beta_names),
            "delta_names": list(layout.delta_names),
            "gamma_names": list(layout.gamma_names),
            "cov_names": list(layout.cov_names),
            "alpha_pairs": [list(p) for p in layout.alpha_pairs],
        },
        "param_names": list(fit.param_names),
        "estimates": fit.estimates.tolist(),
        "vcov": fit.vcov.tolist(),
        "se": fit.se.tolist(),
        "ci": fit.ci.tolist(),
        "objective_trace": list(fit.objective_trace),
        "theta0_refreshes": fit.theta0_refreshes,
        "mc_samples_used": fit.mc_samples_used,
        "converged": fit.converged,
        # wall-clock entries stay out so reruns are byte-identical
        "diagnostics": {
            k: _jsonable(v)
            for k, v in fit.diagnostics.items()
            if k != "elapsed_seconds"
        },
        "fixed": dict(fit.controls.fixed) if fit.controls else {},
        "draws": fit.samples.draws.tolist(),
        "acceptance_rate": fit.samples.acceptance_rate,
        "step_size": fit.samples.step_size,
    }
    _write_text(Path(path), json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def load_fit(path, data: SurveyDataset | None = None) -> FitResult:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    spec = spec_from_dict(payload["spec"])
    lay = payload["layout"]
    layout = ParamLayout(
        beta_names=tuple(lay["beta_names"]),
        delta_names=tuple(lay["delta_names"]),
        gamma_names=tuple(lay["gamma_names"]),
        cov_names=tuple(lay["cov_names"]),
        alpha_pairs=tuple(tuple(p) for p in lay["alpha_pairs"]),
    )
    estimates = np.array(payload["estimates"], dtype=np.float64)
    samples = McmcSample(
        draws=np.array(payload["draws"], dtype=np.float64),
        acceptance_rate=payload["acceptance_rate"],
        step_size=payload["step_size"],
    )
    controls = FitControls(fixed=dict(payload.get("fixed", {})))
    return FitResult(
        theta_hat=layout.unpack(estimates),
        param_names=tuple(payload["param_names"]),
        estimates=estimates,
        vcov=np.array(payload["vcov"], dtype=np.float64),
        se=np.array(payload["se"], dtype=np.float64),
        ci=np.array(payload["ci"], dtype=np.float64),
        objective_trace=list(payload["objective_trace"]),
        theta0_refreshes=payload["theta0_refreshes"],
        mc_samples_used=payload["mc_samples_used"],
        converged=payload["converged"],
        diagnostics=dict(payload["diagnostics"]),
        spec=spec,
        layout=layout,
        samples=samples,
        data=data,
        controls=controls,
    )


# ---------------------------------------------------------------------------
# manifest


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(out_dir, command: str, seed: int, config_text: str,
                   outputs: list[str]) -> None:
    """Reproducibility record: rerunning with the same config and seed
    regenerates every listed output byte for byte. No timestamps."""
    payload = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "seed": int(seed),
        "config_sha256": config_hash(config_text),
        "outputs": sorted(outputs),
    }
    _write_text(
        Path(out_dir) / "manifest.json",
        json.dumps(payload, indent=1, sort_keys=True) + "\n",
    )


def write_table(path, columns: dict) -> None:
    """Generic CSV writer for dict-of-columns tables."""
    names = list(columns)
    length = len(np.asarray(columns[names[0]]).reshape(-1)) if names else 0
    lines = [",".join(names)]
    for i in range(length):
        row = []
        for name in names:
            value = columns[name][i]
            if isinstance(value, (float, np.floating)):
                row.append(_num(value))
            else:
                row.append(str(value))
        lines.append(",".join(row))
    _write_text(Path(path), "\n".join(lines) + "\n")
