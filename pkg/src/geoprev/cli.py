"""Command line interface.

    geoprev <command> --config run.toml [--seed N] [--out-dir DIR] ...

Commands: simulate, fit, predict, scenario, trend, validate. Exit codes:
0 success, 2 invalid configuration or data, 1 runtime failure.

numpy and everything built on it are imported inside the command
functions, after --threads has had a chance to pin the BLAS thread
pools through the environment.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

HURDLE_NOTE = (
    "warning: the hurdle family treats every zero count as evidence of an "
    "unsuitable community, so it cannot tell a chance finding of no cases "
    "among the sampled children apart from true absence of the disease, "
    "and the fitted surface tends to carve artificial low-prevalence "
    "pockets around all-zero sampling locations. zero_inflated is usually "
    "the safer choice."
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoprev",
        description="Geostatistical prevalence mapping: simulate, fit, predict.",
    )
    sub = parser.add_subparsers(dest="command")
    for name, desc in (
        ("simulate", "draw a synthetic survey from the configured model"),
        ("fit", "Monte Carlo maximum likelihood fit"),
        ("predict", "prevalence and exceedance surfaces at raster sites"),
        ("scenario", "village infection counts under coverage scenarios"),
        ("trend", "region-level prevalence by month"),
        ("validate", "check the config and data files, run nothing"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-dir", default=None, help="override output directory")
        p.add_argument(
            "--threads", type=int, default=None, help="BLAS/OpenMP thread count"
        )
        if name == "predict":
            p.add_argument(
                "--threshold",
                action="append",
                type=float,
                default=None,
                help="exceedance threshold, repeatable",
            )
            p.add_argument(
                "--interval",
                default=None,
                metavar="a,b",
                help="report P(prevalence outside (a, b))",
            )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    from .errors import (
        ConfigError,
        DegenerateGeometry,
        EmptyGrid,
        GeoprevError,
        InfeasibleFrame,
        InvalidAlpha,
        MissingCovariate,
        NoBiasComponent,
        ParseError,
    )

    validation_errors = (
        ConfigError,
        ParseError,
        MissingCovariate,
        NoBiasComponent,
        InfeasibleFrame,
        DegenerateGeometry,
        EmptyGrid,
        InvalidAlpha,
        ValueError,
    )
    handler = _COMMANDS[args.command]
    try:
        return handler(args)
    except validation_errors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GeoprevError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# shared plumbing


def _setup(args, command: str):
    """Config, seed, and output directory for one run."""
    from .config import load_config, validate_config
    from .errors import ConfigError

    cfg = load_config(args.config)
    problems = validate_config(cfg, command)
    if problems:
        raise ConfigError("; ".join(problems))
    seed = cfg.seed if args.seed is None else args.seed
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
    else:
        out_dir = cfg.resolve("out_dir", "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, seed, out_dir


def _finish(cfg, seed: int, out_dir: Path, command: str, outputs: list[Path]) -> int:
    from .dataio import write_manifest

    write_manifest(out_dir, command, seed, cfg.text, [p.name for p in outputs])
    for p in outputs:
        print(f"wrote {p}")
    print(f"wrote {out_dir / 'manifest.json'}")
    return 0


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def _load_fitted(cfg):
    """(data, spec, fit result) from the paths section."""
    from .config import model_spec
    from .dataio import load_fit, load_survey

    data = load_survey(cfg.resolve("data"))
    spec = model_spec(cfg)
    spec.validate_against(data)
    result = load_fit(cfg.resolve("fit"), data=data)
    return data, spec, result


def _village_regions(data, min_points: int = 3) -> dict:
    """Convex hull of each village's sampled locations; villages with
    fewer than three distinct locations are skipped with a warning."""
    import numpy as np

    from .geometry import convex_hull

    regions = {}
    ids = data.village_id
    if ids is None:
        regions["all"] = convex_hull(data.xy)
        return regions
    for vid in sorted(set(ids)):
        xy = data.xy[ids == vid]
        if np.unique(xy, axis=0).shape[0] < min_points:
            print(
                f"warning: village {vid} has fewer than {min_points} distinct "
                "locations, skipped",
                file=sys.stderr,
            )
            continue
        regions[str(vid)] = convex_hull(xy)
    return regions


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    from .config import fit_controls, load_config, model_spec
    from .errors import ConfigError, ParseError
    from .dataio import ingest_summary, load_survey

    cfg = load_config(args.config)
    problems = []
    for key in sorted(cfg.paths):
        if key == "out_dir":
            continue
        path = cfg.resolve(key)
        if not path.exists():
            problems.append(f"[paths] {key} does not exist: {path}")
    spec = None
    try:
        spec = model_spec(cfg)
    except ConfigError as exc:
        problems.append(str(exc))
    try:
        fit_controls(cfg)
    except ConfigError as exc:
        problems.append(str(exc))
    if spec is not None and spec.family == "hurdle":
        print(HURDLE_NOTE, file=sys.stderr)
    data_path = cfg.resolve("data")
    if data_path is not None and data_path.exists():
        try:
            data = load_survey(data_path)
        except ParseError as exc:
            problems.append(str(exc))
        else:
            if spec is not None:
                try:
                    spec.validate_against(data)
                except ValueError as exc:
                    problems.append(str(exc))
            summary = ingest_summary(data)
            for key in sorted(summary):
                print(f"{key}: {summary[key]}")
    if problems:
        for p in problems:
            print(f"problem: {p}", file=sys.stderr)
        return 2
    print("ok")
    return 0


def cmd_simulate(args) -> int:
    import numpy as np

    cfg, seed, out_dir = _setup(args, "simulate")

    from .config import model_spec, true_theta
    from .dataio import write_survey, write_table
    from .simulate import random_design, simulate_dataset

    spec = model_spec(cfg)
    theta = true_theta(cfg, spec)
    sim = cfg.simulate
    rng = np.random.default_rng(seed)
    times = sim.get("times")
    design = random_design(
        int(sim["n"]),
        rng,
        side=float(sim.get("side", 20.0)),
        m=int(sim.get("m", 60)),
        covariates=tuple(sim.get("covariates", [])),
        times=tuple(times) if times is not None else None,
    )
    data, truth = simulate_dataset(spec, theta, design, rng)

    data_path = out_dir / "data.csv"
    write_survey(data_path, data)
    truth_cols = {
        "unit_id": data.unit_id,
        "x": data.xy[:, 0],
        "y": data.xy[:, 1],
    }
    for key in sorted(truth):
        value = truth[key]
        if isinstance(value, np.ndarray) and value.shape == (data.n,):
            truth_cols[key] = value
    truth_path = out_dir / "truth.csv"
    write_table(truth_path, truth_cols)
    return _finish(cfg, seed, out_dir, "simulate", [data_path, truth_path])


def cmd_fit(args) -> int:
    import numpy as np

    cfg, seed, out_dir = _setup(args, "fit")

    from .config import fit_controls, model_spec
    from .dataio import ingest_summary, load_survey, save_fit
    from .inference import fit as run_fit

    data = load_survey(cfg.resolve("data"))
    spec = model_spec(cfg)
    spec.validate_against(data)
    if spec.family == "hurdle":
        print(HURDLE_NOTE, file=sys.stderr)
    controls = fit_controls(cfg)
    result = run_fit(spec, data, controls=controls, rng=np.random.default_rng(seed))

    fit_path = out_dir / "fit.json"
    save_fit(fit_path, result)
    lines = [f"family: {spec.family}", ""]
    summary = ingest_summary(data)
    lines += [f"{key}: {summary[key]}" for key in sorted(summary)]
    lines += ["", result.summary(), ""]
    lines.append(f"converged: {result.converged}")
    lines.append(f"theta0 refreshes: {result.theta0_refreshes}")
    lines.append(f"monte carlo samples: {result.mc_samples_used}")
    lines.append(
        f"mala acceptance rate: {result.diagnostics['acceptance_rate']:.3f}"
    )
    report = "\n".join(lines) + "\n"
    report_path = out_dir / "fit_report.txt"
    report_path.write_text(report, encoding="utf-8")
    print(report, end="")
    return _finish(cfg, seed, out_dir, "fit", [fit_path, report_path])


def _parse_interval(text: str):
    from .errors import ConfigError

    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError("--interval expects two comma-separated numbers: a,b")
    try:
        a, b = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError("--interval expects numbers: a,b") from None
    return a, b


def cmd_predict(args) -> int:
    import numpy as np

    cfg, seed, out_dir = _setup(args, "predict")

    from .dataio import read_raster, write_raster
    from .errors import MissingCovariate
    from .model import TIME_TERM, uses_suitability
    from .predict import (
        ExceedanceQuery,
        conditional_simulate,
        bias_surface,
        exceedance,
        prevalence_map,
    )

    data, spec, result = _load_fitted(cfg)
    sites, times, columns = read_raster(cfg.resolve("raster"))
    if spec.needs_time() and times is None:
        raise MissingCovariate("the model is temporal: raster needs a t column")
    pred = cfg.predict
    n_sims = pred.get("n_sims")
    n_sims = int(n_sims) if n_sims is not None else None
    quantiles = [float(q) for q in pred.get("quantiles", [0.025, 0.5, 0.975])]
    thresholds = [float(c) for c in pred.get("thresholds", [])]
    if args.threshold:
        thresholds.extend(args.threshold)
    interval = pred.get("interval")
    if args.interval is not None:
        interval = _parse_interval(args.interval)

    rng = np.random.default_rng(seed)
    raster = dict(columns)
    if times is not None:
        raster.setdefault(TIME_TERM, times)
    latent = conditional_simulate(
        result, spec, data, sites, n_sims=n_sims, rng=rng, times=times
    )
    suit = None
    if uses_suitability(spec.family):
        suit = conditional_simulate(
            result, spec, data, sites, n_sims=n_sims, rng=rng,
            times=times, component="T",
        )
    surface = prevalence_map(
        latent, result, spec, raster, times=times, suitability_surface=suit
    )

    out_cols = {"mean": surface.mean, "sd": surface.sd}
    for q in quantiles:
        out_cols[f"pctl_{100 * q:g}"] = np.quantile(surface.samples, q, axis=0)
    for c in sorted(set(thresholds)):
        query = ExceedanceQuery(threshold=c)
        out_cols[f"q_{c:.2f}"] = exceedance(surface, query).samples[0]
    if spec.effects.bias:
        ratio = bias_surface(result, spec, data, sites, n_sims=n_sims, rng=rng)
        out_cols["bias_mean"] = ratio.mean
        out_cols["bias_sd"] = ratio.sd
        if interval is not None:
            a, b = float(interval[0]), float(interval[1])
            query = ExceedanceQuery(interval=(a, b))
            out_cols["r"] = exceedance(ratio, query).samples[0]

    out_path = out_dir / "predictions.csv"
    write_raster(out_path, sites, out_cols, times=times)
    return _finish(cfg, seed, out_dir, "predict", [out_path])


def _load_frames(cfg, data):
    """Village frames from the enumeration CSV plus per-village data."""
    import csv

    import numpy as np

    from .dataio import _int
    from .errors import ParseError
    from .geometry import convex_hull
    from .scenario import VillageFrame

    path = cfg.resolve("enumeration")
    frames = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"village_id", "n_children", "n_households"}
        names = set(reader.fieldnames or [])
        missing = required - names
        if missing:
            raise ParseError(1, ",".join(sorted(missing)), "missing required column")
        for idx, record in enumerate(reader, start=2):
            vid = str(record["village_id"])
            mask = data.village_id == vid if data.village_id is not None else None
            if mask is None or not np.any(mask):
                raise ParseError(idx, "village_id", f"village {vid} not in the data")
            sampled = data.subset(mask)
            frames.append(
                VillageFrame(
                    village_id=vid,
                    region=convex_hull(sampled.xy),
                    n_children=_int(record["n_children"], idx, "n_children"),
                    n_households=_int(record["n_households"], idx, "n_households"),
                    sampled=sampled,
                )
            )
    if not frames:
        raise ParseError(2, "village_id", "enumeration file lists no villages")
    return frames


def cmd_scenario(args) -> int:
    import numpy as np

    cfg, seed, out_dir = _setup(args, "scenario")

    from .dataio import write_table
    from .scenario import (
        CAUSALITY_NOTE,
        ScenarioControls,
        ScenarioSpec,
        run_comparison,
    )

    data, spec, result = _load_fitted(cfg)
    frames = _load_frames(cfg, data)
    scen_cfg = cfg.scenario
    intervention = tuple(scen_cfg.get("intervention_terms", ["itn", "irs"]))
    month = scen_cfg.get("month")
    sources = dict(scen_cfg.get("imputation", {}))
    runs = []
    for run in scen_cfg.get("runs", []):
        rule = run.get("coverage_rule", "empirical")
        if isinstance(rule, dict):
            rule = {str(k): float(v) for k, v in rule.items()}
        runs.append(
            ScenarioSpec(
                name=str(run["name"]),
                coverage_rule=rule,
                month=float(run["month"]) if "month" in run else (
                    float(month) if month is not None else None
                ),
                intervention_terms=intervention,
                imputation_sources=sources,
            )
        )
    if len(runs) > 2:
        raise ValueError("at most two [[scenario.runs]] blocks are supported")
    controls = ScenarioControls(
        n_outer=int(scen_cfg.get("n_outer", 200)),
        inner_burn=int(scen_cfg.get("inner_burn", 150)),
        inner_samples=int(scen_cfg.get("inner_samples", 10)),
        inner_thin=int(scen_cfg.get("inner_thin", 5)),
    )
    rng = np.random.default_rng(seed)
    comparison = run_comparison(
        result, spec, data, frames,
        runs[0], runs[1] if len(runs) == 2 else None,
        rng=rng, controls=controls,
    )

    print(CAUSALITY_NOTE)
    outputs = []
    pairs = [(runs[0].name, comparison.base)]
    if len(runs) == 2:
        pairs.append((runs[1].name, comparison.alternative))
    for name, scen_result in pairs:
        path = out_dir / f"scenario_{_safe_name(name)}.csv"
        write_table(path, scen_result.summary())
        outputs.append(path)
    if len(runs) == 2:
        diff_path = out_dir / "scenario_diff.csv"
        write_table(diff_path, comparison.paired_difference())
        outputs.append(diff_path)
    note_path = out_dir / "scenario_report.txt"
    note_path.write_text(CAUSALITY_NOTE + "\n", encoding="utf-8")
    outputs.append(note_path)
    return _finish(cfg, seed, out_dir, "scenario", outputs)


def cmd_trend(args) -> int:
    import numpy as np

    cfg, seed, out_dir = _setup(args, "trend")

    from .dataio import write_table
    from .predict import temporal_trend

    data, spec, result = _load_fitted(cfg)
    trend_cfg = cfg.trend
    months = [float(t) for t in trend_cfg["months"]]
    regions = _village_regions(data)
    if not regions:
        raise ValueError("no region has enough distinct locations for a hull")
    policy = {
        str(k): float(v) for k, v in trend_cfg.get("covariates", {}).items()
    }
    rows = temporal_trend(
        result, spec, data, regions, months,
        covariate_policy=policy or None,
        grid_spacing=float(trend_cfg.get("grid_spacing", 0.5)),
        n_sims=(
            int(trend_cfg["n_sims"]) if "n_sims" in trend_cfg else None
        ),
        rng=np.random.default_rng(seed),
    )
    columns = {
        "village": [r["region"] for r in rows],
        "t": np.array([r["t"] for r in rows]),
        "estimate": np.array([r["estimate"] for r in rows]),
        "lo": np.array([r["lo"] for r in rows]),
        "hi": np.array([r["hi"] for r in rows]),
    }
    out_path = out_dir / "trend.csv"
    write_table(out_path, columns)
    return _finish(cfg, seed, out_dir, "trend", [out_path])


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "scenario": cmd_scenario,
    "trend": cmd_trend,
    "validate": cmd_validate,
}


if __name__ == "__main__":
    sys.exit(main())
