"""Command-line pipeline: aggregate -> estimate -> validate, plus simulate and report.

Exit codes: 0 success, 1 internal error, 2 input or validation error,
3 convergence failure under ``--strict``.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, aggregate, frame, ingest, mrp, synth, validate
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("trace_mrp")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONVERGENCE = 0, 1, 2, 3


class InputError(Exception):
    def __init__(self, message: str, path: Path | None = None):
        super().__init__(message)
        self.path = path


class ConvergenceFailure(Exception):
    pass


# --- provenance ---------------------------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_echo(cfg: RunConfig) -> dict:
    # where results are written does not affect them
    d = cfg.to_dict()
    d.pop("output_dir", None)
    return d


def metadata(cfg: RunConfig, inputs: dict[str, Path]) -> dict:
    echo = _config_echo(cfg)
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return {
        "tool": "trace-mrp",
        "tool_version": __version__,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "config": echo,
        "input_digests": {k: file_digest(p) for k, p in sorted(inputs.items())},
    }


def _created_at() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def update_manifest(out_dir: Path, meta: dict, artifacts: list[Path]) -> None:
    """Record provenance and digests of ``artifacts`` in ``manifest.json``."""
    path = out_dir / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {"artifacts": {}}
    doc.update(
        tool_version=meta["tool_version"],
        config_hash=meta["config_hash"],
        created_at=_created_at(),
    )
    doc.setdefault("input_digests", {}).update(meta["input_digests"])
    for a in artifacts:
        doc["artifacts"][a.name] = {"sha256": file_digest(a), "config_hash": meta["config_hash"]}
    doc["artifacts"] = dict(sorted(doc["artifacts"].items()))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _need(path: Path | None, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} file configured")
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} file not found: {path}", path)
    return path


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.output_dir is None:
        raise InputError("--output-dir is required")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _reference_date(cfg: RunConfig) -> dt.date:
    if cfg.reference_date is None:
        raise InputError("reference_date is not configured")
    return cfg.reference_date


# --- commands ---------------------------------------------------------------------------

def cmd_aggregate(cfg: RunConfig, drop_invalid: bool = False) -> Path:
    out = _out_dir(cfg)
    tweets_path = _need(cfg.tweets, "tweets")
    users_path = _need(cfg.users, "users")
    ref = _reference_date(cfg)
    tweets = ingest.parse_tweets(tweets_path, ref, cfg.window_months,
                                 on_invalid="drop" if drop_invalid else "raise")
    profiles = ingest.parse_users(users_path, cfg.labels)
    table = aggregate.build_user_table(tweets, profiles, ref, cfg.window_months, cfg.threshold)

    meta = metadata(cfg, {"tweets": tweets_path, "users": users_path})
    target = out / "users_aggregated.csv"
    aggregate.write_user_table(table, target)
    diag = out / "aggregate.json"
    _dump(diag, {
        "metadata": meta,
        "tweets": {"rows": tweets.attrs["accepted"] + tweets.attrs["rejected"],
                   "accepted": tweets.attrs["accepted"], "rejected": tweets.attrs["rejected"],
                   "in_window": int(tweets["in_window"].sum())},
        "profiles": {"rows": int(len(profiles)), "duplicates": profiles.attrs["duplicates"]},
        "users": dict(table.attrs),
    })
    update_manifest(out, meta, [target, diag])
    return target


def _users_aggregated(cfg: RunConfig, explicit: Path | None) -> Path:
    if explicit is not None:
        return _need(explicit, "aggregated users")
    return _need(_out_dir(cfg) / "users_aggregated.csv", "aggregated users")


def _fit_and_tabulate(cfg: RunConfig, users: pd.DataFrame, census: pd.DataFrame, outcome: str):
    spec = mrp.MrpSpec(
        outcome_kind="binary" if outcome == "dummy" else "continuous",
        inner_max_iter=cfg.inner_max_iter,
        outer_max_iter=cfg.outer_max_iter,
    )
    fitted = mrp.fit(spec, users, outcome, cfg.labels)
    pop = frame.census_vector(census, cfg.labels)
    post = mrp.estimate(fitted, pop)
    return fitted, mrp.estimates_table(users, outcome, post, cfg.labels)


def cmd_estimate(cfg: RunConfig, users_aggregated: Path | None = None, strict: bool = False) -> mrp.MrpFit:
    out = _out_dir(cfg)
    users_path = _users_aggregated(cfg, users_aggregated)
    census_path = _need(cfg.census, "census")
    users = aggregate.read_user_table(users_path, cfg.labels)
    census = ingest.parse_census(census_path, cfg.labels)
    fitted, table = _fit_and_tabulate(cfg, users, census, cfg.outcome)

    meta = metadata(cfg, {"users_aggregated": users_path, "census": census_path})
    meta["outcome"] = cfg.outcome
    fit_path, est_path, cells_path = out / "fit.json", out / "estimates.csv", out / "cells.csv"
    mrp.write_fit(fitted, fit_path, meta)
    mrp.write_estimates(table, est_path)
    frame.write_cells(frame.collapse(users, cfg.outcome, census, cfg.labels), cells_path)
    update_manifest(out, meta, [fit_path, est_path, cells_path])
    if not fitted.converged:
        log.warning("MRP fit did not converge; converged=false recorded in fit.json")
        if strict:
            raise ConvergenceFailure("MRP fit did not converge within the iteration caps")
    return fitted


def _mrp_dummy_regions(cfg: RunConfig, out: Path, users: pd.DataFrame, census: pd.DataFrame) -> dict:
    fit_path, est_path = out / "fit.json", out / "estimates.csv"
    if fit_path.is_file() and est_path.is_file():
        if json.loads(fit_path.read_text()).get("outcome_kind") == "binary":
            est = mrp.read_estimates(est_path)
            reg = est[est["level"] == "region"]
            return {k: (None if pd.isna(v) else float(v)) for k, v in zip(reg["key"], reg["mrp"])}
    _, table = _fit_and_tabulate(cfg, users, census, "dummy")
    reg = table[table["level"] == "region"]
    return dict(zip(reg["key"], reg["mrp"]))


def build_report(cfg: RunConfig, users: pd.DataFrame, survey: pd.DataFrame, census: pd.DataFrame,
                 mrp_regions: dict) -> validate.ValidationReport:
    labels = cfg.labels
    survey = ingest.add_survey_outcomes(survey)
    series = {
        "survey_dummy": (survey, "dummy"),
        "survey_score": (survey, "score"),
        **{f"survey_{m}": (survey, m) for m in cfg.survey_metrics},
        "trace_dummy": (users, "dummy"),
        "trace_score": (users, "score"),
    }
    desc = []
    tables = {}
    for name, (df, col) in series.items():
        present = df[df[col].notna()]
        desc.append(validate.descriptives(present[col].to_numpy(), name))
        tables[name] = frame.collapse(present, col, census, labels)
    heat = validate.heatmap(tables)
    bias = validate.bias_report(users, survey, census, labels)
    regional = validate.regional_table(
        validate.region_means(survey, "dummy", labels),
        validate.region_means(survey, "score", labels),
        validate.region_means(users, "dummy", labels),
        mrp_regions,
        validate.region_means(users, "score", labels),
        labels,
    )
    return validate.ValidationReport(desc, heat, bias, regional)


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def cmd_validate(cfg: RunConfig, users_aggregated: Path | None = None) -> validate.ValidationReport:
    out = _out_dir(cfg)
    survey_path = _need(cfg.survey, "survey")
    census_path = _need(cfg.census, "census")
    users_path = _users_aggregated(cfg, users_aggregated)
    users = aggregate.read_user_table(users_path, cfg.labels)
    census = ingest.parse_census(census_path, cfg.labels)
    survey = ingest.parse_survey(survey_path, cfg.labels, cfg.survey_metrics)
    report = build_report(cfg, users, survey, census, _mrp_dummy_regions(cfg, out, users, census))
    report.metadata = metadata(cfg, {"users_aggregated": users_path, "census": census_path,
                                     "survey": survey_path})

    paths = [out / n for n in ("report.json", "heatmap.csv", "bias.csv", "regional.csv")]
    _dump(paths[0], report.to_dict())
    _write_csv(report.heatmap.long(), paths[1])
    _write_csv(report.bias, paths[2])
    _write_csv(report.regional, paths[3])
    update_manifest(out, report.metadata, paths)
    return report


def cmd_simulate(cfg: RunConfig, replicates: int = 0, n_trace_users: int | None = None,
                 n_survey: int | None = None) -> dict:
    out = _out_dir(cfg)
    base = synth.SynthSpec(seed=cfg.seed, labels=cfg.labels,
                           reference_date=cfg.reference_date or synth.SynthSpec.reference_date,
                           window_months=cfg.window_months,
                           survey_metrics=cfg.survey_metrics or synth.SynthSpec.survey_metrics)
    if n_trace_users is not None:
        base = replace(base, n_trace_users=n_trace_users)
    if n_survey is not None:
        base = replace(base, n_survey=n_survey)
    data = synth.generate(base)
    paths = synth.write(data, out / "data")
    table = synth.run_pipeline(data, cfg.threshold)
    evaluation = {
        "seed": base.seed,
        "truth": {"national": data.truth.national, "per_region": data.truth.per_region},
        "estimates": {
            "national": {c: float(table.iloc[0][c]) for c in ("disaggregated", "mrp")},
        },
        "abs_error": synth.evaluate(table, data.truth),
    }
    written = list(paths.values())
    if replicates:
        reps = synth.run_replicates(base, replicates)
        rep_path = out / "replicates.csv"
        _write_csv(reps, rep_path)
        evaluation["replicates"] = synth.summarize_replicates(reps)
        written.append(rep_path)
    meta = metadata(cfg, {})
    meta["synth_spec"] = base.to_dict()
    evaluation["metadata"] = meta
    eval_path = out / "evaluation.json"
    _dump(eval_path, evaluation)
    update_manifest(out, meta, [eval_path, *written])
    return evaluation


def cmd_report(cfg: RunConfig, strict: bool = False, drop_invalid: bool = False) -> validate.ValidationReport:
    users_path = cmd_aggregate(cfg, drop_invalid)
    cmd_estimate(cfg, users_path, strict)
    return cmd_validate(cfg, users_path)


# --- argument parsing -----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--output-dir", type=Path, required=True)
    p.add_argument("--tweets", type=Path)
    p.add_argument("--users", type=Path)
    p.add_argument("--census", type=Path)
    p.add_argument("--survey", type=Path)
    p.add_argument("--reference-date", type=dt.date.fromisoformat)
    p.add_argument("--window-months", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--genders")
    p.add_argument("--age-groups")
    p.add_argument("--regions")
    p.add_argument("--survey-metrics")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trace-mrp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="tweets + profiles -> users_aggregated.csv")
    _common(p)
    p.add_argument("--drop-invalid", action="store_true", help="drop rows with prob outside [0, 1]")

    for name, helptext in (("estimate", "users_aggregated.csv + census -> fit.json, estimates.csv"),
                           ("validate", "survey comparison -> report.json and plot CSVs"),
                           ("report", "aggregate, estimate and validate in one run")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--outcome", choices=("dummy", "score"))
        p.add_argument("--users-aggregated", type=Path)
        p.add_argument("--inner-max-iter", type=int)
        p.add_argument("--outer-max-iter", type=int)
        p.add_argument("--strict", action="store_true", help="exit 3 when the MRP fit does not converge")
        p.add_argument("--drop-invalid", action="store_true")

    p = sub.add_parser("simulate", help="synthetic population, biased trace, survey and evaluation")
    _common(p)
    p.add_argument("--replicates", type=int, default=0)
    p.add_argument("--n-trace-users", type=int)
    p.add_argument("--n-survey", type=int)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "output_dir": args.output_dir,
        "tweets": args.tweets,
        "users": args.users,
        "census": args.census,
        "survey": args.survey,
        "reference_date": args.reference_date,
        "window_months": args.window_months,
        "threshold": args.threshold,
        "genders": args.genders,
        "age_groups": args.age_groups,
        "regions": args.regions,
        "survey_metrics": args.survey_metrics,
        "seed": args.seed,
        "outcome": getattr(args, "outcome", None),
        "inner_max_iter": getattr(args, "inner_max_iter", None),
        "outer_max_iter": getattr(args, "outer_max_iter", None),
    }
    if args.config is not None and not args.config.is_file():
        raise InputError(f"config file not found: {args.config}", args.config)
    return load_config(args.config, **overrides)


def _error(code: int, kind: str, message: str, path: Path | None = None) -> int:
    block = {"error": {"code": code, "type": kind, "message": message}}
    if path is not None:
        block["error"]["path"] = str(path)
    print(json.dumps(block), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "aggregate":
            cmd_aggregate(cfg, args.drop_invalid)
        elif args.command == "estimate":
            cmd_estimate(cfg, args.users_aggregated, args.strict)
        elif args.command == "validate":
            cmd_validate(cfg, args.users_aggregated)
        elif args.command == "report":
            cmd_report(cfg, args.strict, args.drop_invalid)
        elif args.command == "simulate":
            cmd_simulate(cfg, args.replicates, args.n_trace_users, args.n_survey)
    except ConvergenceFailure as exc:
        return _error(EXIT_CONVERGENCE, "convergence", str(exc))
    except InputError as exc:
        return _error(EXIT_INPUT, "input", str(exc), exc.path)
    except FileNotFoundError as exc:
        return _error(EXIT_INPUT, "input", str(exc), Path(exc.filename) if exc.filename else None)
    except (ingest.IngestError, ConfigError, mrp.SeparationError, ValueError, KeyError) as exc:
        return _error(EXIT_INPUT, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        return _error(EXIT_INTERNAL, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
