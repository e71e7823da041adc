"""Command-line interface.

Subcommands: ``simulate``, ``fit``, ``ambiguity``, ``table3`` and
``plot-data``.  Every flag can also come from a ``--config`` file of
``key = value`` lines (keys are flag names without the leading dashes);
flags given on the command line win.  List-valued options take
comma-separated values.

Exit codes: 0 when every requested file was written, 2 for invalid
arguments, 1 for data or fitting errors.  Outputs are staged next to their
targets and renamed only once everything succeeded.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import secrets
import sys
import tempfile
from pathlib import Path

import numpy as np

from .am import AmSpec, SmoothBlock, fit_am
from .ambiguity import compare_models, two_step_test
from .data import DataError, dichotomize, load_csv, schema_for, write_csv
from .ols import (DesignError, DesignSpec, Product, UnknownCovariate, build_design, fit_ols,
                  parse_formula, term_covariates)
from .simulate import (LM_LINEAR, LM_QUADRATIC_X, SCENARIOS, TWO_STEP, cell_means, generate,
                       generate_expectations, generate_reading, run_study, run_table3, scenario,
                       table3_markdown)
from .smooth import DEFAULT_K

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
CORPORA = {"expectations": generate_expectations, "reading": generate_reading}
PIPELINES = {"lm": LM_LINEAR, "lm-quadratic": LM_QUADRATIC_X, "two-step": TWO_STEP}


_UMASK = os.umask(0)
os.umask(_UMASK)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ #
# Output staging
# ------------------------------------------------------------------ #


class Outputs:
    """Collects files in temporary siblings and moves them into place on commit."""

    def __init__(self):
        self._staged: list[tuple[Path, Path]] = []

    def path(self, target) -> Path:
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        os.close(fd)
        os.chmod(tmp, 0o666 & ~_UMASK)
        self._staged.append((Path(tmp), target))
        return Path(tmp)

    def text(self, target, content: str) -> None:
        self.path(target).write_text(content, encoding="utf-8")

    def json(self, target, obj) -> None:
        self.text(target, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")

    def commit(self) -> list[Path]:
        done = []
        try:
            for tmp, target in self._staged:
                os.replace(tmp, target)
                done.append(target)
        except OSError:
            for target in done:
                target.unlink(missing_ok=True)
            raise
        finally:
            self.discard()
        return done

    def discard(self) -> None:
        for tmp, _ in self._staged:
            tmp.unlink(missing_ok=True)
        self._staged.clear()


def _plain(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


# ------------------------------------------------------------------ #
# Argument handling
# ------------------------------------------------------------------ #


def _split(value) -> list[str]:
    if not value:
        return []
    return [v.strip() for v in str(value).split(",") if v.strip()]


def parse_smooths(value) -> list[tuple[str, int]]:
    out = []
    for item in _split(value):
        name, _, k = item.partition(":")
        try:
            out.append((name, int(k) if k else DEFAULT_K))
        except ValueError:
            raise UsageError(f"bad smooth spec {item!r}; expected name or name:k") from None
    return out


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command} needs {flags}")


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(63)
        print(f"seed: {args.seed}", file=sys.stderr)
    return args.seed


def _add_model_flags(p):
    p.add_argument("--input", help="CSV file")
    p.add_argument("--response", help="response column")
    p.add_argument("--smooth", help="smooth mains, e.g. x:10,z:10")
    p.add_argument("--random", help="grouping factors for random intercepts")
    p.add_argument("--factors", help="columns to read as factors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ambigam", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value file supplying flag values")
        p.add_argument("--out", help="output path")
        return p

    p = command("simulate", "generate a scenario dataset or run a Monte Carlo study")
    p.add_argument("--scenario", help=f"one of {', '.join([*SCENARIOS, *CORPORA])}")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="sample size (scenarios only)")
    p.add_argument("--iterations", type=int, help="run a study instead of writing data")
    p.add_argument("--model", choices=sorted(PIPELINES), default="two-step")
    p.add_argument("--records", help="per-iteration CSV (study mode)")

    p = command("fit", "fit a linear, additive or additive mixed model")
    _add_model_flags(p)
    p.add_argument("--terms", help="parametric terms, e.g. 'x, x^2' or '(a+a^2)*lw'")

    p = command("ambiguity", "two-step test for ambiguous interactions")
    _add_model_flags(p)
    p.add_argument("--interaction", help="interaction terms, e.g. x:z")
    p.add_argument("--parametric-mains", help="extra terms for the parametric reference model")
    p.add_argument("--compare", help="parametric formula fitted to data and to step-1 residuals")
    p.add_argument("--threshold", type=float, default=2.0)

    p = command("table3", "run the simulation table")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = command("plot-data", "plot-ready CSV from a fit or a dichotomized dataset")
    p.add_argument("--fit", help="fit JSON written by the fit command")
    p.add_argument("--covariate")
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--input", help="CSV for cell means of dichotomized covariates")
    p.add_argument("--response")
    p.add_argument("--dichotomize", help="two covariates, e.g. x,z")
    p.add_argument("--cut", type=float, default=0.0, help="dichotomization threshold")
    return parser


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` comments; no section header needed."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    config = read_config(args.config)
    config.pop("command", None)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    unknown = sorted(set(config) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    # string defaults go through each flag's type conversion
    subparser.set_defaults(**config)
    return parser.parse_args(argv)


# ------------------------------------------------------------------ #
# Commands
# ------------------------------------------------------------------ #


def cmd_simulate(args, out: Outputs) -> dict:
    _require(args, "scenario", "out")
    sid = args.scenario
    if sid not in SCENARIOS and sid not in CORPORA:
        raise UsageError(f"unknown scenario {sid!r}")
    if args.iterations is not None:
        if sid not in SCENARIOS:
            raise UsageError("studies run on scenarios only")
        if args.iterations < 1:
            raise UsageError("--iterations must be at least 1")
    seed = _seed(args)
    if args.iterations is None:
        if sid in CORPORA:
            ds = CORPORA[sid](seed)
        else:
            ds = generate(scenario(sid, seed, args.n))
        write_csv(ds, out.path(args.out))
        return {"rows": ds.n, "seed": seed}
    summary = run_study(scenario(sid, seed, args.n), PIPELINES[args.model], args.iterations)
    out.json(args.out, summary.to_dict())
    if args.records:
        summary.write_csv(out.path(args.records))
    return {"iterations": args.iterations, "seed": seed}


def _formula(text, factors):
    try:
        return parse_formula(text or "", factors)
    except DesignError as exc:
        raise UsageError(str(exc)) from None


def _model_inputs(args):
    smooths = parse_smooths(args.smooth)
    random = _split(args.random)
    factors = sorted(set(_split(args.factors)) | set(random))
    return smooths, random, factors


def _load(args, numeric, factors):
    numeric = [c for c in dict.fromkeys(numeric) if c not in factors]
    return load_csv(args.input, schema_for(numeric, factors, response=args.response))


def cmd_fit(args, out: Outputs) -> dict:
    _require(args, "input", "response", "out")
    smooths, random, factors = _model_inputs(args)
    terms = _formula(args.terms, factors)
    covs = [c for t in terms for c in term_covariates(t)] + [c for c, _ in smooths]
    ds = _load(args, covs, factors)
    if not smooths and not random:
        design = build_design(DesignSpec(tuple(terms)), ds)
        fit = fit_ols(design.X, ds.numeric(args.response), design.names)
        body = {"model": "LM", "response": args.response, **fit.to_dict(),
                "levels": {k: list(v) for k, v in design.levels.items()}}
    else:
        spec = AmSpec(args.response, smooths, DesignSpec(tuple(terms), intercept=False)
                      if terms else None, random)
        fit = fit_am(spec, ds)
        body = {"model": "AMM" if random else "AM", **fit.to_dict()}
    body["dropped_rows"] = ds.meta.get("dropped_rows", 0)
    out.json(args.out, body)
    return {"model": body["model"], "n": ds.n}


def cmd_ambiguity(args, out: Outputs) -> dict:
    _require(args, "input", "response", "smooth", "interaction", "out")
    smooths, random, factors = _model_inputs(args)
    interactions = _formula(args.interaction, factors)
    covered = {c for c, _ in smooths}
    for term in interactions:
        if not isinstance(term, Product):
            raise UsageError(f"{term.name!r} is not an interaction")
        missing = [c for c in term_covariates(term) if c not in covered]
        if missing:
            raise UsageError(f"interaction {term.name} uses {', '.join(missing)} "
                             "which is not among the smooths")
    mains = _formula(args.parametric_mains, factors)
    compare = _formula(args.compare, factors)
    covs = [c for t in [*interactions, *mains, *compare] for c in term_covariates(t)]
    ds = _load(args, covs + [c for c, _ in smooths], factors)

    spec = AmSpec(args.response, smooths, None, random)
    report = two_step_test(spec, interactions, ds, mains, args.threshold)
    body = report.to_dict()
    body["dropped_rows"] = ds.meta.get("dropped_rows", 0)
    text = report.summary()
    if compare:
        table = compare_models(ds, DesignSpec(tuple(compare)), spec, threshold=args.threshold)
        body["comparison"] = table.to_dict()
        text += "\n\n" + table.to_markdown()
    out.json(args.out, body)
    out.text(Path(args.out).with_suffix(".txt"), text + "\n")
    print(text)
    return {"classification": report.classification}


def cmd_table3(args, out: Outputs) -> dict:
    _require(args, "out")
    if args.iterations < 1:
        raise UsageError("--iterations must be at least 1")
    seed = _seed(args)
    result = run_table3(args.iterations, seed, workers=args.workers)
    stem = Path(args.out)
    stem = stem.with_suffix("") if stem.suffix in (".md", ".json") else stem
    out.json(stem.with_suffix(".json"), result)
    out.text(stem.with_suffix(".md"), table3_markdown(result))
    return {"all_pass": all(r["pass"] for r in result["rows"]) and result["intro"]["pass"]}


def smooth_grid(block: SmoothBlock, size: int) -> tuple[np.ndarray, np.ndarray]:
    """``size`` equispaced points over the knot range; one point is the midpoint."""
    if size < 1:
        raise UsageError("--grid must be at least 1")
    lo, hi = float(block.basis.knots.min()), float(block.basis.knots.max())
    x = np.array([(lo + hi) / 2]) if size == 1 else np.linspace(lo, hi, size)
    return x, block(x)


def cmd_plot_data(args, out: Outputs) -> dict:
    _require(args, "out")
    if args.fit:
        _require(args, "covariate")
        try:
            stored = json.loads(Path(args.fit).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read fit {args.fit}: {exc}") from None
        blocks = {b["covariate"]: b for b in stored.get("blocks", [])}
        if args.covariate not in blocks:
            raise UnknownCovariate(args.covariate)
        x, s = smooth_grid(SmoothBlock.from_dict(blocks[args.covariate]), args.grid)
        lines = [f"{args.covariate},s({args.covariate})"]
        lines += [f"{a:.17g},{b:.17g}" for a, b in zip(x, s)]
        out.text(args.out, "\n".join(lines) + "\n")
        return {"points": len(x)}

    _require(args, "input", "response", "dichotomize")
    pair = _split(args.dichotomize)
    if len(pair) != 2:
        raise UsageError("--dichotomize takes exactly two covariates")
    ds = _load(args, pair, [])
    for name in pair:
        ds = dichotomize(ds, name, args.cut)
    rows = cell_means(ds, args.response, f"{pair[0]}_f", f"{pair[1]}_f")
    cols = [f"{pair[0]}_f", f"{pair[1]}_f", "mean", "se", "n"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(format(r[c], ".17g") if isinstance(r[c], float) else str(r[c])
                              for c in cols))
    out.text(args.out, "\n".join(lines) + "\n")
    return {"cells": len(rows)}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "ambiguity": cmd_ambiguity,
    "table3": cmd_table3,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    out = Outputs()
    try:
        args = parse_args(argv)
        COMMANDS[args.command](args, out)
        for path in out.commit():
            print(f"wrote {path}", file=sys.stderr)
        return EXIT_OK
    except SystemExit as exc:
        # argparse errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        out.discard()


if __name__ == "__main__":
    sys.exit(main())
