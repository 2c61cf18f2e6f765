"""Command-line entry point: simulate | train | decode | agree | report.

Exit codes: 0 success, 1 input validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .hmm import BaumWelchConfig, ImpossibleObservationError, fit_restarts
from .params import (
    InputError,
    ModelParameters,
    published_parameters,
    random_parameters,
    smoothed_table_parameters,
)
from .pipeline import (
    DEFAULT_WINDOW,
    MISSING,
    PipelineConfig,
    StudyWindow,
    aggregate_to_weeks,
    load_sequences,
    read_districts,
    read_reports,
    source_grids,
    write_coverage,
    write_districts,
    write_exclusions,
    write_reports,
)
from .reporting import (
    MODEL_NAME,
    UNKNOWN,
    agreement_from_grids,
    agreement_samples,
    agreement_ttest,
    assign_labels,
    decode_all,
    read_decodes,
    state_snapshot,
    trend_report,
    write_agreement,
    write_decodes,
    write_snapshot,
    write_trend,
)
from .synthetic import GeneratorConfig, generate, write_truth

log = logging.getLogger("modality_hmm")

CONFIG_SECTIONS = ("pipeline", "simulate", "train", "decode", "agree", "report")
TRAIN_DEFAULTS = {
    "init": "random",
    "restarts": 3,
    "max_iters": 200,
    "tol": 1e-4,
    "pseudocount": 1e-6,
    "jobs": 1,
}


# ------------------------------------------------------------------ helpers


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text) if p.suffix in (".yaml", ".yml") else json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: invalid YAML ({exc})") from None
    data = data or {}
    if not isinstance(data, dict):
        raise InputError(f"{path}: top level must be a mapping")
    extra = set(data) - set(CONFIG_SECTIONS)
    if extra:
        raise InputError(f"{path}: unknown config key(s) {sorted(extra)}")
    return data


def _section(cfg, name, defaults=None, allowed=None):
    sec = dict(defaults or {})
    given = cfg.get(name) or {}
    if not isinstance(given, dict):
        raise InputError(f"config key '{name}' must be a mapping")
    allowed = set(allowed or sec)
    extra = set(given) - allowed
    if extra:
        raise InputError(f"unknown config key(s) {[f'{name}.{k}' for k in sorted(extra)]}")
    sec.update(given)
    return sec


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.replace(microsecond=0).isoformat()


def _parse_date(text, flag):
    try:
        return date.fromisoformat(text)
    except (TypeError, ValueError):
        raise InputError(f"{flag}: expected an ISO date (YYYY-MM-DD), got {text!r}") from None


class Run:
    """Collects what a subcommand read and wrote, then writes ``manifest.json``."""

    def __init__(self, args, subcommand):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.seed = args.seed
        self.started = _timestamp()
        self.inputs: dict[str, dict] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.extra: dict = {}

    def input(self, role, path):
        if path is None:
            return None
        p = Path(path)
        if not p.exists():
            raise InputError(f"{role}: file not found: {path}")
        self.inputs[role] = {"file": p.name, "sha256": sha256(p)}
        return p

    def path(self, name) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self):
        manifest = {
            "subcommand": self.subcommand,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": {name: sha256(self.out / name) for name in sorted(set(self.outputs))},
            "started_at": self.started,
            "finished_at": _timestamp(),
            **self.extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ simulate


def _simulate_config(sec, seed) -> GeneratorConfig:
    if sec.get("parameters"):
        params = ModelParameters.load(sec["parameters"])
    else:
        params = published_parameters()
    try:
        n_districts = int(sec.get("n_districts", 2000))
        n_weeks = int(sec.get("n_weeks", 42))
    except (TypeError, ValueError):
        raise InputError("simulate.n_districts / simulate.n_weeks: must be integers") from None
    miss = sec.get("missingness", "published")
    if miss == "published":
        miss = None
    elif isinstance(miss, dict):
        unknown = set(miss) - set(params.sources)
        if unknown:
            raise InputError(f"simulate.missingness: unknown source(s) {sorted(unknown)}")
        miss = np.array([float(miss.get(s, 0.0)) for s in params.sources])
    elif miss is not None:
        miss = np.asarray(miss, dtype=float)
    schedule = sec.get("schedule")
    if schedule:
        cfg0 = GeneratorConfig(params, max(n_districts, 1), max(n_weeks, 1), miss, seed)
        table = np.array(cfg0.schedule(), dtype=float)
        for k, piece in enumerate(schedule):
            try:
                lo, hi = piece["weeks"]
                vals = piece["missingness"]
            except (KeyError, TypeError, ValueError):
                raise InputError(f"simulate.schedule[{k}]: needs 'weeks': [first, last] and 'missingness'") from None
            for s, v in vals.items():
                if s not in params.sources:
                    raise InputError(f"simulate.schedule[{k}].missingness: unknown source {s!r}")
                table[int(lo) : int(hi) + 1, params.sources.index(s)] = float(v)
        miss = table
    first = sec.get("first_week")
    first = _parse_date(str(first), "simulate.first_week") if first else DEFAULT_WINDOW.first_week
    return GeneratorConfig(params, n_districts, n_weeks, miss, seed, first)


def cmd_simulate(args, cfg):
    sec = _section(
        cfg, "simulate", {"n_districts": 2000, "n_weeks": 42, "missingness": "published"},
        allowed={"n_districts", "n_weeks", "missingness", "schedule", "parameters", "first_week", "seed"},
    )
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    args.seed = seed
    gen_cfg = _simulate_config(sec, seed)
    run = Run(args, "simulate")
    if sec.get("parameters"):
        run.input("parameters", sec["parameters"])
    corpus = generate(gen_cfg)
    params = gen_cfg.parameters
    write_reports(run.path("reports.csv"), corpus.reports())
    write_districts(run.path("districts.csv"), corpus.districts)
    write_truth(run.path("truth.csv"), corpus)
    params.save(run.path("truth_params.json"))

    pipe = PipelineConfig.from_dict(cfg.get("pipeline"))
    pipe.window = StudyWindow.from_weeks(gen_cfg.first_week, gen_cfg.n_weeks, pipe.window.week_start_day)
    pipe.sources = params.sources
    resolved = dict(cfg)
    resolved["pipeline"] = pipe.to_dict()
    resolved.pop("simulate", None)
    (run.path("config.json")).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    cells = gen_cfg.n_districts * gen_cfg.n_weeks
    observed = np.zeros(params.n_sources, dtype=np.int64)
    for seq in corpus.sequences:
        observed += (seq.grid != MISSING).sum(axis=0)
    expected = 1.0 - gen_cfg.schedule().mean(axis=0)
    run.config = {
        "n_districts": gen_cfg.n_districts,
        "n_weeks": gen_cfg.n_weeks,
        "first_week": gen_cfg.first_week.isoformat(),
        "missingness": gen_cfg.missingness.tolist(),
        "sources": list(params.sources),
    }
    run.extra["coverage"] = {
        s: {
            "district_weeks": int(observed[i]),
            "rate": float(observed[i] / cells),
            "configured_rate": float(expected[i]),
        }
        for i, s in enumerate(params.sources)
    }
    run.finish()
    log.info("simulated %d districts x %d weeks into %s", gen_cfg.n_districts, gen_cfg.n_weeks, run.out)


# ------------------------------------------------------------------ train


def _initial_params(kind, sources, rng, init_file=None):
    if kind == "random":
        return random_parameters(rng, len(sources), sources=sources)
    if kind == "smoothed-table":
        return smoothed_table_parameters(sources)
    if kind == "file":
        if not init_file:
            raise InputError("--init file requires --init-file PATH")
        p = ModelParameters.load(init_file)
        if p.sources != tuple(sources):
            raise InputError(
                f"{init_file}: sources {list(p.sources)} do not match pipeline.sources {list(sources)}"
            )
        return p
    raise InputError(f"--init: unknown initialization {kind!r}")


def cmd_train(args, cfg):
    sec = _section(cfg, "train", TRAIN_DEFAULTS)
    for key, flag in (("init", "init"), ("restarts", "restarts"), ("max_iters", "max_iters"),
                      ("tol", "tol"), ("pseudocount", "pseudocount"), ("jobs", "jobs")):
        if getattr(args, flag) is not None:
            sec[key] = getattr(args, flag)
    seed = args.seed if args.seed is not None else 0
    args.seed = seed
    pipe = PipelineConfig.from_dict(cfg.get("pipeline"))
    cutoff = _parse_date(args.cutoff_date, "--cutoff-date") if args.cutoff_date else None
    run = Run(args, "train")
    reports = run.input("reports", args.reports)
    districts = run.input("districts", args.districts)
    init_file = run.input("init_file", args.init_file)
    data = load_sequences(reports, districts, pipe, cutoff)
    sequences = data["sequences"]
    if not sequences:
        raise InputError(f"{args.reports}: no eligible district has any report in the window")

    bw = BaumWelchConfig(
        max_iters=int(sec["max_iters"]), tol=float(sec["tol"]), pseudocount=float(sec["pseudocount"]),
        n_jobs=int(sec["jobs"]),
    )
    restarts = int(sec["restarts"]) if sec["init"] == "random" else 1
    if restarts < 1:
        raise InputError("train.restarts: must be >= 1")
    inits = (
        _initial_params(sec["init"], pipe.sources, np.random.default_rng([seed, r]), init_file)
        for r in range(restarts)
    )
    best = fit_restarts(sequences, inits, bw)

    params = best.params
    if bw.max_iters > 0:
        labels = assign_labels(decode_all(params, sequences), sequences)
        params = labels.apply(params)
        with open(run.path("labels.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["cluster", "modality", "n_remote", "n_hybrid", "n_inperson"])
            for c, m in enumerate(labels.mapping):
                w.writerow([c, params.states[m], *labels.counts[c].tolist()])
    params.save(run.path("params.json"))
    with open(run.path("trace.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "log_likelihood"])
        for i, v in enumerate(best.trace):
            w.writerow([i, repr(float(v))])
    write_coverage(run.path("coverage.csv"), data["coverage"])
    write_exclusions(run.path("exclusions.csv"), data["exclusions"])
    run.config = {
        "pipeline": pipe.to_dict(),
        "train": {**sec, "cutoff_date": cutoff.isoformat() if cutoff else None},
    }
    run.extra["coverage"] = data["coverage"].to_dict()
    run.extra["n_sequences"] = len(sequences)
    run.extra["log_likelihood"] = best.log_likelihood
    run.finish()


# ------------------------------------------------------------------ decode


def cmd_decode(args, cfg):
    sec = _section(cfg, "decode", {"mode": "posterior", "threshold": 0.75})
    if args.mode is not None:
        sec["mode"] = args.mode
    if args.threshold is not None:
        sec["threshold"] = args.threshold
    pipe = PipelineConfig.from_dict(cfg.get("pipeline"))
    run = Run(args, "decode")
    params_path = run.input("params", args.params)
    params = ModelParameters.load(params_path)
    if params.sources != pipe.sources:
        raise InputError(
            f"{args.params}: channel order {list(params.sources)} does not match "
            f"pipeline.sources {list(pipe.sources)}"
        )
    data = load_sequences(run.input("reports", args.reports), run.input("districts", args.districts), pipe)
    decodes = decode_all(params, data["sequences"], sec["mode"], float(sec["threshold"]))
    write_decodes(run.path("decode.csv"), decodes)
    write_coverage(run.path("coverage.csv"), data["coverage"])
    run.config = {"pipeline": pipe.to_dict(), "decode": sec}
    n_weeks = sum(d.n_weeks for d in decodes)
    n_high = sum(int(d.high_confidence.sum()) for d in decodes)
    run.extra["decoded_district_weeks"] = n_weeks
    run.extra["high_confidence_district_weeks"] = n_high
    run.finish()


# ------------------------------------------------------------------ agree


def _combined_grids(decodes, cells, sources, window):
    grids = source_grids(cells, [d.entity_id for d in decodes], sources, window)
    out = []
    for d in decodes:
        g = np.hstack([grids[d.entity_id].astype(np.int64), np.full((window.n_weeks, 1), MISSING)])
        off = window.index_of(d.start_week)
        for t in range(d.n_weeks):
            if 0 <= off + t < window.n_weeks:
                g[off + t, -1] = d.states[t]
        out.append(g)
    return out


def cmd_agree(args, cfg):
    sec = _section(cfg, "agree", {"unit": "district"})
    if args.unit is not None:
        sec["unit"] = args.unit
    pipe = PipelineConfig.from_dict(cfg.get("pipeline"))
    run = Run(args, "agree")
    decodes = read_decodes(run.input("decode", args.decode))
    reports = read_reports(run.input("reports", args.reports), pipe)
    cells = aggregate_to_weeks(reports, pipe.window)
    grids = _combined_grids(decodes, cells, pipe.sources, pipe.window)
    providers = pipe.sources + (MODEL_NAME,)
    m = agreement_from_grids(grids, providers)
    write_agreement(run.path("agreement_matrix.csv"), run.path("agreement_long.csv"), m)

    hmm_i = len(providers) - 1
    with open(run.path("ttest.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source", "comparator", "n_hmm", "n_comparator", "mean_hmm", "mean_comparator",
                    "t", "p_one_sided", "degenerate"])
        for i, s in enumerate(pipe.sources):
            a = agreement_samples(grids, i, hmm_i, sec["unit"])
            for j, o in enumerate(pipe.sources):
                if j == i:
                    continue
                b = agreement_samples(grids, i, j, sec["unit"])
                row = [s, o, a.size, b.size,
                       f"{a.mean():.6f}" if a.size else "", f"{b.mean():.6f}" if b.size else ""]
                try:
                    res = agreement_ttest(a, b)
                    row += [f"{res.t:.6f}", f"{res.p:.6g}", int(res.degenerate)]
                except InputError:
                    row += ["", "", "insufficient"]
                w.writerow(row)
    run.config = {"pipeline": pipe.to_dict(), "agree": sec}
    run.finish()


# ------------------------------------------------------------------ report


def cmd_report(args, cfg):
    sec = _section(cfg, "report", {"stratify": "none", "snapshot_weeks": [], "allow_unknown": False})
    if args.stratify is not None:
        sec["stratify"] = args.stratify
    if args.snapshot_weeks:
        sec["snapshot_weeks"] = [w for arg in args.snapshot_weeks for w in arg.split(",") if w]
    if args.allow_unknown:
        sec["allow_unknown"] = True
    run = Run(args, "report")
    decodes = read_decodes(run.input("decode", args.decode))
    districts = read_districts(run.input("districts", args.districts))
    by_id = {d.leaid: d for d in districts}
    if sec["stratify"] == "urban_rural" and not sec["allow_unknown"]:
        lacking = sorted(
            d.entity_id for d in decodes
            if by_id.get(d.entity_id) is None or by_id[d.entity_id].urban_rural is None
        )
        if lacking:
            shown = ", ".join(lacking[:10]) + (" ..." if len(lacking) > 10 else "")
            raise InputError(
                f"{args.districts}: urban_rural missing for {len(lacking)} decoded district(s): {shown} "
                "(pass --allow-unknown to report them in an 'unknown' stratum)"
            )
    rows = trend_report(decodes, districts, sec["stratify"])
    write_trend(run.path("trend.csv"), rows)
    if sec["snapshot_weeks"]:
        weeks = [_parse_date(w, "--snapshot-weeks") for w in sec["snapshot_weeks"]]
        write_snapshot(run.path("snapshot.csv"), state_snapshot(decodes, districts, weeks))
    run.config = {"report": sec}
    run.extra["unknown_stratum_rows"] = sum(1 for r in rows if r.stratum == UNKNOWN)
    run.finish()


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    # usage errors are input validation failures: exit 1, not argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON or YAML config document")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="modality-hmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default=None, help="JSON or YAML config document")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("-q", "--quiet", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("simulate", parents=[common], help="generate a synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="fit parameters with Baum-Welch")
    p.add_argument("--reports", required=True)
    p.add_argument("--districts", required=True)
    p.add_argument("--cutoff-date", default=None, help="ignore reports after this date")
    p.add_argument("--init", choices=("random", "smoothed-table", "file"), default=None)
    p.add_argument("--init-file", default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--pseudocount", type=float, default=None)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("decode", parents=[common], help="per-district weekly decodes")
    p.add_argument("--params", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--districts", required=True)
    p.add_argument("--mode", choices=("posterior", "viterbi"), default=None)
    p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("agree", parents=[common], help="agreement between sources and the model")
    p.add_argument("--decode", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--unit", choices=("district", "week"), default=None)

    p = sub.add_parser("report", parents=[common], help="trend and state summaries")
    p.add_argument("--decode", required=True)
    p.add_argument("--districts", required=True)
    p.add_argument("--stratify", choices=("none", "state", "urban_rural"), default=None)
    p.add_argument("--snapshot-weeks", action="append", default=None, help="dates, comma separated")
    p.add_argument("--allow-unknown", action="store_true", default=False)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "decode": cmd_decode,
    "agree": cmd_agree,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.out is None:
            raise InputError("--out: output directory required")
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except ImpossibleObservationError as exc:
        log.error("%s", exc)
        return 2
    except (InputError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
