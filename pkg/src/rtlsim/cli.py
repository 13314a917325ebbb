"""Command-line front end: ``rtlsim solve | simulate | tune | report``.

Exit codes: 0 success, 2 a measurement problem failed to parse or solve,
3 no feasible tuning point, 64 usage error, 65 invalid configuration,
66 missing or unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .scheduler import InfeasibleGridError, Variant, tune, write_tune_report
from .sim import ConfigError, SimStats, describe, run
from .solvers import (MultilaterationProblem, Position, SolverConfig, SolverError, TdoaProblem,
                      larsson_multilaterate, lm_multilaterate, lm_tdoa)

EXIT_OK = 0
EXIT_PROBLEM = 2
EXIT_INFEASIBLE = 3
EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_IO = 66

log = logging.getLogger("rtlsim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    tool_version: str = __version__
    start_time: str = ""
    end_time: str = ""
    outputs: dict = field(default_factory=dict)  # file name -> sha256

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x: float) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


# ---------------------------------------------------------------------------
# solve

SOLVE_COLUMNS = ("problem_id", "kind", "anchor_x", "anchor_y", "anchor_z", "value_m",
                 "initiator_x", "initiator_y", "initiator_z")
TRUTH_COLUMNS = ("truth_x", "truth_y", "truth_z")


@dataclass
class _Parsed:
    kind: str = ""
    anchors: list = field(default_factory=list)
    values: list = field(default_factory=list)
    initiator: tuple | None = None
    truth: tuple | None = None
    error: str | None = None


def read_measurements(path: Path) -> "OrderedDict[str, _Parsed]":
    """Group measurement rows by problem id; row-level problems are stored, not raised."""
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in SOLVE_COLUMNS if c not in header]
        if missing:
            raise SolverError(f"{path}: missing columns {missing}")
        reader.fieldnames = header
        has_truth = all(c in header for c in TRUTH_COLUMNS)
        problems: OrderedDict[str, _Parsed] = OrderedDict()
        for line, row in enumerate(reader, start=2):
            pid = (row.get("problem_id") or "").strip()
            prob = problems.setdefault(pid, _Parsed())
            if prob.error:
                continue
            try:
                kind = row["kind"].strip().lower()
                if kind not in ("twr", "tdoa"):
                    raise ValueError(f"kind must be twr or tdoa, got {kind!r}")
                if prob.kind and kind != prob.kind:
                    raise ValueError("mixed measurement kinds in one problem")
                prob.kind = kind
                prob.anchors.append(tuple(float(row[c]) for c in ("anchor_x", "anchor_y", "anchor_z")))
                prob.values.append(float(row["value_m"]))
                if kind == "tdoa":
                    ini = tuple(float(row[c]) for c in ("initiator_x", "initiator_y", "initiator_z"))
                    if prob.initiator is not None and ini != prob.initiator:
                        raise ValueError("initiator changes within a problem")
                    prob.initiator = ini
                if has_truth and (row.get("truth_x") or "").strip():
                    prob.truth = tuple(float(row[c]) for c in TRUTH_COLUMNS)
            except (TypeError, ValueError) as exc:
                prob.error = f"line {line}: {exc}"
    return problems


def solve_problem(prob: _Parsed, solver: str, config: SolverConfig):
    anchors = [Position(*a) for a in prob.anchors]
    if solver == "tdoa":
        if prob.kind != "tdoa":
            raise SolverError("tdoa solver needs tdoa measurements")
        return lm_tdoa(TdoaProblem(Position(*prob.initiator), anchors, prob.values), None, config)
    if prob.kind != "twr":
        raise SolverError(f"{solver} solver needs twr measurements")
    problem = MultilaterationProblem(anchors, prob.values)
    if solver == "larsson":
        return larsson_multilaterate(problem, config)
    return lm_multilaterate(problem, None, config)


def cmd_solve(args) -> int:
    path = Path(args.measurements)
    try:
        problems = read_measurements(path)
    except OSError as exc:
        print(f"rtlsim solve: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, csv.Error, UnicodeDecodeError) as exc:
        print(f"rtlsim solve: {exc}", file=sys.stderr)
        return EXIT_PROBLEM
    config = SolverConfig(tolerance=args.tolerance)
    has_truth = any(p.truth is not None for p in problems.values())
    header = ["problem_id", "solver", "x", "y", "z", "converged", "iterations", "residual"]
    header += ["error"] if has_truth else []
    header += ["status"]
    failed = 0
    rows = []
    for pid, prob in problems.items():
        try:
            if prob.error:
                raise SolverError(prob.error)
            res = solve_problem(prob, args.solver, config)
        except SolverError as exc:
            failed += 1
            row = [pid, args.solver, "", "", "", "false", "0", ""] + ([""] if has_truth else []) + [f"error: {exc}"]
            rows.append(row)
            continue
        p = res.position
        row = [pid, args.solver, _fmt(p.x), _fmt(p.y), _fmt(p.z), str(res.converged).lower(),
               str(res.iterations), _fmt(res.residual_norm)]
        if has_truth:
            row.append(_fmt(p.distance_to(Position(*prob.truth))) if prob.truth else "")
        rows.append(row + ["ok"])
    try:
        out = open(args.output, "w", newline="") if args.output != "-" else sys.stdout
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        if out is not sys.stdout:
            out.close()
    except OSError as exc:
        print(f"rtlsim solve: cannot write {args.output}: {exc}", file=sys.stderr)
        return EXIT_IO
    if failed:
        print(f"rtlsim solve: {failed} of {len(problems)} problem(s) failed", file=sys.stderr)
        return EXIT_PROBLEM
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def write_stats(stats: SimStats, out_dir: Path) -> list[Path]:
    """Write the daily, summary, SoC and localization CSVs; return their paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out_dir / "stats_daily.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "node_id", "role", "active", "passive", "responses", "failed", "skipped", "soc"])
        for d in range(stats.days):
            for i, (nid, role) in enumerate(zip(stats.node_ids, stats.roles)):
                w.writerow([d, nid, role, stats.active[d, i], stats.passive[d, i], stats.responses[d, i],
                            stats.failed[d, i], stats.skipped[d, i], _fmt(stats.soc_daily[d, i])])
    paths.append(p)

    p = out_dir / "stats_summary.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "role", "avg", "md", "std", "min", "max", "final_soc"])
        for r in stats.node_summary():
            w.writerow([r["node_id"], r["role"]] + [_fmt(r[k]) for k in ("avg", "md", "std", "min", "max", "final_soc")])
    paths.append(p)

    p = out_dir / "soc_timeline.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "node_id", "soc"])
        for h in range(stats.soc_hourly.shape[0]):
            for i, nid in enumerate(stats.node_ids):
                w.writerow([h, nid, _fmt(stats.soc_hourly[h, i])])
    paths.append(p)

    p = out_dir / "localizations_timeline.csv"
    counts = stats.daily_counts()
    tags, anchors = stats.tag_indices(), stats.anchor_indices()
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "tag_mean_localizations", "tag_mean_active", "tag_mean_passive", "anchor_mean_responses"])
        for d in range(stats.days):
            row = [counts[d, tags].mean() if len(tags) else math.nan,
                   stats.active[d, tags].mean() if len(tags) else math.nan,
                   stats.passive[d, tags].mean() if len(tags) else math.nan,
                   counts[d, anchors].mean() if len(anchors) else math.nan]
            w.writerow([d] + [_fmt(x) for x in row])
    paths.append(p)

    if stats.fixes:
        p = out_dir / "fixes.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["minute", "tag_id", "kind", "error_m", "converged", "iterations"])
            for f in stats.fixes:
                w.writerow([f.minute, f.tag_id, f.kind, _fmt(f.error_m), str(f.converged).lower(), f.iterations])
        paths.append(p)
    return paths


def _load_config(path, overrides) -> tuple[dict, object] | int:
    try:
        return cfgmod.load(path, overrides)
    except FileNotFoundError as exc:
        print(f"rtlsim: config not found: {exc.filename or path}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"rtlsim: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print("rtlsim: invalid configuration:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_CONFIG


def _finish(manifest: RunManifest, out_dir: Path, paths: list[Path]) -> None:
    manifest.outputs = {p.name: _sha256(p) for p in paths}
    manifest.end_time = _now()
    manifest.write(out_dir)


def cmd_simulate(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.days is not None:
        overrides["duration_days"] = args.days
    if args.tags is not None:
        overrides.setdefault("world", {})["tags"] = {"count": args.tags, "profile": args.profile}
    if args.scheduler is not None:
        overrides["scheduler"] = {"variant": args.scheduler}
    if args.initial_soc is not None:
        overrides["energy"] = {"initial_soc": args.initial_soc}
    if args.with_solvers:
        overrides["solver"] = {"with_solvers": True}
    loaded = _load_config(args.config, overrides)
    if isinstance(loaded, int):
        return loaded
    cfg, sim_config = loaded
    manifest = RunManifest("simulate", cfgmod.config_hash(cfg), sim_config.seed, start_time=_now())
    stats = run(sim_config)
    out_dir = Path(args.out)
    try:
        paths = write_stats(stats, out_dir)
        _finish(manifest, out_dir, paths)
    except OSError as exc:
        print(f"rtlsim simulate: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    tab = stats.table()
    print(f"tags: {tab['tags']['avg']:.2f} localizations/day, anchors: {tab['anchors']['avg']:.2f} responses/day")
    return EXIT_OK


# ---------------------------------------------------------------------------
# tune


def cmd_tune(args) -> int:
    overrides = {"duration_days": args.days} if args.days is not None else None
    loaded = _load_config(args.config, overrides)
    if isinstance(loaded, int):
        return loaded
    cfg, sim_config = loaded
    grid_cfg = cfg
    if args.grid:
        try:
            grid_raw = cfgmod.read_yaml(Path(args.grid))
        except FileNotFoundError:
            print(f"rtlsim tune: grid file not found: {args.grid}", file=sys.stderr)
            return EXIT_IO
        except ConfigError as exc:
            print(f"rtlsim tune: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            grid_cfg = cfgmod.normalize({**{k: v for k, v in cfg.items() if k != "tuning"},
                                         "tuning": {"grid": grid_raw, "workers": cfg["tuning"]["workers"]}})
        except ConfigError as exc:
            print("rtlsim tune: invalid grid:", *exc.errors, sep="\n  - ", file=sys.stderr)
            return EXIT_CONFIG
    try:
        grid = cfgmod.tuning_grid(grid_cfg)
    except ValueError as exc:
        print(f"rtlsim tune: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = RunManifest("tune", cfgmod.config_hash(grid_cfg), sim_config.seed, start_time=_now())
    workers = args.workers if args.workers is not None else cfg["tuning"]["workers"]
    out_dir = Path(args.out)
    try:
        result = tune(grid, sim_config, workers=workers)
    except InfeasibleGridError as exc:
        print(f"rtlsim tune: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / "tune_report.csv"
        write_tune_report(result.points, report)
        _finish(manifest, out_dir, [report])
    except OSError as exc:
        print(f"rtlsim tune: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    b = result.best
    print(f"beta1={b.beta1!r} beta2={b.beta2!r} gamma={b.gamma!r} objective={result.objective:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

DAILY_FIELDS = ("day", "node_id", "role", "active", "passive", "responses")


def read_daily(path: Path) -> tuple[list[str], list[str], np.ndarray, np.ndarray]:
    """Load stats_daily.csv into ``(node_ids, roles, counts[day, node], soc[day, node])``."""
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or any(f not in reader.fieldnames for f in DAILY_FIELDS + ("soc",)):
            raise ValueError(f"{path}: expected columns {DAILY_FIELDS + ('soc',)}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no rows")
    nodes: OrderedDict[str, str] = OrderedDict()
    days = sorted({int(r["day"]) for r in rows})
    for r in rows:
        nodes.setdefault(r["node_id"], r["role"])
    ids = list(nodes)
    col = {n: i for i, n in enumerate(ids)}
    counts = np.full((len(days), len(ids)), np.nan)
    soc = np.full((len(days), len(ids)), np.nan)
    for r in rows:
        d, i = days.index(int(r["day"])), col[r["node_id"]]
        if r["role"] == "tag":
            counts[d, i] = int(r["active"]) + int(r["passive"])
        else:
            counts[d, i] = int(r["responses"])
        soc[d, i] = float(r["soc"])
    if np.isnan(counts).any():
        raise ValueError(f"{path}: not every node has a row for every day")
    return ids, [nodes[n] for n in ids], counts, soc


def cmd_report(args) -> int:
    stats_dir = Path(args.stats_dir)
    daily = stats_dir / "stats_daily.csv"
    if not daily.is_file():
        print(f"rtlsim report: {daily} not found", file=sys.stderr)
        return EXIT_IO
    try:
        ids, roles, counts, soc = read_daily(daily)
    except (OSError, ValueError, KeyError) as exc:
        print(f"rtlsim report: {exc}", file=sys.stderr)
        return EXIT_IO
    roles_arr = np.array(roles)
    out_dir = Path(args.out) if args.out else stats_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    table = {g: describe(counts[:, roles_arr == r].ravel()) for g, r in (("tags", "tag"), ("anchors", "anchor"))}
    p_table = out_dir / "report_table.csv"
    with p_table.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "tags", "anchors"])
        for stat in ("avg", "md", "std", "min", "max"):
            w.writerow([stat, _fmt(table["tags"][stat]), _fmt(table["anchors"][stat])])
    p_long = out_dir / "report_daily_long.csv"
    with p_long.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "role", "metric", "value"])
        for d in range(counts.shape[0]):
            for role in ("tag", "anchor"):
                mask = roles_arr == role
                if not mask.any():
                    continue
                metric = "localizations" if role == "tag" else "responses"
                w.writerow([d, role, f"mean_{metric}", _fmt(float(counts[d, mask].mean()))])
                w.writerow([d, role, "mean_soc", _fmt(float(soc[d, mask].mean()))])
    print(f"tags avg {table['tags']['avg']:.2f}/day, anchors avg {table['anchors']['avg']:.2f}/day")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rtlsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve measurement problems from a CSV file")
    p.add_argument("measurements")
    p.add_argument("--solver", choices=("larsson", "lm", "tdoa"), default="lm")
    p.add_argument("--tolerance", type=float, default=SolverConfig().tolerance)
    p.add_argument("-o", "--output", default="-", help="output CSV (default stdout)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run the network simulation")
    p.add_argument("config", nargs="?", help=f"YAML config (default ${cfgmod.CONFIG_DIR_ENV}/default.yaml or bundled)")
    p.add_argument("--seed", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--tags", type=int)
    p.add_argument("--profile", default="typical", help="harvest profile label for generated tags (with --tags)")
    p.add_argument("--scheduler", choices=[v.value for v in Variant])
    p.add_argument("--initial-soc", type=float)
    p.add_argument("--with-solvers", action="store_true", help="solve synthetic measurements for every fix")
    p.add_argument("-o", "--out", default="out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="grid-search the AIMD thresholds")
    p.add_argument("config", nargs="?")
    p.add_argument("--grid", help="YAML file with beta1, beta2 and gamma lists")
    p.add_argument("--days", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--out", default="out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="aggregate stats_daily.csv into summary tables")
    p.add_argument("stats_dir")
    p.add_argument("-o", "--out", help="output directory (default: stats_dir)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "solve" and not args.tolerance > 0:
        parser.error("--tolerance must be positive")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
