"""Command-line front end gluing the pipeline stages to files on disk.

Commands fall into three groups: data preparation (import-osm,
gen-demand, gen-scenarios, gen-traces), the estimation chain (match,
infer, refine, estimate-od, complete), and reporting (evaluate,
export-voc, export-geojson). ``pipeline`` chains refine, per-interval
demand estimation, completion, and evaluation over one input set and
writes a manifest of SHA-256 content hashes for every artifact it
produced.

Configuration comes from a JSON file named with ``--config`` plus
command-line flags; flags win over file values. Every randomized stage
derives its own seed by hashing the stage name together with the global
seed, so stages are statistically independent while the whole run stays
a pure function of one integer. All writers emit shortest round-trip
float text, which makes byte-identical reruns the expected behavior and
hash comparison a meaningful regression check.

Exit codes: 0 success, 1 usage or configuration error, 2 malformed
input data, 3 solver non-convergence. On exit 3 whatever artifacts were
still computable are written with a ``.partial`` suffix so downstream
tooling never mistakes them for converged results.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .assignment import read_demand, write_demand
from .completion import assemble_matrix, complete, write_completed, write_matrix
from .errors import InputDataError, SolverError
from .evaluation import (
    ScenarioMetrics,
    aggregate_error_pct,
    build_report,
    export_geojson,
    gain_pct,
    matching_accuracy_pct,
    mse,
    run_baseline,
    voc_series,
    write_report,
    write_voc,
)
from .mapmatch import MatchParams, match_traces, read_matched, write_matched
from .network import TimeGrid, import_osm, read_network, read_tazs, write_network
from .odestim import (
    SpsaParams,
    estimate_od,
    read_state,
    seed_gravity,
    write_objective_trace,
    write_state,
)
from .refine import refine, write_diagnostics
from .tracegen import (
    GroundTruthScenario,
    ProbeConfig,
    gen_scenarios,
    generate_probe_data,
    read_traces,
    read_trips,
    read_truth,
    write_traces,
    write_trips,
    write_truth,
)
from .ttinfer import (
    InferParams,
    infer_times,
    observations_from_matches,
    read_estimates,
    write_estimates,
)

logger = logging.getLogger(__name__)

NETWORK_FILE = "network.json"
DEMAND_FILE = "demand.csv"
TRACES_FILE = "traces.csv"
TRIPS_FILE = "trips.csv"
MATCHED_FILE = "matched.csv"
ESTIMATES_FILE = "estimates.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
MATRIX_FILE = "matrix.csv"
COMPLETED_FILE = "completed.csv"
REPORT_FILE = "report.json"
VOC_FILE = "voc.csv"
GEOJSON_FILE = "voc.geojson"
MANIFEST_FILE = "manifest.json"


def truth_file(scenario_id: int) -> str:
    return f"truth_{scenario_id:03d}.csv"


def demand_file(interval: int) -> str:
    return f"od_demand_{interval:03d}.csv"


def state_file(interval: int) -> str:
    return f"state_{interval:03d}.csv"


def objective_file(interval: int) -> str:
    return f"objective_{interval:03d}.csv"


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefineParams:
    """Loop budget and stop thresholds of the refinement stage."""

    max_iters: int = 10
    stop_tol: float = 1e-3
    time_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise InputDataError("max_iters must be at least 1")
        if self.stop_tol <= 0:
            raise InputDataError("stop_tol must be positive")
        if not (0.0 < self.time_weight <= 1.0):
            raise InputDataError("time_weight must be in (0, 1]")


@dataclass(frozen=True)
class OdSolveParams:
    """Lower-level equilibrium settings used inside demand estimation."""

    ue_tol: float = 1e-4
    ue_max_iter: int = 500
    weight_by_support: bool = False

    def __post_init__(self) -> None:
        if self.ue_tol <= 0 or self.ue_max_iter < 1:
            raise InputDataError("ue_tol must be positive and ue_max_iter at least 1")


@dataclass(frozen=True)
class CompletionParams:
    """Thresholding and stop settings of the matrix completion stage."""

    svt_threshold: float | None = None
    step: float = 1.2
    max_iter: int = 500
    tol: float = 1e-4

    def __post_init__(self) -> None:
        if self.svt_threshold is not None and not (self.svt_threshold > 0):
            raise InputDataError("svt_threshold must be positive when given")
        if not (0.0 < self.step <= 2.0):
            raise InputDataError("step must be in (0, 2]")
        if self.max_iter < 1 or self.tol <= 0:
            raise InputDataError("max_iter must be at least 1 and tol positive")


@dataclass(frozen=True)
class AssignParams:
    """Convergence settings for ground-truth scenario assignment."""

    tol: float = 1e-5
    max_iter: int = 800

    def __post_init__(self) -> None:
        if self.tol <= 0 or self.max_iter < 1:
            raise InputDataError("tol must be positive and max_iter at least 1")


@dataclass(frozen=True)
class GravityParams:
    """Distance-decay seed demand settings."""

    deterrence_scale: float = 2000.0
    total_trips: float = 1000.0

    def __post_init__(self) -> None:
        if self.deterrence_scale <= 0 or self.total_trips <= 0:
            raise InputDataError("deterrence_scale and total_trips must be positive")


_SECTIONS: dict[str, type] = {
    "grid": TimeGrid,
    "match": MatchParams,
    "infer": InferParams,
    "spsa": SpsaParams,
    "probe": ProbeConfig,
    "refine": RefineParams,
    "od": OdSolveParams,
    "completion": CompletionParams,
    "assignment": AssignParams,
    "gravity": GravityParams,
}

_PATH_KEYS = (
    "osm", "network", "tazs", "demand", "traces", "truth", "trips",
    "matched", "estimates", "state", "states_dir", "truth_dir",
)


@dataclass
class PipelineConfig:
    """Everything a command needs: file paths, parameters, and the seed.

    Built from the JSON config file and command-line overrides; all
    parameter validation happens here, before any file is read, so a
    bad configuration can never burn compute first.
    """

    seed: int = 0
    threads: int | None = None
    out_dir: str = "."
    scenario_name: str = "default"
    multipliers: list[float] = field(default_factory=lambda: [1.0])
    schedule: list[int] | None = None
    osm: str | None = None
    network: str | None = None
    tazs: str | None = None
    demand: str | None = None
    traces: str | None = None
    truth: str | None = None
    trips: str | None = None
    matched: str | None = None
    estimates: str | None = None
    state: str | None = None
    states_dir: str | None = None
    truth_dir: str | None = None
    grid: TimeGrid = field(default_factory=TimeGrid)
    match: MatchParams = field(default_factory=MatchParams)
    infer: InferParams = field(default_factory=InferParams)
    spsa: SpsaParams = field(default_factory=SpsaParams)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    refine: RefineParams = field(default_factory=RefineParams)
    od: OdSolveParams = field(default_factory=OdSolveParams)
    completion: CompletionParams = field(default_factory=CompletionParams)
    assignment: AssignParams = field(default_factory=AssignParams)
    gravity: GravityParams = field(default_factory=GravityParams)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(_SECTIONS) | set(_PATH_KEYS) | {
            "seed", "threads", "out_dir", "scenario_name", "multipliers", "schedule",
        }
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")

        kwargs: dict = {}
        for key, section_type in _SECTIONS.items():
            section = doc.get(key, {})
            if not isinstance(section, dict):
                raise UsageError(f"config key {key!r} must be an object")
            try:
                kwargs[key] = section_type(**section)
            except TypeError as exc:
                raise UsageError(f"config section {key!r}: {exc}") from exc
            except InputDataError as exc:
                raise UsageError(f"config section {key!r}: {exc}") from exc

        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise UsageError("config key 'seed' must be an integer")
        kwargs["seed"] = seed

        threads = doc.get("threads")
        if threads is not None and (not isinstance(threads, int) or threads < 1):
            raise UsageError("config key 'threads' must be a positive integer")
        kwargs["threads"] = threads

        out_dir = doc.get("out_dir", ".")
        name = doc.get("scenario_name", "default")
        if not isinstance(out_dir, str) or not isinstance(name, str) or not name:
            raise UsageError("'out_dir' and 'scenario_name' must be non-empty strings")
        kwargs["out_dir"] = out_dir
        kwargs["scenario_name"] = name

        multipliers = doc.get("multipliers", [1.0])
        if (not isinstance(multipliers, list) or not multipliers
                or any(not isinstance(m, (int, float)) or m <= 0 for m in multipliers)):
            raise UsageError("config key 'multipliers' must be a list of positive numbers")
        kwargs["multipliers"] = [float(m) for m in multipliers]

        schedule = doc.get("schedule")
        if schedule is not None:
            if not isinstance(schedule, list) or any(
                    not isinstance(s, int) or isinstance(s, bool) for s in schedule):
                raise UsageError("config key 'schedule' must be a list of integers")
        kwargs["schedule"] = schedule

        for key in _PATH_KEYS:
            value = doc.get(key)
            if value is not None and not isinstance(value, str):
                raise UsageError(f"config key {key!r} must be a string path")
            kwargs[key] = value

        return cls(**kwargs)


def stage_seed(stage: str, seed: int) -> int:
    """Per-stage seed: a stable hash of the stage name and the global seed."""
    digest = hashlib.sha256(f"{stage}:{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    doc: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: top level must be a JSON object")
    cfg = PipelineConfig.from_dict(doc)

    overrides: dict = {}
    for key in ("seed", "threads", "out_dir", *_PATH_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides.get("threads", 1) < 1:
        raise UsageError("--threads must be a positive integer")
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _out(cfg: PipelineConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _input(cfg: PipelineConfig, key: str) -> Path:
    """Resolve a required input path, insisting that it exists."""
    value = getattr(cfg, key)
    if value is None:
        flag = key.replace("_", "-")
        raise UsageError(f"no {key} file given (use --{flag} or config key {key!r})")
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{key} file not found: {path}")
    return path


def _threads(cfg: PipelineConfig) -> int:
    return cfg.threads if cfg.threads is not None else (os.cpu_count() or 1)


def _free_flow(net) -> dict[int, float]:
    return {s.id: s.free_flow_time for s in net.segments}


def _supported_intervals(estimates) -> list[int]:
    """Intervals whose estimate rests on at least one observation."""
    return sorted(iv for iv, est in estimates.items()
                  if any(n > 0 for n in est.support.values()))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_import_osm(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = import_osm(_input(cfg, "osm"))
    out = _out(cfg) / NETWORK_FILE
    write_network(net, out)
    artifacts.append(out)


def _cmd_gen_demand(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = read_network(_input(cfg, "network"))
    tazs = read_tazs(_input(cfg, "tazs"), net)
    demand = seed_gravity(net, tazs, cfg.gravity.deterrence_scale, cfg.gravity.total_trips)
    out = _out(cfg) / DEMAND_FILE
    write_demand(demand, out)
    artifacts.append(out)


def _cmd_gen_scenarios(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = read_network(_input(cfg, "network"))
    tazs = read_tazs(_input(cfg, "tazs"), net)
    demand = read_demand(_input(cfg, "demand"))
    scenarios = gen_scenarios(net, demand, cfg.multipliers, tazs,
                              tol=cfg.assignment.tol, max_iter=cfg.assignment.max_iter)
    out = _out(cfg)
    for scen in scenarios:
        path = out / truth_file(scen.id)
        write_truth(scen, path)
        artifacts.append(path)


def _cmd_gen_traces(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    """Simulate probe data for the scheduled scenarios.

    Writes one trace and trip file per scenario plus combined files
    covering the whole week, which is what the estimation chain reads.
    """
    net = read_network(_input(cfg, "network"))
    tazs = read_tazs(_input(cfg, "tazs"), net)
    demand = read_demand(_input(cfg, "demand"))

    schedule = cfg.schedule if cfg.schedule is not None else [0] * cfg.grid.interval_count
    if len(schedule) != cfg.grid.interval_count:
        raise UsageError(
            f"schedule length {len(schedule)} != interval count {cfg.grid.interval_count}")
    needed = sorted({s for s in schedule if s >= 0})
    if not needed:
        raise UsageError("schedule activates no scenario")

    truth_dir = Path(cfg.truth_dir) if cfg.truth_dir is not None else Path(cfg.out_dir)
    scenarios = []
    for sid in needed:
        if sid >= len(cfg.multipliers):
            raise UsageError(f"schedule references scenario {sid} but only "
                             f"{len(cfg.multipliers)} multipliers are configured")
        path = truth_dir / truth_file(sid)
        if not path.is_file():
            raise UsageError(f"truth file not found: {path}")
        times, flows = read_truth(path)
        scenarios.append(GroundTruthScenario(
            id=sid, demand_multiplier=cfg.multipliers[sid], time=times, flow=flows))

    probe = replace(cfg.probe, rng_seed=stage_seed("gen-traces", cfg.seed))
    data = generate_probe_data(net, tazs, demand, scenarios, schedule, cfg.grid, probe)

    out = _out(cfg)
    all_trips, all_traces = [], []
    for sid in needed:
        trips, traces = data[sid]
        for name, writer, rows in ((f"traces_{sid:03d}.csv", write_traces, traces),
                                   (f"trips_{sid:03d}.csv", write_trips, trips)):
            path = out / name
            writer(rows, path)
            artifacts.append(path)
        all_trips.extend(trips)
        all_traces.extend(traces)
    for name, writer, rows in ((TRACES_FILE, write_traces, all_traces),
                               (TRIPS_FILE, write_trips, all_trips)):
        path = out / name
        writer(rows, path)
        artifacts.append(path)


def _cmd_match(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    """One geometric matching pass under free-flow travel times."""
    net = read_network(_input(cfg, "network"))
    traces = read_traces(_input(cfg, "traces"))
    matched = match_traces(net, traces, _free_flow(net), cfg.match)
    out = _out(cfg) / MATCHED_FILE
    write_matched(matched, out)
    artifacts.append(out)


def _cmd_infer(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = read_network(_input(cfg, "network"))
    matched = read_matched(_input(cfg, "matched"))
    obs = observations_from_matches(matched, cfg.grid)
    prior = _free_flow(net)
    p = cfg.infer

    def solve(interval: int):
        return infer_times(obs[interval], net, prior, lam=p.lam, tol=p.tol,
                           max_iter=p.max_iter)

    with ThreadPoolExecutor(max_workers=_threads(cfg)) as pool:
        estimates = list(pool.map(solve, sorted(obs)))
    out = _out(cfg) / ESTIMATES_FILE
    write_estimates(estimates, out)
    artifacts.append(out)


def _cmd_refine(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = read_network(_input(cfg, "network"))
    traces = read_traces(_input(cfg, "traces"))
    pieces, estimates, diag = refine(
        traces, net, cfg.grid, match_params=cfg.match, infer_params=cfg.infer,
        max_iters=cfg.refine.max_iters, stop_tol=cfg.refine.stop_tol,
        time_weight=cfg.refine.time_weight)
    out = _out(cfg)
    write_matched(pieces, out / MATCHED_FILE)
    write_estimates([estimates[iv] for iv in sorted(estimates)], out / ESTIMATES_FILE)
    write_diagnostics(diag, out / DIAGNOSTICS_FILE)
    artifacts.extend([out / MATCHED_FILE, out / ESTIMATES_FILE, out / DIAGNOSTICS_FILE])


def _cmd_estimate_od(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    """Demand estimation per supported interval.

    Intervals are independent, so they run under the thread cap; each
    gets its own derived seed. When the equilibrium solver gives up on
    an interval, that interval's seed demand is written with a .partial
    suffix, every other interval keeps its regular output, and the
    command fails with exit code 3 afterwards.
    """
    net = read_network(_input(cfg, "network"))
    tazs = read_tazs(_input(cfg, "tazs"), net)
    estimates = read_estimates(_input(cfg, "estimates"))
    if cfg.demand is not None:
        seed_demand = read_demand(_input(cfg, "demand"))
    else:
        seed_demand = seed_gravity(net, tazs, cfg.gravity.deterrence_scale,
                                   cfg.gravity.total_trips)

    intervals = _supported_intervals(estimates)
    if not intervals:
        raise InputDataError(f"{cfg.estimates}: no interval has observation support")

    def solve(interval: int):
        return estimate_od(
            net, tazs, estimates[interval], seed_demand, spsa=cfg.spsa,
            ue_tol=cfg.od.ue_tol, ue_max_iter=cfg.od.ue_max_iter,
            weight_by_support=cfg.od.weight_by_support,
            rng_seed=stage_seed(f"estimate-od/{interval}", cfg.seed))

    out = _out(cfg)
    failures: dict[int, SolverError] = {}
    with ThreadPoolExecutor(max_workers=_threads(cfg)) as pool:
        futures = {iv: pool.submit(solve, iv) for iv in intervals}
        for iv in intervals:
            try:
                est = futures[iv].result()
            except SolverError as exc:
                failures[iv] = exc
                partial = out / (demand_file(iv) + ".partial")
                write_demand(seed_demand, partial)
                artifacts.append(partial)
                continue
            write_demand(est.demand, out / demand_file(iv))
            write_state(est.result, net, out / state_file(iv))
            write_objective_trace(est.objective_trace, out / objective_file(iv))
            artifacts.extend([out / demand_file(iv), out / state_file(iv),
                              out / objective_file(iv)])
    if failures:
        first = min(failures)
        raise SolverError(f"interval {first}: {failures[first]}")


def _cmd_complete(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = read_network(_input(cfg, "network"))
    estimates = read_estimates(_input(cfg, "estimates"))
    mat = assemble_matrix({iv: e.time for iv, e in estimates.items()}, net, cfg.grid,
                          support_by_interval={iv: e.support for iv, e in estimates.items()})
    out = _out(cfg)
    write_matrix(mat, out / MATRIX_FILE)
    artifacts.append(out / MATRIX_FILE)
    p = cfg.completion
    result = complete(mat, svt_threshold=p.svt_threshold, step=p.step,
                      max_iter=p.max_iter, tol=p.tol)
    write_completed(result, out / COMPLETED_FILE)
    artifacts.append(out / COMPLETED_FILE)


def _cmd_evaluate(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    """Score refined estimates against ground truth and the tandem baseline.

    Travel-time metrics average over the intervals that carry
    observations in both the refined and the baseline run; matching
    accuracy comes from the matched file against the truth trips.
    """
    net = read_network(_input(cfg, "network"))
    traces = read_traces(_input(cfg, "traces"))
    truth_times, _ = read_truth(_input(cfg, "truth"))
    trips = read_trips(_input(cfg, "trips"))
    matched = read_matched(_input(cfg, "matched"))
    full = read_estimates(_input(cfg, "estimates"))

    _, base_est, _ = run_baseline(traces, net, cfg.grid,
                                  match_params=cfg.match, infer_params=cfg.infer)
    intervals = [iv for iv in _supported_intervals(full) if iv in base_est]
    if not intervals:
        raise InputDataError("no interval carries observations in both runs")

    full_mse = math.fsum(mse(full[iv].time, truth_times) for iv in intervals) / len(intervals)
    base_mse = math.fsum(mse(base_est[iv].time, truth_times) for iv in intervals) / len(intervals)
    agg = math.fsum(aggregate_error_pct(full[iv].time, truth_times)
                    for iv in intervals) / len(intervals)
    metrics = ScenarioMetrics(
        mse=full_mse,
        gain_pct=gain_pct(full_mse, base_mse),
        aggregate_error_pct=agg,
        matching_accuracy_pct=matching_accuracy_pct(matched, trips, net),
    )
    report = build_report({cfg.scenario_name: metrics})
    out = _out(cfg) / REPORT_FILE
    write_report(report, out)
    artifacts.append(out)


def _cmd_export_voc(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    """Per-class mean VOC series from the interval state files."""
    net = read_network(_input(cfg, "network"))
    states_dir = Path(cfg.states_dir) if cfg.states_dir is not None else Path(cfg.out_dir)
    flows_by_interval: dict[int, dict[int, float]] = {}
    for path in sorted(states_dir.glob("state_*.csv")):
        interval = int(path.stem.split("_")[1])
        flow, _, _ = read_state(path)
        flows_by_interval[interval] = flow
    if not flows_by_interval:
        raise InputDataError(f"no state files found in {states_dir}")
    classes = sorted({s.road_class for s in net.segments})
    series = {cls: voc_series(flows_by_interval, net, cfg.grid, class_filter=cls)
              for cls in classes}
    out = _out(cfg) / VOC_FILE
    write_voc(series, out)
    artifacts.append(out)


def _cmd_export_geojson(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    net = read_network(_input(cfg, "network"))
    _, _, vocs = read_state(_input(cfg, "state"))
    out = _out(cfg) / GEOJSON_FILE
    export_geojson(net, vocs, out)
    artifacts.append(out)


def _write_manifest(out: Path, artifacts: list[Path], partial: bool) -> None:
    doc = {"artifacts": {
        path.name: hashlib.sha256(path.read_bytes()).hexdigest()
        for path in sorted(set(artifacts))
    }}
    name = MANIFEST_FILE + (".partial" if partial else "")
    with open(out / name, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_pipeline(cfg: PipelineConfig, artifacts: list[Path]) -> None:
    """refine, then per-interval demand estimation, completion, evaluation.

    Each stage reads its inputs from the files the previous stage wrote,
    exactly as the standalone commands would, so a split run and a
    single run produce identical bytes. The manifest records a SHA-256
    hash per artifact; on solver failure it is written with a .partial
    suffix covering whatever completed.
    """
    for key in ("network", "tazs", "traces", "truth", "trips"):
        _input(cfg, key)

    out = _out(cfg)
    staged = replace(cfg, matched=str(out / MATCHED_FILE),
                     estimates=str(out / ESTIMATES_FILE))
    try:
        _cmd_refine(staged, artifacts)
        _cmd_estimate_od(staged, artifacts)
        _cmd_complete(staged, artifacts)
        _cmd_evaluate(staged, artifacts)
    except SolverError:
        _write_manifest(out, artifacts, partial=True)
        raise
    _write_manifest(out, artifacts, partial=False)


_HANDLERS: dict[str, Callable[[PipelineConfig, list[Path]], None]] = {
    "import-osm": _cmd_import_osm,
    "gen-demand": _cmd_gen_demand,
    "gen-scenarios": _cmd_gen_scenarios,
    "gen-traces": _cmd_gen_traces,
    "match": _cmd_match,
    "infer": _cmd_infer,
    "refine": _cmd_refine,
    "estimate-od": _cmd_estimate_od,
    "complete": _cmd_complete,
    "evaluate": _cmd_evaluate,
    "export-voc": _cmd_export_voc,
    "export-geojson": _cmd_export_geojson,
    "pipeline": _cmd_pipeline,
}

_COMMAND_INPUTS: dict[str, tuple[str, ...]] = {
    "import-osm": ("osm",),
    "gen-demand": ("network", "tazs"),
    "gen-scenarios": ("network", "tazs", "demand"),
    "gen-traces": ("network", "tazs", "demand", "truth_dir"),
    "match": ("network", "traces"),
    "infer": ("network", "matched"),
    "refine": ("network", "traces"),
    "estimate-od": ("network", "tazs", "estimates", "demand"),
    "complete": ("network", "estimates"),
    "evaluate": ("network", "traces", "truth", "trips", "matched", "estimates"),
    "export-voc": ("network", "states_dir"),
    "export-geojson": ("network", "state"),
    "pipeline": ("network", "tazs", "traces", "truth", "trips", "demand"),
}


# ---------------------------------------------------------------------------
# Argument parsing and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--seed", type=int, metavar="N", help="global random seed")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker cap for per-interval stages")
    common.add_argument("--out-dir", metavar="PATH", help="directory for outputs")

    parser = _Parser(prog="probeflow",
                     description="Traffic state estimation from GPS probe traces.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in _HANDLERS:
        p = sub.add_parser(command, parents=[common])
        for key in _COMMAND_INPUTS[command]:
            p.add_argument(f"--{key.replace('_', '-')}", metavar="PATH")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        _HANDLERS[args.command](cfg, [])
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InputDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
