"""Iterative refinement: alternate map matching and travel-time inference.

Iteration 0 matches every trace under free-flow times (the coarse pass)
and infers per-interval travel times from the result. Each following
iteration rematches under the latest times and re-infers, with the
previous estimate as the inference prior. Two contracted monotonicities
drive the loop toward a fixed point:

* with paths held fixed, the infer step cannot leave the least-squares
  residual worse than it was under the previous times;
* with times held fixed, a fresh Viterbi pass cannot score below the
  previous iteration's paths rescored under those times.

The loop stops when a rematch changes no path, when the largest relative
time change drops under stop_tol, or at max_iters. max_iters=1 is exactly
the classical sequential pipeline (one match, one infer).
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

from .errors import InputDataError
from .mapmatch import GpsTrace, MatchedPath, MatchParams, Router, match_trace
from .network import RoadNetwork, TimeGrid, fmt_float
from .ttinfer import (
    InferParams,
    SegmentTimeEstimate,
    infer_times,
    observations_from_matches,
    residual_sq,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IterationRecord:
    """Diagnostics of one completed refinement iteration."""

    iteration: int
    residual: float
    viterbi_score: float
    changed_paths: int
    max_rel_change: float


@dataclass
class RefinementDiagnostics:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def _trace_interval(trace: GpsTrace, grid: TimeGrid) -> int:
    mid = 0.5 * (float(trace.timestamps[0]) + float(trace.timestamps[-1]))
    return grid.interval_of(mid)


def refine(
    traces: list[GpsTrace],
    net: RoadNetwork,
    grid: TimeGrid,
    match_params: MatchParams = MatchParams(),
    infer_params: InferParams = InferParams(),
    max_iters: int = 10,
    stop_tol: float = 1e-3,
    time_weight: float = 1.0,
) -> tuple[list[MatchedPath], dict[int, SegmentTimeEstimate], RefinementDiagnostics]:
    """Run the refinement loop; see module docstring.

    Returns the final matched paths, the per-interval estimates, and one
    diagnostics record per iteration. Each trace is matched under the
    times of the interval containing its midpoint. time_weight blends the
    fresh estimate with the previous one (1.0 keeps the fresh estimate;
    lower values damp the update).
    """
    if not traces:
        raise InputDataError("refine needs at least one trace")
    if max_iters < 1:
        raise InputDataError("max_iters must be at least 1")
    if stop_tol <= 0:
        raise InputDataError("stop_tol must be positive")
    if not (0.0 < time_weight <= 1.0):
        raise InputDataError("time_weight must be in (0, 1]")

    fft = {s.id: s.free_flow_time for s in net.segments}
    times: dict[int, dict[int, float]] = {}
    estimates: dict[int, SegmentTimeEstimate] = {}
    diagnostics = RefinementDiagnostics()
    prev_paths: dict[tuple[int, int], tuple[int, ...]] | None = None
    last_residual = 0.0
    pieces: list[MatchedPath] = []

    for k in range(max_iters):
        routers: dict[int, Router] = {}
        pieces = []
        for trace in traces:
            iv = _trace_interval(trace, grid)
            router = routers.get(iv)
            if router is None:
                router = Router(net, net.times_to_array(times.get(iv, fft)))
                routers[iv] = router
            pieces.extend(match_trace(net, trace, times.get(iv, fft), match_params,
                                      router=router))

        cur_paths = {(mp.vehicle_id, mp.piece): tuple(mp.segments) for mp in pieces}
        if prev_paths is None:
            changed = len(cur_paths)
        else:
            keys = set(cur_paths) | set(prev_paths)
            changed = sum(1 for key in keys if cur_paths.get(key) != prev_paths.get(key))
        viterbi = math.fsum(mp.log_score for mp in pieces)

        if k >= 1 and changed == 0:
            # Nothing to re-infer: the paths, and therefore the system, are
            # exactly the previous iteration's.
            diagnostics.records.append(IterationRecord(k, last_residual, viterbi, 0, 0.0))
            logger.info("refinement fixed point at iteration %d", k)
            break

        by_interval = observations_from_matches(pieces, grid)
        residual = 0.0
        max_rel = 0.0
        for iv in sorted(by_interval):
            prior = times.get(iv, fft)
            est = infer_times(by_interval[iv], net, prior, lam=infer_params.lam,
                              tol=infer_params.tol, max_iter=infer_params.max_iter)
            if time_weight != 1.0:
                est.time = {
                    sid: time_weight * t + (1.0 - time_weight) * prior[sid]
                    for sid, t in est.time.items()
                }
            for sid, t_new in est.time.items():
                rel = abs(t_new - prior[sid]) / prior[sid]
                if rel > max_rel:
                    max_rel = rel
            estimates[iv] = est
            times[iv] = est.time
            residual += residual_sq(est.time, by_interval[iv], net)

        last_residual = residual
        diagnostics.records.append(IterationRecord(k, residual, viterbi, changed, max_rel))
        prev_paths = cur_paths
        if max_rel < stop_tol:
            logger.info("refinement converged at iteration %d (max change %.2e)", k, max_rel)
            break

    return pieces, estimates, diagnostics


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def write_diagnostics(diag: RefinementDiagnostics, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual", "viterbi_score", "changed_paths", "max_rel_change"])
        for r in diag.records:
            w.writerow([r.iteration, fmt_float(r.residual), fmt_float(r.viterbi_score),
                        r.changed_paths, fmt_float(r.max_rel_change)])


def read_diagnostics(path: str | os.PathLike) -> RefinementDiagnostics:
    diag = RefinementDiagnostics()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["iteration", "residual", "viterbi_score", "changed_paths", "max_rel_change"]
        if reader.fieldnames != expected:
            raise InputDataError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
        for row in reader:
            try:
                diag.records.append(IterationRecord(
                    iteration=int(row["iteration"]),
                    residual=float(row["residual"]),
                    viterbi_score=float(row["viterbi_score"]),
                    changed_paths=int(row["changed_paths"]),
                    max_rel_change=float(row["max_rel_change"]),
                ))
            except ValueError as exc:
                raise InputDataError(f"{path}: bad diagnostics row {row}: {exc}") from exc
    return diag
