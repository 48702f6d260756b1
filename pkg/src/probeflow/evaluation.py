"""Accuracy metrics, the sequential baseline, and congestion exports.

Three numbers summarize a run against ground truth: mean squared error
of segment travel times, the relative improvement of that error over the
classical match-once-infer-once sequence, and the aggregate network
travel-time error. Map-matching quality is scored separately as a
length-weighted overlap between matched and true paths, so one long
wrong detour cannot hide behind many short correct segments.

The baseline here is the tandem pipeline: a single geometric matching
pass (travel times carry no weight) followed by a single inference pass.
It is exactly the refinement loop stopped after one iteration, which
keeps the comparison honest: both share every line of matching and
inference code and differ only in the iteration.

Volume-over-capacity products turn estimated flows into the congestion
views worth plotting: per-interval class averages as CSV and a per-
segment GeoJSON map with VOC buckets.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import InputDataError
from .mapmatch import GpsTrace, MatchedPath, MatchParams
from .network import RoadNetwork, TimeGrid, fmt_float
from .refine import RefinementDiagnostics, refine
from .tracegen import TruthTrip
from .ttinfer import InferParams, SegmentTimeEstimate

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Travel-time metrics
# ---------------------------------------------------------------------------


def _paired(est: dict[int, float], truth: dict[int, float]) -> list[int]:
    if not truth:
        raise InputDataError("no segments to score")
    if set(est) != set(truth):
        extra = sorted(set(est) ^ set(truth))[:5]
        raise InputDataError(f"estimate and truth cover different segments, e.g. {extra}")
    return sorted(truth)


def mse(est: dict[int, float], truth: dict[int, float]) -> float:
    """Mean squared error over all segments (keys must coincide)."""
    keys = _paired(est, truth)
    return math.fsum((est[k] - truth[k]) ** 2 for k in keys) / len(keys)


def gain_pct(mse_ours: float, mse_baseline: float) -> float:
    """Relative improvement of ours over the baseline, in percent."""
    if not (mse_baseline > 0 and math.isfinite(mse_baseline)):
        raise InputDataError(f"baseline mse must be positive, got {mse_baseline}")
    if not (mse_ours >= 0 and math.isfinite(mse_ours)):
        raise InputDataError(f"mse must be >= 0, got {mse_ours}")
    return 100.0 * (mse_baseline - mse_ours) / mse_baseline


def aggregate_error_pct(est: dict[int, float], truth: dict[int, float]) -> float:
    """Error of the summed network travel time, in percent.

    Per-segment errors of opposite sign cancel here by design; the
    metric scores the network total, not the profile.
    """
    keys = _paired(est, truth)
    total_truth = math.fsum(truth[k] for k in keys)
    if total_truth <= 0:
        raise InputDataError("aggregate truth travel time must be positive")
    total_est = math.fsum(est[k] for k in keys)
    return 100.0 * abs(total_est - total_truth) / total_truth


# ---------------------------------------------------------------------------
# Matching accuracy
# ---------------------------------------------------------------------------


def per_trip_overlap(
    matched: list[MatchedPath],
    truth: list[TruthTrip],
    net: RoadNetwork,
) -> tuple[dict[int, float], int]:
    """Length-weighted overlap percent per vehicle, plus the excluded count.

    Overlap of one trip is the total length of segments on both the
    matched and the true path divided by the total length of segments on
    either, as sets. Vehicles present on only one side are excluded and
    counted.
    """
    seen: dict[int, TruthTrip] = {}
    for trip in truth:
        if trip.vehicle_id in seen:
            raise InputDataError(f"duplicate truth trip for vehicle {trip.vehicle_id}")
        if not trip.path:
            raise InputDataError(f"truth trip of vehicle {trip.vehicle_id} has no path")
        seen[trip.vehicle_id] = trip

    matched_segs: dict[int, set[int]] = {}
    for mp in matched:
        matched_segs.setdefault(mp.vehicle_id, set()).update(mp.segments)

    overlaps: dict[int, float] = {}
    excluded = 0
    for vid in sorted(set(seen) | set(matched_segs)):
        if vid not in seen or vid not in matched_segs:
            excluded += 1
            continue
        true_set = set(seen[vid].path)
        got_set = matched_segs[vid]
        inter = math.fsum(net.segment_by_id(s).length for s in sorted(true_set & got_set))
        union = math.fsum(net.segment_by_id(s).length for s in sorted(true_set | got_set))
        overlaps[vid] = 100.0 * inter / union
    return overlaps, excluded


def matching_accuracy_pct(
    matched: list[MatchedPath],
    truth: list[TruthTrip],
    net: RoadNetwork,
) -> float:
    """Trip-mean of the length-weighted path overlap, in percent."""
    overlaps, excluded = per_trip_overlap(matched, truth, net)
    if not overlaps:
        raise InputDataError("no vehicle appears in both matched and truth trips")
    if excluded:
        logger.info("matching accuracy: %d trips excluded (one-sided)", excluded)
    return math.fsum(overlaps[v] for v in sorted(overlaps)) / len(overlaps)


# ---------------------------------------------------------------------------
# Sequential baseline
# ---------------------------------------------------------------------------


def run_baseline(
    traces: list[GpsTrace],
    net: RoadNetwork,
    grid: TimeGrid,
    match_params: MatchParams = MatchParams(),
    infer_params: InferParams = InferParams(),
) -> tuple[list[MatchedPath], dict[int, SegmentTimeEstimate], RefinementDiagnostics]:
    """One geometric matching pass, one inference pass, no feedback.

    Defined as the refinement loop stopped after its first iteration
    with travel times stripped out of the transition score, so baseline
    and full pipeline share all matching and inference code.
    """
    return refine(traces, net, grid,
                  match_params=replace(match_params, tt_tau=0.0),
                  infer_params=infer_params, max_iters=1)


# ---------------------------------------------------------------------------
# Congestion products
# ---------------------------------------------------------------------------


def voc_series(
    flows_by_interval: dict[int, dict[int, float]],
    net: RoadNetwork,
    grid: TimeGrid,
    class_filter: str | None = None,
) -> list[float]:
    """Mean volume-over-capacity per interval, optionally per road class.

    Intervals absent from flows_by_interval count as carrying no flow;
    an interval that is present must cover every filtered segment.
    """
    segs = [s for s in net.segments if class_filter is None or s.road_class == class_filter]
    if not segs:
        raise InputDataError(f"no segments of road class {class_filter!r}")
    segs = sorted(segs, key=lambda s: s.id)
    series = []
    for iv in range(grid.interval_count):
        flows = flows_by_interval.get(iv)
        if flows is None:
            series.append(0.0)
            continue
        try:
            series.append(math.fsum(flows[s.id] / s.capacity for s in segs) / len(segs))
        except KeyError as exc:
            raise InputDataError(
                f"interval {iv} flows miss segment {exc.args[0]}"
            ) from None
    return series


def lag_autocorrelation(series: list[float], lag: int) -> float:
    """Pearson correlation of the series with itself shifted by lag.

    A constant slice has no correlation to speak of; the sentinel NaN is
    returned so callers can flag it instead of crashing on 0/0.
    """
    if lag < 1:
        raise InputDataError(f"lag must be >= 1, got {lag}")
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or len(x) <= lag:
        raise InputDataError(f"series of length {len(x)} is too short for lag {lag}")
    if not np.all(np.isfinite(x)):
        raise InputDataError("series holds non-finite values")
    a, b = x[:-lag], x[lag:]
    da, db = a - a.mean(), b - b.mean()
    var_a, var_b = float(da @ da), float(db @ db)
    if var_a == 0.0 or var_b == 0.0:
        return float("nan")
    return float((da @ db) / math.sqrt(var_a * var_b))


def voc_bucket(voc: float) -> str:
    """Congestion bucket label of one VOC value."""
    if not (voc >= 0 and math.isfinite(voc)):
        raise InputDataError(f"voc must be finite and >= 0, got {voc}")
    if voc < 0.4:
        return "[0,0.4)"
    if voc < 0.7:
        return "[0.4,0.7)"
    if voc < 0.9:
        return "[0.7,0.9)"
    return "[0.9,inf)"


# ---------------------------------------------------------------------------
# Reports and exports
# ---------------------------------------------------------------------------


class ScenarioMetrics(NamedTuple):
    """The metric quadruple of one evaluated scenario."""

    mse: float
    gain_pct: float
    aggregate_error_pct: float
    matching_accuracy_pct: float


@dataclass
class MetricReport:
    """Scenario-mean metrics plus the per-scenario breakdown."""

    mse: float
    gain_pct: float
    aggregate_error_pct: float
    matching_accuracy_pct: float
    per_scenario: dict[str, ScenarioMetrics]


def build_report(per_scenario: dict[str, ScenarioMetrics]) -> MetricReport:
    """Validate scenario metrics and average them into a report."""
    if not per_scenario:
        raise InputDataError("report needs at least one scenario")
    for name, m in sorted(per_scenario.items()):
        if m.gain_pct > 100.0:
            raise InputDataError(f"scenario {name}: gain above 100%")
        if m.aggregate_error_pct < 0.0:
            raise InputDataError(f"scenario {name}: negative aggregate error")
        if not 0.0 <= m.matching_accuracy_pct <= 100.0:
            raise InputDataError(f"scenario {name}: matching accuracy outside [0, 100]")
        if m.mse < 0.0:
            raise InputDataError(f"scenario {name}: negative mse")
    names = sorted(per_scenario)
    n = len(names)

    def mean(field: str) -> float:
        return math.fsum(getattr(per_scenario[k], field) for k in names) / n

    return MetricReport(
        mse=mean("mse"),
        gain_pct=mean("gain_pct"),
        aggregate_error_pct=mean("aggregate_error_pct"),
        matching_accuracy_pct=mean("matching_accuracy_pct"),
        per_scenario=dict(per_scenario),
    )


def write_report(report: MetricReport, path: str | os.PathLike) -> None:
    """Write the report as JSON: scenario means plus per-scenario values."""
    doc = {
        "mean": {
            "mse": report.mse,
            "gain_pct": report.gain_pct,
            "aggregate_error_pct": report.aggregate_error_pct,
            "matching_accuracy_pct": report.matching_accuracy_pct,
        },
        "scenarios": {
            name: dict(m._asdict()) for name, m in sorted(report.per_scenario.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path: str | os.PathLike) -> MetricReport:
    """Rebuild a MetricReport written by write_report."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        scenarios = {
            name: ScenarioMetrics(**vals) for name, vals in doc["scenarios"].items()
        }
    except (KeyError, TypeError) as exc:
        raise InputDataError(f"malformed report file {path}") from exc
    return build_report(scenarios)


_VOC_HEADER = ["interval", "road_class", "mean_voc"]


def write_voc(series_by_class: dict[str, list[float]], path: str | os.PathLike) -> None:
    """Write per-class VOC series as `interval,road_class,mean_voc` rows."""
    if not series_by_class:
        raise InputDataError("no voc series to write")
    lengths = {len(v) for v in series_by_class.values()}
    if len(lengths) != 1:
        raise InputDataError(f"voc series lengths differ: {sorted(lengths)}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_VOC_HEADER)
        for iv in range(lengths.pop()):
            for cls in sorted(series_by_class):
                writer.writerow([iv, cls, fmt_float(series_by_class[cls][iv])])


def read_voc(path: str | os.PathLike) -> dict[str, list[float]]:
    """Read back per-class VOC series written by write_voc."""
    out: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _VOC_HEADER:
            raise InputDataError(f"unexpected voc header in {path}: {header}")
        for rec in reader:
            try:
                iv, cls, v = int(rec[0]), rec[1], float(rec[2])
            except (ValueError, IndexError) as exc:
                raise InputDataError(f"bad voc row in {path}: {rec}") from exc
            series = out.setdefault(cls, [])
            if iv != len(series):
                raise InputDataError(f"voc rows of class {cls} out of order in {path}")
            series.append(v)
    return out


def export_geojson(net: RoadNetwork, vocs: dict[int, float], path: str | os.PathLike) -> None:
    """Write segments with their VOC as a GeoJSON FeatureCollection.

    One LineString per entry of vocs, ordered by segment id, with
    properties segment_id, voc, and the voc_bucket label.
    """
    if not vocs:
        raise InputDataError("no segments to export")
    features = []
    for sid in sorted(vocs):
        seg = net.segment_by_id(sid)
        a = net.nodes[net.node_index(seg.from_node)]
        b = net.nodes[net.node_index(seg.to_node)]
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "LineString",
                "coordinates": [[a.lon, a.lat], [b.lon, b.lat]],
            },
            "properties": {
                "segment_id": sid,
                "voc": vocs[sid],
                "voc_bucket": voc_bucket(vocs[sid]),
            },
        })
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")