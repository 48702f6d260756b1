"""Synthetic benchmark generation.

Produces the three ingredients every experiment needs: ground-truth
network conditions (system-optimal assignments at a ladder of demand
levels), truth trips routed on those conditions, and noisy low-rate GPS
traces sampled from the trips. A timestamp-based reference estimator
over dense traces is included as the second ground-truth mode.

Everything here is deterministic given the configured seed. Trace noise
uses one generator per vehicle (seed = rng_seed + vehicle_id) so trips
can be generated in parallel or in any order without changing output.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .assignment import DemandMatrix, solve_so
from .errors import InputDataError
from .mapmatch import GpsTrace
from .network import (
    RoadNetwork,
    Taz,
    TimeGrid,
    fmt_float,
    meters_per_degree,
    position_on_segment,
    shortest_path,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    """How trips are probed: sampling rate, GPS noise, fleet penetration."""

    sampling_period: float = 60.0
    gps_sigma: float = 10.0
    penetration: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.sampling_period <= 0:
            raise InputDataError("sampling_period must be positive")
        if self.gps_sigma < 0:
            raise InputDataError("gps_sigma must be >= 0")
        if not (0.0 < self.penetration <= 1.0):
            raise InputDataError("penetration must be in (0, 1]")


@dataclass
class GroundTruthScenario:
    """One congestion level: times and flows from a converged assignment."""

    id: int
    demand_multiplier: float
    time: dict[int, float]
    flow: dict[int, float]


@dataclass
class TruthTrip:
    """A simulated vehicle journey with known per-segment entry times.

    ``entry_times[i]`` is when the vehicle enters ``path[i]``; the trip
    ends at ``arrival``. Trips read back from CSV carry only the path and
    departure (entry times are None) until rebuilt against a scenario.
    """

    vehicle_id: int
    departure: float
    path: list[int]
    entry_times: list[float] | None
    arrival: float | None = None


def default_multipliers(count: int = 34, low: float = 0.2, high: float = 2.0) -> list[float]:
    """Uniform demand-multiplier ladder spanning free flow to heavy congestion."""
    return [float(m) for m in np.linspace(low, high, count)]


# ---------------------------------------------------------------------------
# Scenario and trip generation
# ---------------------------------------------------------------------------


def gen_scenarios(
    net: RoadNetwork,
    base_demand: DemandMatrix,
    multipliers: list[float],
    tazs: list[Taz],
    tol: float = 1e-5,
    max_iter: int = 800,
) -> list[GroundTruthScenario]:
    """System-optimal assignment per demand multiplier, indexed in order."""
    if any(m <= 0 for m in multipliers):
        raise InputDataError("demand multipliers must be positive")
    scenarios = []
    for i, m in enumerate(multipliers):
        scaled = {od: rate * m for od, rate in base_demand.items()}
        result = solve_so(net, scaled, tazs, tol=tol, max_iter=max_iter)
        if not result.converged:
            logger.warning("scenario %d (multiplier %.3g): assignment gap %.2e above tol",
                           i, m, result.relative_gap)
        scenarios.append(GroundTruthScenario(id=i, demand_multiplier=m,
                                             time=result.time, flow=result.flow))
    return scenarios


def simulate_trip(
    net: RoadNetwork,
    origin: Taz,
    dest: Taz,
    scenario: GroundTruthScenario,
    departure: float,
    vehicle_id: int,
) -> TruthTrip:
    """Route one vehicle on the scenario's fastest path at its fixed times."""
    res = shortest_path(net, origin.centroid_node, dest.centroid_node,
                        lambda sid: scenario.time[sid])
    if res is None:
        raise InputDataError(
            f"no route from TAZ {origin.id} to TAZ {dest.id} under scenario {scenario.id}"
        )
    path, _cost = res
    if not path:
        raise InputDataError(f"TAZ {origin.id} and TAZ {dest.id} share a centroid; empty trip")
    entry = [departure]
    for sid in path[:-1]:
        entry.append(entry[-1] + scenario.time[sid])
    arrival = entry[-1] + scenario.time[path[-1]]
    return TruthTrip(vehicle_id=vehicle_id, departure=departure, path=path,
                     entry_times=entry, arrival=arrival)


def _position_at(net: RoadNetwork, trip: TruthTrip, scenario: GroundTruthScenario,
                 t: float) -> tuple[float, float]:
    entry = trip.entry_times
    j = int(np.searchsorted(entry, t, side="right")) - 1
    j = min(max(j, 0), len(trip.path) - 1)
    sid = trip.path[j]
    seg_time = scenario.time[sid]
    frac = (t - entry[j]) / seg_time
    frac = min(max(frac, 0.0), 1.0)
    return position_on_segment(net, sid, frac * net.segment_by_id(sid).length)


def sample_trace(
    trip: TruthTrip,
    net: RoadNetwork,
    scenario: GroundTruthScenario,
    cfg: ProbeConfig,
) -> GpsTrace:
    """Sample the trip at the probe period (plus the arrival instant).

    The position at each sample time is exact on the trip's path; noise is
    isotropic Gaussian with std gps_sigma meters, converted to degrees at
    the true position. The noise generator is seeded with
    rng_seed + vehicle_id, so regeneration order never matters.
    """
    if trip.entry_times is None or trip.arrival is None:
        raise InputDataError(f"trip {trip.vehicle_id} lacks entry times; rebuild it first")
    duration = trip.arrival - trip.departure
    n_whole = int(duration / cfg.sampling_period)
    ts = [trip.departure + k * cfg.sampling_period for k in range(n_whole + 1)]
    # Keep the arrival instant, avoiding a duplicate when the duration is
    # an exact multiple of the period.
    if trip.arrival - ts[-1] > 1e-9:
        ts.append(trip.arrival)
    elif len(ts) >= 2:
        ts[-1] = trip.arrival
    else:
        ts.append(trip.arrival)

    rng = np.random.default_rng(cfg.rng_seed + trip.vehicle_id)
    noise = rng.standard_normal((len(ts), 2)) * cfg.gps_sigma
    lats, lons = [], []
    for (t, (nlat, nlon)) in zip(ts, noise):
        lat, lon = _position_at(net, trip, scenario, t)
        mlat, mlon = meters_per_degree(lat)
        lats.append(lat + nlat / mlat)
        lons.append(lon + nlon / mlon)
    return GpsTrace(vehicle_id=trip.vehicle_id, timestamps=np.array(ts),
                    lats=np.array(lats), lons=np.array(lons))


def with_times(trip: TruthTrip, scenario: GroundTruthScenario) -> TruthTrip:
    """Rebuild entry times of a path-only trip against a scenario."""
    entry = [trip.departure]
    for sid in trip.path[:-1]:
        entry.append(entry[-1] + scenario.time[sid])
    arrival = entry[-1] + scenario.time[trip.path[-1]]
    return TruthTrip(vehicle_id=trip.vehicle_id, departure=trip.departure,
                     path=list(trip.path), entry_times=entry, arrival=arrival)


# ---------------------------------------------------------------------------
# Timestamp ground-truth mode
# ---------------------------------------------------------------------------


def derive_truth_timestamp(
    traces: list[GpsTrace],
    trips: list[TruthTrip],
    net: RoadNetwork,
) -> tuple[dict[int, float], set[int]]:
    """Per-segment mean traversal time from densely sampled known trips.

    For each trip, entry and exit instants of every path segment are
    interpolated linearly between the bracketing samples (positions along
    the path are known exactly, so the interpolation support is the
    sample's traveled distance). Intended for sampling periods of a few
    seconds; the boundary error is at most one period per segment.

    Returns (times, uncovered): segments without any traversal take their
    free-flow time and appear in ``uncovered``.
    """
    by_vehicle = {t.vehicle_id: t for t in trips}
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for trace in traces:
        trip = by_vehicle.get(trace.vehicle_id)
        if trip is None or trip.entry_times is None:
            continue
        lengths = np.array([net.segment_by_id(s).length for s in trip.path])
        bounds = np.concatenate(([0.0], np.cumsum(lengths)))
        seg_times = np.diff(np.asarray(trip.entry_times + [trip.arrival]))
        # Traveled distance at each sample time.
        t = np.clip(trace.timestamps, trip.departure, trip.arrival)
        j = np.clip(np.searchsorted(trip.entry_times, t, side="right") - 1, 0, len(trip.path) - 1)
        frac = np.clip((t - np.asarray(trip.entry_times)[j]) / seg_times[j], 0.0, 1.0)
        dist = bounds[j] + frac * lengths[j]
        # Strictly increasing support (stationary duplicates keep the first).
        keep = np.concatenate(([True], np.diff(dist) > 0))
        dist_s, time_s = dist[keep], trace.timestamps[keep]
        entry_t = np.interp(bounds[:-1], dist_s, time_s)
        exit_t = np.interp(bounds[1:], dist_s, time_s)
        for sid, te, tx in zip(trip.path, entry_t, exit_t):
            sums[sid] = sums.get(sid, 0.0) + float(tx - te)
            counts[sid] = counts.get(sid, 0) + 1

    times: dict[int, float] = {}
    uncovered: set[int] = set()
    for seg in net.segments:
        if counts.get(seg.id, 0) > 0:
            times[seg.id] = sums[seg.id] / counts[seg.id]
        else:
            times[seg.id] = seg.free_flow_time
            uncovered.add(seg.id)
    if uncovered:
        logger.info("timestamp mode: %d segment(s) without coverage use free-flow time",
                    len(uncovered))
    return times, uncovered


# ---------------------------------------------------------------------------
# Weekly probe-data generation
# ---------------------------------------------------------------------------


def generate_probe_data(
    net: RoadNetwork,
    tazs: list[Taz],
    base_demand: DemandMatrix,
    scenarios: list[GroundTruthScenario],
    schedule: list[int],
    grid: TimeGrid,
    cfg: ProbeConfig,
) -> dict[int, tuple[list[TruthTrip], list[GpsTrace]]]:
    """Simulate probed trips across the week.

    ``schedule[i]`` names the scenario active in interval i (-1 for no
    traffic). The expected probe count per OD pair and interval is
    penetration * base_rate * multiplier * interval_hours, realized by
    flooring plus one Bernoulli draw; departures are uniform within the
    interval. Vehicle ids are assigned in generation order (interval,
    then OD pair), so the whole layout is a pure function of the seed.

    Returns trips and traces grouped by scenario id.
    """
    if len(schedule) != grid.interval_count:
        raise InputDataError(
            f"schedule length {len(schedule)} != interval count {grid.interval_count}"
        )
    by_id = {s.id: s for s in scenarios}
    for sid in schedule:
        if sid >= 0 and sid not in by_id:
            raise InputDataError(f"schedule references unknown scenario {sid}")
    taz_by_id = {t.id: t for t in tazs}
    centroid = {t.id: t.centroid_node for t in tazs}
    od_pairs = sorted(
        od for od, rate in base_demand.items()
        if rate > 0 and od[0] != od[1] and centroid[od[0]] != centroid[od[1]]
    )

    out: dict[int, tuple[list[TruthTrip], list[GpsTrace]]] = {
        s.id: ([], []) for s in scenarios
    }
    vid = 0
    hours = grid.interval_seconds / 3600.0
    for interval, sid in enumerate(schedule):
        if sid < 0:
            continue
        scen = by_id[sid]
        rng = np.random.default_rng([cfg.rng_seed, interval])
        start = interval * grid.interval_seconds
        for od in od_pairs:
            expected = cfg.penetration * base_demand[od] * scen.demand_multiplier * hours
            n = int(expected) + (1 if rng.random() < expected - int(expected) else 0)
            for _ in range(n):
                dep = start + float(rng.uniform(0.0, grid.interval_seconds))
                trip = simulate_trip(net, taz_by_id[od[0]], taz_by_id[od[1]], scen, dep, vid)
                trace = sample_trace(trip, net, scen, cfg)
                out[sid][0].append(trip)
                out[sid][1].append(trace)
                vid += 1
    total = sum(len(v[0]) for v in out.values())
    logger.info("generated %d probed trip(s) across %d scenario(s)", total, len(scenarios))
    return out


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def write_traces(traces: list[GpsTrace], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "timestamp", "lat", "lon"])
        for trace in sorted(traces, key=lambda t: t.vehicle_id):
            for t, lat, lon in zip(trace.timestamps, trace.lats, trace.lons):
                w.writerow([trace.vehicle_id, fmt_float(t), fmt_float(lat), fmt_float(lon)])


def read_traces(path: str | os.PathLike) -> list[GpsTrace]:
    rows: dict[int, list[tuple[float, float, float]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["vehicle_id", "timestamp", "lat", "lon"]
        if reader.fieldnames != expected:
            raise InputDataError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
        for row in reader:
            try:
                vid = int(row["vehicle_id"])
                rows.setdefault(vid, []).append(
                    (float(row["timestamp"]), float(row["lat"]), float(row["lon"]))
                )
            except ValueError as exc:
                raise InputDataError(f"{path}: bad trace row {row}: {exc}") from exc
    if not rows:
        raise InputDataError(f"{path}: no trace points")
    traces = []
    for vid in sorted(rows):
        pts = rows[vid]
        traces.append(GpsTrace(
            vehicle_id=vid,
            timestamps=np.array([p[0] for p in pts]),
            lats=np.array([p[1] for p in pts]),
            lons=np.array([p[2] for p in pts]),
        ))
    return traces


def write_trips(trips: list[TruthTrip], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "departure_s", "path"])
        for trip in sorted(trips, key=lambda t: t.vehicle_id):
            w.writerow([trip.vehicle_id, fmt_float(trip.departure),
                        "/".join(str(s) for s in trip.path)])


def read_trips(path: str | os.PathLike) -> list[TruthTrip]:
    """Read trips; entry times are not stored, rebuild with ``with_times``."""
    trips = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["vehicle_id", "departure_s", "path"]
        if reader.fieldnames != expected:
            raise InputDataError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
        for row in reader:
            try:
                trips.append(TruthTrip(
                    vehicle_id=int(row["vehicle_id"]),
                    departure=float(row["departure_s"]),
                    path=[int(s) for s in row["path"].split("/")],
                    entry_times=None,
                ))
            except ValueError as exc:
                raise InputDataError(f"{path}: bad trip row {row}: {exc}") from exc
    return trips


def write_truth(scenario: GroundTruthScenario, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "time_s", "flow_vph"])
        for sid in sorted(scenario.time):
            w.writerow([sid, fmt_float(scenario.time[sid]), fmt_float(scenario.flow[sid])])


def read_truth(path: str | os.PathLike) -> tuple[dict[int, float], dict[int, float]]:
    times: dict[int, float] = {}
    flows: dict[int, float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["segment_id", "time_s", "flow_vph"]
        if reader.fieldnames != expected:
            raise InputDataError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
        for row in reader:
            try:
                sid = int(row["segment_id"])
                times[sid] = float(row["time_s"])
                flows[sid] = float(row["flow_vph"])
            except ValueError as exc:
                raise InputDataError(f"{path}: bad truth row {row}: {exc}") from exc
    return times, flows
