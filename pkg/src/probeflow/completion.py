"""Temporal completion of the weekly travel-time matrix.

Probe coverage leaves holes: a segment observed on Monday morning may
never be observed on Sunday night, and some intervals are never
estimated at all. Travel-time matrices are strongly correlated across
time (daily and weekly rhythms), so the missing entries are recovered by
low-rank matrix completion: iterate

    X  <-  X + step * (shrink(X) - X),    then restore observed entries,

where shrink() soft-thresholds the singular values of X by a fixed
threshold. The observed-entry projection is the last operation of every
iteration, so observed values come out of the solve bit-equal to how
they went in. The iteration stops when the relative Frobenius change
drops below tol. All entries are finally clamped from below to their
segment's free-flow time.

Rows with no observation at all cannot be anchored by data; they are
filled with the segment's free-flow time, flagged, and kept out of the
low-rank system.

The singular value decomposition is computed in-repo by a one-sided
Jacobi method with a fixed round-robin sweep order, descending singular
values, and a deterministic sign convention, so completion output is a
pure function of its inputs.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputDataError
from .network import RoadNetwork, TimeGrid, fmt_float

logger = logging.getLogger(__name__)


@dataclass
class TravelTimeMatrix:
    """Per-segment, per-interval travel times with an observation mask.

    Row i belongs to segment_ids[i]; column j to grid interval j. An
    entry is trusted only where mask is true; unobserved entries are
    placeholders (zero by convention). free_flow carries each row's
    physical lower bound in seconds.
    """

    values: np.ndarray
    mask: np.ndarray
    segment_ids: list[int]
    free_flow: np.ndarray
    grid: TimeGrid

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        n, m = self.values.shape
        if self.mask.shape != (n, m):
            raise InputDataError(f"mask shape {self.mask.shape} != values shape {(n, m)}")
        if len(self.segment_ids) != n:
            raise InputDataError(f"{len(self.segment_ids)} segment ids for {n} rows")
        if len(set(self.segment_ids)) != n:
            raise InputDataError("segment ids must be unique")
        self.free_flow = np.asarray(self.free_flow, dtype=float)
        if self.free_flow.shape != (n,):
            raise InputDataError("free_flow must hold one bound per row")
        if m != self.grid.interval_count:
            raise InputDataError(
                f"{m} columns != interval count {self.grid.interval_count}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputDataError("travel-time matrix holds non-finite values")
        if not (np.all(np.isfinite(self.free_flow)) and np.all(self.free_flow > 0)):
            raise InputDataError("free-flow bounds must be finite and positive")
        low = self.values < self.free_flow[:, None]
        if np.any(low & self.mask):
            i, j = np.argwhere(low & self.mask)[0]
            raise InputDataError(
                f"observed time {self.values[i, j]} below free-flow bound "
                f"{self.free_flow[i]} (segment {self.segment_ids[i]}, interval {j})"
            )

    def column_times(self, interval: int) -> dict[int, float]:
        """Travel time of every segment in one interval."""
        if not 0 <= interval < self.grid.interval_count:
            raise InputDataError(f"interval {interval} out of range")
        col = self.values[:, interval]
        return {sid: float(col[i]) for i, sid in enumerate(self.segment_ids)}


@dataclass
class CompletionResult:
    """A fully observed matrix plus what the solve had to invent."""

    matrix: TravelTimeMatrix
    imputed: np.ndarray
    fallback_segments: list[int]
    iterations: int
    rel_change: float


def assemble_matrix(
    times_by_interval: dict[int, dict[int, float]],
    net: RoadNetwork,
    grid: TimeGrid,
    support_by_interval: dict[int, dict[int, int]] | None = None,
) -> TravelTimeMatrix:
    """Stack per-interval estimates into one weekly matrix.

    Every network segment gets a row; intervals absent from
    times_by_interval become fully missing columns. When support counts
    are given, entries whose support is zero (times merely carried over
    from a prior) are treated as missing too. Times are snapped up to
    the free-flow bound to absorb rounding dust from upstream averaging.
    """
    if not times_by_interval:
        raise InputDataError("no interval estimates to assemble")
    ids = sorted(net.segment_ids())
    row = {sid: i for i, sid in enumerate(ids)}
    free_flow = np.array([net.segment_by_id(sid).free_flow_time for sid in ids])
    values = np.zeros((len(ids), grid.interval_count))
    mask = np.zeros_like(values, dtype=bool)
    for iv in sorted(times_by_interval):
        if not 0 <= iv < grid.interval_count:
            raise InputDataError(f"interval {iv} outside the grid")
        support = None if support_by_interval is None else support_by_interval.get(iv, {})
        for sid in sorted(times_by_interval[iv]):
            if sid not in row:
                raise InputDataError(f"unknown segment id {sid} in interval {iv}")
            if support is not None and support.get(sid, 0) <= 0:
                continue
            i = row[sid]
            t = float(times_by_interval[iv][sid])
            if not math.isfinite(t):
                raise InputDataError(f"non-finite time for segment {sid}, interval {iv}")
            values[i, iv] = max(t, free_flow[i])
            mask[i, iv] = True
    return TravelTimeMatrix(values=values, mask=mask, segment_ids=ids,
                            free_flow=free_flow, grid=grid)


# ---------------------------------------------------------------------------
# Singular value decomposition
# ---------------------------------------------------------------------------


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: m-1 rounds of disjoint column pairs."""
    players = list(range(m)) + ([-1] if m % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        p, q = [], []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=int), np.array(q, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60,
               v0: np.ndarray | None = None):
    """Full SVD by one-sided Jacobi rotations: a = u @ diag(s) @ vt.

    Columns are orthogonalized pairwise in a fixed round-robin order
    (each round's pairs are disjoint, so its rotations apply in one
    vectorized step). Singular values come out descending; each right
    singular vector has its leading entry nonnegative, which pins the
    sign of the pair. Fixed input, fixed output.

    v0, an orthogonal right basis from a nearby matrix, starts the sweep
    close to convergence (only meaningful when n >= m). Callers that
    decompose a slowly changing iterate pass the previous vt.T.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise InputDataError("svd needs a nonempty 2-d matrix")
    if not np.all(np.isfinite(a)):
        raise InputDataError("svd input holds non-finite values")
    n, m = a.shape
    if n < m:
        if v0 is not None:
            raise InputDataError("warm start needs n >= m; transpose the input")
        u, s, vt = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return vt.T, s, u.T

    if v0 is None:
        b = a.copy()
        v = np.eye(m)
    else:
        if v0.shape != (m, m):
            raise InputDataError(f"warm-start basis shape {v0.shape} != {(m, m)}")
        b = a @ v0
        v = v0.copy()
    rounds = _round_robin(m)
    for sweep in range(max_sweeps):
        worst = 0.0
        for p, q in rounds:
            bp, bq = b[:, p], b[:, q]
            alpha = np.einsum("ij,ij->j", bp, bp)
            beta = np.einsum("ij,ij->j", bq, bq)
            gamma = np.einsum("ij,ij->j", bp, bq)
            scale = alpha * beta
            rot = gamma * gamma > (tol * tol) * scale
            with np.errstate(divide="ignore", invalid="ignore"):
                cos2 = np.where(scale > 0.0, gamma * gamma / scale, 0.0)
            worst = max(worst, float(cos2.max(initial=0.0)))
            if not rot.any():
                continue
            pi, qi = p[rot], q[rot]
            g = gamma[rot]
            with np.errstate(over="ignore"):
                zeta = (beta[rot] - alpha[rot]) / (2.0 * g)
                # The sign must be +1 at zeta == 0: equal-norm parallel
                # columns need a 45-degree rotation, not the identity.
                # hypot keeps huge zeta from overflowing in zeta**2.
                t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s_ = c * t
            bp, bq = b[:, pi], b[:, qi]
            b[:, pi] = c * bp - s_ * bq
            b[:, qi] = s_ * bp + c * bq
            vp, vq = v[:, pi], v[:, qi]
            v[:, pi] = c * vp - s_ * vq
            v[:, qi] = s_ * vp + c * vq
        if worst <= tol * tol:
            break
    else:
        logger.warning("svd sweep limit %d reached (residual %.3e)", max_sweeps, worst)

    norms = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    u = b[:, order] / np.where(s > 0.0, s, 1.0)
    v = v[:, order]
    for j in range(m):
        lead = np.argmax(np.abs(v[:, j]) > 1e-12)
        if v[lead, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, s, v.T


class _WarmShrink:
    """Soft-threshold singular values by tau, reusing the last right basis.

    The completion iterate changes little between steps, so the previous
    singular basis is a near-fixed-point start for the Jacobi sweep.
    """

    def __init__(self, tau: float) -> None:
        self.tau = tau
        self._basis: np.ndarray | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        transpose = x.shape[0] < x.shape[1]
        work = x.T if transpose else x
        u, s, vt = jacobi_svd(work, v0=self._basis)
        self._basis = vt.T
        kept = s - self.tau
        r = int(np.sum(kept > 0.0))
        if r == 0:
            return np.zeros_like(x)
        z = (u[:, :r] * kept[:r]) @ vt[:r]
        return z.T if transpose else z


# ---------------------------------------------------------------------------
# Completion
# ---------------------------------------------------------------------------


def default_threshold(values: np.ndarray, mask: np.ndarray) -> float:
    """Scale-aware shrinkage default: 0.5 * sqrt(n*m) * median(observed)."""
    n, m = values.shape
    return 0.5 * math.sqrt(n * m) * float(np.median(values[mask]))


def complete(
    mat: TravelTimeMatrix,
    svt_threshold: float | None = None,
    step: float = 1.2,
    max_iter: int = 500,
    tol: float = 1e-4,
) -> CompletionResult:
    """Fill every missing entry of the matrix; see the module docstring.

    svt_threshold None picks the scale heuristic of default_threshold().
    The returned matrix is fully observed; imputed marks the entries the
    solve produced (fallback rows count whole). Raising the threshold
    flattens the imputation toward fewer temporal patterns; lowering it
    trusts more of them.
    """
    if svt_threshold is not None and not (svt_threshold > 0 and math.isfinite(svt_threshold)):
        raise InputDataError(f"svt_threshold must be positive, got {svt_threshold}")
    if not 0.0 < step <= 2.0:
        raise InputDataError(f"step must lie in (0, 2], got {step}")
    if tol <= 0 or max_iter < 1:
        raise InputDataError("tol must be positive and max_iter at least 1")

    observed_rows = mat.mask.any(axis=1)
    fallback = [sid for i, sid in enumerate(mat.segment_ids) if not observed_rows[i]]
    for sid in fallback:
        logger.warning("segment %d has no observed interval; filling with free flow", sid)

    out = np.array(mat.values)
    out[~observed_rows] = mat.free_flow[~observed_rows, None]
    iterations = 0
    rel = 0.0

    if observed_rows.any():
        sub = out[observed_rows]
        sub_mask = mat.mask[observed_rows]
        obs_vals = sub[sub_mask]
        tau = default_threshold(sub, sub_mask) if svt_threshold is None else svt_threshold

        x = sub.copy()
        row_means = np.array([row[keep].mean() for row, keep in zip(sub, sub_mask)])
        x[~sub_mask] = np.broadcast_to(row_means[:, None], x.shape)[~sub_mask]
        shrink = _WarmShrink(tau)
        for k in range(1, max_iter + 1):
            z = shrink(x)
            xn = x + step * (z - x)
            xn[sub_mask] = obs_vals
            rel = float(np.linalg.norm(xn - x) / max(np.linalg.norm(x), 1e-12))
            x = xn
            iterations = k
            if rel < tol:
                break
        else:
            logger.warning(
                "completion stopped at max_iter=%d with relative change %.3e", max_iter, rel
            )
        out[observed_rows] = np.maximum(x, mat.free_flow[observed_rows, None])

    completed = TravelTimeMatrix(
        values=out,
        mask=np.ones_like(mat.mask),
        segment_ids=list(mat.segment_ids),
        free_flow=np.array(mat.free_flow),
        grid=mat.grid,
    )
    return CompletionResult(
        matrix=completed,
        imputed=~np.asarray(mat.mask, dtype=bool),
        fallback_segments=fallback,
        iterations=iterations,
        rel_change=rel,
    )


def interpolate_flows(
    flows_by_interval: dict[int, dict[int, float]],
    grid: TimeGrid,
) -> dict[int, dict[int, float]]:
    """Linear interpolation of per-segment flows across estimated intervals.

    Intervals before the first (after the last) estimate hold the first
    (last) estimated value. This is a plotting heuristic: flows are only
    actually solved for at the estimated intervals, and nothing enforces
    flow conservation between them.
    """
    if not flows_by_interval:
        raise InputDataError("no flows to interpolate")
    known = sorted(flows_by_interval)
    if not 0 <= known[0] <= known[-1] < grid.interval_count:
        raise InputDataError("flow intervals outside the grid")
    segs = sorted(flows_by_interval[known[0]])
    for iv in known:
        if sorted(flows_by_interval[iv]) != segs:
            raise InputDataError(f"interval {iv} covers a different segment set")
    all_iv = np.arange(grid.interval_count, dtype=float)
    out: dict[int, dict[int, float]] = {iv: {} for iv in range(grid.interval_count)}
    for sid in segs:
        series = np.interp(all_iv, np.array(known, dtype=float),
                           np.array([flows_by_interval[iv][sid] for iv in known]))
        for iv in range(grid.interval_count):
            out[iv][sid] = float(series[iv])
    return out


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

_MATRIX_HEADER = ["segment_id", "interval", "time_s", "observed"]
_COMPLETED_HEADER = ["segment_id", "interval", "time_s", "imputed"]


def write_matrix(mat: TravelTimeMatrix, path: str | os.PathLike) -> None:
    """Write the matrix as `segment_id,interval,time_s,observed` rows."""
    order = np.argsort(np.array(mat.segment_ids))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MATRIX_HEADER)
        for i in order:
            sid = mat.segment_ids[i]
            for j in range(mat.grid.interval_count):
                writer.writerow([sid, j, fmt_float(mat.values[i, j]),
                                 int(mat.mask[i, j])])


def read_matrix(path: str | os.PathLike, net: RoadNetwork, grid: TimeGrid) -> TravelTimeMatrix:
    """Rebuild a TravelTimeMatrix written by write_matrix."""
    ids = sorted(net.segment_ids())
    row = {sid: i for i, sid in enumerate(ids)}
    free_flow = np.array([net.segment_by_id(sid).free_flow_time for sid in ids])
    values = np.zeros((len(ids), grid.interval_count))
    mask = np.zeros_like(values, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _MATRIX_HEADER:
            raise InputDataError(f"unexpected matrix header in {path}: {header}")
        for rec in reader:
            try:
                sid, iv, t, obs = int(rec[0]), int(rec[1]), float(rec[2]), int(rec[3])
            except (ValueError, IndexError) as exc:
                raise InputDataError(f"bad matrix row in {path}: {rec}") from exc
            if sid not in row:
                raise InputDataError(f"unknown segment id {sid} in {path}")
            if not 0 <= iv < grid.interval_count:
                raise InputDataError(f"interval {iv} out of range in {path}")
            values[row[sid], iv] = t
            mask[row[sid], iv] = bool(obs)
    return TravelTimeMatrix(values=values, mask=mask, segment_ids=ids,
                            free_flow=free_flow, grid=grid)


def write_completed(result: CompletionResult, path: str | os.PathLike) -> None:
    """Write a completed matrix as `segment_id,interval,time_s,imputed` rows."""
    mat = result.matrix
    order = np.argsort(np.array(mat.segment_ids))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COMPLETED_HEADER)
        for i in order:
            sid = mat.segment_ids[i]
            for j in range(mat.grid.interval_count):
                writer.writerow([sid, j, fmt_float(mat.values[i, j]),
                                 int(result.imputed[i, j])])


def read_completed(
    path: str | os.PathLike,
) -> tuple[dict[int, dict[int, float]], set[tuple[int, int]]]:
    """Read back completed times: per-interval dicts plus the imputed set."""
    times: dict[int, dict[int, float]] = {}
    imputed: set[tuple[int, int]] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _COMPLETED_HEADER:
            raise InputDataError(f"unexpected completed header in {path}: {header}")
        for rec in reader:
            try:
                sid, iv, t, flag = int(rec[0]), int(rec[1]), float(rec[2]), int(rec[3])
            except (ValueError, IndexError) as exc:
                raise InputDataError(f"bad completed row in {path}: {rec}") from exc
            times.setdefault(iv, {})[sid] = t
            if flag:
                imputed.add((sid, iv))
    return times, imputed
