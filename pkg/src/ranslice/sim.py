"""Discrete-event RAN slicing world.

One call to :func:`step_sim` advances a control interval made of
``subframes_per_interval`` scheduling rounds.  In every subframe each slice
runs proportional-fair (PF) scheduling over its RBG quota; RBGs a slice
cannot use are pooled and handed to the remaining backlogged UEs of any
slice (soft slicing).

Channel: single base station at the area centre, log-distance pathloss and
Shannon rate per RBG.  Traffic: Poisson packet arrivals of fixed size.
Mobility: random waypoint.

Per-UE packet queues live in ring buffers on :class:`SimState` and the
subframe loop is compiled with numba.  ``SimState.ues`` gives read-only
:class:`UeState` snapshots for inspection.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np


class ConfigError(ValueError):
    """Invalid simulator configuration."""


class AllocationError(ValueError):
    """Per-slice RBG allocation violates the resource constraint."""


@dataclass(frozen=True)
class SimConfig:
    num_slices: int = 3
    num_rbgs: int = 25
    ues_per_slice: tuple[int, ...] = (8, 12, 16)
    offered_load_per_ue: float = 2e6  # bit/s
    delay_threshold: float = 0.1  # s
    area: tuple[float, float] = (120.0, 10.0)  # m
    ue_speed_range: tuple[float, float] = (1.0, 2.0)  # m/s
    subframe_duration: float = 1e-3  # s
    subframes_per_interval: int = 100
    packet_size: float = 5000.0  # bit
    # link model
    bandwidth_per_rbg: float = 720e3  # Hz
    snr_ref_db: float = 25.0
    ref_distance: float = 10.0  # m
    pathloss_exponent: float = 2.5
    # PF throughput average
    ewma_coeff: float = 0.1
    ewma_floor: float = 1e3  # bit/s
    drop_factor: float = 10.0  # packets older than drop_factor * delay_threshold are dropped
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ues_per_slice", tuple(int(u) for u in self.ues_per_slice))
        object.__setattr__(self, "area", tuple(float(a) for a in self.area))
        object.__setattr__(self, "ue_speed_range", tuple(float(v) for v in self.ue_speed_range))

    @property
    def control_interval(self) -> float:
        return self.subframes_per_interval * self.subframe_duration

    @property
    def num_ues(self) -> int:
        return sum(self.ues_per_slice)

    @property
    def bs_position(self) -> np.ndarray:
        return np.array(self.area) / 2.0

    def validate(self) -> "SimConfig":
        if self.num_slices < 1 or self.num_rbgs < 1:
            raise ConfigError("num_slices and num_rbgs must be >= 1")
        if len(self.ues_per_slice) != self.num_slices:
            raise ConfigError(
                f"ues_per_slice has {len(self.ues_per_slice)} entries, expected {self.num_slices}"
            )
        if any(u < 1 for u in self.ues_per_slice):
            raise ConfigError("every slice needs at least one UE")
        if self.subframes_per_interval < 1 or self.subframe_duration <= 0:
            raise ConfigError("subframe structure must be positive")
        lo, hi = self.ue_speed_range
        if not 0 < lo <= hi:
            raise ConfigError("ue_speed_range must satisfy 0 < lo <= hi")
        if len(self.area) != 2 or min(self.area) <= 0:
            raise ConfigError("area must be two positive side lengths")
        if self.packet_size <= 0 or self.offered_load_per_ue < 0:
            raise ConfigError("packet_size must be positive and load nonnegative")
        if self.delay_threshold <= 0 or self.ref_distance <= 0 or not 0 < self.ewma_coeff <= 1:
            raise ConfigError("delay_threshold, ref_distance, ewma_coeff out of range")
        if self.ewma_floor <= 0 or self.drop_factor <= 0 or self.bandwidth_per_rbg <= 0:
            raise ConfigError("ewma_floor, drop_factor, bandwidth_per_rbg must be positive")
        return self

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Packet:
    arrival_time: float
    size_remaining: float


@dataclass
class UeState:
    """Snapshot of one UE, built from the array state."""

    slice_id: int
    position: np.ndarray
    velocity: np.ndarray
    waypoint: np.ndarray
    speed: float
    queue: list[Packet] = field(default_factory=list)
    ewma_throughput: float = 1e3
    # per-interval counters
    delivered: int = 0
    violated: int = 0
    dropped: int = 0
    delay_sum: float = 0.0
    # cumulative counters for packet conservation
    total_arrived: int = 0
    total_delivered: int = 0
    total_dropped: int = 0

    @property
    def queue_bits(self) -> float:
        return sum(p.size_remaining for p in self.queue)


@dataclass
class SliceMetrics:
    rx_throughput: float  # T_rx, bit/s
    offered_load: float  # T_tx, bit/s
    utilization: float  # U
    delay_violation_rate: float  # D_vio
    avg_delay: float  # D_avg, s
    rbgs_granted: int
    rbgs_used: int

    def as_row(self) -> list:
        return [
            self.rx_throughput,
            self.offered_load,
            self.utilization,
            self.delay_violation_rate,
            self.avg_delay,
            self.rbgs_granted,
            self.rbgs_used,
        ]


METRICS_CSV_HEADER = ["step", "slice_id", "T_rx", "T_tx", "U", "D_vio", "D_avg", "rbgs_granted", "rbgs_used"]


def append_metrics_csv(path, step: int, metrics: list[SliceMetrics]) -> None:
    """Append one row per slice; the header is written when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(METRICS_CSV_HEADER)
        for i, m in enumerate(metrics):
            w.writerow([step, i, *(repr(float(v)) if isinstance(v, float) else v for v in m.as_row())])


@dataclass
class RbgAudit:
    """Instrumented counters for the per-subframe resource invariant."""

    subframes: int = 0
    max_assigned: int = 0
    duplicates: int = 0


@dataclass
class SimState:
    config: SimConfig
    slice_id: np.ndarray  # (n,)
    position: np.ndarray  # (n, 2)
    waypoint: np.ndarray  # (n, 2)
    speed: np.ndarray  # (n,)
    ewma: np.ndarray  # (n,)
    q_time: np.ndarray  # (n, cap) arrival times, ring buffer
    q_size: np.ndarray  # (n, cap) remaining bits
    q_head: np.ndarray  # (n,)
    q_len: np.ndarray  # (n,)
    counters: np.ndarray  # (n, 6) int: delivered, violated, dropped, arrived, delivered, dropped (last 3 cumulative)
    delay_sum: np.ndarray  # (n,) last interval
    time: float
    step_count: int
    arrival_rng: np.random.Generator
    mobility_rng: np.random.Generator
    delays: list[float] | None = None  # per-packet delays, appended when not None
    audit: RbgAudit | None = None

    @property
    def num_ues(self) -> int:
        return len(self.slice_id)

    def slice_members(self, i: int) -> list[int]:
        return np.flatnonzero(self.slice_id == i).tolist()

    def queue(self, k: int) -> list[Packet]:
        cap = self.q_time.shape[1]
        idx = (self.q_head[k] + np.arange(self.q_len[k])) % cap
        return [Packet(float(t), float(s)) for t, s in zip(self.q_time[k, idx], self.q_size[k, idx])]

    @property
    def ues(self) -> list[UeState]:
        out = []
        for k in range(self.num_ues):
            c = self.counters[k]
            out.append(UeState(
                slice_id=int(self.slice_id[k]),
                position=self.position[k].copy(),
                velocity=_heading(self.position[k], self.waypoint[k], self.speed[k]),
                waypoint=self.waypoint[k].copy(),
                speed=float(self.speed[k]),
                queue=self.queue(k),
                ewma_throughput=float(self.ewma[k]),
                delivered=int(c[0]), violated=int(c[1]), dropped=int(c[2]),
                delay_sum=float(self.delay_sum[k]),
                total_arrived=int(c[3]), total_delivered=int(c[4]), total_dropped=int(c[5]),
            ))
        return out


def _heading(pos, wp, speed):
    d = wp - pos
    n = float(np.hypot(d[0], d[1]))
    if n == 0.0:
        return np.zeros(2)
    return d / n * speed


def reset_sim(config: SimConfig, seed: int) -> SimState:
    config.validate()
    arrival_seq, mobility_seq = np.random.SeedSequence(seed).spawn(2)
    mobility_rng = np.random.default_rng(mobility_seq)
    area = np.array(config.area)
    n = config.num_ues
    draws = mobility_rng.uniform(0.0, 1.0, (n, 5))
    lo, hi = config.ue_speed_range
    # enough room for every packet younger than the drop age, with Poisson headroom
    lam = config.offered_load_per_ue / config.packet_size * (
        config.drop_factor * config.delay_threshold + config.control_interval)
    cap = int(lam + 8 * math.sqrt(lam) + 32)
    return SimState(
        config=config,
        slice_id=np.repeat(np.arange(config.num_slices), config.ues_per_slice).astype(np.int64),
        position=draws[:, 0:2] * area,
        waypoint=draws[:, 2:4] * area,
        speed=lo + (hi - lo) * draws[:, 4],
        ewma=np.full(n, config.ewma_floor),
        q_time=np.zeros((n, cap)),
        q_size=np.zeros((n, cap)),
        q_head=np.zeros(n, dtype=np.int64),
        q_len=np.zeros(n, dtype=np.int64),
        counters=np.zeros((n, 6), dtype=np.int64),
        delay_sum=np.zeros(n),
        time=0.0,
        step_count=0,
        arrival_rng=np.random.default_rng(arrival_seq),
        mobility_rng=mobility_rng,
    )


def _arrival_batch(rate: float, dt: float, n_streams: int, rng: np.random.Generator, t0: float):
    """Poisson arrivals for ``n_streams`` independent sources over ``[t0, t0 + dt)``.

    Returns ``(counts, stream, times)`` with arrivals sorted by stream, then time.
    """
    if rate <= 0:
        return np.zeros(n_streams, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    counts = rng.poisson(rate * dt, n_streams)
    times = rng.uniform(t0, t0 + dt, int(counts.sum()))
    stream = np.repeat(np.arange(n_streams), counts)
    order = np.lexsort((times, stream))
    return counts, stream[order], times[order]


def poisson_arrivals(rate: float, dt: float, rng: np.random.Generator, packet_size: float = 5000.0,
                     t0: float = 0.0) -> list[Packet]:
    """Packets arriving in ``[t0, t0 + dt)`` for a Poisson process of ``rate`` packets/s."""
    _, _, times = _arrival_batch(rate, dt, 1, rng, t0)
    return [Packet(float(t), packet_size) for t in times]


def link_rate(position, config: SimConfig) -> np.ndarray | float:
    """Bits one RBG carries in one subframe for a UE at ``position``.

    Accepts a single ``(2,)`` position or an ``(n, 2)`` array.
    """
    pos = np.asarray(position, dtype=float)
    d = np.linalg.norm(pos - config.bs_position, axis=-1)
    d = np.maximum(d, config.ref_distance)
    snr_db = config.snr_ref_db - 10.0 * config.pathloss_exponent * np.log10(d / config.ref_distance)
    rate = config.bandwidth_per_rbg * np.log2(1.0 + 10.0 ** (snr_db / 10.0)) * config.subframe_duration
    return float(rate) if np.ndim(rate) == 0 else rate


# ---- scheduling kernels ----------------------------------------------------


@numba.njit(cache=True)
def _pf_fill(rates, ewma, remaining, eligible, budget, run_ue, run_n, n_runs):
    """Grant up to ``budget`` RBGs by PF priority among eligible backlogged UEs.

    Priorities are constant within a subframe, so the per-RBG argmax keeps
    picking the same UE until its backlog is covered; each such stretch is
    stored as one run.  Decrements ``remaining``.  Returns ``(n_runs, used)``.
    """
    used = 0
    while used < budget:
        best = -1
        best_p = 0.0
        for k in range(rates.shape[0]):
            if eligible[k] and remaining[k] > 0.0:
                p = rates[k] / ewma[k]
                if best < 0 or p > best_p:
                    best = k
                    best_p = p
        if best < 0:
            break
        take = min(int(math.ceil(remaining[best] / rates[best])), budget - used)
        remaining[best] -= take * rates[best]
        run_ue[n_runs] = best
        run_n[n_runs] = take
        n_runs += 1
        used += take
    return n_runs, used


@numba.njit(cache=True)
def _schedule(rates, ewma, backlog, slice_of, alloc, run_ue, run_n, run_slice):
    """Soft-sliced PF for one subframe.

    ``run_slice[r]`` is the slice whose quota run ``r`` came from, or -1 for a
    run granted from the pooled leftovers.  Returns the number of runs.
    """
    n = rates.shape[0]
    remaining = backlog.copy()
    eligible = np.zeros(n, dtype=np.bool_)
    n_runs = 0
    leftover = 0
    for i in range(alloc.shape[0]):
        if alloc[i] <= 0:
            continue
        for k in range(n):
            eligible[k] = slice_of[k] == i
        start = n_runs
        n_runs, used = _pf_fill(rates, ewma, remaining, eligible, alloc[i], run_ue, run_n, n_runs)
        for r in range(start, n_runs):
            run_slice[r] = i
        leftover += alloc[i] - used
    if leftover > 0:
        eligible[:] = True
        start = n_runs
        n_runs, _ = _pf_fill(rates, ewma, remaining, eligible, leftover, run_ue, run_n, n_runs)
        for r in range(start, n_runs):
            run_slice[r] = -1
    return n_runs


def _run_buffers(n_ues: int, n_slices: int):
    size = 2 * n_ues + n_slices + 1  # each UE gets at most one primary and one pooled run
    return np.zeros(size, np.int64), np.zeros(size, np.int64), np.zeros(size, np.int64)


def _pf_runs(rates, ewma, backlog, rbg_budget: int, candidates) -> list[tuple[int, int]]:
    """Run-length form of :func:`pf_schedule`: ``[(ue, n_rbgs), ...]`` in grant order."""
    n = len(rates)
    eligible = np.zeros(n, dtype=np.bool_)
    eligible[np.asarray(list(candidates), dtype=np.int64)] = True
    run_ue, run_n, _ = _run_buffers(n, 0)
    n_runs, _ = _pf_fill(np.asarray(rates, float), np.asarray(ewma, float), np.array(backlog, dtype=float),
                         eligible, int(rbg_budget), run_ue, run_n, 0)
    return [(int(run_ue[r]), int(run_n[r])) for r in range(n_runs)]


def pf_schedule(rates, ewma, backlog, rbg_budget: int, candidates=None) -> list[int]:
    """Assign ``rbg_budget`` RBGs one at a time to the backlogged UE with the
    largest ``rate / ewma``.

    Priorities are fixed within a subframe; a UE stays a candidate while the
    bits granted to it so far do not cover its backlog.  Returns the UE index
    per assigned RBG; shorter than the budget when backlog runs out.  Ties go
    to the lowest index.  ``candidates`` restricts the eligible UE indices.
    """
    if rbg_budget <= 0 or len(rates) == 0:
        return []
    idx = range(len(rates)) if candidates is None else candidates
    out: list[int] = []
    for k, n in _pf_runs(rates, ewma, backlog, rbg_budget, idx):
        out.extend([k] * n)
    return out


def soft_slicing_redistribute(unused_rbgs: int, rates, ewma, remaining_backlog, other_slice_ues) -> list[int]:
    """Hand leftover RBGs to the still-backlogged UEs of other slices.

    Same PF rule as :func:`pf_schedule`, over the pooled candidate set.
    ``remaining_backlog`` must already account for the bits granted in the
    primary pass.
    """
    return pf_schedule(rates, ewma, remaining_backlog, unused_rbgs, candidates=sorted(other_slice_ues))


def schedule_subframe(rates, ewma, backlog, members, alloc):
    """PF within each slice quota, then soft-slicing reuse of the leftovers.

    Returns ``(primary, extra)`` in run-length form: ``primary[i]`` lists
    ``(ue, n_rbgs)`` granted from slice ``i``'s quota, ``extra`` the runs
    granted from the pooled leftovers.  Same kernel as :func:`step_sim`.
    """
    n = len(rates)
    slice_of = np.full(n, -1, dtype=np.int64)
    for i, ks in enumerate(members):
        slice_of[list(ks)] = i
    alloc = np.asarray(alloc, dtype=np.int64)
    run_ue, run_n, run_slice = _run_buffers(n, len(alloc))
    n_runs = _schedule(np.asarray(rates, float), np.asarray(ewma, float), np.asarray(backlog, float),
                       slice_of, alloc, run_ue, run_n, run_slice)
    primary: list[list[tuple[int, int]]] = [[] for _ in range(len(alloc))]
    extra: list[tuple[int, int]] = []
    for r in range(n_runs):
        dst = extra if run_slice[r] < 0 else primary[run_slice[r]]
        dst.append((int(run_ue[r]), int(run_n[r])))
    return primary, extra


def move_ues(positions: np.ndarray, waypoints: np.ndarray, speeds: np.ndarray, dt: float,
             area, speed_range, rng: np.random.Generator):
    """Random-waypoint move of all UEs by ``dt`` seconds (in place, vectorised).

    A UE that reaches its waypoint stops there and draws a new waypoint and
    speed.  Positions are reflected back inside the area as a guard.
    """
    area = np.asarray(area, dtype=float)
    delta = waypoints - positions
    dist = np.linalg.norm(delta, axis=1)
    step = speeds * dt
    arrived = dist <= step
    safe = np.where(dist > 0, dist, 1.0)
    positions += np.where(arrived[:, None], delta, delta / safe[:, None] * step[:, None])
    n_new = int(arrived.sum())
    if n_new:
        waypoints[arrived] = rng.uniform(0.0, 1.0, (n_new, 2)) * area
        speeds[arrived] = rng.uniform(speed_range[0], speed_range[1], n_new)
    # reflection guard against float drift
    positions[:] = np.abs(positions)
    over = positions > area
    positions[over] = (2 * area - positions)[over]
    return positions, waypoints, speeds


# counter columns
_DELIVERED, _VIOLATED, _DROPPED, _TOT_ARRIVED, _TOT_DELIVERED, _TOT_DROPPED = range(6)


@numba.njit(cache=True)
def _interval_kernel(alloc, num_rbgs, slice_of, rates, ewma, q_time, q_size, q_head, q_len,
                     arr_ue, arr_time, arr_sf, packet_size, t0, sf_dur, n_sf, drop_age, thr,
                     a_ewma, floor, counters, delay_sum, rx_bits, used_own, used_total,
                     delays, do_audit, audit):
    """Run all subframes of one interval in place.  Returns the number of delays written."""
    n = rates.shape[0]
    cap = q_time.shape[1]
    n_slices = alloc.shape[0]
    backlog = np.zeros(n)
    for k in range(n):
        for j in range(q_len[k]):
            backlog[k] += q_size[k, (q_head[k] + j) % cap]
    size = 2 * n + n_slices + 1
    run_ue = np.zeros(size, np.int64)
    run_n = np.zeros(size, np.int64)
    run_slice = np.zeros(size, np.int64)
    grant = np.zeros(n, np.int64)
    offsets = np.zeros(n_slices + 1, np.int64)
    for i in range(n_slices):
        offsets[i + 1] = offsets[i] + alloc[i]
    seen = np.zeros(num_rbgs, np.int64)
    fill = np.zeros(n_slices, np.int64)
    spare = np.zeros(num_rbgs, np.int64)
    n_delays = 0
    a = 0
    for j in range(n_sf):
        now = t0 + j * sf_dur
        while a < arr_ue.shape[0] and arr_sf[a] == j:
            k = arr_ue[a]
            slot = (q_head[k] + q_len[k]) % cap
            q_time[k, slot] = arr_time[a]
            q_size[k, slot] = packet_size
            q_len[k] += 1
            backlog[k] += packet_size
            a += 1
        for k in range(n):
            while q_len[k] > 0 and now - q_time[k, q_head[k]] > drop_age:
                backlog[k] -= q_size[k, q_head[k]]
                q_head[k] = (q_head[k] + 1) % cap
                q_len[k] -= 1
                counters[k, 1] += 1
                counters[k, 2] += 1
                counters[k, 5] += 1
            if q_len[k] == 0:
                backlog[k] = 0.0

        n_runs = _schedule(rates, ewma, backlog, slice_of, alloc, run_ue, run_n, run_slice)
        grant[:] = 0
        for r in range(n_runs):
            k = run_ue[r]
            grant[k] += run_n[r]
            used_total[slice_of[k]] += run_n[r]
            if run_slice[r] >= 0:
                used_own[run_slice[r]] += run_n[r]

        if do_audit:
            # quota runs fill each slice's contiguous RBG id range from the left;
            # pooled runs take the unused tails in slice order
            seen[:] = 0
            fill[:] = 0
            for r in range(n_runs):
                i = run_slice[r]
                if i >= 0:
                    for m in range(run_n[r]):
                        rid = offsets[i] + fill[i] + m
                        if rid < offsets[i + 1]:
                            seen[rid] += 1
                        else:
                            audit[2] += 1
                    fill[i] += run_n[r]
            n_spare = 0
            for i in range(n_slices):
                for rid in range(offsets[i] + min(fill[i], alloc[i]), offsets[i + 1]):
                    spare[n_spare] = rid
                    n_spare += 1
            p = 0
            for r in range(n_runs):
                if run_slice[r] < 0:
                    for m in range(run_n[r]):
                        if p < n_spare:
                            seen[spare[p]] += 1
                        else:
                            audit[2] += 1
                        p += 1
            assigned = 0
            for r in range(n_runs):
                assigned += run_n[r]
            for rid in range(num_rbgs):
                if seen[rid] > 1:
                    audit[2] += seen[rid] - 1
            audit[0] += 1
            audit[1] = max(audit[1], assigned)

        t_done = now + sf_dur
        for k in range(n):
            sent = 0.0
            if grant[k] > 0:
                budget = grant[k] * rates[k]
                while q_len[k] > 0 and budget > 0.0:
                    h = q_head[k]
                    if q_size[k, h] <= budget:
                        budget -= q_size[k, h]
                        sent += q_size[k, h]
                        q_size[k, h] = 0.0
                        q_head[k] = (h + 1) % cap
                        q_len[k] -= 1
                        delay = t_done - q_time[k, h]
                        counters[k, 0] += 1
                        counters[k, 4] += 1
                        delay_sum[k] += delay
                        if delay > thr:
                            counters[k, 1] += 1
                        if n_delays < delays.shape[0]:
                            delays[n_delays] = delay
                            n_delays += 1
                    else:
                        q_size[k, h] -= budget
                        sent += budget
                        budget = 0.0
                backlog[k] = backlog[k] - sent if q_len[k] > 0 else 0.0
                rx_bits[slice_of[k]] += sent
            e = ewma[k] * (1.0 - a_ewma) + a_ewma * sent / sf_dur
            ewma[k] = e if e > floor else floor
    return n_delays


def _ensure_capacity(state: SimState, incoming: np.ndarray):
    need = int((state.q_len + incoming).max()) if len(incoming) else 0
    cap = state.q_time.shape[1]
    if need <= cap:
        return
    new_cap = max(need, 2 * cap)
    n = state.num_ues
    idx = (state.q_head[:, None] + np.arange(cap)[None, :]) % cap
    rows = np.arange(n)[:, None]
    q_time, q_size = np.zeros((n, new_cap)), np.zeros((n, new_cap))
    q_time[:, :cap] = state.q_time[rows, idx]
    q_size[:, :cap] = state.q_size[rows, idx]
    state.q_time, state.q_size = q_time, q_size
    state.q_head = np.zeros(n, dtype=np.int64)


def step_sim(state: SimState, allocation) -> tuple[SimState, list[SliceMetrics]]:
    """Advance one control interval with per-slice RBG quotas ``allocation``.

    A packet arriving inside subframe ``j`` joins the queue at the start of
    that subframe and can be served by its end; delay is measured from the
    arrival time to the end of the serving subframe.
    """
    cfg = state.config
    alloc = np.array([int(a) for a in allocation], dtype=np.int64)
    if len(alloc) != cfg.num_slices:
        raise AllocationError(f"allocation has {len(alloc)} entries, expected {cfg.num_slices}")
    if np.any(alloc < 0):
        raise AllocationError("allocation entries must be nonnegative")
    if alloc.sum() > cfg.num_rbgs:
        raise AllocationError(f"sum(allocation)={int(alloc.sum())} exceeds M={cfg.num_rbgs}")

    n = state.num_ues
    sf = cfg.subframe_duration
    n_sf = cfg.subframes_per_interval
    t0 = state.time
    counts, arr_ue, arr_time = _arrival_batch(cfg.offered_load_per_ue / cfg.packet_size, cfg.control_interval,
                                              n, state.arrival_rng, t0)
    arr_sf = np.clip(np.floor((arr_time - t0) / sf).astype(np.int64), 0, n_sf - 1)
    order = np.argsort(arr_sf, kind="stable")  # keeps per-UE time order inside each subframe
    arr_ue, arr_time, arr_sf = arr_ue[order], arr_time[order], arr_sf[order]
    _ensure_capacity(state, counts)

    state.counters[:, :3] = 0
    state.counters[:, _TOT_ARRIVED] += counts
    state.delay_sum[:] = 0.0
    rates = link_rate(state.position, cfg)
    rx_bits = np.zeros(cfg.num_slices)
    used_own = np.zeros(cfg.num_slices, dtype=np.int64)
    used_total = np.zeros(cfg.num_slices, dtype=np.int64)
    if state.delays is not None:
        delays = np.empty(len(arr_ue) + int(state.q_len.sum()))
    else:
        delays = np.empty(0)
    audit = np.zeros(3, dtype=np.int64)
    if state.audit is not None:
        audit[:] = state.audit.subframes, state.audit.max_assigned, state.audit.duplicates

    n_delays = _interval_kernel(
        alloc, cfg.num_rbgs, state.slice_id, rates, state.ewma, state.q_time, state.q_size,
        state.q_head, state.q_len, arr_ue, arr_time, arr_sf, float(cfg.packet_size), float(t0), float(sf), n_sf,
        cfg.drop_factor * cfg.delay_threshold, cfg.delay_threshold, cfg.ewma_coeff, cfg.ewma_floor,
        state.counters, state.delay_sum, rx_bits, used_own, used_total, delays,
        state.audit is not None, audit)
    if state.delays is not None:
        state.delays.extend(delays[:n_delays].tolist())
    if state.audit is not None:
        state.audit.subframes, state.audit.max_assigned, state.audit.duplicates = (int(v) for v in audit)

    state.time = t0 + cfg.control_interval
    state.step_count += 1
    # mobility, applied once per control interval
    move_ues(state.position, state.waypoint, state.speed, cfg.control_interval, cfg.area, cfg.ue_speed_range,
             state.mobility_rng)

    per_slice = lambda v: np.bincount(state.slice_id, weights=v, minlength=cfg.num_slices)
    c = state.counters
    delivered = per_slice(c[:, _DELIVERED])
    dropped = per_slice(c[:, _DROPPED])
    violated = per_slice(c[:, _VIOLATED])
    delay_sum = per_slice(state.delay_sum)
    arrived_bits = per_slice(counts * cfg.packet_size)
    granted = alloc * n_sf
    metrics = []
    for i in range(cfg.num_slices):
        finished = delivered[i] + dropped[i]
        metrics.append(
            SliceMetrics(
                rx_throughput=float(rx_bits[i] / cfg.control_interval),
                offered_load=float(arrived_bits[i] / cfg.control_interval),
                utilization=float(used_own[i] / granted[i]) if granted[i] else 0.0,
                delay_violation_rate=float(violated[i] / finished) if finished else 0.0,
                avg_delay=float(delay_sum[i] / delivered[i]) if delivered[i] else 0.0,
                rbgs_granted=int(granted[i]),
                rbgs_used=int(used_total[i]),
            )
        )
    return state, metrics
