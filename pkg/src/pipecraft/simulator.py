"""Discrete-event execution of comm plans under a parametric cost model.

Each actor is one serial compute resource; every directed actor pair is a link
that moves one transfer at a time (in send order) while fully overlapping
compute. Timing falls out of a longest-path sweep over the instruction and
transfer dependencies; memory is replayed chronologically from the resulting
timeline, including the pending-deletions lag for buffers whose sends are in
flight.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from pipecraft.comms import (
    CommPlan,
    Delete,
    FlushPendingDeletes,
    RecvStart,
    RecvWait,
    RunTask,
    SendStart,
    SendWait,
    check_deadlock_free,
)
from pipecraft.taskgraph import STASH, TaskGraph


class SimError(RuntimeError):
    pass


class SimMemoryError(SimError):
    pass


REMAT_NONE = "none"
REMAT_FULL = "full-per-stage"


@dataclass
class CostModel:
    flops_per_second: float = 1e9
    link_latency_s: float = 0.0
    link_bytes_per_second: float = math.inf
    mem_capacity_bytes: float | None = None
    remat_policy: str = REMAT_NONE
    intra_actor_speedup: float = 1.0
    dispatch_overhead_s: float = 0.0
    # Backward chunks default to twice the forward cost in uniform mode.
    bwd_cost_multiplier: float = 2.0
    # When set, every loop task costs this long (x multiplier for backward)
    # and synthetic tasks are free: the uniform-chunk analysis regime.
    uniform_task_s: float | None = None

    def __post_init__(self):
        if self.flops_per_second <= 0 or self.link_bytes_per_second <= 0:
            raise SimError("rates must be positive")
        if self.intra_actor_speedup <= 0:
            raise SimError("intra_actor_speedup must be positive")
        if self.link_latency_s < 0 or self.dispatch_overhead_s < 0:
            raise SimError("latencies and overheads must be non-negative")
        if self.remat_policy not in (REMAT_NONE, REMAT_FULL):
            raise SimError(f"unknown remat policy {self.remat_policy!r}")
        if self.mem_capacity_bytes is not None and self.mem_capacity_bytes <= 0:
            raise SimError("mem_capacity_bytes must be positive or None")

    def replaced(self, **kw) -> "CostModel":
        cur = vars(self).copy()
        cur.update(kw)
        return CostModel(**cur)


@dataclass
class TimelineEvent:
    actor: int
    kind: str          # fwd | bwd | aux | comm
    label: str
    start: float
    end: float

    def to_json(self):
        return {"actor": self.actor, "kind": self.kind, "label": self.label,
                "start": self.start, "end": self.end}


@dataclass
class SimReport:
    step_time_s: float
    window: tuple[float, float]
    busy_s: list[float]            # compute time inside the loop window
    idle_s: list[float]
    run_busy_s: list[float]        # compute time over the whole step
    bubble_fraction: float
    peak_mem_bytes: list[int]
    peak_stash: dict[tuple[int, int], int]
    events: list[TimelineEvent] = field(default_factory=list)

    @property
    def num_actors(self):
        return len(self.busy_s)

    def peak_stash_on(self, actor: int) -> int:
        return max((n for (a, _), n in self.peak_stash.items() if a == actor), default=0)

    def to_json(self) -> dict:
        return {
            "step_time_s": self.step_time_s,
            "window": list(self.window),
            "busy_s": self.busy_s,
            "idle_s": self.idle_s,
            "run_busy_s": self.run_busy_s,
            "bubble_fraction": self.bubble_fraction,
            "peak_mem_bytes": self.peak_mem_bytes,
            "peak_stash": [{"actor": a, "stage": st, "count": n}
                           for (a, st), n in sorted(self.peak_stash.items())],
            "events": [e.to_json() for e in self.events],
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _task_duration(tg: TaskGraph, uid: str, cm: CostModel) -> float:
    t = tg.tasks[uid]
    if cm.uniform_task_s is not None:
        if t.kind == "fwd":
            base = cm.uniform_task_s
        elif t.kind == "bwd":
            base = cm.uniform_task_s * cm.bwd_cost_multiplier
            if cm.remat_policy == REMAT_FULL:
                base += cm.uniform_task_s
        else:
            base = 0.0
    else:
        flops = t.flops
        if t.kind == "bwd" and cm.remat_policy == REMAT_FULL:
            flops += tg.partition.summaries[t.tid.stage].fwd_flops
        base = flops / (cm.flops_per_second * cm.intra_actor_speedup)
    return base + cm.dispatch_overhead_s


def _retained_stash_bytes(tg: TaskGraph, stage: int) -> int:
    """Bytes kept per microbatch under full rematerialization: just the stage's
    boundary inputs, enough to replay the forward."""
    fp = tg.partition.fwd_programs[stage]
    g = tg.partition.graph
    return sum(g.spec_of(v).total_bytes for v in fp.boundary_in + fp.inputs_used)


def _transfer_duration(tg: TaskGraph, buffer: str, cm: CostModel) -> float:
    return cm.link_latency_s + tg.buffers[buffer].size_bytes / cm.link_bytes_per_second


def simulate(cp: CommPlan, tg: TaskGraph, cm: CostModel) -> SimReport:
    """Timed replay of the plan. Requires a deadlock-free plan."""
    rep = check_deadlock_free(cp)
    if not rep.ok:
        raise SimError(f"cannot simulate an unsafe plan: {rep}")
    P = cp.num_actors

    # Transfer bookkeeping per channel, in send (= recv) order.
    tstart: dict[tuple[int, int, int], float] = {}
    tend: dict[tuple[int, int, int], float] = {}
    send_post: dict[tuple[int, int, int], float] = {}
    recv_post: dict[tuple[int, int, int], float] = {}

    pcs = [0] * P
    iend: list[list[float]] = [[] for _ in range(P)]   # end time per instruction
    istart: list[list[float]] = [[] for _ in range(P)]

    def try_transfer(key) -> bool:
        if key in tend:
            return True
        if key not in send_post or key not in recv_post:
            return False
        src, dst, seq = key
        prev_end = 0.0
        if seq > 0:
            prev = (src, dst, seq - 1)
            if prev not in tend:
                return False
            prev_end = tend[prev]
        start = max(send_post[key], recv_post[key], prev_end)
        tstart[key] = start
        tend[key] = start + _transfer_duration(tg, cp.channel_buffer(src, dst, seq), cm)
        return True

    total = sum(len(p.instrs) for p in cp.programs)
    done = 0
    while done < total:
        progressed = False
        for p in cp.programs:
            a = p.actor
            while pcs[a] < len(p.instrs):
                ins = p.instrs[pcs[a]]
                prev_end = iend[a][-1] if iend[a] else 0.0
                if isinstance(ins, RecvWait):
                    key = (ins.src, a, ins.seq)
                    if not try_transfer(key):
                        break
                    start, end = prev_end, max(prev_end, tend[key])
                elif isinstance(ins, SendWait):
                    key = (a, ins.dst, ins.seq)
                    if not try_transfer(key):
                        break
                    start, end = prev_end, max(prev_end, tend[key])
                elif isinstance(ins, RunTask):
                    start = prev_end
                    end = start + _task_duration(tg, ins.task, cm)
                else:
                    start = end = prev_end
                istart[a].append(start)
                iend[a].append(end)
                if isinstance(ins, SendStart):
                    send_post[(a, ins.dst, ins.seq)] = end
                elif isinstance(ins, RecvStart):
                    recv_post[(ins.src, a, ins.seq)] = end
                pcs[a] += 1
                done += 1
                progressed = True
        if not progressed:
            raise SimError("simulation wedged; plan dependencies cannot be satisfied")

    report = _collect_report(cp, tg, cm, istart, iend, tstart, tend)
    cap = cm.mem_capacity_bytes
    if cap is not None and any(m > cap for m in report.peak_mem_bytes):
        worst = max(report.peak_mem_bytes)
        hint = ("; enable rematerialization (remat_policy='full-per-stage') to shrink stashes"
                if cm.remat_policy == REMAT_NONE else "")
        raise SimMemoryError(
            f"peak memory {worst} exceeds capacity {int(cap)}{hint}")
    return report


def _collect_report(cp, tg, cm, istart, iend, tstart, tend) -> SimReport:
    P = cp.num_actors
    step_time = max((e[-1] for e in iend if e), default=0.0)

    events: list[TimelineEvent] = []
    loop_lo, loop_hi = math.inf, -math.inf
    intervals: list[list[tuple[float, float]]] = [[] for _ in range(P)]
    for p in cp.programs:
        a = p.actor
        for i, ins in enumerate(p.instrs):
            if isinstance(ins, RunTask):
                t = tg.tasks[ins.task]
                kind = t.kind if t.kind in ("fwd", "bwd") else "aux"
                s, e = istart[a][i], iend[a][i]
                events.append(TimelineEvent(a, kind, t.uid, s, e))
                intervals[a].append((s, e))
                if t.is_loop:
                    loop_lo, loop_hi = min(loop_lo, s), max(loop_hi, e)
    for (src, dst, seq), s in tstart.items():
        events.append(TimelineEvent(src, "comm",
                                    f"{cp.channel_buffer(src, dst, seq)}->{dst}",
                                    s, tend[(src, dst, seq)]))
    events.sort(key=lambda e: (e.actor, e.start, e.label))

    if not math.isfinite(loop_lo):
        loop_lo = loop_hi = 0.0
    span = loop_hi - loop_lo
    busy, idle, run_busy = [], [], []
    for a in range(P):
        overlap = sum(max(0.0, min(e, loop_hi) - max(s, loop_lo)) for s, e in intervals[a])
        busy.append(overlap)
        idle.append(span - overlap)
        run_busy.append(sum(e - s for s, e in intervals[a]))
    bubble = (sum(idle) / (P * span)) if span > 0 else 0.0

    peak_mem, peak_stash = _replay_memory(cp, tg, cm, iend, tend)
    return SimReport(step_time_s=step_time, window=(loop_lo, loop_hi), busy_s=busy,
                     idle_s=idle, run_busy_s=run_busy, bubble_fraction=bubble,
                     peak_mem_bytes=peak_mem, peak_stash=peak_stash, events=events)


def _replay_memory(cp, tg, cm, iend, tend):
    """Chronological alloc/free replay. Buffers alloc on the producing actor at
    task end (or transfer end on the receiver); frees happen at their Delete,
    or at the first flush after the last in-flight send completes."""
    P = cp.num_actors
    remat = cm.remat_policy == REMAT_FULL

    def buf_bytes(bid: str) -> int:
        b = tg.buffers[bid]
        if remat and b.kind == STASH:
            return _retained_stash_bytes(tg, b.meta["stage"])
        return b.size_bytes

    # Send completion time per (actor, buffer).
    send_done: dict[tuple[int, str], float] = {}
    for (src, dst, seq), e in tend.items():
        key = (src, cp.channel_buffer(src, dst, seq))
        send_done[key] = max(send_done.get(key, 0.0), e)

    alloc_events: list[tuple[float, int, int, str]] = []   # time, actor, +bytes, buffer
    free_events: list[tuple[float, int, int, str]] = []
    for bid, b in tg.buffers.items():
        if b.producer is None and b.home is not None:
            alloc_events.append((0.0, b.home, buf_bytes(bid), bid))
    for p in cp.programs:
        a = p.actor
        flush_times = [iend[a][i] for i, ins in enumerate(p.instrs)
                       if isinstance(ins, FlushPendingDeletes)]
        for i, ins in enumerate(p.instrs):
            if isinstance(ins, RunTask):
                for bid in tg.tasks[ins.task].produces:
                    alloc_events.append((iend[a][i], a, buf_bytes(bid), bid))
            elif isinstance(ins, RecvWait):
                bid = cp.channel_buffer(ins.src, a, ins.seq)
                alloc_events.append((iend[a][i], a, buf_bytes(bid), bid))
            elif isinstance(ins, Delete):
                t_del = iend[a][i]
                ready = send_done.get((a, ins.buffer), 0.0)
                if ready <= t_del:
                    free_events.append((t_del, a, buf_bytes(ins.buffer), ins.buffer))
                else:
                    later = [t for t in flush_times if t >= ready and t >= t_del]
                    t_free = min(later) if later else max(ready, t_del)
                    free_events.append((t_free, a, buf_bytes(ins.buffer), ins.buffer))

    # Allocations sort before frees at equal timestamps: conservative peaks.
    seq = [(t, 0, a, n, bid) for t, a, n, bid in alloc_events]
    seq += [(t, 1, a, -n, bid) for t, a, n, bid in free_events]
    seq.sort(key=lambda e: (e[0], e[1]))
    cur = [0] * P
    peak = [0] * P
    stash_cur: dict[tuple[int, int], int] = {}
    stash_peak: dict[tuple[int, int], int] = {}
    for t, _, a, delta, bid in seq:
        cur[a] += delta
        peak[a] = max(peak[a], cur[a])
        b = tg.buffers[bid]
        if b.kind == STASH:
            key = (a, b.meta["stage"])
            stash_cur[key] = stash_cur.get(key, 0) + (1 if delta > 0 else -1)
            stash_peak[key] = max(stash_peak.get(key, 0), stash_cur[key])
    return peak, stash_peak


# ---------------------------------------------------------------------------
# Analysis helpers


def ideal_bubble_fraction(P: int, M: int, V: int = 1) -> float:
    """Fill/drain bubble of a balanced pipeline: (P-1)/(V*M + P - 1)."""
    return (P - 1) / (V * M + P - 1)


def peak_memory_comparison(plan_for, P: int, M: int,
                           cm: CostModel | None = None) -> dict:
    """Peak stash counts and bytes on the first-stage actor, GPipe vs 1F1B.

    ``plan_for(name)`` maps a schedule family name ('gpipe'/'1f1b') to a
    (CommPlan, TaskGraph) pair for this P and M.
    """
    cm = cm or CostModel(uniform_task_s=1.0)
    out = {"P": P, "M": M}
    for name in ("gpipe", "1f1b"):
        cp, tg = plan_for(name)
        rep = simulate(cp, tg, cm)
        count = rep.peak_stash.get((0, 0), 0)
        stash_bytes = tg.partition.summaries[0].stash_bytes
        out[name] = {"peak_stash_count": count,
                     "peak_stash_bytes": count * stash_bytes,
                     "peak_mem_bytes": rep.peak_mem_bytes[0]}
    out["reduction"] = (out["gpipe"]["peak_stash_count"]
                        / max(1, out["1f1b"]["peak_stash_count"]))
    return out


def remat_overhead(cp: CommPlan, tg: TaskGraph, cm: CostModel) -> dict:
    """Step-time ratio of full per-stage rematerialization against no remat."""
    base = simulate(cp, tg, cm.replaced(remat_policy=REMAT_NONE, mem_capacity_bytes=None))
    full = simulate(cp, tg, cm.replaced(remat_policy=REMAT_FULL, mem_capacity_bytes=None))
    return {
        "step_time_none_s": base.step_time_s,
        "step_time_full_s": full.step_time_s,
        "ratio": full.step_time_s / base.step_time_s,
        "peak_mem_none": max(base.peak_mem_bytes),
        "peak_mem_full": max(full.peak_mem_bytes),
    }


def sweep(points: list[dict], build_point, cost: CostModel):
    """Simulate every grid point; invalid points are skipped with a note.

    ``build_point(point)`` returns (CommPlan, TaskGraph) or raises ValueError
    with the reason the point is infeasible. Points may override any cost
    field (e.g. dispatch_overhead_s).
    """
    rows, notes = [], []
    for pt in points:
        overrides = {k: v for k, v in pt.items()
                     if k in vars(cost)}
        cm = cost.replaced(**overrides) if overrides else cost
        try:
            cp, tg = build_point(pt)
            rep = simulate(cp, tg, cm)
        except (ValueError, SimError) as e:
            notes.append(f"skipped {pt}: {e}")
            continue
        rows.append({
            "P": pt.get("P"), "M": pt.get("M"), "V": pt.get("V", 1),
            "microbatch_size": pt.get("microbatch_size"),
            "dispatch_overhead_s": cm.dispatch_overhead_s,
            "step_time_s": rep.step_time_s,
            "bubble_fraction": rep.bubble_fraction,
            "peak_mem_bytes": max(rep.peak_mem_bytes),
        })
    return rows, notes
