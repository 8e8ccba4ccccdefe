"""Unrolled task graphs: loop tasks, buffers, gradient accumulation, placement.

``unroll`` instantiates one forward and one backward task per (microbatch,
stage) plus the out-of-loop work (gradient accumulation chains, tied-weight
gradient merges, loss concatenation, optimizer updates) and the buffers that
connect them. ``commute_grad_accumulation`` rewrites the shared-weight gradient
sum from per-microbatch cross-stage adds into per-stage accumulators with a
single post-loop sum. ``infer_outer_placement`` pins the out-of-loop tasks to
actors without ever overriding an existing placement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from pipecraft.ir import StagePartition
from pipecraft.schedules import BWD, FWD, Schedule, TaskId, validate


class TaskGraphError(ValueError):
    pass


class PlacementError(TaskGraphError):
    pass


# Buffer kinds
ACTIVATION = "activation"
ACT_GRAD = "activation-grad"
STASH = "stash"
GRAD_PARTIAL = "param-grad-partial"
GRAD_TOTAL = "param-grad-total"
LOSS = "loss"
PARAM = "param"
OPT_STATE = "optimizer-state"


@dataclass
class Task:
    uid: str
    kind: str                      # fwd | bwd | grad-merge | optimizer-update | loss-concat
    tid: TaskId | None
    actor: int | None
    consumes: set[str]
    produces: set[str]
    flops: float
    exec: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    order_key: tuple = (0, 0, 0)

    @property
    def is_loop(self) -> bool:
        return self.tid is not None


@dataclass
class Buffer:
    id: str
    producer: str | None           # task uid; None for step inputs pinned to ``home``
    size_bytes: int
    consumers: set[str]
    kind: str
    home: int | None = None
    is_output: bool = False
    meta: dict = field(default_factory=dict)


@dataclass
class TaskGraph:
    tasks: dict[str, Task]
    buffers: dict[str, Buffer]
    partition: StagePartition
    schedule: Schedule
    commuted: bool = False
    placed: bool = False

    def producer_actor(self, buf: Buffer) -> int | None:
        if buf.producer is None:
            return buf.home
        return self.tasks[buf.producer].actor

    def topo_order(self) -> list[Task]:
        indeg = {uid: 0 for uid in self.tasks}
        succs: dict[str, list[str]] = {uid: [] for uid in self.tasks}
        for buf in self.buffers.values():
            if buf.producer is None:
                continue
            for c in buf.consumers:
                succs[buf.producer].append(c)
                indeg[c] += 1
        ready = sorted(uid for uid, d in indeg.items() if d == 0)
        out = []
        while ready:
            uid = ready.pop()
            out.append(self.tasks[uid])
            added = []
            for v in succs[uid]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    added.append(v)
            if added:
                ready.extend(added)
                ready.sort()
        if len(out) != len(self.tasks):
            stuck = sorted(uid for uid, d in indeg.items() if d > 0)
            raise TaskGraphError(f"task graph has a cycle through {stuck[:6]}")
        return out

    def validate(self) -> None:
        for t in self.tasks.values():
            if t.consumes & t.produces:
                raise TaskGraphError(f"task {t.uid} consumes and produces the same buffer")
            for b in t.consumes:
                if t.uid not in self.buffers[b].consumers:
                    raise TaskGraphError(f"buffer {b} missing consumer {t.uid}")
            for b in t.produces:
                if self.buffers[b].producer != t.uid:
                    raise TaskGraphError(f"buffer {b} producer mismatch for {t.uid}")
        self.topo_order()
        if self.placed:
            for t in self.tasks.values():
                if t.actor is None:
                    raise PlacementError(f"task {t.uid} has no actor after placement")
                if t.is_loop and t.actor != self.schedule.stage_to_actor(t.tid.stage):
                    raise TaskGraphError(f"loop task {t.uid} placed off its stage actor")
        # Every loop task must be reachable from some step-input buffer.
        reachable: set[str] = set()
        for t in self.topo_order():
            feeds_input = any(self.buffers[b].producer is None for b in t.consumes)
            feeds_reach = any(self.buffers[b].producer in reachable for b in t.consumes
                              if self.buffers[b].producer is not None)
            if feeds_input or feeds_reach:
                reachable.add(t.uid)
        for t in self.tasks.values():
            if t.is_loop and t.uid not in reachable:
                raise TaskGraphError(f"loop task {t.uid} unreachable from step inputs")

    def cross_actor_buffers(self) -> list[Buffer]:
        out = []
        for buf in self.buffers.values():
            pa = self.producer_actor(buf)
            if pa is None:
                continue
            if any(self.tasks[c].actor not in (None, pa) for c in buf.consumers):
                out.append(buf)
        return out

    def to_json(self) -> dict:
        edges = []
        for bid, b in sorted(self.buffers.items()):
            if b.producer is None:
                continue
            edges.extend({"from": b.producer, "to": c, "buffer": bid}
                         for c in sorted(b.consumers))
        return {
            "num_actors": self.schedule.num_actors,
            "commuted": self.commuted,
            "edges": edges,
            "tasks": [
                {
                    "uid": t.uid,
                    "kind": t.kind,
                    "tid": None if t.tid is None else
                    {"i": t.tid.i, "ty": t.tid.ty, "stage": t.tid.stage},
                    "actor": t.actor,
                    "consumes": sorted(t.consumes),
                    "produces": sorted(t.produces),
                    "flops": t.flops,
                }
                for _, t in sorted(self.tasks.items())
            ],
            "buffers": [
                {
                    "id": b.id,
                    "producer": b.producer,
                    "size_bytes": b.size_bytes,
                    "consumers": sorted(b.consumers),
                    "kind": b.kind,
                    "home": b.home,
                    "is_output": b.is_output,
                }
                for _, b in sorted(self.buffers.items())
            ],
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


class _Builder:
    def __init__(self, p: StagePartition, s: Schedule):
        self.p = p
        self.s = s
        self.tasks: dict[str, Task] = {}
        self.buffers: dict[str, Buffer] = {}
        self._serial = 0

    def buffer(self, bid: str, size: int, kind: str, producer: str | None = None,
               home: int | None = None, **meta) -> str:
        if bid not in self.buffers:
            self.buffers[bid] = Buffer(id=bid, producer=producer, size_bytes=size,
                                       consumers=set(), kind=kind, home=home, meta=meta)
        return bid

    def task(self, uid: str, kind: str, consumes: list[str], produces: list[str],
             flops: float, tid: TaskId | None = None, actor: int | None = None,
             exec: dict | None = None, anchor: int | None = None, **meta) -> Task:
        self._serial += 1
        if tid is not None:
            key = (self.s.position(tid), 0, 0)
        else:
            key = (anchor if anchor is not None else 1 << 30, 1, self._serial)
        t = Task(uid=uid, kind=kind, tid=tid, actor=actor, consumes=set(consumes),
                 produces=set(produces), flops=flops, exec=exec or {}, meta=meta,
                 order_key=key)
        self.tasks[uid] = t
        for b in consumes:
            self.buffers[b].consumers.add(t.uid)
        for b in produces:
            self.buffers[b].producer = t.uid
        return t


def _bwd_position(s: Schedule, i: int, stage: int) -> int:
    return s.position(TaskId(i, BWD, stage))


def _sched_mb_order(s: Schedule, stage: int) -> list[int]:
    """Microbatch order in which backward tasks of ``stage`` run on their actor."""
    a = s.stage_to_actor(stage)
    return [t.i for t in s.per_actor[a] if t.ty == BWD and t.stage == stage]


def _build(p: StagePartition, s: Schedule, commuted: bool) -> TaskGraph:
    if not p.has_backward:
        raise TaskGraphError("partition has no backward stages; run derive_backward first")
    if p.num_stages != s.num_stages:
        raise TaskGraphError(
            f"stage-count mismatch: partition has {p.num_stages}, schedule has {s.num_stages}")
    rep = validate(s)
    if not rep.ok:
        raise TaskGraphError(f"schedule invalid: {rep}")
    bad_merges = [m.value for m in p.cross_merges if m.value not in p.graph.params]
    if bad_merges:
        raise TaskGraphError(f"cross-stage activation merges unsupported: {bad_merges}")

    b = _Builder(p, s)
    g = p.graph
    M, S = s.num_microbatches, s.num_stages

    for param, stages in p.param_stages.items():
        size = g.spec_of(param).total_bytes
        for st in stages:
            b.buffer(f"wbuf:{param}:a{s.stage_to_actor(st)}", size, PARAM,
                     home=s.stage_to_actor(st), param=param)

    for prog in p.fwd_programs:
        for v in prog.inputs_used:
            size = g.spec_of(v).total_bytes
            for i in range(M):
                b.buffer(f"input:{v}:mb{i}", size, ACTIVATION,
                         home=s.stage_to_actor(prog.stage), value=v, microbatch=i)

    # Loop tasks: one fwd and one bwd per (microbatch, stage).
    for st in range(S):
        actor = s.stage_to_actor(st)
        fp, bp = p.fwd_programs[st], p.bwd_programs[st]
        for i in range(M):
            feeds = {}
            consumes = []
            for v in fp.boundary_in:
                bid = f"act:{v}:mb{i}"
                consumes.append(bid)
                feeds[v] = bid
            for v in fp.inputs_used:
                bid = f"input:{v}:mb{i}"
                consumes.append(bid)
                feeds[v] = bid
            for v in fp.params_used:
                bid = f"wbuf:{v}:a{actor}"
                consumes.append(bid)
                feeds[v] = bid
            produces = []
            outs = {}
            for v in fp.boundary_out:
                bid = b.buffer(f"act:{v}:mb{i}", g.spec_of(v).total_bytes, ACTIVATION,
                               value=v, microbatch=i, stage=st)
                produces.append(bid)
                outs[v] = bid
            if fp.loss_out:
                bid = b.buffer(f"loss:mb{i}", g.spec_of(fp.loss_out).total_bytes, LOSS,
                               microbatch=i)
                produces.append(bid)
                outs[fp.loss_out] = bid
            stash_id = None
            if fp.stash:
                stash_id = b.buffer(f"stash:s{st}:mb{i}", p.summaries[st].stash_bytes,
                                    STASH, microbatch=i, stage=st)
                produces.append(stash_id)
            b.task(f"f:s{st}:mb{i}", "fwd", consumes, produces,
                   flops=p.summaries[st].fwd_flops, tid=TaskId(i, FWD, st), actor=actor,
                   exec={"type": "stage-fwd", "stage": st, "feeds": feeds, "outs": outs,
                         "stash_out": stash_id})

            feeds = {}
            consumes = []
            for v in bp.grads_in:
                # Produced by a later stage's backward task, created afterwards.
                bid = b.buffer(f"gbuf:{v}:mb{i}", g.spec_of(v).total_bytes, ACT_GRAD,
                               value=v, microbatch=i)
                consumes.append(bid)
                feeds[v] = bid
            for v in bp.params_used:
                bid = f"wbuf:{v}:a{actor}"
                consumes.append(bid)
                feeds[v] = bid
            if stash_id:
                consumes.append(stash_id)
            produces = []
            outs = {}
            partial_values = set(bp.param_partials.values())
            for v in bp.grads_out:
                if v in partial_values:
                    continue
                bid = b.buffer(f"gbuf:{v}:mb{i}", g.spec_of(v).total_bytes, ACT_GRAD,
                               value=v, microbatch=i, stage=st)
                produces.append(bid)
                outs[v] = bid
            for param, v in bp.param_partials.items():
                bid = b.buffer(f"pgrad:{param}:s{st}:mb{i}", g.spec_of(param).total_bytes,
                               GRAD_PARTIAL, param=param, microbatch=i, stage=st)
                produces.append(bid)
                outs[v] = bid
            b.task(f"b:s{st}:mb{i}", "bwd", consumes, produces,
                   flops=p.summaries[st].bwd_flops, tid=TaskId(i, BWD, st), actor=actor,
                   exec={"type": "stage-bwd", "stage": st, "feeds": feeds,
                         "stash_in": stash_id, "outs": outs})

    grad_totals = _emit_grad_accumulation(b, commuted)

    last_actor = s.stage_to_actor(S - 1)
    loss_parts = [f"loss:mb{i}" for i in range(M)]
    loss_all = b.buffer("loss:all", 8 * M, LOSS)
    b.buffers[loss_all].is_output = True
    b.task("loss-concat", "loss-concat", loss_parts, [loss_all], flops=float(M),
           actor=last_actor, exec={"type": "concat", "parts": loss_parts, "out": loss_all})

    for param in sorted(p.param_stages):
        gtot = grad_totals[param]
        b.buffers[gtot].kind = GRAD_TOTAL
        b.buffers[gtot].is_output = True
        low_actor = s.stage_to_actor(p.param_stages[param][0])
        wb = f"wbuf:{param}:a{low_actor}"
        wnew = b.buffer(f"wnew:{param}", g.spec_of(param).total_bytes, PARAM, param=param)
        b.buffers[wnew].is_output = True
        b.task(f"opt:{param}", "optimizer-update", [gtot, wb], [wnew],
               flops=g.spec_of(param).num_elems,
               exec={"type": "sgd-update", "param": wb, "grad": gtot, "out": wnew,
                     "lr": None},
               param=param)

    tg = TaskGraph(tasks=b.tasks, buffers=b.buffers, partition=p, schedule=s,
                   commuted=commuted)
    tg.validate()
    return tg


def _emit_grad_accumulation(b: _Builder, commuted: bool) -> dict[str, str]:
    """Connect per-microbatch partials into per-param total-gradient buffers.

    Plain accumulation keeps one running sum per (param, stage). A shared param
    without commuting first adds its cross-stage partials per microbatch, then
    accumulates that sum; with commuting each stage accumulates locally and the
    stage totals are added once after the loop.
    """
    p, s = b.p, b.s
    g = p.graph
    totals: dict[str, str] = {}
    for param in sorted(p.param_stages):
        stages = p.param_stages[param]
        size = g.spec_of(param).total_bytes
        elems = g.spec_of(param).num_elems

        def chain(parts_by_mb: dict[int, str], stage: int, tag: str) -> str:
            actor = s.stage_to_actor(stage)
            order = [i for i in _sched_mb_order(s, stage)]
            running = parts_by_mb[order[0]]
            for j, i in enumerate(order[1:], start=1):
                out = b.buffer(f"gsum:{param}:{tag}:k{j}", size, GRAD_PARTIAL, param=param)
                b.task(f"acc:{param}:{tag}:k{j}", "grad-merge",
                       [running, parts_by_mb[i]], [out], flops=elems, actor=actor,
                       exec={"type": "add", "lhs": running, "rhs": parts_by_mb[i],
                             "out": out},
                       anchor=_bwd_position(s, i, stage), param=param, role="acc-chain")
                running = out
            return running

        if len(stages) == 1 or commuted:
            stage_totals = {
                st: chain({i: f"pgrad:{param}:s{st}:mb{i}" for i in range(s.num_microbatches)},
                          st, f"s{st}")
                for st in stages
            }
            running = stage_totals[stages[0]]
            for j, st in enumerate(stages[1:], start=1):
                out = b.buffer(f"gmrg:{param}:k{j}", size, GRAD_PARTIAL, param=param)
                b.task(f"postmerge:{param}:k{j}", "grad-merge",
                       [running, stage_totals[st]], [out], flops=elems,
                       exec={"type": "add", "lhs": running, "rhs": stage_totals[st],
                             "out": out},
                       param=param, role="post-loop")
                running = out
            totals[param] = running
        else:
            low = stages[0]
            per_mb: dict[int, str] = {}
            for i in range(s.num_microbatches):
                running = f"pgrad:{param}:s{low}:mb{i}"
                for j, st in enumerate(stages[1:], start=1):
                    out = b.buffer(f"gmb:{param}:mb{i}:k{j}", size, GRAD_PARTIAL,
                                   param=param, microbatch=i)
                    b.task(f"mbmerge:{param}:mb{i}:k{j}", "grad-merge",
                           [running, f"pgrad:{param}:s{st}:mb{i}"], [out], flops=elems,
                           actor=s.stage_to_actor(low),
                           exec={"type": "add", "lhs": running,
                                 "rhs": f"pgrad:{param}:s{st}:mb{i}", "out": out},
                           anchor=_bwd_position(s, i, low), param=param,
                           role="per-microbatch-merge")
                    running = out
                per_mb[i] = running
            totals[param] = chain(per_mb, low, "x")
    return totals


def unroll(p: StagePartition, s: Schedule) -> TaskGraph:
    """Unroll the gradient-accumulation loop under ``s`` into a task graph."""
    return _build(p, s, commuted=False)


def commute_grad_accumulation(tg: TaskGraph) -> TaskGraph:
    """Swap per-microbatch cross-stage gradient adds for per-stage accumulators
    plus one post-loop sum per extra use. Identity when nothing is shared."""
    if tg.commuted or not tg.partition.shared_params:
        return tg
    out = _build(tg.partition, tg.schedule, commuted=True)
    if tg.placed:
        out = infer_outer_placement(out, tg.partition)
    return out


def infer_outer_placement(tg: TaskGraph, p: StagePartition) -> TaskGraph:
    """Pin out-of-loop tasks: optimizer updates follow their gradient, post-loop
    merges follow the first summand, and scalar step inputs replicate per actor.

    Raises ``PlacementError`` instead of overwriting a conflicting pre-pinned
    actor.
    """
    conflicts = []
    for t in tg.topo_order():
        if t.kind == "grad-merge" and t.meta.get("role") == "post-loop":
            inferred = tg.producer_actor(tg.buffers[t.exec["lhs"]])
        elif t.kind == "optimizer-update":
            inferred = tg.producer_actor(tg.buffers[t.exec["grad"]])
        else:
            continue
        if t.actor is not None and t.actor != inferred:
            conflicts.append((t.uid, t.actor, inferred))
        else:
            t.actor = inferred
    if conflicts:
        detail = ", ".join(f"{uid} (pinned {a}, inferred {b})" for uid, a, b in conflicts)
        raise PlacementError(f"conflicting pinned placements: {detail}")

    # The learning-rate scalar is cost-free, so it replicates onto every actor
    # that updates parameters rather than being transferred.
    for t in tg.tasks.values():
        if t.kind != "optimizer-update":
            continue
        lr = f"lr:a{t.actor}"
        if lr not in tg.buffers:
            tg.buffers[lr] = Buffer(id=lr, producer=None, size_bytes=8, consumers=set(),
                                    kind=OPT_STATE, home=t.actor)
        tg.buffers[lr].consumers.add(t.uid)
        t.consumes.add(lr)
        t.exec["lr"] = lr
    tg.placed = True
    tg.validate()
    return tg
