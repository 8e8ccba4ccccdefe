"""Pipeline schedule generators (GPipe, 1F1B, interleaved 1F1B) and validation.

A schedule is a per-actor ordering of (microbatch, direction, stage) tasks.
Stage s always lives on actor ``s mod P``; the forward and backward of a stage
share the actor. Any ordering is admissible as long as a global linear
extension consistent with task data dependencies exists, which ``validate``
checks with a deterministic Kahn sweep.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

FWD = "fwd"
BWD = "bwd"

SCHEDULE_SCHEMA_VERSION = 1


class ScheduleError(ValueError):
    """Malformed or invalid schedule."""


@dataclass(frozen=True, order=True)
class TaskId:
    i: int
    ty: str
    stage: int

    def __post_init__(self):
        if self.ty not in (FWD, BWD):
            raise ScheduleError(f"task type must be 'fwd' or 'bwd', got {self.ty!r}")
        if self.i < 0 or self.stage < 0:
            raise ScheduleError("microbatch and stage indices must be non-negative")

    def __str__(self):
        return f"{'f' if self.ty == FWD else 'b'}({self.i},{self.stage})"


@dataclass(frozen=True)
class Schedule:
    num_actors: int
    num_microbatches: int
    num_stages: int
    per_actor: tuple[tuple[TaskId, ...], ...]

    def __post_init__(self):
        if self.num_actors < 1 or self.num_microbatches < 1 or self.num_stages < 1:
            raise ScheduleError("actor, microbatch, and stage counts must be positive")
        if self.num_stages % self.num_actors != 0:
            raise ScheduleError("stage count must be a multiple of the actor count")
        if len(self.per_actor) != self.num_actors:
            raise ScheduleError("actor count mismatch against per-actor task lists")

    @property
    def circular_repeat(self) -> int:
        return self.num_stages // self.num_actors

    def stage_to_actor(self, stage: int) -> int:
        return stage % self.num_actors

    def position(self, t: TaskId) -> int:
        return self.per_actor[self.stage_to_actor(t.stage)].index(t)

    def to_json(self) -> dict:
        return {
            "version": SCHEDULE_SCHEMA_VERSION,
            "num_actors": self.num_actors,
            "num_microbatches": self.num_microbatches,
            "num_stages": self.num_stages,
            "actors": [[{"i": t.i, "ty": t.ty, "stage": t.stage} for t in acts]
                       for acts in self.per_actor],
        }


def _mk(P: int, M: int, S: int, per_actor: list[list[TaskId]]) -> Schedule:
    return Schedule(num_actors=P, num_microbatches=M, num_stages=S,
                    per_actor=tuple(tuple(a) for a in per_actor))


def gpipe(P: int, M: int) -> Schedule:
    """All forwards in microbatch order, then all backwards."""
    if P < 1 or M < 1:
        raise ScheduleError("P and M must be positive")
    per_actor = [
        [TaskId(i, FWD, a) for i in range(M)] + [TaskId(i, BWD, a) for i in range(M)]
        for a in range(P)
    ]
    return _mk(P, M, P, per_actor)


def one_f_one_b(P: int, M: int) -> Schedule:
    """Eager-backward schedule: actor a warms up with P-1-a forwards, then
    alternates one forward with one backward until the backward drain.

    For M < P the warmup truncates to M, degenerating to GPipe ordering.
    """
    if P < 1 or M < 1:
        raise ScheduleError("P and M must be positive")
    per_actor = []
    for a in range(P):
        warmup = min(P - 1 - a, M)
        seq = [TaskId(i, FWD, a) for i in range(warmup)]
        nf, nb = warmup, 0
        while nb < M:
            if nf < M:
                seq.append(TaskId(nf, FWD, a))
                nf += 1
            seq.append(TaskId(nb, BWD, a))
            nb += 1
        per_actor.append(seq)
    return _mk(P, M, P, per_actor)


def interleaved_1f1b(P: int, M: int, V: int) -> Schedule:
    """Interleaved 1F1B with circular repeat V: actor a owns stages a, a+P, ...

    Forward chunks advance through microbatch groups of size P, cycling stage
    chunks within each group; backward chunks mirror with reversed chunk order.
    V=1 degenerates to the plain 1F1B ordering.
    """
    if P < 1 or M < 1 or V < 1:
        raise ScheduleError("P, M, and V must be positive")
    if V == 1:
        return one_f_one_b(P, M)
    if M % P != 0:
        raise ScheduleError("M must be divisible by P for interleaved schedules with V > 1")
    S = P * V
    group = P * V
    total = M * V

    def fwd_chunk(a: int, k: int) -> TaskId:
        g, r = divmod(k, group)
        v, pp = divmod(r, P)
        return TaskId(g * P + pp, FWD, a + v * P)

    def bwd_chunk(a: int, k: int) -> TaskId:
        g, r = divmod(k, group)
        v, pp = divmod(r, P)
        return TaskId(g * P + pp, BWD, a + (V - 1 - v) * P)

    per_actor = []
    for a in range(P):
        warmup = min(total, (P - 1 - a) * 2 + (V - 1) * P)
        seq = [fwd_chunk(a, k) for k in range(warmup)]
        nf, nb = warmup, 0
        while nb < total:
            if nf < total:
                seq.append(fwd_chunk(a, nf))
                nf += 1
            seq.append(bwd_chunk(a, nb))
            nb += 1
        per_actor.append(seq)
    return _mk(P, M, S, per_actor)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        return "valid" if self.ok else "; ".join(self.violations)


def task_dependencies(t: TaskId, S: int) -> list[TaskId]:
    """Immediate predecessors of a task in the dataflow order."""
    deps = []
    if t.ty == FWD:
        if t.stage > 0:
            deps.append(TaskId(t.i, FWD, t.stage - 1))
    else:
        deps.append(TaskId(t.i, FWD, t.stage))
        if t.stage < S - 1:
            deps.append(TaskId(t.i, BWD, t.stage + 1))
    return deps


def validate(s: Schedule) -> ValidationReport:
    """Check coverage, actor placement, and the existence of a linear extension."""
    rep = ValidationReport()
    P, M, S = s.num_actors, s.num_microbatches, s.num_stages

    seen: dict[TaskId, int] = {}
    for a, tasks in enumerate(s.per_actor):
        for t in tasks:
            if t in seen:
                rep.violations.append(f"task appears twice: {t} (actors {seen[t]} and {a})")
            seen[t] = a
            if t.i >= M or t.stage >= S:
                rep.violations.append(f"task {t} out of bounds (M={M}, S={S})")
            elif s.stage_to_actor(t.stage) != a:
                rep.violations.append(
                    f"fwd/bwd co-location violated: {t} on actor {a}, "
                    f"but stage {t.stage} belongs to actor {s.stage_to_actor(t.stage)}")
    expected = {TaskId(i, ty, st) for i in range(M) for ty in (FWD, BWD) for st in range(S)}
    missing = expected - set(seen)
    if missing:
        rep.violations.append(
            f"missing tasks: {', '.join(str(t) for t in sorted(missing)[:8])}"
            + ("..." if len(missing) > 8 else ""))

    cycle = _find_order_cycle(s)
    if cycle:
        rep.violations.append("dependency cycle: " + " -> ".join(str(t) for t in cycle))
    return rep


def _find_order_cycle(s: Schedule) -> list[TaskId] | None:
    """Kahn sweep over dependency + per-actor order edges; returns a witness cycle."""
    present = {t for tasks in s.per_actor for t in tasks}
    succs: dict[TaskId, list[TaskId]] = {t: [] for t in present}
    indeg = {t: 0 for t in present}

    def edge(u: TaskId, v: TaskId):
        succs[u].append(v)
        indeg[v] += 1

    pos: dict[TaskId, tuple[int, int]] = {}
    for a, tasks in enumerate(s.per_actor):
        for k, t in enumerate(tasks):
            pos[t] = (a, k)
            if k > 0:
                edge(tasks[k - 1], t)
    for t in present:
        for d in task_dependencies(t, s.num_stages):
            if d in present:
                edge(d, t)

    heap = [(pos[t], t) for t in present if indeg[t] == 0]
    heapq.heapify(heap)
    done = 0
    while heap:
        _, t = heapq.heappop(heap)
        done += 1
        for v in succs[t]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (pos[v], v))
    if done == len(present):
        return None
    # Extract one concrete cycle among the unsorted remainder: every remaining
    # node keeps a remaining predecessor, so a predecessor walk must loop.
    remaining = {t for t in present if indeg[t] > 0}
    preds: dict[TaskId, list[TaskId]] = {t: [] for t in present}
    for u, vs in succs.items():
        for v in vs:
            preds[v].append(u)
    path, at = [], min(remaining, key=lambda t: pos[t])
    seen_at: dict[TaskId, int] = {}
    while at not in seen_at:
        seen_at[at] = len(path)
        path.append(at)
        at = next(v for v in preds[at] if v in remaining)
    cycle = path[seen_at[at]:] + [at]
    return list(reversed(cycle))


def schedule_from_json(doc: dict) -> Schedule:
    actors = doc.get("actors")
    if not isinstance(actors, list) or not actors:
        raise ScheduleError("actors: actor count mismatch (need a non-empty list of task lists)")
    per_actor: list[list[TaskId]] = []
    for a, tasks in enumerate(actors):
        if not isinstance(tasks, list):
            raise ScheduleError(f"actors[{a}]: expected a list of tasks")
        row = []
        for k, t in enumerate(tasks):
            try:
                row.append(TaskId(int(t["i"]), str(t["ty"]), int(t["stage"])))
            except (KeyError, TypeError, ValueError) as e:
                raise ScheduleError(f"actors[{a}][{k}]: malformed task ({e})") from e
        per_actor.append(row)
    all_tasks = [t for row in per_actor for t in row]
    if not all_tasks:
        raise ScheduleError("actors: no tasks given")
    P = len(per_actor)
    S = max(t.stage for t in all_tasks) + 1
    M = max(t.i for t in all_tasks) + 1
    if S % P != 0:
        raise ScheduleError(f"stage count {S} is not a multiple of actor count {P}")
    s = Schedule(num_actors=P, num_microbatches=M, num_stages=S,
                 per_actor=tuple(tuple(r) for r in per_actor))
    rep = validate(s)
    if not rep.ok:
        raise ScheduleError(f"schedule invalid: {rep}")
    return s


def load_schedule(path) -> Schedule:
    """Parse and validate a schedule file; validation failures are fatal."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ScheduleError(f"schedule file {path}: {e}") from e
    return schedule_from_json(doc)


def dump_schedule(s: Schedule, path) -> None:
    with open(path, "w") as f:
        json.dump(s.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
