"""Lowering of placed task graphs into per-actor instruction programs.

``infer_comms`` walks tasks in a deterministic global topological order and
schedules the asynchronous send on the producer and the matching receive on the
consumer immediately after the producing task, so transfers prefetch behind
later compute. Per directed actor pair, sends and receives carry one shared,
strictly increasing sequence space, mirroring ordered point-to-point transports
where mismatched orders deadlock. ``check_deadlock_free`` verifies both the
order-matching invariant and the acyclicity of the blocking-wait graph;
``insert_deletions`` adds liveness-driven deletes with a pending-deletions
queue for in-flight sends; ``fuse`` finalizes one dispatchable program per
actor.
"""
from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field

from pipecraft.schedules import Schedule
from pipecraft.taskgraph import OPT_STATE, PARAM, TaskGraph


class CommsError(ValueError):
    pass


@dataclass(frozen=True)
class RunTask:
    task: str


@dataclass(frozen=True)
class SendStart:
    buffer: str
    dst: int
    seq: int


@dataclass(frozen=True)
class SendWait:
    dst: int
    seq: int


@dataclass(frozen=True)
class RecvStart:
    buffer: str
    src: int
    seq: int


@dataclass(frozen=True)
class RecvWait:
    src: int
    seq: int


@dataclass(frozen=True)
class Delete:
    buffer: str


@dataclass(frozen=True)
class FlushPendingDeletes:
    pass


Instruction = (RunTask, SendStart, SendWait, RecvStart, RecvWait, Delete,
               FlushPendingDeletes)


def instr_to_json(ins) -> dict:
    d = {"op": type(ins).__name__}
    d.update(vars(ins))
    return d


@dataclass
class ActorProgram:
    actor: int
    instrs: list

    def __iter__(self):
        return iter(self.instrs)


@dataclass
class CommPlan:
    programs: list[ActorProgram]
    channels: dict[tuple[int, int], list[str]]
    fused: bool = False
    deletions: bool = False

    @property
    def num_actors(self) -> int:
        return len(self.programs)

    def channel_buffer(self, src: int, dst: int, seq: int) -> str:
        return self.channels[(src, dst)][seq]

    def to_json(self) -> dict:
        return {
            "fused": self.fused,
            "deletions": self.deletions,
            "programs": [
                {"actor": p.actor, "instrs": [instr_to_json(i) for i in p.instrs]}
                for p in self.programs
            ],
            "channels": [
                {"src": src, "dst": dst, "buffers": bufs}
                for (src, dst), bufs in sorted(self.channels.items())
            ],
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _check_seed_buffers(tg: TaskGraph) -> None:
    for buf in tg.buffers.values():
        if buf.producer is None:
            for c in buf.consumers:
                if tg.tasks[c].actor != buf.home:
                    raise CommsError(
                        f"step input {buf.id} homed on actor {buf.home} but consumed "
                        f"by {c} on actor {tg.tasks[c].actor}")


def _global_order(tg: TaskGraph) -> list:
    """Kahn linear extension honoring per-actor schedule positions, breaking
    ties by lowest actor then schedule position."""
    indeg = {uid: 0 for uid in tg.tasks}
    succs = defaultdict(list)
    for buf in tg.buffers.values():
        if buf.producer is None:
            continue
        for c in buf.consumers:
            succs[buf.producer].append(c)
            indeg[c] += 1
    # Per-actor program order is a constraint too: schedule order for loop
    # tasks, creation anchors for synthetic ones.
    by_actor = defaultdict(list)
    for t in tg.tasks.values():
        by_actor[t.actor].append(t)
    for tasks in by_actor.values():
        tasks.sort(key=lambda t: t.order_key)
        for prev, nxt in zip(tasks, tasks[1:]):
            succs[prev.uid].append(nxt.uid)
            indeg[nxt.uid] += 1

    def key(uid):
        t = tg.tasks[uid]
        return (t.actor, t.order_key, uid)

    heap = [(key(uid), uid) for uid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, uid = heapq.heappop(heap)
        out.append(tg.tasks[uid])
        for v in succs[uid]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (key(v), v))
    if len(out) != len(tg.tasks):
        stuck = sorted(uid for uid, d in indeg.items() if d > 0)
        raise CommsError(
            "no linear extension: schedule deadlocks through tasks " + ", ".join(stuck[:8]))
    return out


def infer_comms(tg: TaskGraph, s: Schedule) -> CommPlan:
    """Lower a placed task graph to per-actor programs with inferred comms.

    Sends and the matching receives are appended at the producing task's global
    position; receive waits land immediately before the first consuming task;
    send waits drain at end of program (the deletion pass ties reclamation to
    them).
    """
    if not tg.placed:
        raise CommsError("task graph placement is incomplete; run infer_outer_placement")
    _check_seed_buffers(tg)
    P = s.num_actors
    order = _global_order(tg)

    programs = [ActorProgram(actor=a, instrs=[]) for a in range(P)]
    seqs: dict[tuple[int, int], int] = defaultdict(int)
    channels: dict[tuple[int, int], list[str]] = defaultdict(list)
    pending_recv: list[dict[str, tuple[int, int]]] = [dict() for _ in range(P)]
    sends_of: list[list[tuple[int, int]]] = [[] for _ in range(P)]

    for t in order:
        a = t.actor
        prog = programs[a].instrs
        for bid in sorted(t.consumes):
            if bid in pending_recv[a]:
                src, q = pending_recv[a].pop(bid)
                prog.append(RecvWait(src=src, seq=q))
        prog.append(RunTask(t.uid))
        for bid in sorted(t.produces):
            buf = tg.buffers[bid]
            dsts = sorted({tg.tasks[c].actor for c in buf.consumers} - {a})
            for d in dsts:
                q = seqs[(a, d)]
                seqs[(a, d)] += 1
                prog.append(SendStart(buffer=bid, dst=d, seq=q))
                programs[d].instrs.append(RecvStart(buffer=bid, src=a, seq=q))
                pending_recv[d][bid] = (a, q)
                channels[(a, d)].append(bid)
                sends_of[a].append((d, q))
    for a in range(P):
        if pending_recv[a]:
            raise CommsError(f"actor {a} received buffers it never consumes: "
                             f"{sorted(pending_recv[a])}")
        for d, q in sends_of[a]:
            programs[a].instrs.append(SendWait(dst=d, seq=q))
    return CommPlan(programs=programs, channels=dict(channels))


def naive_lowering(tg: TaskGraph, s: Schedule) -> CommPlan:
    """Per-task recv-execute-send lowering with each side numbering its own
    channel posts. The straw-man baseline that deadlocks on crossing transfers."""
    if not tg.placed:
        raise CommsError("task graph placement is incomplete")
    _check_seed_buffers(tg)
    P = s.num_actors
    by_actor = defaultdict(list)
    for t in tg.tasks.values():
        by_actor[t.actor].append(t)
    send_seq: dict[tuple[int, int], int] = defaultdict(int)
    recv_seq: dict[tuple[int, int], int] = defaultdict(int)
    channels: dict[tuple[int, int], list[str]] = defaultdict(list)
    programs = [ActorProgram(actor=a, instrs=[]) for a in range(P)]
    for a in range(P):
        prog = programs[a].instrs
        received: set[str] = set()
        sends: list[tuple[int, int]] = []
        for t in sorted(by_actor[a], key=lambda t: t.order_key):
            for bid in sorted(t.consumes):
                buf = tg.buffers[bid]
                src = tg.producer_actor(buf)
                if src != a and bid not in received:
                    q = recv_seq[(src, a)]
                    recv_seq[(src, a)] += 1
                    prog.append(RecvStart(buffer=bid, src=src, seq=q))
                    prog.append(RecvWait(src=src, seq=q))
                    received.add(bid)
            prog.append(RunTask(t.uid))
            for bid in sorted(t.produces):
                buf = tg.buffers[bid]
                for d in sorted({tg.tasks[c].actor for c in buf.consumers} - {a}):
                    q = send_seq[(a, d)]
                    send_seq[(a, d)] += 1
                    prog.append(SendStart(buffer=bid, dst=d, seq=q))
                    channels[(a, d)].append(bid)
                    sends.append((d, q))
        for d, q in sends:
            prog.append(SendWait(dst=d, seq=q))
    return CommPlan(programs=programs, channels=dict(channels))


@dataclass
class DeadlockReport:
    violations: list[str] = field(default_factory=list)
    cycle: list[str] | None = None

    @property
    def ok(self) -> bool:
        return not self.violations and self.cycle is None

    def __str__(self):
        if self.ok:
            return "deadlock-free"
        parts = list(self.violations)
        if self.cycle:
            parts.append("wait cycle: " + " -> ".join(self.cycle))
        return "; ".join(parts)


def check_deadlock_free(cp: CommPlan) -> DeadlockReport:
    """Verify channel order matching and acyclicity of the blocking-wait graph.

    Nodes are instructions plus one virtual node per channel transfer; a
    transfer completes only after both endpoints posted it and its channel
    predecessor finished, and each wait blocks on its transfer. A cycle is a
    schedule that can never make progress.
    """
    rep = DeadlockReport()
    send_posts: dict[tuple[int, int], list[tuple[int, str]]] = defaultdict(list)
    recv_posts: dict[tuple[int, int], list[tuple[int, str]]] = defaultdict(list)
    for p in cp.programs:
        for ins in p.instrs:
            if isinstance(ins, SendStart):
                send_posts[(p.actor, ins.dst)].append((ins.seq, ins.buffer))
            elif isinstance(ins, RecvStart):
                recv_posts[(ins.src, p.actor)].append((ins.seq, ins.buffer))
    for ch in sorted(set(send_posts) | set(recv_posts)):
        snd, rcv = send_posts.get(ch, []), recv_posts.get(ch, [])
        if [q for q, _ in snd] != list(range(len(snd))):
            rep.violations.append(f"channel {ch}: send seqs not consecutive")
        if [q for q, _ in rcv] != list(range(len(rcv))):
            rep.violations.append(f"channel {ch}: recv seqs not consecutive")
        if [b for _, b in snd] != [b for _, b in rcv]:
            rep.violations.append(
                f"channel {ch}: send order {[b for _, b in snd]} does not match "
                f"recv order {[b for _, b in rcv]}")

    for p in cp.programs:
        starts = {("s", ins.dst, ins.seq) for ins in p.instrs if isinstance(ins, SendStart)}
        starts |= {("r", ins.src, ins.seq) for ins in p.instrs if isinstance(ins, RecvStart)}
        waits_s = [("s", ins.dst, ins.seq) for ins in p.instrs if isinstance(ins, SendWait)]
        waits_r = [("r", ins.src, ins.seq) for ins in p.instrs if isinstance(ins, RecvWait)]
        for w in waits_s + waits_r:
            if w not in starts:
                rep.violations.append(f"actor {p.actor}: wait without a start {w}")
        for kind, waits in (("send", waits_s), ("recv", waits_r)):
            if len(waits) != len(set(waits)):
                rep.violations.append(f"actor {p.actor}: duplicated {kind} wait")
        unwaited = starts - set(waits_s) - set(waits_r)
        if unwaited:
            rep.violations.append(f"actor {p.actor}: starts without waits {sorted(unwaited)}")

    cycle = _find_wait_cycle(cp)
    if cycle:
        rep.cycle = cycle
    return rep


def _find_wait_cycle(cp: CommPlan) -> list[str] | None:
    """Cycle search over the blocking-wait graph.

    Transfers are matched by buffer but delivered in send order per channel
    (head-of-line blocking), a transfer moves only once both endpoints posted
    it, and a send completes when the receiver dequeues the message. These are
    the ordered-transport semantics under which mismatched send/recv orders
    hang instead of merely corrupting data.
    """
    succs: dict = defaultdict(list)
    nodes: list = []

    def label(n) -> str:
        if n[0] == "T":
            return f"transfer({n[1]}->{n[2]} {n[3]})"
        a, i = n
        return f"actor{a}[{i}]:{_brief(cp.programs[a].instrs[i])}"

    def edge(u, v):
        succs[u].append(v)

    # Per channel: buffer identities of each side's posts, in post order.
    send_buf: dict[tuple[int, int], dict[int, str]] = defaultdict(dict)
    recv_buf: dict[tuple[int, int], dict[int, str]] = defaultdict(dict)
    recv_wait_node: dict[tuple[tuple[int, int], str], tuple[int, int]] = {}
    for p in cp.programs:
        for i, ins in enumerate(p.instrs):
            if isinstance(ins, SendStart):
                send_buf[(p.actor, ins.dst)][ins.seq] = ins.buffer
            elif isinstance(ins, RecvStart):
                recv_buf[(ins.src, p.actor)][ins.seq] = ins.buffer
            elif isinstance(ins, RecvWait):
                ch = (ins.src, p.actor)
                buf = recv_buf[ch].get(ins.seq)
                if buf is not None:
                    recv_wait_node[(ch, buf)] = (p.actor, i)

    def transfer_of(ch, buffer):
        for q, bname in send_buf[ch].items():
            if bname == buffer:
                return ("T", ch[0], ch[1], buffer, q)
        return None

    transfers: set = set()
    for p in cp.programs:
        prev = None
        for i, ins in enumerate(p.instrs):
            n = (p.actor, i)
            nodes.append(n)
            if prev is not None:
                edge(prev, n)
            prev = n
            if isinstance(ins, SendStart):
                t = ("T", p.actor, ins.dst, ins.buffer, ins.seq)
                transfers.add(t)
                edge(n, t)
            elif isinstance(ins, RecvStart):
                t = transfer_of((ins.src, p.actor), ins.buffer)
                if t is not None:
                    transfers.add(t)
                    edge(n, t)
            elif isinstance(ins, RecvWait):
                buf = recv_buf[(ins.src, p.actor)].get(ins.seq)
                t = transfer_of((ins.src, p.actor), buf) if buf else None
                if t is not None:
                    edge(t, n)
            elif isinstance(ins, SendWait):
                # Completes when the receiver dequeues this message.
                buf = send_buf[(p.actor, ins.dst)].get(ins.seq)
                w = recv_wait_node.get(((p.actor, ins.dst), buf)) if buf else None
                if w is not None:
                    edge(w, n)
    for t in transfers:
        if t[4] > 0:
            prev_q = t[4] - 1
            buf = send_buf[(t[1], t[2])].get(prev_q)
            prev_t = ("T", t[1], t[2], buf, prev_q)
            if prev_t in transfers:
                edge(prev_t, t)  # channel FIFO: earlier transfers land first
    nodes.extend(sorted(transfers))

    # Iterative DFS cycle search with a back-edge witness.
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    parent: dict = {}
    for root in nodes:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(succs[root]))]
        color[root] = GRAY
        while stack:
            n, it = stack[-1]
            found = False
            for v in it:
                if color[v] == WHITE:
                    color[v] = GRAY
                    parent[v] = n
                    stack.append((v, iter(succs[v])))
                    found = True
                    break
                if color[v] == GRAY:
                    cyc = [v, n]
                    at = n
                    while at != v:
                        at = parent[at]
                        cyc.append(at)
                    cyc.reverse()
                    return [label(x) for x in cyc]
            if not found:
                color[n] = BLACK
                stack.pop()
    return None


def _brief(ins) -> str:
    if isinstance(ins, RunTask):
        return f"run {ins.task}"
    if isinstance(ins, SendStart):
        return f"send {ins.buffer}->{ins.dst}"
    if isinstance(ins, SendWait):
        return f"sendwait {ins.dst}#{ins.seq}"
    if isinstance(ins, RecvStart):
        return f"recv {ins.buffer}<-{ins.src}"
    if isinstance(ins, RecvWait):
        return f"recvwait {ins.src}#{ins.seq}"
    if isinstance(ins, Delete):
        return f"delete {ins.buffer}"
    return "flush"


def insert_deletions(cp: CommPlan, tg: TaskGraph) -> CommPlan:
    """Insert one Delete per owning actor after each buffer's last local use.

    A deletion site also flushes the pending-deletions queue, so a buffer whose
    send was still in flight at its own Delete gets reclaimed at the next site;
    the end-of-program send drain plus a final flush bounds reclamation.
    """
    rep = check_deadlock_free(cp)
    if not rep.ok:
        raise CommsError(f"refusing to add deletions to an unsafe plan: {rep}")
    new_programs = []
    for p in cp.programs:
        owned: set[str] = {b.id for b in tg.buffers.values()
                           if tg.producer_actor(b) == p.actor}
        owned |= {cp.channel_buffer(ins.src, p.actor, ins.seq)
                  for ins in p.instrs if isinstance(ins, RecvWait)}
        deletable = {bid for bid in owned
                     if tg.buffers[bid].kind not in (PARAM, OPT_STATE)
                     and not tg.buffers[bid].is_output}
        last_use: dict[str, int] = {}
        for i, ins in enumerate(p.instrs):
            if isinstance(ins, RunTask):
                for bid in tg.tasks[ins.task].consumes:
                    last_use[bid] = i
                for bid in tg.tasks[ins.task].produces:
                    last_use.setdefault(bid, i)
            elif isinstance(ins, SendStart):
                last_use[ins.buffer] = i
            elif isinstance(ins, RecvWait):
                last_use.setdefault(cp.channel_buffer(ins.src, p.actor, ins.seq), i)
        by_site = defaultdict(list)
        for bid, i in last_use.items():
            if bid in deletable:
                by_site[i].append(bid)
        instrs = []
        for i, ins in enumerate(p.instrs):
            instrs.append(ins)
            if i in by_site:
                instrs.append(FlushPendingDeletes())
                for bid in sorted(by_site[i]):
                    instrs.append(Delete(buffer=bid))
        instrs.append(FlushPendingDeletes())
        new_programs.append(ActorProgram(actor=p.actor, instrs=instrs))
    return CommPlan(programs=new_programs, channels=dict(cp.channels), deletions=True)


def symbolic_replay(cp: CommPlan, tg: TaskGraph):
    """Timing-free replay of every program against the store discipline.

    Returns (violations, final_live) where final_live maps actor -> buffer ids
    still resident at end of program (pending deletions count as freed only if
    their Delete executed).
    """
    violations: list[str] = []
    final_live: dict[int, set[str]] = {}
    for p in cp.programs:
        live = {b.id for b in tg.buffers.values()
                if b.producer is None and b.home == p.actor}
        deleted: set[str] = set()

        def need(bid, i, what):
            if bid in deleted:
                violations.append(f"actor {p.actor}[{i}]: {what} uses {bid} after delete")
            elif bid not in live:
                violations.append(f"actor {p.actor}[{i}]: {what} reads absent buffer {bid}")

        for i, ins in enumerate(p.instrs):
            if isinstance(ins, RunTask):
                t = tg.tasks[ins.task]
                for bid in sorted(t.consumes):
                    need(bid, i, f"task {t.uid}")
                for bid in t.produces:
                    live.add(bid)
            elif isinstance(ins, SendStart):
                need(ins.buffer, i, "send")
            elif isinstance(ins, RecvWait):
                live.add(cp.channel_buffer(ins.src, p.actor, ins.seq))
            elif isinstance(ins, Delete):
                if ins.buffer not in live:
                    violations.append(
                        f"actor {p.actor}[{i}]: delete of absent buffer {ins.buffer}")
                live.discard(ins.buffer)
                deleted.add(ins.buffer)
        final_live[p.actor] = live
    return violations, final_live


def fuse(cp: CommPlan, tg: TaskGraph) -> CommPlan:
    """Finalize one contiguous dispatchable program per actor.

    Statically confirms that every instruction is from the closed vocabulary,
    loop tasks run in schedule order, and all cross-actor interaction flows
    through matched send/receive pairs (reads resolve against the local store).
    """
    if not cp.deletions:
        raise CommsError("insert_deletions must run before fuse")
    s = tg.schedule
    for p in cp.programs:
        for ins in p.instrs:
            if not isinstance(ins, Instruction):
                raise CommsError(f"actor {p.actor}: foreign instruction {ins!r}")
        loop_seq = [tg.tasks[ins.task].tid for ins in p.instrs
                    if isinstance(ins, RunTask) and tg.tasks[ins.task].is_loop]
        if tuple(loop_seq) != s.per_actor[p.actor]:
            raise CommsError(f"actor {p.actor}: fused run order diverges from the schedule")
    violations, _ = symbolic_replay(cp, tg)
    if violations:
        raise CommsError("fused plan fails store replay: " + "; ".join(violations[:4]))
    return CommPlan(programs=cp.programs, channels=dict(cp.channels),
                    fused=True, deletions=True)


def plan_pipeline(tg: TaskGraph) -> CommPlan:
    """infer -> deadlock check -> deletions -> fuse, the standard lowering."""
    cp = infer_comms(tg, tg.schedule)
    rep = check_deadlock_free(cp)
    if not rep.ok:
        raise CommsError(f"inferred plan unsafe: {rep}")
    return fuse(insert_deletions(cp, tg), tg)
