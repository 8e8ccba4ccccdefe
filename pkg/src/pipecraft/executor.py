"""Concurrent mini-runtime over dense float64 tensors, plus the serial reference.

``run_reference`` implements the plain gradient-accumulation loop (sum grads,
collect per-microbatch losses, one SGD step) by interpreting the full op graph
per microbatch. ``run_pipelined`` executes a fused comm plan with one worker
thread per actor, exchanging buffers over ordered FIFO channels, and must agree
with the reference to float64 round-off. The driver talks to each worker
exactly twice per step: one program dispatch, one result gather.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from pipecraft.comms import (
    CommPlan,
    Delete,
    FlushPendingDeletes,
    RecvStart,
    RecvWait,
    RunTask,
    SendStart,
    SendWait,
    _brief,
)
from pipecraft.ir import OpNode, StagePartition
from pipecraft.taskgraph import GRAD_TOTAL, OPT_STATE, PARAM, STASH, TaskGraph


class ExecutorFault(RuntimeError):
    """Liveness or consistency failure inside the runtime."""


class ChannelOrderFault(ExecutorFault):
    pass


class LivenessFault(ExecutorFault):
    pass


# ---------------------------------------------------------------------------
# Op interpreter


def _sum_to(x: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    while x.ndim > len(dims):
        x = x.sum(axis=0)
    for ax, d in enumerate(dims):
        if x.shape[ax] != d:
            x = x.sum(axis=ax, keepdims=True)
    return x.reshape(dims)


def eval_op(op: OpNode, env: dict[str, np.ndarray]) -> np.ndarray:
    k = op.kind
    if k in ("parameter-read", "input-read"):
        if op.result not in env:
            raise KeyError(f"{k} {op.id}: value {op.result} was not fed")
        return env[op.result]
    a = env[op.operands[0]] if op.operands else None
    if k == "matmul":
        return a @ env[op.operands[1]]
    if k == "add":
        return a + env[op.operands[1]]
    if k == "relu":
        return np.maximum(a, 0.0)
    if k == "sub-sample-loss":
        # Sum of per-sample quadratic losses; linear in the batch so gradient
        # accumulation over microbatches matches the full-batch gradient.
        return np.asarray(0.5 * np.sum(a * a))
    if k == "broadcast":
        return np.broadcast_to(a, op.result_spec.dims).copy()
    if k == "transpose":
        return np.transpose(a)
    if k == "scale":
        return a * env[op.operands[1]]
    if k == "yield-marker":
        return a
    if k == "concat":
        parts = [np.atleast_1d(env[v]) for v in op.operands]
        return np.concatenate(parts, axis=0)
    if k == "mul":
        return a * env[op.operands[1]]
    if k == "relu-grad":
        return a * (env[op.operands[1]] > 0.0)
    if k == "sum-to":
        return _sum_to(a, op.result_spec.dims)
    if k == "slice":
        off, ln = op.attr("offset"), op.attr("length")
        return a[off:off + ln]
    raise ValueError(f"no interpreter rule for op kind {k!r}")


def evaluate_ops(ops: list[OpNode], env: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run ops in order, extending and returning ``env`` (single assignment)."""
    for op in ops:
        env[op.result] = eval_op(op, env)
    return env


# ---------------------------------------------------------------------------
# Serial reference loop


def split_batch(batch: np.ndarray, M: int) -> list[np.ndarray]:
    if batch.shape[0] % M != 0:
        raise ValueError(f"batch of {batch.shape[0]} rows does not split into {M} microbatches")
    step = batch.shape[0] // M
    return [batch[i * step:(i + 1) * step] for i in range(M)]


def run_reference(p: StagePartition, params: dict[str, np.ndarray], batch: np.ndarray,
                  M: int, lr: float = 0.1):
    """Serial gradient accumulation: per-microbatch grads summed in microbatch
    order, per-microbatch losses collected, then one SGD step."""
    if not p.has_backward:
        raise ValueError("partition has no backward stages; call derive_backward first")
    (x_in,) = sorted(p.graph.inputs)
    grads = {q: np.zeros_like(v) for q, v in params.items()}
    losses = []
    for mb in split_batch(batch, M):
        env = dict(params)
        env[x_in] = mb
        evaluate_ops(p.graph.ops, env)
        losses.append(float(env[p.loss_value]))
        for q in params:
            grads[q] = grads[q] + env[p.param_grad_total[q]]
    new_params = {q: params[q] - lr * grads[q] for q in params}
    return grads, np.asarray(losses), new_params


# ---------------------------------------------------------------------------
# Concurrent runtime


@dataclass
class RunStats:
    driver_messages: int = 0
    channel_counts: dict = field(default_factory=dict)     # (src, dst) -> int
    sent_buffers: list = field(default_factory=list)       # (src, dst, buffer id)
    peak_live: dict = field(default_factory=dict)          # actor -> int
    peak_stash: dict = field(default_factory=dict)         # (actor, stage) -> int
    final_live: dict = field(default_factory=dict)         # actor -> sorted buffer ids

    @property
    def channel_messages(self) -> int:
        return sum(self.channel_counts.values())

    def messages_for_param(self, tg: TaskGraph, param: str) -> int:
        return sum(1 for _, _, bid in self.sent_buffers
                   if tg.buffers[bid].meta.get("param") == param
                   and tg.buffers[bid].kind.startswith("param-grad"))


@dataclass
class ExecutionResult:
    grads: dict[str, np.ndarray]
    losses: np.ndarray
    new_params: dict[str, np.ndarray]
    stats: RunStats


def instrument(result: ExecutionResult) -> RunStats:
    return result.stats


class _Control:
    """Shared watchdog/abort state plus per-worker heartbeats."""

    def __init__(self, timeout_s: float):
        self.deadline = time.monotonic() + timeout_s
        self.abort = threading.Event()
        self.heartbeat: dict[int, str] = {}
        self.faults: list[BaseException] = []
        self.lock = threading.Lock()

    def remaining(self) -> float:
        return self.deadline - time.monotonic()

    def fail(self, exc: BaseException):
        with self.lock:
            self.faults.append(exc)
        self.abort.set()

    def check(self, actor: int):
        if self.abort.is_set():
            raise _Aborted()
        if self.remaining() <= 0:
            raise LivenessFault(f"actor {actor} timed out")


class _Aborted(Exception):
    pass


class Channel:
    """Directed FIFO of (seq, buffer id, value). Sends are non-blocking and
    must be emitted in sequence order; messages are dequeued head-first, but a
    wait for a later sequence number drains earlier arrivals into a mailbox
    (their receives were posted in matching order, so the data is already
    bound). Senders can wait until a given message has been dequeued."""

    def __init__(self, src: int, dst: int):
        self.src, self.dst = src, dst
        self.q: deque = deque()
        self.mailbox: dict[int, tuple[str, object]] = {}
        self.consumed: set[int] = set()
        self.cond = threading.Condition()

    def send(self, seq: int, bid: str, value):
        with self.cond:
            if self.q and self.q[-1][0] >= seq:
                raise ChannelOrderFault(
                    f"channel {self.src}->{self.dst}: send seq {seq} out of order")
            self.q.append((seq, bid, value))
            self.cond.notify_all()

    def recv(self, seq: int, ctl: _Control, actor: int):
        with self.cond:
            while True:
                if seq in self.mailbox:
                    return self.mailbox.pop(seq)
                while not self.q:
                    ctl.check(actor)
                    self.cond.wait(timeout=min(0.05, max(ctl.remaining(), 0.001)))
                head_seq, bid, value = self.q.popleft()
                self.consumed.add(head_seq)
                self.cond.notify_all()
                if head_seq == seq:
                    return bid, value
                if head_seq > seq:
                    raise ChannelOrderFault(
                        f"channel {self.src}->{self.dst}: receive expected seq {seq} "
                        f"but the channel already advanced to {head_seq} ({bid})")
                self.mailbox[head_seq] = (bid, value)

    def wait_consumed(self, seq: int, ctl: _Control, actor: int):
        with self.cond:
            while seq not in self.consumed:
                ctl.check(actor)
                self.cond.wait(timeout=min(0.05, max(ctl.remaining(), 0.001)))

    def is_consumed(self, seq: int) -> bool:
        with self.cond:
            return seq in self.consumed

    def drained(self) -> bool:
        with self.cond:
            return not self.q and not self.mailbox


class ObjectStore:
    """Per-actor buffer-id -> tensor map with a pending-deletions queue for
    buffers whose asynchronous sends are still in flight."""

    def __init__(self, actor: int, tg: TaskGraph, stats: RunStats):
        self.actor = actor
        self.tg = tg
        self.stats = stats
        self.data: dict[str, object] = {}
        self.pending: deque[str] = deque()
        self.outstanding: dict[str, list[tuple[Channel, int]]] = {}

    def put(self, bid: str, value):
        self.data[bid] = value
        self._track()

    def get(self, bid: str, at: str):
        if bid not in self.data:
            raise LivenessFault(f"actor {self.actor} at {at}: missing buffer {bid}")
        return self.data[bid]

    def note_send(self, bid: str, ch: Channel, seq: int):
        self.outstanding.setdefault(bid, []).append((ch, seq))

    def _sends_done(self, bid: str) -> bool:
        return all(ch.is_consumed(seq) for ch, seq in self.outstanding.get(bid, ()))

    def delete(self, bid: str, at: str):
        if bid not in self.data:
            raise LivenessFault(f"actor {self.actor} at {at}: delete of absent buffer {bid}")
        if self._sends_done(bid):
            del self.data[bid]
        else:
            self.pending.append(bid)

    def flush(self):
        keep = deque()
        while self.pending:
            bid = self.pending.popleft()
            if self._sends_done(bid):
                self.data.pop(bid, None)
            else:
                keep.append(bid)
        self.pending = keep

    def _track(self):
        a = self.actor
        self.stats.peak_live[a] = max(self.stats.peak_live.get(a, 0), len(self.data))
        by_stage: dict[int, int] = {}
        for bid in self.data:
            b = self.tg.buffers.get(bid)
            if b is not None and b.kind == STASH:
                st = b.meta["stage"]
                by_stage[st] = by_stage.get(st, 0) + 1
        for st, n in by_stage.items():
            key = (a, st)
            self.stats.peak_stash[key] = max(self.stats.peak_stash.get(key, 0), n)


def _run_task(task, p: StagePartition, store: ObjectStore, at: str):
    ex = task.exec
    kind = ex["type"]
    if kind == "stage-fwd":
        prog = p.fwd_programs[ex["stage"]]
        env = {v: store.get(bid, at) for v, bid in ex["feeds"].items()}
        evaluate_ops(prog.ops, env)
        for v, bid in ex["outs"].items():
            store.put(bid, env[v])
        if ex["stash_out"]:
            store.put(ex["stash_out"], {v: env[v] for v in prog.stash})
    elif kind == "stage-bwd":
        prog = p.bwd_programs[ex["stage"]]
        env = {v: store.get(bid, at) for v, bid in ex["feeds"].items()}
        if ex["stash_in"]:
            env.update(store.get(ex["stash_in"], at))
        evaluate_ops(prog.ops, env)
        for v, bid in ex["outs"].items():
            store.put(bid, env[v])
    elif kind == "add":
        store.put(ex["out"], store.get(ex["lhs"], at) + store.get(ex["rhs"], at))
    elif kind == "concat":
        store.put(ex["out"], np.stack([np.asarray(store.get(b, at))
                                       for b in ex["parts"]]))
    elif kind == "sgd-update":
        w = store.get(ex["param"], at)
        g = store.get(ex["grad"], at)
        lr = store.get(ex["lr"], at)
        store.put(ex["out"], w - lr * g)
    else:
        raise ExecutorFault(f"unknown task payload {kind!r}")


def _worker(actor: int, instrs, tg: TaskGraph, store: ObjectStore,
            channels: dict[tuple[int, int], Channel], ctl: _Control, delay_fn):
    try:
        for idx, ins in enumerate(instrs):
            ctl.heartbeat[actor] = f"[{idx}] {_brief(ins)}"
            if delay_fn is not None:
                d = delay_fn(actor, idx)
                if d:
                    time.sleep(d)
            ctl.check(actor)
            at = f"instruction {idx}"
            if isinstance(ins, RunTask):
                _run_task(tg.tasks[ins.task], tg.partition, store, at)
            elif isinstance(ins, SendStart):
                ch = channels[(actor, ins.dst)]
                value = store.get(ins.buffer, at)
                store.note_send(ins.buffer, ch, ins.seq)
                ch.send(ins.seq, ins.buffer, value)
            elif isinstance(ins, SendWait):
                channels[(actor, ins.dst)].wait_consumed(ins.seq, ctl, actor)
            elif isinstance(ins, RecvStart):
                pass  # prefetch visibility belongs to the simulator's cost model
            elif isinstance(ins, RecvWait):
                bid, value = channels[(ins.src, actor)].recv(ins.seq, ctl, actor)
                store.put(bid, value)
            elif isinstance(ins, Delete):
                store.delete(ins.buffer, at)
            elif isinstance(ins, FlushPendingDeletes):
                store.flush()
            else:
                raise ExecutorFault(f"actor {actor}: unknown instruction {ins!r}")
        ctl.heartbeat[actor] = "done"
    except _Aborted:
        pass
    except BaseException as e:
        ctl.fail(e)


def run_pipelined(cp: CommPlan, tg: TaskGraph, params: dict[str, np.ndarray],
                  batch: np.ndarray, lr: float = 0.1, timeout_s: float = 30.0,
                  delay_fn=None, strict_store: bool = True) -> ExecutionResult:
    """Execute a fused plan with one worker per actor over FIFO channels.

    Outputs match ``run_reference`` to float64 round-off. A watchdog converts
    hangs into a ``LivenessFault`` carrying each worker's blocked instruction.
    """
    if not cp.fused:
        raise ExecutorFault("plan must be fused before execution")
    p = tg.partition
    P = cp.num_actors
    M = tg.schedule.num_microbatches
    (x_in,) = sorted(p.graph.inputs)
    microbatches = split_batch(batch, M)

    stats = RunStats()
    ctl = _Control(timeout_s)
    stores = [ObjectStore(a, tg, stats) for a in range(P)]
    for bid, buf in tg.buffers.items():
        if buf.producer is not None:
            continue
        if buf.kind == PARAM:
            stores[buf.home].put(bid, params[buf.meta["param"]].copy())
        elif buf.kind == OPT_STATE:
            stores[buf.home].put(bid, np.float64(lr))
        else:
            stores[buf.home].put(bid, microbatches[buf.meta["microbatch"]])

    base_channels: dict[tuple[int, int], Channel] = {
        key: Channel(*key) for key in cp.channels
    }

    class _CountingChannel:
        def __init__(self, ch: Channel):
            self._ch = ch

        def send(self, seq, bid, value):
            key = (self._ch.src, self._ch.dst)
            stats.channel_counts[key] = stats.channel_counts.get(key, 0) + 1
            stats.sent_buffers.append((self._ch.src, self._ch.dst, bid))
            self._ch.send(seq, bid, value)

        def __getattr__(self, name):
            return getattr(self._ch, name)

    channels = {key: _CountingChannel(ch) for key, ch in base_channels.items()}

    workers = []
    for prog in cp.programs:
        stats.driver_messages += 1  # program dispatch
        w = threading.Thread(target=_worker, name=f"actor-{prog.actor}",
                             args=(prog.actor, prog.instrs, tg, stores[prog.actor],
                                   channels, ctl, delay_fn), daemon=True)
        workers.append(w)
        w.start()
    for w in workers:
        w.join(timeout=max(ctl.remaining(), 0.0) + 1.0)
    hung = [w for w in workers if w.is_alive()]
    if hung:
        ctl.abort.set()
        dump = ", ".join(f"actor {a}: {ctl.heartbeat.get(a, '?')}" for a in range(P))
        raise LivenessFault(f"watchdog timeout; blocked instructions: {dump}")
    if ctl.faults:
        raise ctl.faults[0]
    for key, ch in base_channels.items():
        if not ch.drained():
            raise ChannelOrderFault(f"channel {key} holds undelivered messages at step end")

    grads: dict[str, np.ndarray] = {}
    new_params: dict[str, np.ndarray] = {}
    losses = None
    for a, store in enumerate(stores):
        stats.driver_messages += 1  # result gather
        stats.final_live[a] = sorted(store.data)
        for bid in stats.final_live[a]:
            buf = tg.buffers[bid]
            if buf.kind == GRAD_TOTAL:
                grads[buf.meta["param"]] = store.data[bid]
            elif bid.startswith("wnew:"):
                new_params[buf.meta["param"]] = store.data[bid]
            elif bid == "loss:all":
                losses = store.data[bid]
    if strict_store:
        for a, store in enumerate(stores):
            extra = [bid for bid in store.data
                     if tg.buffers[bid].kind not in (PARAM, OPT_STATE)
                     and not tg.buffers[bid].is_output]
            if extra or store.pending:
                raise ExecutorFault(
                    f"actor {a} leaked buffers at step end: {sorted(extra)} "
                    f"pending={sorted(store.pending)}")
    missing = set(p.graph.params) - set(grads)
    if missing or losses is None:
        raise ExecutorFault(f"step outputs incomplete: grads missing {sorted(missing)}")
    return ExecutionResult(grads=grads, losses=np.asarray(losses),
                           new_params=new_params, stats=stats)
