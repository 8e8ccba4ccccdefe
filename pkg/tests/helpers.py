"""Shared pipeline-assembly helpers for the test suite."""
from __future__ import annotations

import numpy as np

from pipecraft.comms import check_deadlock_free, fuse, infer_comms, insert_deletions
from pipecraft.ir import ModelConfig, build_model, derive_backward, partition_stages
from pipecraft.schedules import (
    BWD,
    FWD,
    Schedule,
    TaskId,
    gpipe,
    interleaved_1f1b,
    one_f_one_b,
    task_dependencies,
)
from pipecraft.taskgraph import commute_grad_accumulation, infer_outer_placement, unroll


def make_partition(layers, width=4, mbs=2, tied=False, yield_every=1):
    g = build_model(ModelConfig(layers=layers, width=width, microbatch_size=mbs,
                                yield_every=yield_every, tied_weights=tied))
    return derive_backward(partition_stages(g))


def make_schedule(name, P, M, V=1):
    if name == "gpipe":
        return gpipe(P, M)
    if name == "1f1b":
        return one_f_one_b(P, M)
    if name == "interleaved":
        return interleaved_1f1b(P, M, V)
    raise ValueError(name)


def build_plan(p, s, commute=True):
    """partition + schedule -> (taskgraph, fused comm plan)."""
    tg = unroll(p, s)
    if commute:
        tg = commute_grad_accumulation(tg)
    tg = infer_outer_placement(tg, p)
    cp = infer_comms(tg, s)
    rep = check_deadlock_free(cp)
    assert rep.ok, str(rep)
    cp = fuse(insert_deletions(cp, tg), tg)
    return tg, cp


def random_schedule(rng: np.random.Generator, P, M, V=1) -> Schedule:
    """A uniformly shuffled valid schedule: a random linear extension of the
    task dependency DAG, projected onto per-actor lists."""
    S = P * V
    tasks = [TaskId(i, ty, st) for i in range(M) for ty in (FWD, BWD) for st in range(S)]
    indeg = {t: 0 for t in tasks}
    succs = {t: [] for t in tasks}
    for t in tasks:
        for d in task_dependencies(t, S):
            succs[d].append(t)
            indeg[t] += 1
    ready = [t for t in tasks if indeg[t] == 0]
    per_actor = [[] for _ in range(P)]
    while ready:
        t = ready.pop(int(rng.integers(len(ready))))
        per_actor[t.stage % P].append(t)
        for v in succs[t]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    return Schedule(num_actors=P, num_microbatches=M, num_stages=S,
                    per_actor=tuple(tuple(a) for a in per_actor))


def crossing_schedule() -> Schedule:
    """Four stages on two actors ({0,2} and {1,3}), with actor 1 running a
    backward between its two stage-1 forwards. Its sends then interleave a
    gradient between two activations while actor 0 wants both activations
    first: the naive per-task lowering deadlocks on this instance."""
    def f(i, s):
        return TaskId(i, FWD, s)

    def b(i, s):
        return TaskId(i, BWD, s)

    per0 = (f(0, 0), f(1, 0), f(0, 2), f(1, 2), b(0, 2), b(1, 2), b(0, 0), b(1, 0))
    per1 = (f(0, 1), f(0, 3), b(0, 3), f(1, 1), f(1, 3), b(1, 3), b(0, 1), b(1, 1))
    return Schedule(num_actors=2, num_microbatches=2, num_stages=4,
                    per_actor=(per0, per1))


def init_params(p, rng: np.random.Generator, scale=0.4):
    g = p.graph
    return {q: rng.standard_normal(g.spec_of(q).dims) * scale for q in sorted(g.params)}


def init_batch(p, M, rng: np.random.Generator):
    (x,) = sorted(p.graph.inputs)
    mbs, w = p.graph.spec_of(x).dims
    return rng.standard_normal((M * mbs, w))
