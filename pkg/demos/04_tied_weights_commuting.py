"""Loop commuting for shared weights.

A weight used by two stages (tied embeddings) yields two partial gradients per
microbatch. Summing them inside the loop ships one partial across actors every
microbatch; commuting the sum out of the loop keeps a per-stage accumulator on
each actor and ships a single stage total at the end, without changing the
result.
"""
import numpy as np

from pipecraft import build_model, derive_backward, partition_stages
from pipecraft.ir import ModelConfig
from pipecraft.schedules import one_f_one_b
from pipecraft.taskgraph import commute_grad_accumulation, infer_outer_placement, unroll
from pipecraft.comms import fuse, infer_comms, insert_deletions
from pipecraft.executor import run_pipelined, run_reference

P, M = 4, 8
partition = derive_backward(partition_stages(build_model(
    ModelConfig(layers=4, width=6, microbatch_size=2, tied_weights=True))))
sched = one_f_one_b(P, M)
print(f"Tied weight w0 used by stages {partition.param_stages['w0']}, "
      f"on actors 0 and 3.\n")

rng = np.random.default_rng(0)
params = {q: rng.standard_normal(partition.graph.spec_of(q).dims) * 0.4
          for q in sorted(partition.graph.params)}
batch = rng.standard_normal((M * 2, 6))
ref_grads, _, _ = run_reference(partition, params, batch, M)

for commute in (False, True):
    tg = unroll(partition, sched)
    if commute:
        tg = commute_grad_accumulation(tg)
    tg = infer_outer_placement(tg, partition)
    cp = fuse(insert_deletions(infer_comms(tg, sched), tg), tg)
    res = run_pipelined(cp, tg, params, batch)
    err = max(float(np.max(np.abs(res.grads[q] - ref_grads[q]))) for q in ref_grads)
    msgs = res.stats.messages_for_param(tg, "w0")
    print(f"commuting {'on ' if commute else 'off'}: "
          f"cross-actor gradient messages for w0 = {msgs}, "
          f"max abs error vs reference = {err:.2e}")
