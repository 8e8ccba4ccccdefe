"""Why send/receive inference walks the task graph in topological order.

Ordered point-to-point transports require both endpoints of a channel to agree
on the message order. Lowering each task naively (receive operands, run, send
results) lets one actor's sends interleave differently from the peer's
receives; with FIFO delivery the mismatched message blocks the head of the
channel and the actors wait on each other forever.

The planner instead appends the send and its matching receive at the producing
task's position in one global topological order, so both sides see identical
channel sequences, and the early-posted receive doubles as a prefetch that
overlaps later compute.
"""
from pipecraft import build_model, derive_backward, partition_stages
from pipecraft.ir import ModelConfig
from pipecraft.schedules import Schedule, TaskId, validate
from pipecraft.taskgraph import infer_outer_placement, unroll
from pipecraft.comms import check_deadlock_free, infer_comms, naive_lowering


def f(i, s):
    return TaskId(i, "fwd", s)


def b(i, s):
    return TaskId(i, "bwd", s)


# Two actors owning stages {0,2} and {1,3}; actor 1 squeezes a backward in
# between its stage-1 forwards, so its gradient send crosses a later forward
# activation on the same channel.
sched = Schedule(
    num_actors=2, num_microbatches=2, num_stages=4,
    per_actor=(
        (f(0, 0), f(1, 0), f(0, 2), f(1, 2), b(0, 2), b(1, 2), b(0, 0), b(1, 0)),
        (f(0, 1), f(0, 3), b(0, 3), f(1, 1), f(1, 3), b(1, 3), b(0, 1), b(1, 1)),
    ))
assert validate(sched).ok, "the schedule itself is perfectly legal"

partition = derive_backward(partition_stages(build_model(
    ModelConfig(layers=4, width=4, microbatch_size=2))))
tg = infer_outer_placement(unroll(partition, sched), partition)

naive = check_deadlock_free(naive_lowering(tg, sched))
print("Naive per-task lowering:")
for v in naive.violations[:2]:
    print(f"  violation: {v}")
print("  wait cycle:")
for step in naive.cycle:
    print(f"    {step}")

planned = check_deadlock_free(infer_comms(tg, sched))
print(f"\nTopological inference on the same schedule: "
      f"{'deadlock-free' if planned.ok else planned}")
