"""Schedule families and their pipeline bubbles.

GPipe runs all forwards then all backwards; 1F1B eagerly alternates; the
interleaved variant gives each actor several smaller stages (circular repeat).
All three permute the same work, so under uniform chunk costs their bubble
fraction follows (P-1)/(V*M + P - 1): more microbatches or deeper interleaving
shrink the idle fill/drain window.
"""
from pipecraft import build_model, derive_backward, partition_stages
from pipecraft.ir import ModelConfig
from pipecraft.schedules import gpipe, interleaved_1f1b, one_f_one_b, validate
from pipecraft.simulator import CostModel, ideal_bubble_fraction, simulate
from pipecraft.taskgraph import infer_outer_placement, unroll
from pipecraft.comms import fuse, infer_comms, insert_deletions

P, M = 4, 8

print("Per-actor task orders (P=2, M=2):")
for name, sched in [("gpipe", gpipe(2, 2)), ("1f1b", one_f_one_b(2, 2)),
                    ("interleaved V=2", interleaved_1f1b(2, 2, 2))]:
    print(f"  {name}:")
    for a, tasks in enumerate(sched.per_actor):
        print(f"    actor {a}: {' '.join(str(t) for t in tasks)}")
    assert validate(sched).ok

print(f"\nSimulated bubble fraction vs closed form (P={P}, M={M}, unit chunks):")
uniform = CostModel(uniform_task_s=1.0, bwd_cost_multiplier=1.0)
for name, V, sched in [("gpipe", 1, gpipe(P, M)),
                       ("1f1b", 1, one_f_one_b(P, M)),
                       ("interleaved V=2", 2, interleaved_1f1b(P, M, 2)),
                       ("interleaved V=4", 4, interleaved_1f1b(P, M, 4))]:
    p = derive_backward(partition_stages(build_model(
        ModelConfig(layers=P * V, width=4, microbatch_size=2))))
    tg = infer_outer_placement(unroll(p, sched), p)
    cp = fuse(insert_deletions(infer_comms(tg, sched), tg), tg)
    # Chunk duration shrinks as stages split, keeping total work fixed.
    cm = CostModel(uniform_task_s=1.0 / V, bwd_cost_multiplier=1.0)
    rep = simulate(cp, tg, cm)
    print(f"  {name:18s} step={rep.step_time_s:7.2f}  "
          f"bubble={rep.bubble_fraction:.4f}  "
          f"formula={ideal_bubble_fraction(P, M, V):.4f}")
