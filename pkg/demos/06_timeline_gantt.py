"""Render a simulated step as an SVG Gantt chart.

One row per actor; forward tasks blue, backward green, accumulation gray;
transfers draw as a thin orange band under the owning actor's row. Writes
``timeline_1f1b.svg`` next to this script.
"""
import pathlib

from pipecraft import build_model, derive_backward, partition_stages
from pipecraft.gantt import write_svg
from pipecraft.ir import ModelConfig
from pipecraft.schedules import one_f_one_b
from pipecraft.simulator import CostModel, simulate
from pipecraft.taskgraph import infer_outer_placement, unroll
from pipecraft.comms import fuse, infer_comms, insert_deletions

P, M = 4, 8
partition = derive_backward(partition_stages(build_model(
    ModelConfig(layers=P, width=8, microbatch_size=4))))
sched = one_f_one_b(P, M)
tg = infer_outer_placement(unroll(partition, sched), partition)
cp = fuse(insert_deletions(infer_comms(tg, sched), tg), tg)

cm = CostModel(uniform_task_s=1.0, bwd_cost_multiplier=2.0,
               link_latency_s=0.05, link_bytes_per_second=1e7)
report = simulate(cp, tg, cm)

out = pathlib.Path(__file__).parent / "timeline_1f1b.svg"
write_svg(report, out)
print(f"step time {report.step_time_s:.2f}s, "
      f"bubble {report.bubble_fraction:.3f}, "
      f"peak memory {max(report.peak_mem_bytes)} bytes")
print(f"wrote {out}")
