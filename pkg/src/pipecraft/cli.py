"""Command-line driver: plan, simulate, verify, and sweep.

One JSON config document describes the model, the parallel configuration, and
the cost model; every artifact the commands emit (schedule, task graph, comm
plan, simulation report, sweep table) is deterministic for a fixed config and
seed. Exit codes: 0 success, 1 validation error, 2 deadlock/liveness fault,
3 numerical mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from pipecraft import gantt
from pipecraft.comms import (
    CommsError,
    RecvWait,
    SendStart,
    check_deadlock_free,
    fuse,
    infer_comms,
    insert_deletions,
)
from pipecraft.executor import (
    ExecutorFault,
    LivenessFault,
    run_pipelined,
    run_reference,
)
from pipecraft.ir import GraphError, ModelConfig, build_model, derive_backward, partition_stages
from pipecraft.schedules import (
    ScheduleError,
    dump_schedule,
    gpipe,
    interleaved_1f1b,
    load_schedule,
    one_f_one_b,
)
from pipecraft.simulator import CostModel, SimError, SimMemoryError, simulate, sweep
from pipecraft.taskgraph import (
    TaskGraphError,
    commute_grad_accumulation,
    infer_outer_placement,
    unroll,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DEADLOCK = 2
EXIT_MISMATCH = 3

SCHEDULE_NAMES = ("gpipe", "1f1b", "interleaved")
VERIFY_MAX_ELEMENTS = 10 ** 6
VERIFY_TOLERANCE = 1e-12


class ConfigError(ValueError):
    """Invalid run configuration; message cites the offending field."""


def _field(doc: dict, path: str, default=None, required=False):
    cur = doc
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if required:
                raise ConfigError(f"{path}: missing required field")
            return default
        cur = cur[part]
    return cur


class RunConfig:
    def __init__(self, doc: dict, base_dir: Path):
        self.doc = doc
        self.base_dir = base_dir
        if _field(doc, "version", default=1) != 1:
            raise ConfigError("version: only config version 1 is supported")
        m = doc.get("model", {})
        try:
            self.model = ModelConfig(
                layers=int(_field(doc, "model.layers", required=True)),
                width=int(_field(doc, "model.width", required=True)),
                microbatch_size=int(_field(doc, "model.microbatch_size", required=True)),
                yield_every=int(_field(doc, "model.yield_every", default=1)),
                tied_weights=bool(_field(doc, "model.tied_weights", default=False)),
            )
        except GraphError as e:
            raise ConfigError(f"model: {e}") from e
        self.learning_rate = float(_field(doc, "model.learning_rate", default=0.1))
        self.P = int(_field(doc, "parallel.num_actors", required=True))
        self.M = int(_field(doc, "parallel.num_microbatches", required=True))
        self.V = int(_field(doc, "parallel.circular_repeat", default=1))
        if self.P < 1:
            raise ConfigError("parallel.num_actors: must be >= 1")
        if self.M < 1:
            raise ConfigError("parallel.num_microbatches: must be >= 1")
        if self.V < 1:
            raise ConfigError("parallel.circular_repeat: must be >= 1")
        self.schedule_name = _field(doc, "parallel.schedule", default="1f1b")
        self.schedule_file = _field(doc, "parallel.schedule_file")
        if self.schedule_file is None and self.schedule_name not in SCHEDULE_NAMES:
            raise ConfigError(
                f"parallel.schedule: {self.schedule_name!r} not in {SCHEDULE_NAMES}")
        if self.V > 1 and self.M % self.P != 0:
            raise ConfigError(
                "parallel.num_microbatches: M must be divisible by P when "
                "parallel.circular_repeat > 1")
        self.commute = bool(_field(doc, "parallel.commute_shared_grads", default=True))
        cost_doc = dict(_field(doc, "cost", default={}))
        if cost_doc.get("link_bytes_per_second") in (None, "inf"):
            cost_doc["link_bytes_per_second"] = math.inf
        unknown = set(cost_doc) - set(vars(CostModel()))
        if unknown:
            raise ConfigError(f"cost: unknown fields {sorted(unknown)}")
        try:
            self.cost = CostModel(**cost_doc)
        except SimError as e:
            raise ConfigError(f"cost: {e}") from e
        self.seed = int(_field(doc, "seed", default=0))
        self.out_dir = Path(_field(doc, "output.dir", default="out"))
        self.sweep_grid = _field(doc, "sweep.grid", default=[])

    def make_schedule(self):
        if self.schedule_file:
            path = Path(self.schedule_file)
            if not path.is_absolute() and not path.exists():
                path = self.base_dir / path
            try:
                s = load_schedule(path)
            except (OSError, ScheduleError) as e:
                raise ConfigError(f"parallel.schedule_file: {e}") from e
        elif self.schedule_name == "gpipe":
            s = gpipe(self.P, self.M)
        elif self.schedule_name == "1f1b":
            s = one_f_one_b(self.P, self.M)
        else:
            s = interleaved_1f1b(self.P, self.M, self.V)
        if s.num_actors != self.P or s.num_microbatches != self.M:
            raise ConfigError(
                f"parallel.schedule_file: schedule is for P={s.num_actors}, "
                f"M={s.num_microbatches}, config says P={self.P}, M={self.M}")
        return s

    def make_partition(self):
        p = derive_backward(partition_stages(build_model(self.model)))
        want = self.P * self.V if not self.schedule_file else None
        if want is not None and p.num_stages != want:
            raise ConfigError(
                f"model.yield_every: model has {p.num_stages} stages but "
                f"parallel config needs num_actors x circular_repeat = {want}")
        return p


def load_config(path: str) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"config: cannot read {path} ({e})") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON in {path} ({e})") from e
    return RunConfig(doc, p.parent)


def compile_pipeline(cfg: RunConfig):
    p = cfg.make_partition()
    s = cfg.make_schedule()
    if p.num_stages != s.num_stages:
        raise ConfigError(
            f"model.yield_every: model has {p.num_stages} stages but the schedule "
            f"has {s.num_stages}")
    tg = unroll(p, s)
    if cfg.commute:
        tg = commute_grad_accumulation(tg)
    tg = infer_outer_placement(tg, p)
    cp = infer_comms(tg, s)
    rep = check_deadlock_free(cp)
    if not rep.ok:
        raise CommsError(f"inferred plan unsafe: {rep}")
    cp = fuse(insert_deletions(cp, tg), tg)
    return p, s, tg, cp


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_plan(cfg: RunConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    p, s, tg, cp = compile_pipeline(cfg)
    dump_schedule(s, cfg.out_dir / "schedule.json")
    _write_json(cfg.out_dir / "taskgraph.json", tg.to_json())
    _write_json(cfg.out_dir / "commplan.json", cp.to_json())
    msgs = {f"{src}->{dst}": len(bufs) for (src, dst), bufs in sorted(cp.channels.items())}
    print(f"plan: {len(tg.tasks)} tasks, {len(tg.buffers)} buffers, "
          f"{sum(msgs.values())} channel messages {msgs}")
    print(f"wrote schedule.json, taskgraph.json, commplan.json to {cfg.out_dir}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    p, s, tg, cp = compile_pipeline(cfg)
    report = simulate(cp, tg, cfg.cost)
    _write_json(cfg.out_dir / "simreport.json", report.to_json())
    gantt.write_svg(report, cfg.out_dir / "timeline.svg")
    print(f"simulate: step_time={report.step_time_s:.6g}s "
          f"bubble={report.bubble_fraction:.4f} "
          f"peak_mem={max(report.peak_mem_bytes)}B")
    print(f"wrote simreport.json, timeline.svg to {cfg.out_dir}")
    return EXIT_OK


def _inject_fault(cp, fault: str):
    kind, _, num = fault.partition(":")
    k = int(num or 0)
    targets = {"drop-recv": RecvWait, "drop-send": SendStart}
    if kind not in targets:
        raise ConfigError(f"--inject-fault: unknown kind {kind!r}")
    want = targets[kind]
    count = 0
    for prog in cp.programs:
        for i, ins in enumerate(prog.instrs):
            if isinstance(ins, want):
                if count == k:
                    prog.instrs.pop(i)
                    return
                count += 1
    raise ConfigError(f"--inject-fault: fewer than {k + 1} {kind} instructions")


def cmd_verify(cfg: RunConfig, timeout_s: float, inject_fault: str | None = None) -> int:
    total = cfg.model.layers * cfg.model.width * cfg.model.width \
        + cfg.M * cfg.model.microbatch_size * cfg.model.width
    if total > VERIFY_MAX_ELEMENTS:
        raise ConfigError(
            f"model: too large to verify ({total} elements > {VERIFY_MAX_ELEMENTS})")
    p, s, tg, cp = compile_pipeline(cfg)
    if inject_fault:
        _inject_fault(cp, inject_fault)
    rng = np.random.default_rng(cfg.seed)
    params = {q: rng.standard_normal(p.graph.spec_of(q).dims) * 0.4
              for q in sorted(p.graph.params)}
    (x,) = sorted(p.graph.inputs)
    mbs, w = p.graph.spec_of(x).dims
    batch = rng.standard_normal((cfg.M * mbs, w))
    ref = run_reference(p, params, batch, cfg.M, cfg.learning_rate)
    res = run_pipelined(cp, tg, params, batch, lr=cfg.learning_rate,
                        timeout_s=timeout_s)

    def rel(a, b):
        a, b = np.asarray(a), np.asarray(b)
        return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-30))

    g_ref, l_ref, w_ref = ref
    err = max(
        max(rel(res.grads[q], g_ref[q]) for q in g_ref),
        rel(res.losses, l_ref),
        max(rel(res.new_params[q], w_ref[q]) for q in w_ref),
    )
    st = res.stats
    print(f"verify: max relative error {err:.3e} (tolerance {VERIFY_TOLERANCE})")
    print(f"verify: driver messages {st.driver_messages} (expect {2 * cfg.P}), "
          f"channel messages {st.channel_messages}, "
          f"peak live buffers {dict(sorted(st.peak_live.items()))}")
    if err > VERIFY_TOLERANCE:
        print("verify: FAIL (numerical mismatch)")
        return EXIT_MISMATCH
    if st.driver_messages != 2 * cfg.P:
        print("verify: FAIL (driver round-trips exceed one dispatch+gather per actor)")
        return EXIT_MISMATCH
    print("verify: OK")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    grid = cfg.sweep_grid
    if not isinstance(grid, list):
        raise ConfigError("sweep.grid: must be a list of points")

    def build_point(pt):
        P = int(pt.get("P", cfg.P))
        M = int(pt.get("M", cfg.M))
        V = int(pt.get("V", cfg.V))
        mbs = int(pt.get("microbatch_size", cfg.model.microbatch_size))
        S = P * V
        if cfg.model.layers % S:
            raise ValueError(
                f"model.layers={cfg.model.layers} does not split into {S} stages")
        if V > 1 and M % P:
            raise ValueError("M must be divisible by P for interleaved points")
        model = ModelConfig(layers=cfg.model.layers, width=cfg.model.width,
                            microbatch_size=mbs,
                            yield_every=cfg.model.layers // S,
                            tied_weights=cfg.model.tied_weights)
        p = derive_backward(partition_stages(build_model(model)))
        s = interleaved_1f1b(P, M, V)
        tg = infer_outer_placement(commute_grad_accumulation(unroll(p, s)), p)
        cp = infer_comms(tg, s)
        rep = check_deadlock_free(cp)
        if not rep.ok:
            raise ValueError(str(rep))
        return fuse(insert_deletions(cp, tg), tg), tg

    rows, notes = sweep(grid, build_point, cfg.cost)
    for n in notes:
        print(f"sweep: {n}")
    _write_json(cfg.out_dir / "sweep.json", {"rows": rows, "notes": notes})
    cols = ["P", "M", "V", "microbatch_size", "dispatch_overhead_s",
            "step_time_s", "bubble_fraction", "peak_mem_bytes"]
    with open(cfg.out_dir / "sweep.csv", "w", newline="") as f:
        wtr = csv.DictWriter(f, fieldnames=cols)
        wtr.writeheader()
        wtr.writerows(rows)
    print(f"sweep: {len(rows)} rows, {len(notes)} skipped; wrote sweep.csv, "
          f"sweep.json to {cfg.out_dir}")
    return EXIT_OK


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pipecraft",
        description="Plan, simulate, and verify MPMD pipeline-parallel training steps.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in [("plan", "emit schedule, task graph, and comm plan JSON"),
                      ("simulate", "run the cost-model simulator and emit report + SVG"),
                      ("verify", "run the concurrent executor against the serial reference"),
                      ("sweep", "simulate a grid of configurations into a table")]:
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--config", required=True, help="path to the JSON run config")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--schedule-file", help="schedule JSON (overrides config)")
        sp.add_argument("--seed", type=int, help="RNG seed (overrides config)")
        sp.add_argument("--timeout-s", type=float, default=30.0,
                        help="executor watchdog timeout")
        if name == "verify":
            sp.add_argument("--inject-fault", metavar="KIND:N",
                            help="testing aid: drop the N-th instruction of KIND "
                                 "(drop-recv or drop-send) before executing")
    return ap


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.out_dir = Path(args.out)
        if args.schedule_file:
            cfg.schedule_file = args.schedule_file
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.timeout_s, getattr(args, "inject_fault", None))
        return cmd_sweep(cfg)
    except (ConfigError, GraphError, ScheduleError, TaskGraphError, SimMemoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CommsError, LivenessFault, SimError) as e:
        print(f"fault: {e}", file=sys.stderr)
        return EXIT_DEADLOCK
    except ExecutorFault as e:
        print(f"fault: {e}", file=sys.stderr)
        return EXIT_DEADLOCK


if __name__ == "__main__":
    sys.exit(main())
