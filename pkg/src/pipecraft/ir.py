"""Op-level dataflow IR with stage markers, partitioning, and derived backward stages.

A model is a topologically ordered, single-assignment list of ops. ``yield-marker``
ops split the graph into pipeline stages purely by data dependency: everything a
marker depends on belongs to its stage or earlier, everything depending on the
marker's result belongs to a later stage. Backward stages are derived per forward
stage from per-kind gradient rules, so downstream passes see a symmetric
fwd/bwd stage structure without any framework autodiff.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

# Vocabulary accepted in user-built (forward) graphs.
MODEL_OP_KINDS = frozenset({
    "matmul", "add", "relu", "sub-sample-loss", "broadcast", "transpose",
    "scale", "yield-marker", "parameter-read", "input-read", "concat",
})
# Gradient rules need elementwise-select / reduce / slice primitives that the
# forward vocabulary does not contain; these kinds only appear in derived
# backward ops.
GRAD_OP_KINDS = frozenset({"mul", "relu-grad", "sum-to", "slice"})
OP_KINDS = MODEL_OP_KINDS | GRAD_OP_KINDS


class GraphError(ValueError):
    """Invalid graph structure or op usage."""


@dataclass(frozen=True)
class TensorSpec:
    """Shape and element width of a dense value. Empty dims means scalar."""

    dims: tuple[int, ...] = ()
    elem_bytes: int = 8

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise GraphError(f"non-positive dimension in {self.dims}")
        if self.elem_bytes <= 0:
            raise GraphError("elem_bytes must be positive")

    @property
    def num_elems(self) -> int:
        return math.prod(self.dims)

    @property
    def total_bytes(self) -> int:
        return self.num_elems * self.elem_bytes

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "elem_bytes": self.elem_bytes}


@dataclass(frozen=True)
class OpNode:
    """One operation: consumes ``operands`` (value ids), defines ``result``."""

    id: str
    kind: str
    operands: tuple[str, ...]
    result: str
    result_spec: TensorSpec
    flops: float = 0.0
    # Kind-specific constants (e.g. slice offsets); empty for most ops.
    attrs: tuple[tuple[str, int], ...] = ()

    def attr(self, name: str) -> int:
        return dict(self.attrs)[name]


@dataclass
class StagedGraph:
    """Topologically ordered op list with trainable params and microbatch inputs."""

    ops: list[OpNode]
    params: frozenset[str]
    inputs: frozenset[str]
    outputs: tuple[str, ...]

    def __post_init__(self):
        self._producer = {op.result: op for op in self.ops}
        self._consumers: dict[str, list[OpNode]] = {}
        for op in self.ops:
            for v in op.operands:
                self._consumers.setdefault(v, []).append(op)

    def producer(self, value: str) -> OpNode:
        return self._producer[value]

    def consumers(self, value: str) -> list[OpNode]:
        return self._consumers.get(value, [])

    def spec_of(self, value: str) -> TensorSpec:
        return self._producer[value].result_spec

    @property
    def markers(self) -> list[OpNode]:
        return [op for op in self.ops if op.kind == "yield-marker"]

    def validate(self) -> None:
        defined: set[str] = set()
        for op in self.ops:
            if op.kind not in OP_KINDS:
                raise GraphError(f"unknown op kind {op.kind!r} ({op.id})")
            if op.result in defined:
                raise GraphError(f"value {op.result} defined twice")
            for v in op.operands:
                if v not in defined:
                    raise GraphError(f"op {op.id} uses undefined value {v}")
            if op.kind == "yield-marker":
                if len(op.operands) != 1:
                    raise GraphError(f"yield-marker {op.id} must have one operand")
                if self.spec_of(op.operands[0]) != op.result_spec:
                    raise GraphError(f"yield-marker {op.id} must preserve its operand spec")
            defined.add(op.result)
        if self.params & self.inputs:
            raise GraphError("params and inputs overlap")
        for v in self.outputs:
            if v not in defined:
                raise GraphError(f"output {v} is undefined")
        self._validate_markers()

    def _validate_markers(self) -> None:
        markers = self.markers
        if not markers:
            return
        reach = self._reachable_sets()
        # Markers must be totally ordered by dependency; incomparable markers
        # (a diamond over markers) make stage indices ambiguous.
        for i, a in enumerate(markers):
            for b in markers[i + 1:]:
                if b.id not in reach[a.id] and a.id not in reach[b.id]:
                    raise GraphError(
                        f"markers {a.id} and {b.id} are not ordered by data dependency")
        from_inputs = set()
        for op in self.ops:
            if op.kind == "input-read" or any(v in from_inputs for v in op.operands):
                from_inputs.add(op.result)
        to_outputs = set(self.outputs)
        for op in reversed(self.ops):
            if op.result in to_outputs:
                to_outputs.update(op.operands)
        for m in markers:
            if m.operands[0] not in from_inputs or m.result not in to_outputs:
                raise GraphError(f"marker {m.id} is not on an input-to-output path")

    def _reachable_sets(self) -> dict[str, set[str]]:
        """op id -> set of op ids transitively reachable through result uses."""
        reach: dict[str, set[str]] = {}
        for op in reversed(self.ops):
            acc: set[str] = set()
            for c in self.consumers(op.result):
                acc.add(c.id)
                acc |= reach[c.id]
            reach[op.id] = acc
        return reach

    def to_json(self) -> dict:
        return {
            "ops": [
                {
                    "id": op.id,
                    "kind": op.kind,
                    "operands": list(op.operands),
                    "result": op.result,
                    "result_spec": op.result_spec.to_json(),
                    "flops": op.flops,
                    **({"attrs": dict(op.attrs)} if op.attrs else {}),
                }
                for op in self.ops
            ],
            "params": sorted(self.params),
            "inputs": sorted(self.inputs),
            "outputs": list(self.outputs),
        }


@dataclass
class ModelConfig:
    """Feed-forward block stack: ``H = relu(H @ W)`` per block, linear last block.

    ``yield_every`` places a stage marker after every k-th block (never after the
    last); ``yields`` overrides with explicit block indices. ``tied_weights``
    reuses the first block's weight in the last block (requires >= 2 blocks and a
    uniform width).
    """

    layers: int
    width: int
    microbatch_size: int
    yield_every: int = 1
    yields: tuple[int, ...] | None = None
    tied_weights: bool = False
    elem_bytes: int = 8

    def __post_init__(self):
        if self.layers <= 0 or self.width <= 0 or self.microbatch_size <= 0:
            raise GraphError("layers, width, and microbatch_size must be positive")
        if self.yield_every <= 0:
            raise GraphError("yield_every must be positive")
        if self.tied_weights and self.layers < 2:
            raise GraphError("tied_weights requires at least 2 layers")
        if self.yields is not None:
            if len(self.yields) >= self.layers:
                raise GraphError("yield count must be smaller than the layer count")
            if any(y < 1 or y >= self.layers for y in self.yields):
                raise GraphError("yield positions must lie strictly inside the block stack")

    @property
    def yield_positions(self) -> tuple[int, ...]:
        """Blocks after which a marker is placed (1-based block count)."""
        if self.yields is not None:
            return tuple(sorted(self.yields))
        return tuple(k for k in range(self.yield_every, self.layers, self.yield_every))

    @property
    def num_stages(self) -> int:
        return len(self.yield_positions) + 1


def _matmul_flops(n: int, k: int, m: int) -> float:
    return 2.0 * n * k * m


def build_model(cfg: ModelConfig) -> StagedGraph:
    """Construct the staged FFN graph for one microbatch."""
    mbs, w = cfg.microbatch_size, cfg.width
    ops: list[OpNode] = []
    mat = TensorSpec((mbs, w), cfg.elem_bytes)
    wspec = TensorSpec((w, w), cfg.elem_bytes)

    ops.append(OpNode("read_x", "input-read", (), "x", mat))
    params: list[str] = []
    h = "x"
    yield_after = set(cfg.yield_positions)
    for blk in range(cfg.layers):
        if cfg.tied_weights and blk == cfg.layers - 1:
            wv = "w0"
        else:
            wv = f"w{blk}"
            ops.append(OpNode(f"read_{wv}", "parameter-read", (), wv, wspec))
            params.append(wv)
        z = f"z{blk}"
        ops.append(OpNode(f"mm{blk}", "matmul", (h, wv), z, mat,
                          flops=_matmul_flops(mbs, w, w)))
        h = z
        if blk < cfg.layers - 1:
            a = f"a{blk}"
            ops.append(OpNode(f"relu{blk}", "relu", (z,), a, mat, flops=mat.num_elems))
            h = a
        if blk + 1 in yield_after:
            y = f"y{blk}"
            ops.append(OpNode(f"yield{blk}", "yield-marker", (h,), y, mat))
            h = y
    loss_spec = TensorSpec((), cfg.elem_bytes)
    ops.append(OpNode("loss_op", "sub-sample-loss", (h,), "loss", loss_spec,
                      flops=mat.num_elems))
    g = StagedGraph(ops=ops, params=frozenset(params), inputs=frozenset({"x"}),
                    outputs=("loss",))
    g.validate()
    return g


@dataclass
class StageSummary:
    fwd_flops: float = 0.0
    bwd_flops: float = 0.0
    param_bytes: int = 0
    stash_bytes: int = 0
    boundary_out_bytes: int = 0


@dataclass
class FwdStageProgram:
    """Execution interface of one forward stage for a single microbatch."""

    stage: int
    ops: list[OpNode]
    boundary_in: list[str]      # non-param values produced by earlier stages
    inputs_used: list[str]      # graph inputs read within this stage
    params_used: list[str]
    boundary_out: list[str]     # values consumed by later forward stages
    loss_out: str | None
    stash: list[str]            # forward values the paired backward stage consumes


@dataclass
class BwdStageProgram:
    """Execution interface of one backward stage for a single microbatch."""

    stage: int
    ops: list[OpNode]
    grads_in: list[str]         # gradient values produced by later backward stages
    stash_in: list[str]
    params_used: list[str]
    grads_out: list[str]        # gradient values consumed by earlier backward stages
    param_partials: dict[str, str]  # param id -> this stage's partial-gradient value


@dataclass
class CrossStageMerge:
    """Post-derivation add combining per-stage partial gradients of one value."""

    value: str                  # the forward value (a param for tied weights)
    op: OpNode
    stage: int                  # lowest-indexed using stage (placement home)


@dataclass
class StagePartition:
    """Stage assignment plus (after ``derive_backward``) the backward structure."""

    graph: StagedGraph
    num_stages: int
    assignment: dict[str, int]
    param_stages: dict[str, tuple[int, ...]]
    summaries: list[StageSummary]
    # Populated by derive_backward:
    bwd_assignment: dict[str, int] = field(default_factory=dict)
    fwd_programs: list[FwdStageProgram] = field(default_factory=list)
    bwd_programs: list[BwdStageProgram] = field(default_factory=list)
    param_grad_total: dict[str, str] = field(default_factory=dict)
    param_stage_partials: dict[str, dict[int, str]] = field(default_factory=dict)
    cross_merges: list[CrossStageMerge] = field(default_factory=list)

    @property
    def has_backward(self) -> bool:
        return bool(self.fwd_programs)

    @property
    def shared_params(self) -> dict[str, tuple[int, ...]]:
        return {p: s for p, s in self.param_stages.items() if len(s) > 1}

    @property
    def loss_value(self) -> str:
        return self.graph.outputs[0]

    def stage_of(self, op_id: str) -> int:
        if op_id in self.assignment:
            return self.assignment[op_id]
        return self.bwd_assignment[op_id]

    def to_json(self) -> dict:
        out = self.graph.to_json()
        out["num_stages"] = self.num_stages
        out["assignment"] = dict(sorted(self.assignment.items()))
        if self.bwd_assignment:
            out["bwd_assignment"] = dict(sorted(self.bwd_assignment.items()))
        return out


def partition_stages(g: StagedGraph) -> StagePartition:
    """Assign every live op to a stage.

    Markers are pinned to the stage they terminate. Other ops take the minimum
    stage among their consumers, which both honors marker dependencies and
    places marker-independent ops next to their use. Ops feeding neither a
    marker nor an output are dead and dropped.
    """
    g.validate()
    markers = g.markers
    num_stages = len(markers) + 1

    # Dependency order of markers is their stage order.
    reach = g._reachable_sets()
    ordered = sorted(markers, key=lambda m: sum(1 for o in markers if m.id in reach[o.id]))
    marker_stage = {m.id: k for k, m in enumerate(ordered)}

    outputs = set(g.outputs)
    live: set[str] = set()
    for op in reversed(g.ops):
        if op.kind == "yield-marker" or op.result in outputs:
            live.add(op.id)
        elif any(c.id in live for c in g.consumers(op.result)):
            live.add(op.id)
    live_ops = [op for op in g.ops if op.id in live]

    assignment: dict[str, int] = {}
    for op in reversed(live_ops):
        if op.kind == "yield-marker":
            assignment[op.id] = marker_stage[op.id]
            continue
        bounds = []
        for c in g.consumers(op.result):
            if c.id not in live:
                continue
            if c.kind == "yield-marker":
                bounds.append(marker_stage[c.id])
            else:
                bounds.append(assignment[c.id])
        # Consumerless live ops are outputs; the loss lives on the last stage.
        assignment[op.id] = min(bounds) if bounds else num_stages - 1

    pruned = StagedGraph(ops=live_ops, params=g.params, inputs=g.inputs, outputs=g.outputs)

    param_stages: dict[str, tuple[int, ...]] = {}
    for p in sorted(g.params):
        param_stages[p] = tuple(sorted({assignment[c.id] for c in pruned.consumers(p)}))

    summaries = [StageSummary() for _ in range(num_stages)]
    for op in live_ops:
        summaries[assignment[op.id]].fwd_flops += op.flops
    for p, stages in param_stages.items():
        for s in stages:
            summaries[s].param_bytes += pruned.spec_of(p).total_bytes
    for op in live_ops:
        s = assignment[op.id]
        if op.result in g.params:
            continue
        later = [c for c in pruned.consumers(op.result) if assignment[c.id] > s]
        if later:
            summaries[s].boundary_out_bytes += op.result_spec.total_bytes

    return StagePartition(graph=pruned, num_stages=num_stages, assignment=assignment,
                          param_stages=param_stages, summaries=summaries)


@dataclass
class _Partial:
    value: str
    use_stage: int
    use_order: int


class _GradBuilder:
    def __init__(self, p: StagePartition):
        self.p = p
        self.g = p.graph
        self.ops: list[OpNode] = []
        self.bwd_assignment: dict[str, int] = {}
        self.specs: dict[str, TensorSpec] = {op.result: op.result_spec for op in self.g.ops}
        self.cross_merges: list[CrossStageMerge] = []
        self._n = 0

    def fresh(self) -> str:
        self._n += 1
        return f"gv{self._n}"

    def emit(self, kind: str, operands: tuple[str, ...], spec: TensorSpec, stage: int,
             flops: float = 0.0, attrs: tuple[tuple[str, int], ...] = ()) -> str:
        res = self.fresh()
        op = OpNode(f"gop{self._n}", kind, operands, res, spec, flops=flops, attrs=attrs)
        self.ops.append(op)
        self.bwd_assignment[op.id] = stage
        self.specs[res] = spec
        return res

    def spec(self, value: str) -> TensorSpec:
        return self.specs[value]

    def merge(self, value: str, parts: list[_Partial]) -> tuple[str, dict[int, str]]:
        """Fold partial gradients of ``value`` in use order.

        Same-stage partials fold first (plain backward-stage adds); the
        remaining per-stage sums fold across stages and are recorded as cross
        merges so loop passes can schedule them per microbatch.
        """
        spec = self.spec(value)
        by_stage: dict[int, list[_Partial]] = {}
        for part in sorted(parts, key=lambda q: q.use_order):
            by_stage.setdefault(part.use_stage, []).append(part)
        stage_totals: dict[int, str] = {}
        for s, group in by_stage.items():
            acc = group[0].value
            for nxt in group[1:]:
                acc = self.emit("add", (acc, nxt.value), spec, s, flops=spec.num_elems)
            stage_totals[s] = acc
        stages = sorted(stage_totals)
        acc = stage_totals[stages[0]]
        for s in stages[1:]:
            home = stages[0]
            acc = self.emit("add", (acc, stage_totals[s]), spec, home, flops=spec.num_elems)
            self.cross_merges.append(CrossStageMerge(value=value, op=self.ops[-1], stage=home))
        return acc, stage_totals


def derive_backward(p: StagePartition) -> StagePartition:
    """Derive one backward stage per forward stage, plus gradient-merge nodes.

    Returns a new partition whose graph appends the gradient ops and whose
    per-stage programs describe the values crossing each fwd/bwd boundary.
    """
    g = p.graph
    b = _GradBuilder(p)
    loss = p.loss_value
    if g.consumers(loss):
        raise GraphError("loss output must not be consumed inside the graph")
    partials: dict[str, list[_Partial]] = {}
    param_grad_total: dict[str, str] = {}
    param_stage_partials: dict[str, dict[int, str]] = {}
    order = {op.id: i for i, op in enumerate(g.ops)}

    for op in reversed(g.ops):
        s = p.assignment[op.id]
        seed = op.result == loss
        parts = partials.pop(op.result, [])
        if not parts and not seed:
            continue
        if seed and parts:
            raise GraphError("loss value has both a seed and internal uses")

        if op.kind == "parameter-read":
            total, by_stage = b.merge(op.result, parts)
            param_grad_total[op.result] = total
            param_stage_partials[op.result] = by_stage
            continue
        if op.kind == "input-read":
            continue  # input gradients are never needed

        grad = None if seed else b.merge(op.result, parts)[0]

        def put(operand: str, value: str):
            partials.setdefault(operand, []).append(
                _Partial(value, use_stage=s, use_order=order[op.id]))

        if op.kind == "matmul":
            a_v, b_v = op.operands
            a_spec, b_spec = b.spec(a_v), b.spec(b_v)
            n, k = a_spec.dims
            m = op.result_spec.dims[1]
            bt = b.emit("transpose", (b_v,), TensorSpec(b_spec.dims[::-1], b_spec.elem_bytes),
                        s, flops=b_spec.num_elems)
            put(a_v, b.emit("matmul", (grad, bt), a_spec, s, flops=_matmul_flops(n, m, k)))
            at = b.emit("transpose", (a_v,), TensorSpec(a_spec.dims[::-1], a_spec.elem_bytes),
                        s, flops=a_spec.num_elems)
            put(b_v, b.emit("matmul", (at, grad), b_spec, s, flops=_matmul_flops(k, n, m)))
        elif op.kind == "add":
            put(op.operands[0], grad)
            put(op.operands[1], grad)
        elif op.kind == "relu":
            a_v = op.operands[0]
            put(a_v, b.emit("relu-grad", (grad, a_v), b.spec(a_v), s,
                            flops=op.result_spec.num_elems))
        elif op.kind == "sub-sample-loss":
            h = op.operands[0]
            if seed:
                # d(0.5*sum(h^2))/dh with unit seed is h itself; alias, no op.
                put(h, h)
            else:
                put(h, b.emit("scale", (h, grad), b.spec(h), s, flops=b.spec(h).num_elems))
        elif op.kind == "broadcast":
            a_v = op.operands[0]
            put(a_v, b.emit("sum-to", (grad,), b.spec(a_v), s, flops=op.result_spec.num_elems))
        elif op.kind == "transpose":
            a_v = op.operands[0]
            put(a_v, b.emit("transpose", (grad,), b.spec(a_v), s, flops=b.spec(a_v).num_elems))
        elif op.kind == "scale":
            a_v, s_v = op.operands
            put(a_v, b.emit("scale", (grad, s_v), b.spec(a_v), s, flops=b.spec(a_v).num_elems))
            prod = b.emit("mul", (grad, a_v), b.spec(a_v), s, flops=b.spec(a_v).num_elems)
            put(s_v, b.emit("sum-to", (prod,), b.spec(s_v), s, flops=b.spec(a_v).num_elems))
        elif op.kind == "yield-marker":
            put(op.operands[0], grad)
        elif op.kind == "concat":
            off = 0
            for a_v in op.operands:
                a_spec = b.spec(a_v)
                step = a_spec.dims[0] if a_spec.dims else 1
                put(a_v, b.emit("slice", (grad,), a_spec, s, flops=a_spec.num_elems,
                                attrs=(("offset", off), ("length", step))))
                off += step
        else:
            raise GraphError(f"no backward rule for op kind {op.kind!r}")

    if any(v not in g.params for v in
           (m.value for m in b.cross_merges)):
        bad = [m.value for m in b.cross_merges if m.value not in g.params]
        raise GraphError(f"cross-stage gradient merge on non-param values {bad} unsupported")

    full_graph = StagedGraph(ops=list(g.ops) + b.ops, params=g.params,
                             inputs=g.inputs, outputs=g.outputs)
    out = StagePartition(
        graph=full_graph, num_stages=p.num_stages, assignment=dict(p.assignment),
        param_stages=dict(p.param_stages),
        summaries=[StageSummary(**vars(s)) for s in p.summaries],
        bwd_assignment=b.bwd_assignment,
        param_grad_total=param_grad_total,
        param_stage_partials=param_stage_partials,
        cross_merges=b.cross_merges,
    )
    _build_stage_programs(out)
    return out


def _build_stage_programs(p: StagePartition) -> None:
    g = p.graph
    S = p.num_stages
    cross_ids = {m.op.id for m in p.cross_merges}
    fwd_ops = [op for op in g.ops if op.id in p.assignment]
    bwd_ops = [op for op in g.ops if op.id in p.bwd_assignment and op.id not in cross_ids]
    fwd_values = {op.result for op in fwd_ops}
    stage_of_value: dict[str, int] = {}
    for op in fwd_ops:
        stage_of_value[op.result] = p.assignment[op.id]
    for op in bwd_ops:
        stage_of_value[op.result] = p.bwd_assignment[op.id]
    for m in p.cross_merges:
        stage_of_value[m.op.result] = m.stage

    merged_partials = {v for by in p.param_stage_partials.values() for v in by.values()}

    for s in range(S):
        sf = [op for op in fwd_ops if p.assignment[op.id] == s]
        sb = [op for op in bwd_ops if p.bwd_assignment[op.id] == s]
        internal_f = {op.result for op in sf}
        internal_b = {op.result for op in sb}

        boundary_in, inputs_used, fparams = [], [], []
        for op in sf:
            for v in op.operands:
                if v in g.params:
                    if v not in fparams:
                        fparams.append(v)
                elif v not in internal_f and v not in boundary_in:
                    boundary_in.append(v)
            if op.kind == "input-read":
                inputs_used.append(op.result)
        bwd_consumed: set[str] = set()
        for op in sb:
            bwd_consumed.update(op.operands)

        boundary_out = []
        for op in sf:
            if op.result in g.params:
                continue
            if any(c.id in p.assignment and p.assignment[c.id] > s
                   for c in g.consumers(op.result)):
                boundary_out.append(op.result)
        loss_out = p.loss_value if stage_of_value.get(p.loss_value) == s else None

        stash = sorted(v for v in bwd_consumed if v in fwd_values and v not in g.params)
        unavailable = [v for v in stash if v not in internal_f and v not in boundary_in]
        if unavailable:
            raise GraphError(f"backward stage {s} needs forward values {unavailable} "
                             "that its forward stage never sees")

        grads_in, grads_out, bparams = [], [], []
        for op in sb:
            for v in op.operands:
                if v in g.params:
                    if v not in bparams:
                        bparams.append(v)
                elif v not in fwd_values and v not in internal_b and v not in grads_in:
                    grads_in.append(v)
        for op in sb:
            v = op.result
            consumed_elsewhere = any(
                c.id in p.bwd_assignment and p.bwd_assignment[c.id] != s
                for c in g.consumers(v)) or any(
                c.id in {m.op.id for m in p.cross_merges} for c in g.consumers(v))
            if consumed_elsewhere or v in merged_partials:
                grads_out.append(v)

        part_map = {param: by[s] for param, by in p.param_stage_partials.items() if s in by}
        # A partial that is also the full gradient stays an output of its stage.
        for param, by in p.param_stage_partials.items():
            if s in by and by[s] not in grads_out and by[s] in internal_b:
                grads_out.append(by[s])
        grads_out = sorted(set(grads_out))

        p.fwd_programs.append(FwdStageProgram(
            stage=s, ops=sf, boundary_in=boundary_in, inputs_used=inputs_used,
            params_used=fparams, boundary_out=boundary_out, loss_out=loss_out,
            stash=stash))
        p.bwd_programs.append(BwdStageProgram(
            stage=s, ops=sb, grads_in=grads_in, stash_in=list(stash),
            params_used=bparams, grads_out=grads_out, param_partials=part_map))

        summ = p.summaries[s]
        summ.bwd_flops = sum(op.flops for op in sb)
        summ.stash_bytes = sum(g.spec_of(v).total_bytes for v in stash)


def dump_graph_json(g: StagedGraph | StagePartition) -> str:
    return json.dumps(g.to_json(), indent=2, sort_keys=True)
