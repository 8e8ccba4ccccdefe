"""Compiler, simulator, and mini-runtime for MPMD pipeline-parallel training loops."""

from pipecraft.ir import (
    ModelConfig,
    OpNode,
    StagedGraph,
    StagePartition,
    TensorSpec,
    build_model,
    derive_backward,
    partition_stages,
)
from pipecraft.schedules import (
    Schedule,
    TaskId,
    gpipe,
    interleaved_1f1b,
    load_schedule,
    one_f_one_b,
    validate,
)

__all__ = [
    "ModelConfig", "OpNode", "StagedGraph", "StagePartition", "TensorSpec",
    "build_model", "derive_backward", "partition_stages",
    "Schedule", "TaskId", "gpipe", "interleaved_1f1b", "load_schedule",
    "one_f_one_b", "validate",
]
