"""Fixed-size KV cache compression for long-sequence decoding.

SnapKV-style top-K selection at prefill plus a StreamingLLM sink/recent
window kept in a ring buffer during decode, so every tensor has a static
shape; a toy decoder to exercise it and a serving simulator to cost it.
"""

from .config import ModelConfig, SnapStreamConfig
from .engine import Engine, GenerationResult, ToyModel, first_divergence
from .errors import (
    CapacityError,
    ConfigError,
    ContractViolation,
    GenerationCapacityExhausted,
    SnapshotFormatError,
    SnapStreamError,
)
from .kvcache import (
    CompressedKvCache,
    FullKvCache,
    NaiveRollingCache,
    build_ring_two_range,
    decode_update,
    init_compressed_cache,
    naive_prefill,
    naive_rolling_update,
    plan_two_range_gather,
    ring_slot,
    validity_mask,
)
from .scheduler import CostModel, ServeRequest, Trace, max_batch, simulate, throughput_sweep
from .snapkv import SelectionProblem, SelectionResult, build_problem, select_layer

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "CompressedKvCache", "ConfigError", "ContractViolation", "CostModel",
    "Engine", "FullKvCache", "GenerationCapacityExhausted", "GenerationResult", "ModelConfig",
    "NaiveRollingCache", "SelectionProblem", "SelectionResult", "ServeRequest",
    "SnapStreamConfig", "SnapStreamError", "SnapshotFormatError", "ToyModel", "Trace",
    "build_problem", "build_ring_two_range", "decode_update", "first_divergence",
    "init_compressed_cache", "max_batch", "naive_prefill", "naive_rolling_update",
    "plan_two_range_gather", "ring_slot", "select_layer", "simulate", "throughput_sweep",
    "validity_mask",
]
