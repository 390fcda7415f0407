"""Quantized KV-cache handoff between agents: codecs, allocation, transport and benchmarks."""

from .allocator import (
    BitAssignment,
    ControllerWeights,
    ErrorTable,
    TrainingConfig,
    allocate_exact,
    allocate_greedy,
    build_error_table,
    controller_infer,
    controller_train,
    decode_weights,
    encode_weights,
    objective,
)
from .bench import SweepReport, StageTimingReport, emit_report, run_error_sweep, run_stage_timing
from .cachecard import CacheCard, CardStats, build_card, decode_card, encode_card
from .errors import *  # noqa: F401,F403
from .handoff import (
    ChainConfig,
    HopReport,
    ToyModel,
    TopologyGraph,
    density_calculator,
    inject_card,
    run_chain,
    toy_forward,
)
from .importance import (
    AnchorPool,
    SegmentKind,
    SegmentMap,
    combine_scores,
    compute_features,
    downstream_demand,
    local_importance,
)
from .quantizer import QuantizedKV, dequantize_cache, quantize_cache
from .tensorio import (
    AttentionStats,
    KVCache,
    SyntheticConfig,
    generate_attention_stats,
    generate_synthetic_cache,
    load_container,
    store_container,
)
from .transport import Handshake, Session, frame_decode, frame_encode, negotiate

__version__ = "0.1.0"
