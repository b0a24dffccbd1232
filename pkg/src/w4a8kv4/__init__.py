"""W4A8KV4 quantization toolkit with a bit-exact integer execution simulator."""

from .errors import (
    AccumulatorOverflow,
    EmptyCache,
    FormatError,
    InvalidConfig,
    InvalidInput,
    LaneOverflow,
    OverflowViolation,
    QuantError,
    ShapeError,
    Unsupported,
)
from .kv_cache import KvPageStore, attention_decode, dequant_fp16_trick, dequant_ops_count
from .pipeline import QuantRecipe, ToyBlock, apply_qoq, calibrate, evaluate_fidelity, make_block
from .progressive import ProgressiveWeight, dequantize_level1, protective_range, quantize_progressive
from .quant_core import Granularity, QuantizedTensor, QuantSpec, dequantize, quantize

__version__ = "0.1.0"
