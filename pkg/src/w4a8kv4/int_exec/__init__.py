"""Bit-exact simulation of the W4A8 GEMM datapath."""

from .gemm import (
    decode_tile_column,
    dequant_stream,
    gemm_int8,
    gemm_w4a8_per_channel,
    gemm_w4a8_per_group,
    precompute_token_sums,
    reference_per_channel,
)
from .lanes import (
    lane_add,
    lane_mul,
    lane_sub,
    lane_sweep,
    order_matters_demo,
    unpack_rlp,
)
from .layout import (
    PackedTile,
    PackedWeight,
    linear_consume,
    pack_interleaved,
    pack_weight,
    reorder_tile,
    unpack_interleaved,
    unpack_tile,
    unpack_weight,
)
