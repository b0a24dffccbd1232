"""Compute-aware packing of UINT4 weights into 32x32 tiles.

Byte layout of one tile (512 bytes, frozen; golden fixture in tests):

* Consumer ``t`` (0..31) owns the 16 bytes at offset ``16 * t``.
* Those 16 bytes are four little-endian 32-bit words; word ``j`` (0..3)
  serves output row ``t // 4 + 8 * j``.
* Byte ``b`` (0..3) of that word holds input column ``4 * (t % 4) + b`` in
  its low nibble and column ``16 + 4 * (t % 4) + b`` in its high nibble.

Equivalently, every 32-column row is nibble-interleaved as
``w0, w16, w1, w17, ..., w15, w31`` into four words (:func:`pack_interleaved`),
and consumer ``t`` takes word ``t % 4`` of rows ``t // 4 + {0, 8, 16, 24}``.
One mask and one shift-and-mask (:func:`~.lanes.unpack_rlp`) then give the
consumer input columns ``4(t%4)..+3`` and ``16+4(t%4)..+3`` as byte lanes,
which is what an m16n8k32 INT8 tensor-core fragment expects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput, ShapeError
from .lanes import lanes_of, unpack_rlp

TILE = 32
TILE_BYTES = TILE * TILE // 2
CHUNK_BYTES = 16
N_CONSUMERS = TILE_BYTES // CHUNK_BYTES


def _check_nibbles(codes: np.ndarray) -> None:
    if codes.size and (codes.min() < 0 or codes.max() > 15):
        raise InvalidInput("codes must lie in [0, 15]")


def pack_interleaved(codes) -> np.ndarray:
    """Pack 32 nibbles into four uint32 words in ``w0, w16, w1, w17, ...`` order.

    Nibble ``p`` of word ``j`` (bits ``4p..4p+3``) is element ``8j + p`` of the
    interleaved stream.
    """
    w = np.asarray(codes, dtype=np.int64)
    if w.shape != (TILE,):
        raise ShapeError("pack_interleaved takes exactly 32 values")
    _check_nibbles(w)
    stream = np.empty(TILE, dtype=np.int64)
    stream[0::2] = w[:16]
    stream[1::2] = w[16:]
    nib = stream.reshape(4, 8)
    return (nib << (4 * np.arange(8))).sum(axis=1).astype(np.uint32)


def unpack_interleaved(words) -> np.ndarray:
    """Inverse of :func:`pack_interleaved` through the three-op unpack."""
    words = np.asarray(words, dtype=np.uint32)
    low, high = unpack_rlp(words)
    out = np.empty(TILE, dtype=np.int64)
    out[:16] = lanes_of(low).reshape(-1)
    out[16:] = lanes_of(high).reshape(-1)
    return out


def _tile_map():
    off = np.arange(TILE_BYTES)
    t, rem = off // CHUNK_BYTES, off % CHUNK_BYTES
    j, b = rem // 4, rem % 4
    row = t // 4 + 8 * j
    col = 4 * (t % 4) + b
    return row, col, col + 16


_ROW, _COL_LO, _COL_HI = _tile_map()


@dataclass
class PackedTile:
    data: np.ndarray  # (512,) uint8

    def words(self) -> np.ndarray:
        return self.data.view("<u4")

    def to_bytes(self) -> bytes:
        return self.data.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PackedTile":
        if len(raw) != TILE_BYTES:
            raise ShapeError(f"tile needs {TILE_BYTES} bytes, got {len(raw)}")
        return cls(np.frombuffer(raw, dtype=np.uint8).copy())


def _pack_tiles(tiles: np.ndarray) -> np.ndarray:
    """(..., 32, 32) codes -> (..., 512) bytes."""
    lo = tiles[..., _ROW, _COL_LO]
    hi = tiles[..., _ROW, _COL_HI]
    return (lo | (hi << 4)).astype(np.uint8)


def _unpack_tiles(data: np.ndarray) -> np.ndarray:
    out = np.empty(data.shape[:-1] + (TILE, TILE), dtype=np.int32)
    out[..., _ROW, _COL_LO] = data & 0x0F
    out[..., _ROW, _COL_HI] = data >> 4
    return out


def reorder_tile(codes) -> PackedTile:
    codes = np.asarray(codes)
    if codes.shape != (TILE, TILE):
        raise ShapeError("reorder_tile takes a 32x32 code tile")
    _check_nibbles(codes)
    return PackedTile(_pack_tiles(codes.astype(np.int64)))


def unpack_tile(tile: PackedTile) -> np.ndarray:
    return _unpack_tiles(tile.data)


@dataclass(frozen=True)
class ConsumerRead:
    consumer: int
    offset: int
    nbytes: int
    words: tuple[int, int, int, int]
    rows: tuple[int, int, int, int]
    cols: tuple[int, ...]


def linear_consume(tile: PackedTile) -> list[ConsumerRead]:
    """The reads each consumer issues, in compute order: one 16-byte load apiece."""
    words = tile.words()
    reads = []
    for t in range(N_CONSUMERS):
        q = t % 4
        reads.append(ConsumerRead(
            consumer=t,
            offset=CHUNK_BYTES * t,
            nbytes=CHUNK_BYTES,
            words=tuple(int(w) for w in words[4 * t: 4 * t + 4]),
            rows=tuple(t // 4 + 8 * j for j in range(4)),
            cols=tuple(range(4 * q, 4 * q + 4)) + tuple(range(16 + 4 * q, 20 + 4 * q)),
        ))
    return reads


def row_major_reads(consumer: int) -> list[tuple[int, int]]:
    """Contiguous ``(offset, nbytes)`` segments the same consumer needs from a
    plain row-major nibble layout: eight separate 2-byte loads."""
    q = consumer % 4
    segs = []
    for j in range(4):
        row = consumer // 4 + 8 * j
        for col in (4 * q, 16 + 4 * q):
            segs.append(((row * TILE + col) // 2, 2))
    return segs


@dataclass
class PackedWeight:
    """An ``n x k`` UINT4 weight as a grid of packed 32x32 tiles."""

    tiles: np.ndarray  # (n // 32, k // 32, 512) uint8

    @property
    def shape(self) -> tuple[int, int]:
        tn, tk, _ = self.tiles.shape
        return tn * TILE, tk * TILE

    def tile(self, i: int, j: int) -> PackedTile:
        return PackedTile(self.tiles[i, j].copy())

    def to_bytes(self) -> bytes:
        return self.tiles.tobytes()


def pack_weight(codes) -> PackedWeight:
    codes = np.asarray(codes, dtype=np.int64)
    n, k = codes.shape
    if n % TILE or k % TILE:
        raise ShapeError(f"weight {n}x{k} is not a whole number of 32x32 tiles")
    _check_nibbles(codes)
    grid = codes.reshape(n // TILE, TILE, k // TILE, TILE).transpose(0, 2, 1, 3)
    return PackedWeight(_pack_tiles(grid))


def unpack_weight(pw: PackedWeight) -> np.ndarray:
    tn, tk, _ = pw.tiles.shape
    grid = _unpack_tiles(pw.tiles)
    return grid.transpose(0, 2, 1, 3).reshape(tn * TILE, tk * TILE)


def word_positions(n: int, k: int):
    """For every packed word of an ``n x k`` weight, its output row and the
    first input column of its low lanes. Shapes ``(n//32, k//32, 128)``."""
    tn, tk = n // TILE, k // TILE
    w = np.arange(TILE_BYTES // 4)
    t, j = w // 4, w % 4
    row = t // 4 + 8 * j
    col = 4 * (t % 4)
    rows = np.arange(tn)[:, None, None] * TILE + row
    cols = np.arange(tk)[None, :, None] * TILE + col
    return np.broadcast_to(rows, (tn, tk, w.size)), np.broadcast_to(cols, (tn, tk, w.size))
