"""Range-variant asymmetric numeral systems coder.

64-bit state, 32-bit renormalization words, tables of any precision up to
31 bits. The coder is a stack: the encoder buffers symbols and encodes them
in reverse on :meth:`RansEncoder.flush`, so the decoder emits them in their
original order and may build the table for symbol ``t`` after decoding the
symbols before it.

Payload layout: the final 64-bit state (8 bytes, little-endian), followed by
the 32-bit renormalization words (little-endian each) in the order the
decoder consumes them.
"""
from __future__ import annotations

import struct
from bisect import bisect_right
from typing import Sequence

from .entropy import CdfTable

RANS_L = 1 << 31
_MASK32 = (1 << 32) - 1
STATE_BYTES = 8


class RansDecodeError(ValueError):
    """The payload is truncated or otherwise inconsistent with the tables."""


class RansEncoder:
    def __init__(self):
        self._pending: list[tuple[int, int, int]] = []

    def __len__(self) -> int:
        return len(self._pending)

    def encode(self, index: int, table: CdfTable) -> None:
        """Queue table index ``index`` (0-based, not offset-adjusted)."""
        if not 0 <= index < table.size:
            raise ValueError(f"index {index} outside table of size {table.size}")
        self._pending.append((table.cumulative[index], table.freqs[index], table.precision))

    def flush(self) -> bytes:
        x = RANS_L
        words: list[int] = []
        for start, freq, precision in reversed(self._pending):
            x_max = ((RANS_L >> precision) << 32) * freq
            if x >= x_max:
                words.append(x & _MASK32)
                x >>= 32
            x = ((x // freq) << precision) + (x % freq) + start
        words.reverse()
        return struct.pack("<Q", x) + struct.pack(f"<{len(words)}I", *words)


class RansDecoder:
    def __init__(self, data: bytes):
        if len(data) < STATE_BYTES or (len(data) - STATE_BYTES) % 4:
            raise RansDecodeError(f"payload of {len(data)} bytes is not a valid rANS stream")
        self._state = struct.unpack_from("<Q", data)[0]
        n = (len(data) - STATE_BYTES) // 4
        self._words = struct.unpack_from(f"<{n}I", data, STATE_BYTES)
        self._pos = 0
        if not RANS_L <= self._state < (RANS_L << 32):
            raise RansDecodeError(f"initial state {self._state:#x} out of range")

    def decode(self, table: CdfTable) -> int:
        """Pop one table index."""
        precision = table.precision
        cum = table.cumulative
        x = self._state
        slot = x & ((1 << precision) - 1)
        index = bisect_right(cum, slot) - 1
        start, freq = cum[index], table.freqs[index]
        x = freq * (x >> precision) + slot - start
        if x < RANS_L:
            if self._pos >= len(self._words):
                raise RansDecodeError("payload truncated: ran out of renormalization words")
            x = (x << 32) | self._words[self._pos]
            self._pos += 1
        self._state = x
        return index

    def finish(self) -> None:
        """Check that the stream was consumed exactly."""
        if self._pos != len(self._words):
            raise RansDecodeError(f"{len(self._words) - self._pos} unread words in payload")
        if self._state != RANS_L:
            raise RansDecodeError("final state mismatch: payload corrupt or tables differ")


def _tables_for(tables, count: int) -> Sequence[CdfTable]:
    if isinstance(tables, CdfTable):
        return [tables] * count
    if len(tables) != count:
        raise ValueError(f"got {len(tables)} tables for {count} symbols")
    return tables


def encode(symbols: Sequence[int], tables) -> bytes:
    """Encode symbol values (table offsets applied) with one table per symbol.

    ``tables`` may be a single table shared by every symbol.
    """
    tables = _tables_for(tables, len(symbols))
    enc = RansEncoder()
    for pos, (sym, table) in enumerate(zip(symbols, tables)):
        idx = table.index_of(sym)
        if idx is None:
            raise ValueError(
                f"symbol {sym} at position {pos} outside table support "
                f"[{table.offset}, {table.offset + table.num_regular - 1}]"
            )
        enc.encode(idx, table)
    return enc.flush()


def decode(data: bytes, tables, count: int) -> list[int]:
    tables = _tables_for(tables, count)
    dec = RansDecoder(data)
    out = []
    for table in tables:
        idx = dec.decode(table)
        if table.escape and idx == table.escape_index:
            raise RansDecodeError("escape symbol decoded by the plain symbol decoder")
        out.append(idx + table.offset)
    dec.finish()
    return out
