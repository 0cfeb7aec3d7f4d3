"""Little-endian binary cursor used by the three on-disk formats."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


class Cursor:
    """Sequential reader over a byte string that reports fault offsets."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise FormatError(
                f"truncated payload while reading {what}: expected {n} bytes, "
                f"found {len(self.data) - self.offset}",
                offset=self.offset,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(
                f"magic mismatch: expected {expected!r}, found {got!r}", offset=0
            )

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return int.from_bytes(self.take(4, what), "little")

    def u32_array(self, n: int, what: str) -> np.ndarray:
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)

    def f64_array(self, n: int, what: str) -> np.ndarray:
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def f32_array(self, n: int, what: str) -> np.ndarray:
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4")

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"trailing garbage: {len(self.data) - self.offset} unread bytes",
                offset=self.offset,
            )


def u32_bytes(*values: int) -> bytes:
    out = bytearray()
    for v in values:
        if not 0 <= v < 2**32:
            raise FormatError(f"value {v} does not fit in an unsigned 32-bit field")
        out += int(v).to_bytes(4, "little")
    return bytes(out)


def f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()
