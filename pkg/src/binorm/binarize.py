"""Mean-threshold quantization and the 1-bit packing codec.

Bit layout (shared with the BNM1 file format): the row-major flat index i of
a {0, 1} tensor lives in 64-bit word i // 64 at bit position i % 64, least
significant bit first. Bits past the logical size in the final word are zero.
"""

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from binorm import autograd as ag
from binorm.errors import ContractError, FormatError

WORD_BITS = 64


def quantize(p: np.ndarray) -> np.ndarray:
    """1 where p exceeds the mean of p, else 0 (ties go to 0).

    The mean is taken over the whole tensor; kernels and biases are
    quantized separately.
    """
    p = np.asarray(p)
    if p.size == 0:
        raise ContractError("cannot quantize an empty tensor")
    dtype = p.dtype if p.dtype in (np.float32, np.float64) else np.float32
    return (p > p.mean()).astype(dtype)


def quantize_ste(p: ag.Variable) -> ag.Variable:
    """quantize() on the forward pass, identity on the backward pass."""
    return ag.ste_passthrough(p, quantize(p.value))


def word_count(bit_count: int) -> int:
    return -(-bit_count // WORD_BITS)


@dataclass(frozen=True)
class PackedBits:
    """A {0, 1} tensor stored one bit per element in uint64 words."""

    shape: tuple[int, ...]
    words: np.ndarray

    @property
    def bit_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return self.words.size * 8

    def validate(self) -> None:
        """Check word count and that the padding bits are zero."""
        expected = word_count(self.bit_count)
        if self.words.size != expected:
            raise FormatError(
                f"expected {expected} words for {self.bit_count} bits, got {self.words.size}"
            )
        tail = self.bit_count % WORD_BITS
        if tail and int(self.words[-1]) >> tail:
            raise FormatError(f"nonzero bits beyond bit {self.bit_count} in the final word")


def pack_bits(q: np.ndarray) -> PackedBits:
    """Pack a tensor of exact 0.0/1.0 values."""
    q = np.asarray(q)
    flat = q.reshape(-1)
    bad = np.flatnonzero((flat != 0) & (flat != 1))
    if bad.size:
        i = int(bad[0])
        raise ContractError(f"pack_bits needs 0/1 values; found {flat[i]!r} at flat index {i}")

    bits = flat.astype(np.uint8)
    padded = np.zeros(word_count(bits.size) * WORD_BITS, dtype=np.uint8)
    padded[: bits.size] = bits
    raw = np.packbits(padded, bitorder="little")
    words = np.frombuffer(raw.tobytes(), dtype="<u8").astype(np.uint64)
    return PackedBits(shape=tuple(int(d) for d in q.shape), words=words)


def unpack_bits(pb: PackedBits, dtype=np.float32) -> np.ndarray:
    """Inverse of pack_bits."""
    pb.validate()
    raw = np.frombuffer(pb.words.astype("<u8").tobytes(), dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[: pb.bit_count]
    return bits.astype(dtype).reshape(pb.shape)


def unpack_rows(pb: PackedBits, rows: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Decode selected rows of a packed matrix viewed as (-1, shape[-1])."""
    width = pb.shape[-1]
    out = np.empty((len(rows), width), dtype=dtype)
    for i, row in enumerate(np.asarray(rows).tolist()):
        start = row * width
        first, last = start // WORD_BITS, (start + width - 1) // WORD_BITS
        raw = np.frombuffer(pb.words[first:last + 1].astype("<u8").tobytes(), dtype=np.uint8)
        bits = np.unpackbits(raw, bitorder="little")
        offset = start - first * WORD_BITS
        out[i] = bits[offset:offset + width]
    return out


def iter_set_bits(words: np.ndarray) -> Iterator[int]:
    """Flat indices of the set bits, ascending, via lowest-set-bit loops."""
    for w, word in enumerate(words.tolist()):
        base = w * WORD_BITS
        while word:
            low = word & -word
            yield base + low.bit_length() - 1
            word ^= low


def iter_rows(pb: PackedBits) -> Iterator[tuple[int, list[int]]]:
    """Set columns of each row of a packed matrix viewed as (-1, shape[-1]).

    Rows with no set bit are skipped; rows come in ascending order.
    """
    width = pb.shape[-1]
    row, cols = -1, []
    for index in iter_set_bits(pb.words):
        r, c = divmod(index, width)
        if r != row:
            if cols:
                yield row, cols
            row, cols = r, []
        cols.append(c)
    if cols:
        yield row, cols
