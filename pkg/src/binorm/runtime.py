"""1-bit model export and bit-packed inference.

BNM1 file layout, little-endian throughout:

    "BNM1"                      magic
    u32                         version (1)
    u32 + bytes                 JSON ModelConfig echo
    u32                         record count
    per record:
        u16 + bytes             name (UTF-8)
        u8                      kind tag: 0 dense, 1 conv, 2 embedding projection
        u8 + rank * u32         kernel shape
        u64 + words             packed kernel
        u64 + words             packed bias (shape: last kernel dim)
    u64                         FNV-1a 64 checksum of every preceding byte

Records follow the parameter registry order of the exported model. The
packed layers never expand a kernel to floats: dense and conv outputs are
accumulated by walking the set bits, which reproduces the float path's
summation order exactly.
"""

import json
import logging
import struct
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from binorm import autograd as ag
from binorm import tensor as T
from binorm.binarize import PackedBits, iter_rows, pack_bits, quantize, unpack_bits, unpack_rows, word_count
from binorm.config import ModelConfig, model_config_from_dict, model_config_to_dict
from binorm.errors import ConfigurationError, ContractError, DataError, DimensionError, FormatError, ChecksumError
from binorm.layers import Conv2D, Dense, Layer, Normalize
from binorm.models import LayerFactory, LayerSpec, Model, build_model, layer_specs
from binorm.parallel import batch_slices, map_shards

logger = logging.getLogger(__name__)

MAGIC = b"BNM1"
VERSION = 1
KIND_TAGS = {"dense": 0, "conv": 1, "embedding": 2}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """FNV-1a 64 of data, continuing from a previous hash h.

    The hash is sequential over bytes: a blm-small sized file takes seconds.
    """
    prime, mask = FNV_PRIME, _MASK64
    for byte in data:
        h = ((h ^ byte) * prime) & mask
    return h


# ---------------------------------------------------------------------------
# Packed layers
# ---------------------------------------------------------------------------


def packed_matmul(x: np.ndarray, kernel: PackedBits) -> np.ndarray:
    """x . W for a packed {0, 1} matrix W of shape (K, N); x has shape (..., K).

    Each output column receives x[:, k] for its set bits in ascending k.
    """
    k, n = kernel.shape
    if x.shape[-1] != k:
        raise DimensionError(f"packed matmul shape mismatch: {x.shape} x {kernel.shape}")
    flat = x.reshape(-1, k)
    z = np.zeros((flat.shape[0], n), dtype=flat.dtype)
    for row, cols in iter_rows(kernel):
        z[:, cols] += flat[:, row:row + 1]
    return z.reshape(x.shape[:-1] + (n,))


@dataclass(frozen=True)
class PackedRecord:
    name: str
    kind: str
    shape: tuple[int, ...]
    kernel: PackedBits
    bias: PackedBits

    @property
    def bit_count(self) -> int:
        return self.kernel.bit_count + self.bias.bit_count


class PackedDense(Dense):
    """Dense or embedding projection backed by a packed record."""

    def __init__(self, record: PackedRecord, activation: str):
        self.record = record
        super().__init__(*record.shape, activation, name=record.name)
        self._bias = unpack_bits(record.bias)

    def _init_parameters(self, seed):
        pass

    def parameters(self):
        return []

    def linear(self, x, trainable=False):
        if x.shape[-1] != self.n_x:
            raise DimensionError(f"{self.name}: expected {self.n_x} input features, got shape {x.shape}")
        return ag.constant(packed_matmul(np.asarray(x.value), self.record.kernel) + self._bias)

    def lookup(self, ids, tape=None, trainable=False):
        ids = np.asarray(ids)
        unique, inverse = np.unique(ids, return_inverse=True)
        rows = unpack_rows(self.record.kernel, unique)
        return ag.constant(rows[inverse.reshape(ids.shape)] + self._bias)


class PackedConv(Conv2D):
    """Same-padded convolution backed by a packed record."""

    def __init__(self, record: PackedRecord, activation: str):
        self.record = record
        f, _, c_in, n_filters = record.shape
        super().__init__(f, c_in, n_filters, activation, name=record.name)
        self._bias = unpack_bits(record.bias)
        self._matrix = PackedBits((f * f * c_in, n_filters), record.kernel.words)

    def _init_parameters(self, seed):
        pass

    def parameters(self):
        return []

    def linear(self, x, trainable=False):
        x = np.asarray(x.value)
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise DimensionError(f"{self.name}: expected NHWC input with {self.c_in} channels, got {x.shape}")
        n, h, w, _ = x.shape
        cols = T.im2col(x, self.filter_size, self.filter_size)
        z = packed_matmul(cols.reshape(n * h * w, -1), self._matrix)
        return ag.constant((z + self._bias).reshape(n, h, w, self.n_filters))


class PackedFactory(LayerFactory):
    """Builds the network's leaves from loaded records instead of masters."""

    def __init__(self, records: list[PackedRecord]):
        super().__init__(binary=True)
        self.records = {r.name: r for r in records}

    def make(self, spec: LayerSpec, index: int) -> Layer:
        if spec.kind == "normalize":
            return Normalize(spec.shape[0], binary=True, name=spec.name)
        record = self.records.get(spec.name)
        if record is None:
            raise FormatError(f"model file has no record for layer {spec.name}")
        if record.kind != spec.kind or record.shape != spec.shape:
            raise FormatError(
                f"record {spec.name} is {record.kind}{record.shape}, config expects {spec.kind}{spec.shape}"
            )
        if spec.kind == "conv":
            return PackedConv(record, spec.activation)
        return PackedDense(record, spec.activation)


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------


@dataclass
class PackedModel:
    """An inference-only model: the config echo and one record per projection."""

    config: ModelConfig
    records: list[PackedRecord]
    version: int = VERSION
    network: Model = field(init=False, repr=False)

    def __post_init__(self):
        self.network = build_model(self.config, factory=PackedFactory(self.records))

    @property
    def parameter_count(self) -> int:
        return sum(r.bit_count for r in self.records)

    @property
    def payload_bytes(self) -> int:
        return sum(r.kernel.nbytes + r.bias.nbytes for r in self.records)


def pack_model(model: Model) -> PackedModel:
    """Quantize and pack every projection of a trained binary model."""
    if not model.binary:
        raise ConfigurationError("only binary models can be exported to BNM1")
    records = []
    for spec, layer in model.projections():
        for param in (layer.W, layer.b):
            if not np.all(np.isfinite(param.value)):
                raise ContractError(f"master {param.name} contains NaN or Inf")
        records.append(PackedRecord(
            name=spec.name,
            kind=spec.kind,
            shape=spec.shape,
            kernel=pack_bits(quantize(layer.W.value)),
            bias=pack_bits(quantize(layer.b.value)),
        ))
    return PackedModel(config=model.config, records=records)


def encode_packed(pm: PackedModel) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", pm.version)
    blob = json.dumps(model_config_to_dict(pm.config), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(pm.records))
    for record in pm.records:
        name = record.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", KIND_TAGS[record.kind], len(record.shape))
        out += struct.pack(f"<{len(record.shape)}I", *record.shape)
        for bits in (record.kernel, record.bias):
            out += struct.pack("<Q", bits.words.size)
            out += bits.words.astype("<u8").tobytes()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


def export_packed(model: Model, path: Path) -> int:
    """Write model as a BNM1 file.

    Returns:
        Bytes written.
    """
    data = encode_packed(pack_model(model))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("exported %s (%d bytes)", path, len(data))
    return len(data)


class _Reader:
    """Cursor over a byte string; every read reports its offset on failure."""

    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def words(self, shape: tuple[int, ...], what: str) -> PackedBits:
        at = self.pos
        (count,) = self.unpack("<Q", f"{what} word count")
        expected = word_count(int(np.prod(shape, dtype=np.int64)))
        if count != expected:
            raise FormatError(f"{what}: {count} words for shape {shape}, expected {expected}", offset=at)
        at = self.pos
        words = np.frombuffer(self.take(8 * count, what), dtype="<u8").astype(np.uint64)
        bits = PackedBits(shape, words)
        try:
            bits.validate()
        except FormatError as e:
            raise FormatError(f"{what}: {e}", offset=at) from None
        return bits


def decode_packed(data: bytes) -> PackedModel:
    """Parse and validate a BNM1 byte string."""
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < 16:
        raise FormatError("file too short for a BNM1 header and checksum", offset=len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    body_end = len(data) - 8
    (stored,) = struct.unpack_from("<Q", data, body_end)
    if fnv1a64(memoryview(data)[:body_end]) != stored:
        raise ChecksumError("checksum mismatch", offset=body_end)

    reader = _Reader(data, body_end)
    reader.pos = 8
    (blob_len,) = reader.unpack("<I", "config length")
    at = reader.pos
    try:
        config = model_config_from_dict(json.loads(reader.take(blob_len, "config").decode("utf-8")), "model file")
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigurationError, TypeError) as e:
        raise FormatError(f"config echo is invalid ({e})", offset=at) from None

    (count,) = reader.unpack("<I", "record count")
    records = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        at = reader.pos
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8", offset=at) from None
        at = reader.pos
        tag, rank = reader.unpack("<BB", "kind and rank")
        if tag not in TAG_KINDS:
            raise FormatError(f"{name}: unknown kind tag {tag}", offset=at)
        if not 1 <= rank <= 4:
            raise FormatError(f"{name}: unsupported rank {rank}", offset=at + 1)
        at = reader.pos
        shape = reader.unpack(f"<{rank}I", f"{name} shape")
        if min(shape) < 1:
            raise FormatError(f"{name}: zero dimension in shape {shape}", offset=at)
        kernel = reader.words(shape, f"{name} kernel")
        bias = reader.words((shape[-1],), f"{name} bias")
        records.append(PackedRecord(name, TAG_KINDS[tag], tuple(shape), kernel, bias))

    if reader.pos != body_end:
        raise FormatError("unexpected bytes after the last record", offset=reader.pos)

    expected = [s.name for s in layer_specs(config) if s.kind in KIND_TAGS]
    if [r.name for r in records] != expected:
        raise FormatError("records do not match the layers of the config echo", offset=8)
    return PackedModel(config=config, records=records, version=version)


def load_packed(path: Path) -> PackedModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Model file does not exist: {path}")
    with open(path, "rb") as f:
        data = f.read()
    return decode_packed(data)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def packed_forward(pm: PackedModel, inputs: np.ndarray) -> np.ndarray:
    """Network output computed from the packed bits."""
    return pm.network.predict(_as_input(pm.config, inputs))


def _as_input(config: ModelConfig, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs)
    if inputs.size == 0:
        raise DataError("input is empty")
    if config.kind == "blm":
        if not np.issubdtype(inputs.dtype, np.integer):
            if not np.all(inputs == np.round(inputs)):
                raise DataError("token ids must be integers")
        return inputs.astype(np.int64)
    return T.as_tensor(inputs).astype(np.float32, copy=False)


@dataclass
class InferenceResult:
    probabilities: np.ndarray
    argmax: np.ndarray
    latency_ns: int


def infer(pm: PackedModel, inputs: np.ndarray, threads: int = 1, batch_size: int = 32) -> InferenceResult:
    """Class distribution per image, or next-token distribution per sequence.

    A single unbatched example (one image, or one 1-d token sequence) is
    accepted and treated as a batch of one.
    """
    inputs = _as_input(pm.config, inputs)
    single_rank = 1 if pm.config.kind == "blm" else 3
    if inputs.ndim == single_rank:
        inputs = inputs[None]

    started = time.perf_counter_ns()
    parts = map_shards(
        lambda part: packed_forward(pm, inputs[part]),
        batch_slices(inputs.shape[0], batch_size),
        threads,
    )
    latency = time.perf_counter_ns() - started

    probs = np.concatenate(parts, axis=0)
    if pm.config.kind == "blm":
        probs = probs[:, -1, :]
    return InferenceResult(probabilities=probs, argmax=probs.argmax(axis=-1), latency_ns=latency)


@dataclass
class BenchResult:
    float_ns: int
    packed_ns: int
    float_peak_bytes: int
    packed_peak_bytes: int
    float_param_bytes: int
    packed_param_bytes: int


def _timed(fn, repeats: int) -> tuple[int, int]:
    tracemalloc.start()
    try:
        started = time.perf_counter_ns()
        for _ in range(repeats):
            fn()
        elapsed = (time.perf_counter_ns() - started) // max(repeats, 1)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return elapsed, peak


def bench(model: Model, pm: PackedModel, inputs: np.ndarray, repeats: int = 3) -> BenchResult:
    """Forward latency and peak traced allocation, float path against packed path."""
    inputs = _as_input(pm.config, inputs)
    float_ns, float_peak = _timed(lambda: model.predict(inputs), repeats)
    packed_ns, packed_peak = _timed(lambda: packed_forward(pm, inputs), repeats)
    return BenchResult(
        float_ns=float_ns,
        packed_ns=packed_ns,
        float_peak_bytes=float_peak,
        packed_peak_bytes=packed_peak,
        float_param_bytes=4 * sum(p.size for p in model.parameters().values()),
        packed_param_bytes=pm.payload_bytes,
    )
