"""Synthetic datasets, a whitespace tokenizer and the BND1 dataset file."""

import logging
import struct
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from binorm.errors import DataError, FormatError

logger = logging.getLogger(__name__)

UNK = "[UNK]"
FOLLOW_PROB = 0.8


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class ImageDataset:
    """NHWC images in [0, 1] with integer labels (labels may be absent for inference inputs)."""

    images: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    seed: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self.images

    @property
    def targets(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return self.labels

    def subset(self, indices: np.ndarray) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[indices]
        return replace(self, images=self.images[indices], labels=labels)


@dataclass
class TokenDataset:
    """Token sequences; the model reads seq[:, :-1] and predicts seq[:, 1:]."""

    sequences: np.ndarray
    vocab_size: int
    seed: int = 0
    successor: np.ndarray | None = None
    first_successor: np.ndarray | None = None

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self.sequences[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.sequences[:, 1:]

    def subset(self, indices: np.ndarray) -> "TokenDataset":
        return replace(self, sequences=self.sequences[indices])

    def transition_probs(self) -> np.ndarray:
        """P(next | previous two tokens) of the generating grammar, shape (V, V, V)."""
        if self.successor is None:
            raise DataError("dataset was not generated from a grammar")
        v = self.vocab_size
        probs = np.full((v, v, v), (1.0 - FOLLOW_PROB) / (v - 1))
        a, b = np.meshgrid(np.arange(v), np.arange(v), indexing="ij")
        probs[a, b, self.successor] = FOLLOW_PROB
        return probs

    def optimal_accuracy(self) -> float:
        """Accuracy of the best possible next-token predictor over all targets.

        The second token is a deterministic function of the first; every
        later token follows the grammar with probability 0.8.
        """
        targets = self.sequences.shape[1] - 1
        return (1.0 + FOLLOW_PROB * (targets - 1)) / targets


def gen_images(num_classes: int, n: int, h: int, w: int, seed: int, channels: int = 3) -> ImageDataset:
    """Class k is an oriented gradient plus a sinusoid of frequency k + 1, with seeded noise.

    Labels are balanced and shuffled.
    """
    if num_classes < 2 or n < 1 or n % num_classes:
        raise DataError(f"n ({n}) must be a positive multiple of num_classes ({num_classes})")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(num_classes), n // num_classes))

    ys, xs = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    patterns = np.empty((num_classes, h, w, channels))
    for k in range(num_classes):
        angle = np.pi * k / num_classes
        u = xs * np.cos(angle) + ys * np.sin(angle)
        for c in range(channels):
            wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * (k + 1) * u + c * np.pi / channels)
            patterns[k, :, :, c] = 0.5 * (u - u.min()) / (np.ptp(u) or 1.0) + 0.5 * wave

    noise = rng.normal(0.0, 0.1, size=(n, h, w, channels))
    images = np.clip(0.5 * patterns[labels] + 0.25 + 0.5 * noise, 0.0, 1.0).astype(np.float32)
    return ImageDataset(images=images, labels=labels.astype(np.int64), num_classes=num_classes, seed=seed)


def gen_tokens(vocab_size: int, n: int, length: int, seed: int) -> TokenDataset:
    """Sequences from a seeded order-2 grammar.

    The first token is uniform and the second is a fixed function of it.
    Every later token is successor[prev2, prev1] with probability 0.8 and
    otherwise uniform over the remaining vocab_size - 1 tokens.
    """
    if vocab_size < 4:
        raise DataError(f"vocab_size must be at least 4, got {vocab_size}")
    if length < 2 or n < 1:
        raise DataError("need at least one sequence of length 2")
    rng = np.random.default_rng(seed)
    successor = rng.integers(0, vocab_size, size=(vocab_size, vocab_size))
    first_successor = rng.integers(0, vocab_size, size=vocab_size)

    seq = np.empty((n, length), dtype=np.int64)
    seq[:, 0] = rng.integers(0, vocab_size, size=n)
    seq[:, 1] = first_successor[seq[:, 0]]
    for t in range(2, length):
        det = successor[seq[:, t - 2], seq[:, t - 1]]
        follow = rng.random(n) < FOLLOW_PROB
        other = rng.integers(0, vocab_size - 1, size=n)
        other += other >= det
        seq[:, t] = np.where(follow, det, other)

    return TokenDataset(
        sequences=seq,
        vocab_size=vocab_size,
        seed=seed,
        successor=successor,
        first_successor=first_successor,
    )


def split_dataset(dataset, fraction: float = 0.95, seed: int = 0):
    """Disjoint, exhaustive train/validation split.

    Both parts get at least one example when the dataset has two or more.
    """
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    cut = min(max(1, int(round(n * fraction))), n - 1) if n > 1 else n
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


@dataclass
class Tokenizer:
    """Whitespace tokenizer; id 0 is the unknown token."""

    vocabulary: list[str]
    unk_id: int = 0

    def __post_init__(self):
        self._ids = {token: i for i, token in enumerate(self.vocabulary)}

    @property
    def size(self) -> int:
        return len(self.vocabulary)

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(token, self.unk_id) for token in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocabulary[i] for i in ids)


def build_tokenizer(corpus: Iterable[str], max_size: int = 30522) -> Tokenizer:
    """Vocabulary of the most frequent words (ties in first-seen order), capped at max_size including [UNK]."""
    counts = Counter()
    for line in corpus:
        counts.update(line.split())
    counts.pop(UNK, None)
    words = [w for w, _ in counts.most_common(max(0, max_size - 1))]
    return Tokenizer([UNK] + words)


def encode(tokenizer: Tokenizer, text: str) -> list[int]:
    return tokenizer.encode(text)


def decode(tokenizer: Tokenizer, ids: Iterable[int]) -> str:
    return tokenizer.decode(ids)


# ---------------------------------------------------------------------------
# BND1 files
# ---------------------------------------------------------------------------
#
#   "BND1", u8 kind (0 labeled images, 1 token sequences, 2 unlabeled images),
#   u32 classes or vocab size, u8 rank, rank * u32 dims,
#   payload: f32 images then u32 labels, or u32 sequences.

DATA_MAGIC = b"BND1"
LABELED, TOKENS, UNLABELED = 0, 1, 2


def save_dataset(dataset: ImageDataset | TokenDataset, path: Path) -> None:
    if isinstance(dataset, TokenDataset):
        kind, size, payload = TOKENS, dataset.vocab_size, dataset.sequences.astype("<u4")
        parts = [payload]
    else:
        kind = UNLABELED if dataset.labels is None else LABELED
        size, payload = dataset.num_classes, dataset.images.astype("<f4")
        parts = [payload] if dataset.labels is None else [payload, dataset.labels.astype("<u4")]

    header = bytearray(DATA_MAGIC)
    header += struct.pack("<BIB", kind, size, payload.ndim)
    header += struct.pack(f"<{payload.ndim}I", *payload.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(bytes(header))
        for part in parts:
            f.write(part.tobytes())


def load_dataset(path: Path) -> ImageDataset | TokenDataset:
    """Read a BND1 file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Data file does not exist: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise DataError(f"{path} is empty")
    if data[:4] != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {DATA_MAGIC!r}", offset=0)
    if len(data) < 10:
        raise FormatError(f"{path}: truncated header", offset=len(data))

    kind, size, rank = struct.unpack_from("<BIB", data, 4)
    if kind not in (LABELED, TOKENS, UNLABELED):
        raise FormatError(f"{path}: unknown dataset kind {kind}", offset=4)
    expected_rank = 2 if kind == TOKENS else 4
    if rank != expected_rank:
        raise FormatError(f"{path}: rank {rank}, expected {expected_rank}", offset=9)
    offset = 10
    if len(data) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated shape", offset=len(data))
    shape = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    if 0 in shape:
        raise DataError(f"{path}: dataset has no examples")

    count = int(np.prod(shape))
    need = 4 * count + (4 * shape[0] if kind == LABELED else 0)
    if len(data) - offset != need:
        raise FormatError(f"{path}: payload is {len(data) - offset} bytes, expected {need}", offset=offset)

    values = np.frombuffer(data, dtype="<u4" if kind == TOKENS else "<f4", count=count, offset=offset)
    if kind == TOKENS:
        sequences = values.reshape(shape).astype(np.int64)
        if sequences.max() >= size:
            raise DataError(f"{path}: token id {sequences.max()} outside vocab of {size}")
        return TokenDataset(sequences=sequences, vocab_size=size)

    images = values.reshape(shape).astype(np.float32)
    labels = None
    if kind == LABELED:
        labels = np.frombuffer(data, dtype="<u4", count=shape[0], offset=offset + 4 * count).astype(np.int64)
        if labels.max() >= size:
            raise DataError(f"{path}: label {labels.max()} outside {size} classes")
    return ImageDataset(images=images, labels=labels, num_classes=size)


# ---------------------------------------------------------------------------
# Dataset specs
# ---------------------------------------------------------------------------

SYNTHETIC_DEFAULTS = {
    "images": {"classes": 4, "n": 512, "size": 16, "channels": 3},
    "tokens": {"vocab": 16, "n": 1024, "len": 17},
}


def parse_data_spec(spec: str, seed: int = 0) -> ImageDataset | TokenDataset:
    """Resolve a --data value.

    Args:
        spec: A BND1 path, or "synthetic:images[:key=value,...]" with keys
            classes, n, size, channels, seed, or
            "synthetic:tokens[:key=value,...]" with keys vocab, n, len, seed.
        seed: Generator seed when the spec does not set one.
    """
    if not spec.startswith("synthetic:"):
        return load_dataset(Path(spec))

    _, _, rest = spec.partition(":")
    kind, _, args = rest.partition(":")
    if kind not in SYNTHETIC_DEFAULTS:
        raise DataError(f"Unknown synthetic dataset '{kind}'. Valid: {', '.join(SYNTHETIC_DEFAULTS)}")
    options = dict(SYNTHETIC_DEFAULTS[kind], seed=seed)
    for item in filter(None, args.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in options:
            raise DataError(f"bad synthetic option '{item}' for {kind}")
        try:
            options[key] = int(value)
        except ValueError:
            raise DataError(f"synthetic option {key} must be an integer, got '{value}'") from None

    if kind == "images":
        size = options["size"]
        return gen_images(options["classes"], options["n"], size, size, options["seed"], options["channels"])
    return gen_tokens(options["vocab"], options["n"], options["len"], options["seed"])
