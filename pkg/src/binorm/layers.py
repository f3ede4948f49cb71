"""Binary normalized layers, their float counterparts, and the transformer pieces.

Every projection layer computes z = x . W_q + b_q, normalizes each example of
z to zero mean and unit standard deviation, and applies its activation. In a
binary layer W_q and b_q are the mean-threshold quantization of 32-bit
masters: straight-through when trainable, plain quantization otherwise, so
both paths produce identical forward values. Float ("standard") layers use
the masters directly and give Normalize a trainable scale and offset.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from binorm import autograd as ag
from binorm.autograd import Tape, Variable
from binorm.binarize import quantize, quantize_ste
from binorm.errors import ConfigurationError, DataError, DimensionError

MASK_FILL = -1e9


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass(eq=False)
class Parameter:
    """A 32-bit master tensor, materialized on first access.

    Deferring allocation lets the full-size architectures be built and
    counted without allocating their weights.
    """

    name: str
    shape: tuple[int, ...]
    init: str = "zeros"
    seed: tuple[int, ...] = ()
    fan: tuple[int, int] = (1, 1)
    _value: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def materialized(self) -> bool:
        return self._value is not None

    @property
    def value(self) -> np.ndarray:
        if self._value is None:
            self._value = self._initial()
        return self._value

    @value.setter
    def value(self, new: np.ndarray) -> None:
        new = np.asarray(new, dtype=np.float32)
        if new.shape != self.shape:
            raise DimensionError(f"{self.name}: expected shape {self.shape}, got {new.shape}")
        self._value = new

    def _initial(self) -> np.ndarray:
        if self.init == "glorot":
            rng = np.random.default_rng(list(self.seed))
            return glorot_uniform(rng, self.shape, *self.fan)
        if self.init == "ones":
            return np.ones(self.shape, dtype=np.float32)
        return np.zeros(self.shape, dtype=np.float32)


def bind(param: Parameter, tape: Tape | None) -> Variable:
    """The master as a Variable: tracked when a tape is recording."""
    if tape is None:
        return ag.constant(param.value)
    return tape.bind(param)


class Layer:
    """Base class. Leaf layers own parameters; composite layers own layers."""

    name = "layer"

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.sublayers() for p in layer.parameters()]

    def sublayers(self) -> list["Layer"]:
        return []

    def __call__(self, x: Variable, trainable: bool = False, rng: np.random.Generator | None = None) -> Variable:
        raise NotImplementedError


def _affine(z: Variable, scale: Parameter, offset: Parameter) -> Variable:
    return ag.add(ag.mul(z, bind(scale, z.tape)), bind(offset, z.tape))


class Dense(Layer):
    """Fully connected projection over the last axis."""

    kind = "dense"
    binary = True

    def __init__(
        self,
        n_x: int,
        n_units: int,
        activation: str = "linear",
        *,
        name: str = "dense",
        seed: tuple[int, ...] = (0,),
    ):
        self.n_x = n_x
        self.n_units = n_units
        self.activation = activation
        self.name = name
        self._init_parameters(seed)

    def _init_parameters(self, seed: tuple[int, ...]) -> None:
        self.W = Parameter(f"{self.name}.W", (self.n_x, self.n_units), "glorot", seed, (self.n_x, self.n_units))
        self.b = Parameter(f"{self.name}.b", (self.n_units,))
        if not self.binary:
            self.scale = Parameter(f"{self.name}.scale", (self.n_units,), "ones")
            self.offset = Parameter(f"{self.name}.offset", (self.n_units,))

    def parameters(self) -> list[Parameter]:
        if self.binary:
            return [self.W, self.b]
        return [self.W, self.b, self.scale, self.offset]

    def weights(self, tape: Tape | None, trainable: bool) -> tuple[Variable, Variable]:
        """Kernel and bias as used on the forward path."""
        if not self.binary:
            return bind(self.W, tape), bind(self.b, tape)
        if trainable:
            return quantize_ste(bind(self.W, tape)), quantize_ste(bind(self.b, tape))
        return ag.constant(quantize(self.W.value)), ag.constant(quantize(self.b.value))

    def linear(self, x: Variable, trainable: bool = False) -> Variable:
        if x.shape[-1] != self.n_x:
            raise DimensionError(f"{self.name}: expected {self.n_x} input features, got shape {x.shape}")
        W, b = self.weights(x.tape, trainable)
        return ag.add(ag.matmul(x, W), b)

    def lookup(self, ids: np.ndarray, tape: Tape | None, trainable: bool = False) -> Variable:
        """linear() of one-hot rows, computed by gathering kernel rows."""
        W, b = self.weights(tape, trainable)
        return ag.add(ag.take_rows(W, ids), b)

    def finish(self, z: Variable) -> Variable:
        z = ag.normalize_features(z, axes=(-1,))
        if not self.binary:
            z = _affine(z, self.scale, self.offset)
        return ag.activation(z, self.activation)

    def __call__(self, x, trainable=False, rng=None):
        return self.finish(self.linear(x, trainable))


class BnfcLayer(Dense):
    """Binary normalized fully connected layer."""

    binary = True


class StandardDense(Dense):
    binary = False


class Conv2D(Layer):
    """Same-padded stride-1 convolution over NHWC input."""

    kind = "conv"
    binary = True

    def __init__(
        self,
        filter_size: int,
        c_in: int,
        n_filters: int,
        activation: str = "relu",
        *,
        name: str = "conv",
        seed: tuple[int, ...] = (0,),
    ):
        if filter_size % 2 == 0:
            raise ConfigurationError(f"{name}: filter size must be odd, got {filter_size}")
        self.filter_size = filter_size
        self.c_in = c_in
        self.n_filters = n_filters
        self.activation = activation
        self.name = name
        self._init_parameters(seed)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        f = self.filter_size
        return (f, f, self.c_in, self.n_filters)

    def _init_parameters(self, seed: tuple[int, ...]) -> None:
        receptive = self.filter_size * self.filter_size
        fan = (receptive * self.c_in, receptive * self.n_filters)
        self.W = Parameter(f"{self.name}.W", self.kernel_shape, "glorot", seed, fan)
        self.b = Parameter(f"{self.name}.b", (self.n_filters,))
        if not self.binary:
            self.scale = Parameter(f"{self.name}.scale", (self.n_filters,), "ones")
            self.offset = Parameter(f"{self.name}.offset", (self.n_filters,))

    parameters = Dense.parameters
    weights = Dense.weights

    def linear(self, x: Variable, trainable: bool = False) -> Variable:
        W, b = self.weights(x.tape, trainable)
        return ag.conv2d(x, W, b)

    def finish(self, z: Variable) -> Variable:
        z = ag.normalize_features(z, axes=(1, 2, 3))
        if not self.binary:
            z = _affine(z, self.scale, self.offset)
        return ag.activation(z, self.activation)

    def __call__(self, x, trainable=False, rng=None):
        return self.finish(self.linear(x, trainable))


class BncvLayer(Conv2D):
    """Binary normalized convolutional layer."""

    binary = True


class StandardConv(Conv2D):
    binary = False


class Normalize(Layer):
    """Per-example normalization over the last axis.

    The binary models use it without parameters; the float models learn a
    scale and offset per feature.
    """

    kind = "normalize"

    def __init__(self, dim: int, *, binary: bool = True, name: str = "norm"):
        self.dim = dim
        self.binary = binary
        self.name = name
        if not binary:
            self.scale = Parameter(f"{name}.scale", (dim,), "ones")
            self.offset = Parameter(f"{name}.offset", (dim,))

    def parameters(self) -> list[Parameter]:
        return [] if self.binary else [self.scale, self.offset]

    def __call__(self, x, trainable=False, rng=None):
        z = ag.normalize_features(x, axes=(-1,))
        if not self.binary:
            z = _affine(z, self.scale, self.offset)
        return z


class MaxPool2D(Layer):
    name = "maxpool"

    def __call__(self, x, trainable=False, rng=None):
        return ag.maxpool2d(x)


class GlobalAvgPool(Layer):
    name = "global_avg"

    def __call__(self, x, trainable=False, rng=None):
        return ag.global_avg_pool(x)


class Dropout(Layer):
    name = "dropout"

    def __init__(self, rate: float, *, name: str = "dropout"):
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.name = name

    def __call__(self, x, trainable=False, rng=None):
        return dropout_forward(self, x, trainable, rng)


def dropout_forward(d: Dropout, x: Variable, training: bool, rng: np.random.Generator | None) -> Variable:
    """Zero elements with probability d.rate and rescale survivors; identity outside training."""
    if not training or d.rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = rng.random(x.shape) >= d.rate
    mask = keep.astype(x.value.dtype) / np.asarray(1.0 - d.rate, dtype=x.value.dtype)
    return ag.mul(x, ag.constant(mask))


class BembLayer(Layer):
    """Token plus position embedding built from two linear projections of one-hot codes."""

    def __init__(self, token_proj: Dense, pos_proj: Dense, *, name: str = "embed"):
        self.token_proj = token_proj
        self.pos_proj = pos_proj
        self.name = name
        self.vocab_size = token_proj.n_x
        self.max_len = pos_proj.n_x
        self.emb_dim = token_proj.n_units

    def sublayers(self) -> list[Layer]:
        return [self.token_proj, self.pos_proj]

    def __call__(self, seq, trainable=False, rng=None):
        ids = np.asarray(seq.value)
        if ids.ndim != 2:
            raise DimensionError(f"{self.name}: expected (batch, length) token ids, got {ids.shape}")
        length = ids.shape[1]
        if length > self.max_len:
            raise DataError(f"{self.name}: sequence length {length} exceeds max_len {self.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise DataError(f"{self.name}: token ids must lie in [0, {self.vocab_size})")
        ids = ids.astype(np.int64)

        tokens = self.token_proj.finish(self.token_proj.lookup(ids, seq.tape, trainable))
        positions = self.pos_proj.finish(self.pos_proj.lookup(np.arange(length), seq.tape, trainable))
        return ag.add(tokens, positions)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=np.float32))


class BatLayer(Layer):
    """Multi-head scaled dot-product attention with binary projections."""

    def __init__(self, q_proj: Dense, k_proj: Dense, v_proj: Dense, out_proj: Dense, num_heads: int, *, name: str = "attn"):
        emb_dim = q_proj.n_units
        if num_heads < 1 or emb_dim % num_heads:
            raise ConfigurationError(f"{name}: emb_dim {emb_dim} is not divisible by num_heads {num_heads}")
        self.q_proj, self.k_proj, self.v_proj, self.out_proj = q_proj, k_proj, v_proj, out_proj
        self.num_heads = num_heads
        self.emb_dim = emb_dim
        self.num_key = emb_dim // num_heads
        self.name = name

    def sublayers(self) -> list[Layer]:
        return [self.q_proj, self.k_proj, self.v_proj, self.out_proj]

    def _split(self, x: Variable) -> Variable:
        batch, length, _ = x.shape
        x = ag.reshape(x, (batch, length, self.num_heads, self.num_key))
        return ag.permute(x, (0, 2, 1, 3))

    def attention_probs(self, query: Variable, key: Variable, mask: np.ndarray | None = None, trainable: bool = False) -> Variable:
        """Softmax attention weights, shape (batch, heads, L, L)."""
        q = self._split(self.q_proj(query, trainable))
        k = self._split(self.k_proj(key, trainable))
        scores = ag.scale(ag.matmul(q, ag.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.num_key))
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != scores.shape[-2:]:
                raise DimensionError(f"{self.name}: mask shape {mask.shape} does not match scores {scores.shape}")
            scores = ag.masked_fill(scores, mask != 0, MASK_FILL)
        return ag.activation(scores, "softmax")

    def __call__(self, query, key=None, value=None, mask=None, trainable=False, rng=None):
        key = query if key is None else key
        value = query if value is None else value
        probs = self.attention_probs(query, key, mask, trainable)
        v = self._split(self.v_proj(value, trainable))
        attended = ag.permute(ag.matmul(probs, v), (0, 2, 1, 3))
        batch, length = attended.shape[:2]
        merged = ag.reshape(attended, (batch, length, self.emb_dim))
        return self.out_proj(merged, trainable)


class BtfBlock(Layer):
    """Post-norm transformer block: attention, add and normalize, feed-forward, add and normalize."""

    def __init__(self, attention: BatLayer, norm1: Normalize, ffn1: Dense, ffn2: Dense, norm2: Normalize, *, name: str = "block"):
        self.attention = attention
        self.norm1 = norm1
        self.ffn1 = ffn1
        self.ffn2 = ffn2
        self.norm2 = norm2
        self.name = name

    def sublayers(self) -> list[Layer]:
        return [self.attention, self.norm1, self.ffn1, self.ffn2, self.norm2]

    def __call__(self, x, mask=None, trainable=False, rng=None):
        attended = self.attention(x, x, x, mask=mask, trainable=trainable)
        h = self.norm1(ag.add(x, attended))
        ffn = self.ffn2(self.ffn1(h, trainable), trainable)
        return self.norm2(ag.add(h, ffn))
