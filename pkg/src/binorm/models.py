"""Builders for the convolutional classifier and the language decoder.

Both architectures are described first as an ordered list of LayerSpecs. A
factory turns each spec into a leaf layer (trainable masters for training,
packed records for the runtime) and the wiring functions assemble the
leaves into the same network either way. The spec order is the parameter
registry order and the record order of exported files.
"""

import logging
from dataclasses import dataclass

import numpy as np

from binorm import autograd as ag
from binorm.autograd import Variable
from binorm.binarize import word_count
from binorm.config import ModelConfig
from binorm.errors import ConfigurationError, DimensionError
from binorm.layers import (
    BatLayer,
    BembLayer,
    BncvLayer,
    BnfcLayer,
    BtfBlock,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    MaxPool2D,
    Normalize,
    Parameter,
    StandardConv,
    StandardDense,
    causal_mask,
)

logger = logging.getLogger(__name__)

PROJECTION_KINDS = ("dense", "conv", "embedding")


@dataclass(frozen=True)
class LayerSpec:
    """One leaf layer: its registry name, kind, kernel shape and activation.

    For normalize specs the shape is (features,).
    """

    name: str
    kind: str
    shape: tuple[int, ...]
    activation: str = "linear"


def layer_specs(config: ModelConfig) -> list[LayerSpec]:
    """Leaf layers of the architecture in registry order."""
    config.validate()
    if config.kind == "bcvnn":
        return _bcvnn_specs(config)
    return _blm_specs(config)


def _bcvnn_specs(config: ModelConfig) -> list[LayerSpec]:
    f = config.filter_size
    specs = []
    c_in = config.input_channels
    for index, c_out in enumerate(config.channels):
        block, conv = divmod(index, 2)
        specs.append(LayerSpec(f"block{block + 1}.conv{conv + 1}", "conv", (f, f, c_in, c_out), "relu"))
        c_in = c_out

    units = config.dense_units
    specs += [
        LayerSpec("head.dense1", "dense", (c_in, units), "relu"),
        LayerSpec("head.dense2", "dense", (units, units), "relu"),
        LayerSpec("head.out", "dense", (units, config.num_classes), "softmax"),
    ]
    return specs


def _blm_specs(config: ModelConfig) -> list[LayerSpec]:
    emb = config.emb_dim
    specs = [
        LayerSpec("embed.token", "embedding", (config.vocab_size, emb)),
        LayerSpec("embed.position", "embedding", (config.max_len, emb)),
        LayerSpec("embed.norm", "normalize", (emb,)),
    ]
    for i in range(1, config.num_blocks + 1):
        specs += [LayerSpec(f"block{i}.attn.{p}", "dense", (emb, emb)) for p in ("q", "k", "v", "out")]
        specs += [
            LayerSpec(f"block{i}.norm1", "normalize", (emb,)),
            LayerSpec(f"block{i}.ffn1", "dense", (emb, config.ff_units), "gelu"),
            LayerSpec(f"block{i}.ffn2", "dense", (config.ff_units, emb)),
            LayerSpec(f"block{i}.norm2", "normalize", (emb,)),
        ]
    specs += [
        LayerSpec("head.mlp1", "dense", (emb, config.mlp_units_0), "gelu"),
        LayerSpec("head.mlp2", "dense", (config.mlp_units_0, config.mlp_units_1), "gelu"),
        LayerSpec("head.out", "dense", (config.mlp_units_1, config.vocab_size), "softmax"),
    ]
    return specs


class LayerFactory:
    """Creates leaf layers with lazily initialized 32-bit masters.

    Each projection gets its own seed derived from the model seed and its
    position in the registry, so rebuilding with the same seed reproduces
    the same initial parameters.
    """

    def __init__(self, binary: bool = True, seed: int = 0):
        self.binary = binary
        self.seed = seed

    def make(self, spec: LayerSpec, index: int) -> Layer:
        if spec.kind == "normalize":
            return Normalize(spec.shape[0], binary=self.binary, name=spec.name)
        layer_seed = (self.seed, index)
        if spec.kind == "conv":
            cls = BncvLayer if self.binary else StandardConv
            f, _, c_in, n_filters = spec.shape
            return cls(f, c_in, n_filters, spec.activation, name=spec.name, seed=layer_seed)
        if spec.kind in ("dense", "embedding"):
            cls = BnfcLayer if self.binary else StandardDense
            return cls(*spec.shape, spec.activation, name=spec.name, seed=layer_seed)
        raise ConfigurationError(f"Unknown layer kind '{spec.kind}' for {spec.name}")


class Model:
    """A built network: its leaves in registry order and the wiring between them."""

    def __init__(self, config: ModelConfig, specs: list[LayerSpec], leaves: dict[str, Layer]):
        self.config = config
        self.specs = specs
        self.leaves = leaves

    @property
    def binary(self) -> bool:
        return self.config.binary

    def parameters(self) -> dict[str, Parameter]:
        """Named master tensors in serialization order."""
        return {p.name: p for leaf in self.leaves.values() for p in leaf.parameters()}

    def projections(self) -> list[tuple[LayerSpec, Layer]]:
        """Leaves that carry a kernel and bias, with their specs."""
        return [(s, self.leaves[s.name]) for s in self.specs if s.kind in PROJECTION_KINDS]

    def forward(self, x: Variable, trainable: bool = False, rng: np.random.Generator | None = None) -> Variable:
        raise NotImplementedError

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Inference-mode output for a batch, as an array."""
        return self.forward(ag.constant(inputs)).value


class ConvClassifier(Model):
    """Conv blocks with 2x2 pooling, global average pooling, three dense layers."""

    def __init__(self, config, specs, leaves, stack: list[Layer]):
        super().__init__(config, specs, leaves)
        self.stack = stack

    def forward(self, x, trainable=False, rng=None):
        size = self.config.image_size
        expected = (size, size, self.config.input_channels)
        if x.value.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"expected images of shape (n, {size}, {size}, {expected[2]}), got {x.shape}")
        for layer in self.stack:
            x = layer(x, trainable=trainable, rng=rng)
        return x


class LanguageDecoder(Model):
    """Embedding, transformer blocks under a causal mask, and an MLP head."""

    def __init__(self, config, specs, leaves, embed: BembLayer, norm: Normalize, blocks: list[BtfBlock], head: list[Dense]):
        super().__init__(config, specs, leaves)
        self.embed = embed
        self.norm = norm
        self.blocks = blocks
        self.head = head

    def forward(self, x, trainable=False, rng=None):
        h = self.norm(self.embed(x, trainable=trainable))
        mask = causal_mask(h.shape[1])
        for block in self.blocks:
            h = block(h, mask=mask, trainable=trainable)
        for layer in self.head:
            h = layer(h, trainable=trainable)
        return h


def build_model(config: ModelConfig, seed: int = 0, factory: LayerFactory | None = None) -> Model:
    """Build either architecture from its config.

    Args:
        config: Model configuration.
        seed: Initialization seed, used when no factory is given.
        factory: Leaf layer factory; defaults to trainable masters.

    Returns:
        A ConvClassifier or a LanguageDecoder.
    """
    specs = layer_specs(config)
    factory = factory or LayerFactory(config.binary, seed)
    leaves = {spec.name: factory.make(spec, index) for index, spec in enumerate(specs)}
    if config.kind == "bcvnn":
        model = _wire_bcvnn(config, specs, leaves)
    else:
        model = _wire_blm(config, specs, leaves)
    logger.debug("built %s with %d leaf layers", config.kind, len(leaves))
    return model


def build_bcvnn(config: ModelConfig, seed: int = 0, factory: LayerFactory | None = None) -> ConvClassifier:
    if config.kind != "bcvnn":
        raise ConfigurationError(f"build_bcvnn needs kind 'bcvnn', got '{config.kind}'")
    return build_model(config, seed, factory)


def build_blm(config: ModelConfig, seed: int = 0, factory: LayerFactory | None = None) -> LanguageDecoder:
    if config.kind != "blm":
        raise ConfigurationError(f"build_blm needs kind 'blm', got '{config.kind}'")
    return build_model(config, seed, factory)


def _wire_bcvnn(config: ModelConfig, specs: list[LayerSpec], leaves: dict[str, Layer]) -> ConvClassifier:
    stack: list[Layer] = []
    blocks = len(config.channels) // 2
    for block in range(1, blocks + 1):
        stack += [leaves[f"block{block}.conv1"], leaves[f"block{block}.conv2"]]
        stack.append(MaxPool2D() if block < blocks else GlobalAvgPool())

    stack.append(leaves["head.dense1"])
    if not config.binary:
        stack.append(Dropout(config.dropout[0], name="head.dropout1"))
    stack.append(leaves["head.dense2"])
    if not config.binary:
        stack.append(Dropout(config.dropout[1], name="head.dropout2"))
    stack.append(leaves["head.out"])
    return ConvClassifier(config, specs, leaves, stack)


def _wire_blm(config: ModelConfig, specs: list[LayerSpec], leaves: dict[str, Layer]) -> LanguageDecoder:
    embed = BembLayer(leaves["embed.token"], leaves["embed.position"])
    blocks = []
    for i in range(1, config.num_blocks + 1):
        p = f"block{i}"
        attention = BatLayer(
            leaves[f"{p}.attn.q"], leaves[f"{p}.attn.k"], leaves[f"{p}.attn.v"], leaves[f"{p}.attn.out"],
            config.num_heads, name=f"{p}.attn",
        )
        blocks.append(BtfBlock(
            attention, leaves[f"{p}.norm1"], leaves[f"{p}.ffn1"], leaves[f"{p}.ffn2"], leaves[f"{p}.norm2"], name=p,
        ))
    head = [leaves["head.mlp1"], leaves["head.mlp2"], leaves["head.out"]]
    return LanguageDecoder(config, specs, leaves, embed, leaves["embed.norm"], blocks, head)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamCount:
    total: int
    per_layer: dict[str, int]


def count_params(model: Model) -> ParamCount:
    """Trainable master scalars per leaf layer.

    Binary normalize layers have no parameters and count as zero.
    """
    per_layer = {name: sum(p.size for p in leaf.parameters()) for name, leaf in model.leaves.items()}
    return ParamCount(total=sum(per_layer.values()), per_layer=per_layer)


@dataclass
class MemorySummary:
    parameters: int
    float_bytes: int
    packed_bytes: int

    @property
    def ratio(self) -> float:
        return self.float_bytes / self.packed_bytes if self.packed_bytes else 0.0


def memory_summary(model: Model) -> MemorySummary:
    """float32 storage of all masters against 1-bit storage of the kernels and biases."""
    total = count_params(model).total
    packed = 0
    for _, layer in model.projections():
        packed += 8 * (word_count(layer.W.size) + word_count(layer.b.size))
    return MemorySummary(parameters=total, float_bytes=4 * total, packed_bytes=packed)
