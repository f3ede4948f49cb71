"""Dense tensor primitives used by every layer.

A Tensor is a row-major numpy array. Parameters and activations are float32;
gradient checks run the same functions at float64, so every function here
keeps the dtype of its inputs. All functions are pure.
"""

import math

import numpy as np
import numpy.typing as npt
from scipy.special import erf

from binorm.errors import ConfigurationError, DimensionError

Tensor = npt.NDArray[np.floating]

NORM_EPS = 1e-5
ACTIVATIONS = ("linear", "relu", "gelu", "softmax")

_SQRT_HALF = 1.0 / math.sqrt(2.0)


def as_tensor(x: npt.ArrayLike) -> Tensor:
    """Return x as a float array, keeping float64 inputs and defaulting to float32."""
    arr = np.asarray(x)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast.

    Accumulates k = 0..K-1 in order, so every output element sees the same
    additions as a naive triple loop. The packed runtime relies on this order.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch axes do not broadcast: {a.shape} x {b.shape}") from None

    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=np.result_type(a, b))
    for k in range(a.shape[-1]):
        out += a[..., :, k:k + 1] * b[..., k:k + 1, :]
    return out


def im2col(x: Tensor, fh: int, fw: int) -> Tensor:
    """Gather same-padded fh x fw patches of an NHWC tensor.

    Returns:
        Array of shape (n, h, w, fh * fw * c), patch order (dy, dx, channel).
    """
    n, h, w, c = x.shape
    ph, pw = fh // 2, fw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    cols = np.empty((n, h, w, fh, fw, c), dtype=x.dtype)
    for dy in range(fh):
        for dx in range(fw):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n, h, w, fh * fw * c)


def col2im(cols: Tensor, shape: tuple[int, ...], fh: int, fw: int) -> Tensor:
    """Scatter-add patch gradients back onto an NHWC tensor (inverse of im2col)."""
    n, h, w, c = shape
    ph, pw = fh // 2, fw // 2
    cols = cols.reshape(n, h, w, fh, fw, c)

    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=cols.dtype)
    for dy in range(fh):
        for dx in range(fw):
            xp[:, dy:dy + h, dx:dx + w, :] += cols[:, :, :, dy, dx, :]
    return xp[:, ph:ph + h, pw:pw + w, :]


def _check_conv(x: Tensor, kernel: Tensor, bias: Tensor) -> None:
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and 4-d kernel, got {x.shape} and {kernel.shape}")
    fh, fw, c, nf = kernel.shape
    if x.shape[-1] != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if fh % 2 == 0 or fw % 2 == 0:
        raise DimensionError(f"conv2d needs odd filter sizes, got {fh}x{fw}")
    if bias.shape != (nf,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {nf} filters")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, same-padded cross-correlation plus broadcast bias.

    Args:
        x: Input of shape (n, h, w, c).
        kernel: Filters of shape (fh, fw, c, nf), fh and fw odd.
        bias: Bias of shape (nf,).

    Returns:
        Output of shape (n, h, w, nf).
    """
    x, kernel, bias = np.asarray(x), np.asarray(kernel), np.asarray(bias)
    _check_conv(x, kernel, bias)
    fh, fw, c, nf = kernel.shape
    n, h, w, _ = x.shape

    cols = im2col(x, fh, fw).reshape(n * h * w, fh * fw * c)
    z = matmul(cols, kernel.reshape(fh * fw * c, nf))
    return (z + bias).reshape(n, h, w, nf)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over an NHWC tensor."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a rank-4 input, got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: (n, h, w, c) -> (n, c)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a rank-4 input, got {x.shape}")
    return x.mean(axis=(1, 2))


def gelu(x: Tensor) -> Tensor:
    return (0.5 * x * (1.0 + erf(x * _SQRT_HALF))).astype(x.dtype, copy=False)


def softmax(x: Tensor) -> Tensor:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply an activation by name (softmax over the last axis)."""
    x = np.asarray(x)
    if kind == "linear":
        return x
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x)
    raise ConfigurationError(
        f"Unknown activation '{kind}'. Valid: {', '.join(ACTIVATIONS)}"
    )


def feature_axes(x: Tensor, axes: tuple[int, ...] | None) -> tuple[int, ...]:
    """Resolve normalization axes; None means every non-batch axis."""
    if axes is None:
        return tuple(range(1, x.ndim))
    return tuple(a % x.ndim for a in axes)


def normalize_features(
    x: Tensor,
    eps: float = NORM_EPS,
    axes: tuple[int, ...] | None = None,
) -> Tensor:
    """Scale each example to zero mean and unit (population) standard deviation.

    Args:
        x: Input with the batch on axis 0.
        eps: Added to the variance inside the square root.
        axes: Axes that make up one example; defaults to all non-batch axes.
            Sequence models pass (-1,) so that every token is an example.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise DimensionError(f"normalize_features needs a batch axis, got shape {x.shape}")
    axes = feature_axes(x, axes)
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    return centered / np.sqrt(var + eps)
