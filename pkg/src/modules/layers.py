"""Network layers built on the autodiff engine.

Feature maps are channels-last: (batch, height, width, channels). Every layer
also accepts a single unbatched (height, width, channels) map.
"""

from __future__ import annotations

from typing import Sequence, Tuple, Union

import numpy as np
from scipy import special

from .autodiff import Tensor, add, concat, matmul, relu, reshape
from .errors import LabelError, ShapeError

TargetLike = Union[int, Sequence[int], np.ndarray]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding and a per-filter bias.

    Args:
        x (Tensor): Input of shape (B, H, W, C) or (H, W, C).
        w (Tensor): Kernel of shape (kh, kw, C, F).
        b (Tensor): Bias of shape (F,).
        stride (int, optional): Step between output positions.
        padding (int, optional): Zeros added on every spatial border.

    Returns:
        Tensor: Output of shape (B, H', W', F) with H' = floor((H + 2p - kh) / stride) + 1.
    """
    if x.ndim == 3:
        batched = conv2d(reshape(x, (1,) + x.shape), w, b, stride, padding)
        return reshape(batched, batched.shape[1:])
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects (B,H,W,C), (kh,kw,C,F), (F,); got {x.shape}, {w.shape}, {b.shape}")
    batch, height, width, channels = x.shape
    kh, kw, kernel_channels, filters = w.shape
    if kernel_channels != channels or b.shape[0] != filters:
        raise ShapeError(f"kernel {w.shape} and bias {b.shape} do not fit input with {channels} channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {height}x{width} (padding {padding})")

    out_h = conv_output_size(height, kh, stride, padding)
    out_w = conv_output_size(width, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))

    def window(i: int, j: int) -> Tuple[slice, slice, slice, slice]:
        return (
            slice(None),
            slice(i, i + stride * (out_h - 1) + 1, stride),
            slice(j, j + stride * (out_w - 1) + 1, stride),
            slice(None),
        )

    result = np.zeros((batch, out_h, out_w, filters))
    for i in range(kh):
        for j in range(kw):
            result += xp[window(i, j)] @ w.data[i, j]
    result += b.data
    out = Tensor(result, (x, w, b), "conv2d")

    def _backward():
        g = out.grad
        flat_g = g.reshape(-1, filters)
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    dw[i, j] = xp[window(i, j)].reshape(-1, channels).T @ flat_g
            w.accumulate(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[window(i, j)] += g @ w.data[i, j].T
            x.accumulate(dxp[:, padding : padding + height, padding : padding + width, :])
        b.accumulate(flat_g.sum(axis=0))

    out._backward = _backward
    return out


def dense_block(x: Tensor, layers: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    """Concatenative block: each layer sees every earlier feature map.

    Layer i applies relu then a 3x3 pad-1 convolution to the channel
    concatenation of the input and all previous layer outputs; its g output
    channels are appended.

    Args:
        x (Tensor): Input of shape (..., H, W, C).
        layers (Sequence[Tuple[Tensor, Tensor]]): (kernel, bias) per layer, kernel (3, 3, C + i*g, g).

    Returns:
        Tensor: Output with C + d*g channels; `x` itself when there are no layers.
    """
    if not layers:
        return x
    features = [x]
    for w, b in layers:
        joined = features[0] if len(features) == 1 else concat(features, axis=-1)
        if w.shape[:2] != (3, 3) or w.shape[2] != joined.shape[-1]:
            raise ShapeError(f"dense layer kernel {w.shape} does not fit {joined.shape[-1]} input channels")
        features.append(conv2d(relu(joined), w, b, stride=1, padding=1))
    return concat(features, axis=-1)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping `factor` x `factor` average pooling."""
    if x.ndim == 3:
        pooled = avg_pool(reshape(x, (1,) + x.shape), factor)
        return reshape(pooled, pooled.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"pooling expects (B,H,W,C), got {x.shape}")
    batch, height, width, channels = x.shape
    if factor < 1 or height % factor or width % factor:
        raise ShapeError(f"spatial dims {height}x{width} not divisible by pooling factor {factor}")
    blocks = x.data.reshape(batch, height // factor, factor, width // factor, factor, channels)
    out = Tensor(blocks.mean(axis=(2, 4)), (x,), "avg_pool")

    def _backward():
        spread = np.repeat(np.repeat(out.grad, factor, axis=1), factor, axis=2)
        x.accumulate(spread / (factor * factor))

    out._backward = _backward
    return out


def transition_pool(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    return avg_pool(x, 2)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (B, H, W, C) -> (B, C)."""
    if x.ndim == 3:
        return reshape(global_avg_pool(reshape(x, (1,) + x.shape)), (x.shape[-1],))
    if x.ndim != 4:
        raise ShapeError(f"global pooling expects (B,H,W,C), got {x.shape}")
    _, height, width, _ = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)), (x,), "global_avg_pool")

    def _backward():
        x.accumulate(np.broadcast_to(out.grad[:, None, None, :] / (height * width), x.shape))

    out._backward = _backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b for x of shape (B, D) or (D,)."""
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), w, b), (w.shape[1],))
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


def softmax_cross_entropy(logits: Tensor, targets: TargetLike) -> Tuple[np.ndarray, Tensor]:
    """Softmax probabilities and the batch-mean cross-entropy.

    Args:
        logits (Tensor): Scores of shape (B, K) or (K,).
        targets (TargetLike): Class index per row.

    Returns:
        Tuple[np.ndarray, Tensor]: Probabilities (rows sum to 1) and the scalar loss.
    """
    batched = logits.ndim == 2
    z = logits.data if batched else logits.data[None, :]
    classes = np.atleast_1d(np.asarray(targets, dtype=int))
    if logits.ndim not in (1, 2) or classes.shape != (z.shape[0],):
        raise ShapeError(f"targets {classes.shape} do not match logits {logits.shape}")
    if np.any(classes < 0) or np.any(classes >= z.shape[1]):
        raise LabelError(f"target classes {classes.tolist()} outside [0, {z.shape[1] - 1}]")

    rows = np.arange(z.shape[0])
    probs = special.softmax(z, axis=1)
    log_probs = special.log_softmax(z, axis=1)
    out = Tensor(-log_probs[rows, classes].mean(), (logits,), "softmax_cross_entropy")

    def _backward():
        delta = probs.copy()
        delta[rows, classes] -= 1.0
        delta *= out.grad / z.shape[0]
        logits.accumulate(delta if batched else delta[0])

    out._backward = _backward
    return (probs if batched else probs[0]), out


def sigmoid_bce(logits: Tensor, targets: np.ndarray) -> Tuple[np.ndarray, Tensor]:
    """Sigmoid activations and the mean binary cross-entropy over every element.

    The loss is evaluated as log(1 + e^z) - z*t, which stays finite for large |z|.

    Args:
        logits (Tensor): Scores of shape (B, M) or (M,).
        targets (np.ndarray): Binary targets with the logits' shape.

    Returns:
        Tuple[np.ndarray, Tensor]: Activations in (0, 1) and the scalar loss.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    z = logits.data
    activations = special.expit(z)
    out = Tensor(np.mean(np.logaddexp(0.0, z) - z * t), (logits,), "sigmoid_bce")

    def _backward():
        logits.accumulate(out.grad * (activations - t) / z.size)

    out._backward = _backward
    return activations, out

