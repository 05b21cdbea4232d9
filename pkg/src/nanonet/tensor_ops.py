"""Layer primitives operating on dense NCHW numpy arrays.

Every forward op is a pure function of its inputs. Backward ops take the
forward inputs (and optionally cached intermediates) plus the upstream
gradient and return gradients shaped like the forward inputs.

Convolution is cross-correlation (no kernel flip) implemented with im2col.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""

    def __init__(self, node: str | None, expected, got, what: str = "shape"):
        self.node = node
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got) if got is not None else None
        where = f"node {node!r}: " if node else ""
        super().__init__(f"{where}{what} mismatch, expected {self.expected}, got {self.got}")


@dataclass
class LayerParams:
    """Trainable parameters of a conv (Cout,Cin,kh,kw) or dense (out,in,1,1) layer."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def size(self) -> int:
        return int(self.weights.size + self.bias.size)

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.weights.astype(dtype), self.bias.astype(dtype))


def check_tensor(x: np.ndarray, node: str | None = None) -> np.ndarray:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(node, ("N", "C", "H", "W"), x.shape, "rank-4 tensor")
    return x


def conv_output_hw(h: int, w: int, kernel: Sequence[int], stride: Sequence[int],
                   padding: Sequence[int]) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def im2col(x: np.ndarray, kh: int, kw: int, stride, padding) -> np.ndarray:
    """Unfold ``x`` into a (C*kh*kw, N*Ho*Wo) patch matrix.

    Rows are ordered (c, i, j) to match ``weights.reshape(Cout, -1)``; columns
    are ordered (n, oh, ow). Channel-major columns keep every copy below a
    contiguous row move.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, (kh, kw), (sh, sw), (ph, pw))
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, input_shape, kh: int, kw: int, stride, padding) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the input."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = input_shape
    ho, wo = conv_output_hw(h, w, (kh, kw), (sh, sw), (ph, pw))
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, i, j]
    return np.ascontiguousarray(out[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3))


def _pointwise(x: np.ndarray, kh, kw, stride, padding) -> bool:
    return kh == kw == 1 and _pair(stride) == (1, 1) and _pair(padding) == (0, 0)


def _check_conv(x, params, stride, padding, node):
    check_tensor(x, node)
    cout, cin, kh, kw = params.weights.shape
    if x.shape[1] != cin:
        raise ShapeError(node, (x.shape[0], cin, x.shape[2], x.shape[3]), x.shape, "input shape")
    if params.bias.shape != (cout,):
        raise ShapeError(node, (cout,), params.bias.shape, "bias shape")
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], (kh, kw), stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(node, ("Hout>=1", "Wout>=1"), (ho, wo), "output size")
    return cout, cin, kh, kw, ho, wo


def conv2d_forward(x: np.ndarray, params: LayerParams, stride=(1, 1), padding=(0, 0),
                   node: str | None = None, return_cols: bool = False):
    """2-D cross-correlation plus per-channel bias.

    With ``return_cols`` the im2col matrix is returned as well so the caller can
    hand it to :func:`conv2d_backward` instead of recomputing it.
    """
    stride, padding = _pair(stride), _pair(padding)
    cout, _, kh, kw, ho, wo = _check_conv(x, params, stride, padding, node)
    n = x.shape[0]
    if _pointwise(x, kh, kw, stride, padding):
        cols = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
    else:
        cols = im2col(x, kh, kw, stride, padding)
    out = params.weights.reshape(cout, -1) @ cols
    out += params.bias[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray, stride=(1, 1),
                    padding=(0, 0), node: str | None = None, cols: np.ndarray | None = None):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    stride, padding = _pair(stride), _pair(padding)
    cout, _, kh, kw, ho, wo = _check_conv(x, params, stride, padding, node)
    expected = (x.shape[0], cout, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(node, expected, upstream.shape, "upstream gradient shape")
    pointwise = _pointwise(x, kh, kw, stride, padding)
    if cols is None:
        cols = (x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1) if pointwise
                else im2col(x, kh, kw, stride, padding))
    g = upstream.transpose(1, 0, 2, 3).reshape(cout, -1)
    wmat = params.weights.reshape(cout, -1)
    grad_w = (g @ cols.T).reshape(params.weights.shape)
    grad_b = g.sum(axis=1)
    grad_cols = wmat.T @ g
    if pointwise:
        n, c, h, w = x.shape
        grad_x = np.ascontiguousarray(grad_cols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    else:
        grad_x = col2im(grad_cols, x.shape, kh, kw, stride, padding)
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def add_merge(*inputs: np.ndarray, node: str | None = None) -> np.ndarray:
    if len(inputs) == 1 and isinstance(inputs[0], (list, tuple)):
        inputs = tuple(inputs[0])
    first = inputs[0]
    for other in inputs[1:]:
        if other.shape != first.shape:
            raise ShapeError(node, first.shape, other.shape)
    out = first.copy()
    for other in inputs[1:]:
        out += other
    return out


def add_backward(upstream: np.ndarray, n_inputs: int = 2) -> tuple[np.ndarray, ...]:
    return tuple(upstream for _ in range(n_inputs))


def concat_channels(inputs: Sequence[np.ndarray], node: str | None = None) -> np.ndarray:
    first = inputs[0]
    for other in inputs[1:]:
        if other.shape[0] != first.shape[0] or other.shape[2:] != first.shape[2:]:
            raise ShapeError(node, (first.shape[0], "*") + first.shape[2:], other.shape)
    if len(inputs) == 1:
        return first
    return np.concatenate(inputs, axis=1)


def concat_backward(upstream: np.ndarray, channels: Sequence[int]) -> list[np.ndarray]:
    splits = np.cumsum(channels)[:-1]
    return np.split(upstream, splits, axis=1)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(input_shape, upstream: np.ndarray) -> np.ndarray:
    h, w = input_shape[2], input_shape[3]
    return np.broadcast_to(upstream / (h * w), tuple(input_shape)).copy()


def _check_dense(x, params, node):
    check_tensor(x, node)
    if x.shape[2:] != (1, 1):
        raise ShapeError(node, (x.shape[0], x.shape[1], 1, 1), x.shape, "flattened input shape")
    out_f, in_f = params.weights.shape[:2]
    if params.weights.shape[2:] != (1, 1) or x.shape[1] != in_f:
        raise ShapeError(node, (x.shape[0], in_f, 1, 1), x.shape, "input shape")
    return out_f, in_f


def dense_forward(x: np.ndarray, params: LayerParams, node: str | None = None) -> np.ndarray:
    out_f, _ = _check_dense(x, params, node)
    w = params.weights.reshape(out_f, -1)
    y = x.reshape(x.shape[0], -1) @ w.T + params.bias
    return y.reshape(x.shape[0], out_f, 1, 1)


def dense_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray,
                   node: str | None = None):
    out_f, _ = _check_dense(x, params, node)
    if upstream.shape != (x.shape[0], out_f, 1, 1):
        raise ShapeError(node, (x.shape[0], out_f, 1, 1), upstream.shape, "upstream gradient shape")
    g = upstream.reshape(x.shape[0], out_f)
    xf = x.reshape(x.shape[0], -1)
    w = params.weights.reshape(out_f, -1)
    grad_x = (g @ w).reshape(x.shape)
    grad_w = (g.T @ xf).reshape(params.weights.shape)
    return grad_x, grad_w, g.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels, class_weights: np.ndarray | None = None):
    """Mean categorical cross-entropy over the batch.

    Returns ``(loss, grad_logits, probs)`` with ``grad_logits`` shaped like
    ``logits`` and ``probs`` of shape (N, K).
    """
    n = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    k = int(np.prod(logits.shape[1:]))
    if labels.shape != (n,):
        raise ShapeError("softmax_xent", (n,), labels.shape, "label count")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {k})")
    z = logits.reshape(n, k)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    nll = -logp[rows, labels]
    grad = probs.copy()
    grad[rows, labels] -= 1
    if class_weights is None:
        loss = nll.mean()
        grad /= n
    else:
        wt = np.asarray(class_weights, dtype=logits.dtype)[labels]
        loss = (wt * nll).sum() / wt.sum()
        grad *= (wt / wt.sum())[:, None]
    return float(loss), grad.reshape(logits.shape).astype(logits.dtype, copy=False), probs
