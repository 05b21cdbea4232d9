"""Execute an :class:`~nanonet.arch.ArchSpec` forward and backward."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as ops
from .arch import ArchSpec, LayerNode, infer_shapes, validate_and_toposort
from .tensor_ops import LayerParams


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(message)


def init_params(spec: ArchSpec, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, LayerParams]:
    """He-normal weights scaled by fan-in, zero bias."""
    shapes = infer_shapes(spec)
    params = {}
    for n in validate_and_toposort(spec):
        cin = shapes[n.inputs[0]][0] if n.inputs else spec.input_shape[0]
        if n.kind == "conv":
            kh, kw = n.kernel
            wshape = (n.out_channels, cin, kh, kw)
        elif n.kind == "dense":
            wshape = (n.out_channels, cin, 1, 1)
        else:
            continue
        fan_in = int(np.prod(wshape[1:]))
        w = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
        params[n.id] = LayerParams(w.astype(dtype), np.zeros(wshape[0], dtype=dtype))
    return params


def check_params(spec: ArchSpec, params: dict[str, LayerParams]) -> None:
    shapes = infer_shapes(spec)
    for n in spec.nodes:
        if n.kind not in ("conv", "dense"):
            continue
        if n.id not in params:
            raise ops.ShapeError(n.id, "parameters", None, "missing parameters")
        cin = shapes[n.inputs[0]][0] if n.inputs else spec.input_shape[0]
        kh, kw = n.kernel if n.kind == "conv" else (1, 1)
        expected = (n.out_channels, cin, kh, kw)
        if params[n.id].weights.shape != expected:
            raise ops.ShapeError(n.id, expected, params[n.id].weights.shape, "weight shape")


@dataclass
class ForwardCache:
    order: list[LayerNode]
    values: dict[str, np.ndarray] = field(default_factory=dict)
    cols: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


def _inputs_of(node: LayerNode, values, x):
    return [values[s] for s in node.inputs] if node.inputs else [x]


def forward(spec: ArchSpec, params: dict[str, LayerParams], x: np.ndarray,
            order: list[LayerNode] | None = None, keep: bool = True):
    """Run the graph on a batch; returns ``(logits, cache)``.

    ``logits`` has shape (N, K, 1, 1); the softmax itself is applied by the
    loss (or by :func:`predict_proba`).
    """
    ops.check_tensor(x, "input")
    if x.shape[1:] != tuple(spec.input_shape):
        raise ops.ShapeError("input", (x.shape[0],) + tuple(spec.input_shape), x.shape)
    order = order or validate_and_toposort(spec)
    cache = ForwardCache(order, input=x)
    values = cache.values
    # drop activations once their last consumer has run when no backward pass follows
    last_use = {}
    if not keep:
        for k, n in enumerate(order):
            for s in n.inputs:
                last_use[s] = k
    for k, n in enumerate(order):
        ins = _inputs_of(n, values, x)
        if n.kind == "conv":
            out, cols = ops.conv2d_forward(ins[0], params[n.id], n.stride, n.explicit_padding(),
                                           node=n.id, return_cols=True)
            if keep:
                cache.cols[n.id] = cols
        elif n.kind == "relu":
            out = ops.relu(ins[0])
        elif n.kind == "add":
            out = ops.add_merge(ins, node=n.id)
        elif n.kind == "concat":
            out = ops.concat_channels(ins, node=n.id)
        elif n.kind == "global_avg_pool":
            out = ops.global_avg_pool(ins[0])
        elif n.kind == "dense":
            out = ops.dense_forward(ins[0], params[n.id], node=n.id)
        else:  # softmax_head: the affine output passes through as logits
            out = ins[0]
        values[n.id] = out
        if not keep:
            for s in n.inputs:
                if last_use.get(s) == k and s != spec.output_node:
                    values.pop(s, None)
    return values[spec.output_node], cache


def first_nonfinite(cache: ForwardCache) -> str | None:
    for n in cache.order:
        v = cache.values.get(n.id)
        if v is not None and not np.isfinite(v).all():
            return n.id
    return None


def backward(spec: ArchSpec, params: dict[str, LayerParams], cache: ForwardCache,
             grad_logits: np.ndarray) -> dict[str, LayerParams]:
    """Backpropagate ``grad_logits`` through the cached forward pass."""
    values = cache.values
    grads: dict[str, np.ndarray] = {spec.output_node: grad_logits}
    pgrads: dict[str, LayerParams] = {}

    def accumulate(src: str, g: np.ndarray):
        if src in grads:
            grads[src] = grads[src] + g
        else:
            grads[src] = g

    for n in reversed(cache.order):
        g = grads.pop(n.id, None)
        if g is None:
            continue
        ins = _inputs_of(n, values, cache.input)
        if n.kind == "conv":
            gx, gw, gb = ops.conv2d_backward(ins[0], params[n.id], g, n.stride,
                                             n.explicit_padding(), node=n.id,
                                             cols=cache.cols.get(n.id))
            pgrads[n.id] = LayerParams(gw, gb)
            in_grads = [gx]
        elif n.kind == "relu":
            in_grads = [ops.relu_backward(ins[0], g)]
        elif n.kind == "add":
            in_grads = list(ops.add_backward(g, len(ins)))
        elif n.kind == "concat":
            in_grads = ops.concat_backward(g, [v.shape[1] for v in ins])
        elif n.kind == "global_avg_pool":
            in_grads = [ops.global_avg_pool_backward(ins[0].shape, g)]
        elif n.kind == "dense":
            gx, gw, gb = ops.dense_backward(ins[0], params[n.id], g, node=n.id)
            pgrads[n.id] = LayerParams(gw, gb)
            in_grads = [gx]
        else:
            in_grads = [g]
        if n.inputs:
            for src, gi in zip(n.inputs, in_grads):
                accumulate(src, gi)
    for nid, p in params.items():
        if nid not in pgrads:
            pgrads[nid] = LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias))
    return pgrads


def predict_proba(spec: ArchSpec, params: dict[str, LayerParams], x: np.ndarray,
                  batch_size: int = 64, order=None) -> np.ndarray:
    order = order or validate_and_toposort(spec)
    out = []
    for i in range(0, x.shape[0], batch_size):
        logits, _ = forward(spec, params, x[i:i + batch_size], order=order, keep=False)
        out.append(ops.softmax(logits))
    return np.concatenate(out, axis=0)
