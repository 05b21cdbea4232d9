"""Architecture graphs: validation, shape inference, accounting, file format.

An :class:`ArchSpec` is an ordered list of :class:`LayerNode` objects forming a
DAG. Exactly one node has no inputs; it reads the network input. The output
node is a ``softmax_head``.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Iterable

from .tensor_ops import conv_output_hw

KINDS = ("conv", "relu", "add", "concat", "global_avg_pool", "dense", "softmax_head")
PARAM_KINDS = ("conv", "dense")
MERGE_KINDS = ("add", "concat")
PADDINGS = ("same", "valid")
FORMAT_VERSION = 1

_NODE_KEYS = {"id", "kind", "kernel", "out_channels", "stride", "padding", "inputs"}
_TOP_KEYS = {"v", "name", "input_shape", "nodes", "output_node"}


class ArchError(ValueError):
    """Structural problem with an architecture graph."""


class CycleError(ArchError):
    def __init__(self, member: str):
        self.member = member
        super().__init__(f"graph has a cycle through node {member!r}")


class DanglingEdgeError(ArchError):
    def __init__(self, src: str, dst: str):
        self.edge = (src, dst)
        super().__init__(f"edge {src!r} -> {dst!r} references unknown node {src!r}")


class MergeShapeError(ArchError):
    def __init__(self, node: str, shapes: dict):
        self.node = node
        self.shapes = shapes
        desc = ", ".join(f"{k}={v}" for k, v in shapes.items())
        super().__init__(f"node {node!r}: incompatible input shapes ({desc})")


class ArchParseError(ArchError):
    def __init__(self, message: str, location: str = "$"):
        self.location = location
        super().__init__(f"{location}: {message}")


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    kernel: tuple[int, int] | None = None
    out_channels: int | None = None
    stride: tuple[int, int] | None = None
    padding: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchError(f"node {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind in PARAM_KINDS:
            if self.out_channels is None or int(self.out_channels) < 1:
                raise ArchError(f"node {self.id!r}: {self.kind} needs positive out_channels")
        elif self.out_channels is not None:
            raise ArchError(f"node {self.id!r}: out_channels only valid on conv/dense")
        if self.kind == "conv":
            kernel = tuple(int(k) for k in (self.kernel or ()))
            if len(kernel) != 2 or min(kernel) < 1:
                raise ArchError(f"node {self.id!r}: conv needs a positive (kh, kw) kernel")
            stride = tuple(int(s) for s in (self.stride or (1, 1)))
            if len(stride) != 2 or min(stride) < 1:
                raise ArchError(f"node {self.id!r}: stride must be a positive pair")
            padding = self.padding or "same"
            if padding not in PADDINGS:
                raise ArchError(f"node {self.id!r}: padding must be one of {PADDINGS}")
            if padding == "same" and (kernel[0] % 2 == 0 or kernel[1] % 2 == 0):
                raise ArchError(f"node {self.id!r}: 'same' padding needs odd kernel dims")
            object.__setattr__(self, "kernel", kernel)
            object.__setattr__(self, "stride", stride)
            object.__setattr__(self, "padding", padding)
        elif self.kernel is not None or self.stride is not None or self.padding is not None:
            raise ArchError(f"node {self.id!r}: kernel/stride/padding only valid on conv")
        if self.kind in MERGE_KINDS and len(self.inputs) < 2:
            raise ArchError(f"node {self.id!r}: {self.kind} needs at least 2 inputs")
        if self.kind not in MERGE_KINDS and len(self.inputs) > 1:
            raise ArchError(f"node {self.id!r}: {self.kind} takes exactly one input")

    def explicit_padding(self) -> tuple[int, int]:
        if self.padding == "same":
            return self.kernel[0] // 2, self.kernel[1] // 2
        return 0, 0


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]
    nodes: tuple[LayerNode, ...]
    output_node: str

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def by_id(self) -> dict[str, LayerNode]:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src in out:
                    out[src].append(n.id)
        return out

    def with_nodes(self, nodes: Iterable[LayerNode], name: str | None = None) -> "ArchSpec":
        return replace(self, nodes=tuple(nodes), name=self.name if name is None else name)

    def content_hash(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()


@dataclass
class ArchStats:
    param_count: int
    mac_count: int
    per_node: dict[str, dict] = field(default_factory=dict)


def validate_and_toposort(spec: ArchSpec) -> list[LayerNode]:
    """Check graph integrity and return nodes in a topological order.

    Ties are broken by declaration order, so an already-sorted spec comes back
    unchanged.
    """
    ids = [n.id for n in spec.nodes]
    seen = set()
    for i in ids:
        if i in seen:
            raise ArchError(f"duplicate node id {i!r}")
        seen.add(i)
    by_id = spec.by_id
    for n in spec.nodes:
        for src in n.inputs:
            if src not in by_id:
                raise DanglingEdgeError(src, n.id)
    position = {nid: k for k, nid in enumerate(ids)}
    indeg = {n.id: len(set(n.inputs)) for n in spec.nodes}
    consumers = spec.consumers()
    order: list[LayerNode] = []
    heap = [(position[i], i) for i, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    while heap:
        _, nid = heapq.heappop(heap)
        order.append(by_id[nid])
        for c in dict.fromkeys(consumers[nid]):
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, (position[c], c))
    if len(order) != len(spec.nodes):
        remaining = [i for i in ids if indeg[i] > 0]
        raise CycleError(_find_cycle_member(spec, set(remaining)))
    sources = [n.id for n in spec.nodes if not n.inputs]
    if len(sources) != 1:
        raise ArchError(f"expected exactly one source node, found {sources}")
    if spec.output_node not in by_id:
        raise ArchError(f"output node {spec.output_node!r} does not exist")
    if by_id[spec.output_node].kind != "softmax_head":
        raise ArchError(f"output node {spec.output_node!r} must be a softmax_head")
    return order


def _find_cycle_member(spec: ArchSpec, candidates: set[str]) -> str:
    by_id = spec.by_id
    for start in sorted(candidates):
        # walk backwards along inputs inside the unresolved set until a repeat
        path, cur = [], start
        while cur not in path:
            path.append(cur)
            nxt = [s for s in by_id[cur].inputs if s in candidates]
            if not nxt:
                break
            cur = nxt[0]
        else:
            return cur
    return sorted(candidates)[0]


def infer_shapes(spec: ArchSpec) -> dict[str, tuple[int, int, int]]:
    """Map every node id to its output (C, H, W)."""
    shapes: dict[str, tuple[int, int, int]] = {}
    for n in validate_and_toposort(spec):
        ins = [shapes[s] for s in n.inputs] if n.inputs else [spec.input_shape]
        c, h, w = ins[0]
        if n.kind == "conv":
            ho, wo = conv_output_hw(h, w, n.kernel, n.stride, n.explicit_padding())
            if ho < 1 or wo < 1:
                raise MergeShapeError(n.id, {"input": (c, h, w)})
            shapes[n.id] = (n.out_channels, ho, wo)
        elif n.kind == "add":
            if any(s != ins[0] for s in ins):
                raise MergeShapeError(n.id, dict(zip(n.inputs, ins)))
            shapes[n.id] = ins[0]
        elif n.kind == "concat":
            if any(s[1:] != (h, w) for s in ins):
                raise MergeShapeError(n.id, dict(zip(n.inputs, ins)))
            shapes[n.id] = (sum(s[0] for s in ins), h, w)
        elif n.kind == "global_avg_pool":
            shapes[n.id] = (c, 1, 1)
        elif n.kind == "dense":
            if (h, w) != (1, 1):
                raise MergeShapeError(n.id, {n.inputs[0] if n.inputs else "input": (c, h, w)})
            shapes[n.id] = (n.out_channels, 1, 1)
        else:  # relu, softmax_head
            shapes[n.id] = (c, h, w)
    return shapes


def count_params(spec: ArchSpec) -> ArchStats:
    shapes = infer_shapes(spec)
    total_p = total_m = 0
    per_node = {}
    for n in spec.nodes:
        cin = shapes[n.inputs[0]][0] if n.inputs else spec.input_shape[0]
        if n.kind == "conv":
            kh, kw = n.kernel
            cout, ho, wo = shapes[n.id]
            p = kh * kw * cin * cout + cout
            m = kh * kw * cin * cout * ho * wo
        elif n.kind == "dense":
            p = cin * n.out_channels + n.out_channels
            m = cin * n.out_channels
        else:
            p = m = 0
        per_node[n.id] = {"params": p, "macs": m, "shape": shapes[n.id]}
        total_p += p
        total_m += m
    return ArchStats(total_p, total_m, per_node)


def node_depths(spec: ArchSpec) -> dict[str, int]:
    """Longest-path depth of each node from the source."""
    depth: dict[str, int] = {}
    for n in validate_and_toposort(spec):
        depth[n.id] = 1 + max((depth[s] for s in n.inputs), default=-1)
    return depth


# --------------------------------------------------------------------------
# file format

def spec_to_dict(spec: ArchSpec) -> dict:
    nodes = []
    for n in spec.nodes:
        d = {"id": n.id, "kind": n.kind}
        if n.kernel is not None:
            d["kernel"] = list(n.kernel)
        if n.out_channels is not None:
            d["out_channels"] = n.out_channels
        if n.stride is not None:
            d["stride"] = list(n.stride)
        if n.padding is not None:
            d["padding"] = n.padding
        d["inputs"] = list(n.inputs)
        nodes.append(d)
    return {"v": FORMAT_VERSION, "name": spec.name, "input_shape": list(spec.input_shape),
            "nodes": nodes, "output_node": spec.output_node}


def serialize(spec: ArchSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=1, sort_keys=False) + "\n"


def _int_list(value, length: int, loc: str) -> tuple[int, ...]:
    if (not isinstance(value, list) or len(value) != length
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        raise ArchParseError(f"expected a list of {length} integers", loc)
    return tuple(value)


def spec_from_dict(doc) -> ArchSpec:
    if not isinstance(doc, dict):
        raise ArchParseError("document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ArchParseError(f"unknown key(s) {sorted(unknown)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise ArchParseError(f"missing key(s) {sorted(missing)}")
    if doc["v"] != FORMAT_VERSION:
        raise ArchParseError(f"unsupported format version {doc['v']!r}", "$.v")
    if not isinstance(doc["name"], str):
        raise ArchParseError("name must be a string", "$.name")
    input_shape = _int_list(doc["input_shape"], 3, "$.input_shape")
    if not isinstance(doc["nodes"], list):
        raise ArchParseError("nodes must be a list", "$.nodes")
    nodes, seen = [], set()
    for k, nd in enumerate(doc["nodes"]):
        loc = f"$.nodes[{k}]"
        if not isinstance(nd, dict):
            raise ArchParseError("node must be an object", loc)
        unknown = set(nd) - _NODE_KEYS
        if unknown:
            raise ArchParseError(f"unknown key(s) {sorted(unknown)}", loc)
        for key in ("id", "kind", "inputs"):
            if key not in nd:
                raise ArchParseError(f"missing key {key!r}", loc)
        if not isinstance(nd["id"], str) or not nd["id"]:
            raise ArchParseError("id must be a non-empty string", loc + ".id")
        if nd["id"] in seen:
            raise ArchParseError(f"duplicate node id {nd['id']!r}", loc + ".id")
        seen.add(nd["id"])
        if nd["kind"] not in KINDS:
            raise ArchParseError(f"unknown kind {nd['kind']!r}", loc + ".kind")
        inputs = nd["inputs"]
        if not isinstance(inputs, list) or not all(isinstance(s, str) for s in inputs):
            raise ArchParseError("inputs must be a list of node ids", loc + ".inputs")
        kwargs = {}
        if "kernel" in nd:
            kwargs["kernel"] = _int_list(nd["kernel"], 2, loc + ".kernel")
        if "stride" in nd:
            kwargs["stride"] = _int_list(nd["stride"], 2, loc + ".stride")
        if "out_channels" in nd:
            oc = nd["out_channels"]
            if not isinstance(oc, int) or isinstance(oc, bool):
                raise ArchParseError("out_channels must be an integer", loc + ".out_channels")
            kwargs["out_channels"] = oc
        if "padding" in nd:
            kwargs["padding"] = nd["padding"]
        try:
            nodes.append(LayerNode(id=nd["id"], kind=nd["kind"], inputs=tuple(inputs), **kwargs))
        except ArchError as exc:
            raise ArchParseError(str(exc), loc) from None
    if not isinstance(doc["output_node"], str):
        raise ArchParseError("output_node must be a string", "$.output_node")
    return ArchSpec(doc["name"], input_shape, tuple(nodes), doc["output_node"])


def deserialize(text: str) -> ArchSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return spec_from_dict(doc)


def load_spec(path) -> ArchSpec:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())


def save_spec(spec: ArchSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(spec))


# --------------------------------------------------------------------------
# reference architectures

@dataclass(frozen=True)
class _Plan:
    widths: tuple[int, int, int]
    extra_blocks: tuple[int, int, int]


REFERENCE_PLANS = {
    "nano_b_like": _Plan(widths=(16, 32, 64), extra_blocks=(0, 0, 0)),
    "nano_a_like": _Plan(widths=(24, 40, 64), extra_blocks=(0, 0, 1)),
}


class _Builder:
    def __init__(self):
        self.nodes: list[LayerNode] = []

    def conv(self, nid, src, cout, k=3, s=1):
        self.nodes.append(LayerNode(nid, "conv", (src,) if src else (), kernel=(k, k),
                                    out_channels=cout, stride=(s, s), padding="same"))
        return nid

    def op(self, nid, kind, *srcs, **kw):
        self.nodes.append(LayerNode(nid, kind, tuple(srcs), **kw))
        return nid


def build_reference(variant: str = "nano_b_like", input_size: int = 48,
                    num_classes: int = 7) -> ArchSpec:
    """Reconstructed compact residual network with 1x1 channel mixers.

    Three resolution stages (full, 1/2, 1/4). Stage 1 is a stem conv plus one
    residual block. Stages 2 and 3 open with a stride-2 conv ``t`` followed by
    a 3x3 conv ``a``; a 1x1 mixer consumes concat(t, a), feeds the next 3x3
    conv ``b`` and also jumps straight to the stage's closing merge
    add(t, b, mixer).
    """
    if variant not in REFERENCE_PLANS:
        raise ValueError(f"unknown reference variant {variant!r}")
    plan = REFERENCE_PLANS[variant]
    b = _Builder()
    c1, c2, c3 = plan.widths

    x = b.op("stem_relu", "relu", b.conv("stem", None, c1))
    x = _residual_block(b, "s1b0", x, c1)
    for k in range(plan.extra_blocks[0]):
        x = _residual_block(b, f"s1b{k + 1}", x, c1)

    for stage, width in ((2, c2), (3, c3)):
        p = f"s{stage}"
        t = b.op(f"{p}_t_relu", "relu", b.conv(f"{p}_t", x, width, s=2))
        a = b.op(f"{p}_a_relu", "relu", b.conv(f"{p}_a", t, width))
        cat = b.op(f"{p}_cat", "concat", t, a)
        mix = b.conv(f"{p}_mix", cat, width, k=1)
        conv_b = b.conv(f"{p}_b", mix, width)
        x = b.op(f"{p}_out", "relu", b.op(f"{p}_add", "add", t, conv_b, mix))
        for k in range(plan.extra_blocks[stage - 1]):
            x = _residual_block(b, f"{p}b{k + 1}", x, width)

    gap = b.op("gap", "global_avg_pool", x)
    fc = b.op("fc", "dense", gap, out_channels=num_classes)
    b.op("head", "softmax_head", fc)
    return ArchSpec(variant, (1, input_size, input_size), tuple(b.nodes), "head")


def _residual_block(b: _Builder, prefix: str, x: str, width: int) -> str:
    h = b.op(f"{prefix}_c1_relu", "relu", b.conv(f"{prefix}_c1", x, width))
    h = b.conv(f"{prefix}_c2", h, width)
    return b.op(f"{prefix}_relu", "relu", b.op(f"{prefix}_add", "add", x, h))
