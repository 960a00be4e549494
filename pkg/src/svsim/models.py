"""DNN graph representation, builtin benchmark models, and UMF conversion.

Graphs are immutable DAGs of operation layers.  Only shapes are modeled;
weight values never exist (timing and scheduling depend on sizes alone).
Tensor ids follow a fixed convention so frames can be decoded without
carrying explicit output ids:

    weights / biases     1 .. 0x7fff, in declaration order
    external inputs      0x8000 + input index
    layer outputs        ((layer_id + 1) << 16) | output slot

A decoder resolves an activation reference above 0xffff back to its
producing layer, and recovers every shape by re-running the same shape
inference the builder used (the wire carries only op parameters, never
intermediate shapes).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

from .umf import (Attr, DataPacket, DataType, FrameHeader, InfoPacket, OpType,
                  PacketType, Precision, TensorKind, UmfFrame, make_attrs)

EXTERNAL_ID_BASE = 0x8000
_ACT_ID_SHIFT = 16

MATRIX_OPS = frozenset({OpType.CONV, OpType.GEMM, OpType.MATMUL})
VECTOR_COMPUTE_OPS = frozenset({OpType.POOL, OpType.SOFTMAX, OpType.LAYERNORM,
                                OpType.ACTIVATION, OpType.ELEMENTWISE_ADD})
DATA_OPS = frozenset({OpType.RESHAPE, OpType.CONCAT, OpType.TRANSPOSE})
COMPUTE_OPS = MATRIX_OPS | VECTOR_COMPUTE_OPS


class ModelClass(Enum):
    CNN = "cnn"
    TRANSFORMER = "transformer"


class ModelError(Exception):
    pass


class SchemaError(ModelError):
    pass


class CycleDetected(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class UnknownModel(ModelError):
    pass


class DanglingTensorRef(ModelError):
    pass


class WrongPacketType(ModelError):
    pass


@dataclass(frozen=True)
class TensorInfo:
    tensor_id: int
    kind: TensorKind
    shape: tuple[int, ...]
    precision: Precision
    bias: bool = False

    @property
    def elements(self) -> int:
        return math.prod(self.shape)

    @property
    def byte_size(self) -> int:
        return self.elements * self.precision.width


@dataclass(frozen=True)
class LayerNode:
    layer_id: int
    name: str
    op: OpType
    inputs: tuple[TensorInfo, ...]
    outputs: tuple[TensorInfo, ...]
    attrs: dict
    predecessors: tuple[int, ...]

    @property
    def weight_inputs(self) -> tuple[TensorInfo, ...]:
        return tuple(t for t in self.inputs if t.kind == TensorKind.WEIGHT)

    @property
    def activation_inputs(self) -> tuple[TensorInfo, ...]:
        return tuple(t for t in self.inputs if t.kind == TensorKind.ACTIVATION)


@dataclass(frozen=True)
class ModelGraph:
    name: str
    model_class: ModelClass
    precision: Precision
    inputs: tuple[TensorInfo, ...]
    layers: tuple[LayerNode, ...]

    @property
    def total_param_bytes(self) -> int:
        return sum(t.byte_size for l in self.layers for t in l.weight_inputs)

    @property
    def total_macs(self) -> int:
        return sum(layer_macs(l) for l in self.layers)

    def layer(self, layer_id: int) -> LayerNode:
        return self.layers[layer_id]


def layer_macs(layer: LayerNode) -> int:
    """Multiply-accumulate count of a matrix layer, 0 for everything else."""
    if layer.op not in MATRIX_OPS:
        return 0
    m, k, n, groups = matrix_dims(layer)
    return m * k * n * groups


def layer_flops(layer: LayerNode) -> int:
    return 2 * layer_macs(layer)


def matrix_dims(layer: LayerNode) -> tuple[int, int, int, int]:
    """(M, K, N, groups) of the product a matrix layer lowers to.

    Conv lowers to an im2col product: M = output positions, K = flattened
    kernel volume and N = output channels, per group.
    """
    if layer.op == OpType.CONV:
        x = layer.activation_inputs[0].shape
        batch = x[0] if len(x) == 4 else 1
        out = layer.outputs[0].shape
        spatial = out[-2] * out[-1]
        cin = x[-3]
        g = layer.attrs.get("groups", 1)
        k = layer.attrs["kernel"]
        f = out[-3]
        return batch * spatial, (cin // g) * k * k, f // g, g
    if layer.op in (OpType.GEMM, OpType.MATMUL):
        a = layer.activation_inputs[0].shape
        out = layer.outputs[0].shape
        m = math.prod(a[:-1]) if len(a) > 1 else 1
        return m, a[-1], out[-1], 1
    raise ShapeMismatch(f"{layer.op.name} has no matrix form")


# ---------------------------------------------------------------------------
# shape inference

def _conv_spatial(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeMismatch(
            f"kernel {kernel}/stride {stride}/padding {padding} does not fit "
            f"input extent {size}")
    return out


def infer_output_shape(op: OpType, in_shapes: list[tuple[int, ...]],
                       attrs: dict) -> tuple[int, ...]:
    """Output shape of a layer given its activation input shapes."""
    x = in_shapes[0]
    if op == OpType.CONV:
        if len(x) not in (3, 4):
            raise ShapeMismatch(f"Conv input must be (C,H,W) or (B,C,H,W), got {x}")
        k, s, p = attrs["kernel"], attrs.get("stride", 1), attrs.get("padding", 0)
        f = attrs["out_features"]
        g = attrs.get("groups", 1)
        if x[-3] % g or f % g:
            raise ShapeMismatch(f"channels {x[-3]}->{f} not divisible by groups {g}")
        h, w = _conv_spatial(x[-2], k, s, p), _conv_spatial(x[-1], k, s, p)
        return x[:-3] + (f, h, w)
    if op == OpType.GEMM:
        return x[:-1] + (attrs["out_features"],)
    if op == OpType.MATMUL:
        if "out_features" in attrs:
            return x[:-1] + (attrs["out_features"],)
        b = in_shapes[1]
        if len(x) != 2 or len(b) != 2 or x[1] != b[0]:
            raise ShapeMismatch(f"MatMul inner dims disagree: {x} x {b}")
        return (x[0], b[1])
    if op == OpType.POOL:
        if len(x) not in (3, 4):
            raise ShapeMismatch(f"Pool input must be (C,H,W) or (B,C,H,W), got {x}")
        k = attrs["kernel"]
        s = attrs.get("stride", k)
        p = attrs.get("padding", 0)
        return x[:-2] + (_conv_spatial(x[-2], k, s, p), _conv_spatial(x[-1], k, s, p))
    if op in (OpType.SOFTMAX, OpType.LAYERNORM, OpType.ACTIVATION):
        return x
    if op == OpType.ELEMENTWISE_ADD:
        if in_shapes[0] != in_shapes[1]:
            raise ShapeMismatch(f"Add operands differ: {in_shapes[0]} vs {in_shapes[1]}")
        return x
    if op == OpType.RESHAPE:
        target = tuple(attrs["target"])
        if math.prod(target) != math.prod(x):
            raise ShapeMismatch(f"Reshape {x} -> {target} changes element count")
        return target
    if op == OpType.CONCAT:
        axis = attrs.get("axis", 0)
        base = list(x)
        for other in in_shapes[1:]:
            if len(other) != len(x) or any(
                    other[i] != x[i] for i in range(len(x)) if i != axis):
                raise ShapeMismatch(f"Concat shapes incompatible: {in_shapes}")
            base[axis] += other[axis]
        return tuple(base)
    if op == OpType.TRANSPOSE:
        perm = tuple(attrs["perm"])
        if sorted(perm) != list(range(len(x))):
            raise ShapeMismatch(f"bad permutation {perm} for shape {x}")
        return tuple(x[i] for i in perm)
    raise SchemaError(f"unhandled op {op}")


def infer_weight_shapes(op: OpType, in_shapes: list[tuple[int, ...]],
                        attrs: dict, with_bias: bool) -> list[tuple[tuple[int, ...], bool]]:
    """[(shape, is_bias)] of the parameter tensors a layer owns."""
    x = in_shapes[0]
    if op == OpType.CONV:
        f, k = attrs["out_features"], attrs["kernel"]
        g = attrs.get("groups", 1)
        shapes = [((f, x[-3] // g, k, k), False)]
        if with_bias:
            shapes.append(((f,), True))
        return shapes
    if op == OpType.GEMM or (op == OpType.MATMUL and "out_features" in attrs):
        n = attrs["out_features"]
        shapes = [((x[-1], n), False)]
        if with_bias:
            shapes.append(((n,), True))
        return shapes
    if op == OpType.LAYERNORM:
        # per-channel scale/shift on feature maps, per-feature on sequences
        d = x[0] if len(x) >= 3 else x[-1]
        return [((d,), False), ((d,), True)]
    return []


# ---------------------------------------------------------------------------
# graph construction

class GraphBuilder:
    """Incrementally builds a validated ModelGraph in topological order."""

    def __init__(self, name: str, model_class: ModelClass, precision: Precision):
        self.name = name
        self.model_class = model_class
        self.precision = precision
        self._inputs: list[TensorInfo] = []
        self._layers: list[LayerNode] = []
        self._next_weight_id = 1
        self._producer: dict[int, int] = {}  # activation tensor_id -> layer_id

    def input(self, shape: tuple[int, ...]) -> TensorInfo:
        t = TensorInfo(EXTERNAL_ID_BASE + len(self._inputs), TensorKind.ACTIVATION,
                       tuple(shape), self.precision)
        self._inputs.append(t)
        return t

    def _weight(self, shape: tuple[int, ...], is_bias: bool) -> TensorInfo:
        if self._next_weight_id >= EXTERNAL_ID_BASE:
            raise SchemaError("too many weight tensors for the id space")
        t = TensorInfo(self._next_weight_id, TensorKind.WEIGHT, tuple(shape),
                       self.precision, bias=is_bias)
        self._next_weight_id += 1
        return t

    def layer(self, op: OpType, acts: list[TensorInfo], attrs: dict | None = None,
              with_bias: bool = False, name: str | None = None) -> TensorInfo:
        attrs = dict(attrs or {})
        layer_id = len(self._layers)
        in_shapes = [t.shape for t in acts]
        out_shape = infer_output_shape(op, in_shapes, attrs)
        weights = [self._weight(s, b)
                   for s, b in infer_weight_shapes(op, in_shapes, attrs, with_bias)]
        out = TensorInfo(((layer_id + 1) << _ACT_ID_SHIFT), TensorKind.ACTIVATION,
                         out_shape, self.precision)
        preds = tuple(sorted({self._producer[t.tensor_id] for t in acts
                              if t.tensor_id in self._producer}))
        # out_features is derivable from the output shape; keep attrs minimal
        attrs.pop("out_features", None)
        node = LayerNode(layer_id, name or f"layer{layer_id}", op,
                         tuple(acts) + tuple(weights), (out,), attrs, preds)
        self._layers.append(node)
        self._producer[out.tensor_id] = layer_id
        return out

    # convenience wrappers used by the builtin definitions
    def conv(self, x, out_channels, kernel, stride=1, padding=0, groups=1,
             bias=True, name=None):
        return self.layer(OpType.CONV, [x],
                          {"kernel": kernel, "stride": stride, "padding": padding,
                           "groups": groups, "out_features": out_channels},
                          with_bias=bias, name=name)

    def gemm(self, x, out_features, bias=True, name=None):
        return self.layer(OpType.GEMM, [x], {"out_features": out_features},
                          with_bias=bias, name=name)

    def matmul(self, a, b, name=None):
        return self.layer(OpType.MATMUL, [a, b], name=name)

    def pool(self, x, kernel, stride=None, padding=0, name=None):
        return self.layer(OpType.POOL, [x],
                          {"kernel": kernel, "stride": stride or kernel,
                           "padding": padding}, name=name)

    def softmax(self, x, name=None):
        return self.layer(OpType.SOFTMAX, [x], name=name)

    def layer_norm(self, x, name=None):
        return self.layer(OpType.LAYERNORM, [x], name=name)

    def activation(self, x, name=None):
        return self.layer(OpType.ACTIVATION, [x], name=name)

    def add(self, a, b, name=None):
        return self.layer(OpType.ELEMENTWISE_ADD, [a, b], name=name)

    def reshape(self, x, target, name=None):
        return self.layer(OpType.RESHAPE, [x], {"target": tuple(target)}, name=name)

    def flatten(self, x, name=None):
        if len(x.shape) == 4:
            return self.reshape(x, (x.shape[0], math.prod(x.shape[1:])), name=name)
        return self.reshape(x, (math.prod(x.shape),), name=name)

    def concat(self, xs, axis=0, name=None):
        return self.layer(OpType.CONCAT, list(xs), {"axis": axis}, name=name)

    def transpose(self, x, perm, name=None):
        return self.layer(OpType.TRANSPOSE, [x], {"perm": tuple(perm)}, name=name)

    def build(self) -> ModelGraph:
        g = ModelGraph(self.name, self.model_class, self.precision,
                       tuple(self._inputs), tuple(self._layers))
        validate_graph(g)
        return g


def validate_graph(graph: ModelGraph) -> None:
    known_acts = {t.tensor_id for t in graph.inputs}
    for i, layer in enumerate(graph.layers):
        if layer.layer_id != i:
            raise SchemaError(f"layer ids must be dense, got {layer.layer_id} at {i}")
        if any(p >= i for p in layer.predecessors):
            raise CycleDetected(f"layer {layer.name} depends on a later layer")
        acts = layer.activation_inputs
        if layer.op in COMPUTE_OPS and not acts:
            raise SchemaError(f"{layer.name}: compute op without activation input")
        for t in acts:
            if t.tensor_id not in known_acts:
                raise DanglingTensorRef(
                    f"{layer.name}: unknown activation ref {t.tensor_id}")
        if layer.op in (OpType.CONV, OpType.GEMM) and not layer.weight_inputs:
            raise SchemaError(f"{layer.name}: {layer.op.name} needs a weight input")
        if layer.op == OpType.MATMUL and not layer.weight_inputs and len(acts) != 2:
            raise SchemaError(f"{layer.name}: MatMul needs a weight or two activations")
        for t in layer.inputs + layer.outputs:
            if not t.shape or t.byte_size <= 0:
                raise ShapeMismatch(f"{layer.name}: degenerate tensor shape {t.shape}")
        want = infer_output_shape(layer.op, [t.shape for t in acts], _full_attrs(layer))
        if want != layer.outputs[0].shape:
            raise ShapeMismatch(
                f"{layer.name}: output shape {layer.outputs[0].shape}, expected {want}")
        for t in layer.outputs:
            known_acts.add(t.tensor_id)


def _full_attrs(layer: LayerNode) -> dict:
    """Layer attrs plus the out_features implied by the output shape."""
    attrs = dict(layer.attrs)
    if layer.op == OpType.CONV:
        attrs["out_features"] = layer.outputs[0].shape[-3]
    elif layer.op == OpType.GEMM or (layer.op == OpType.MATMUL and layer.weight_inputs):
        attrs["out_features"] = layer.outputs[0].shape[-1]
    return attrs


def structure_signature(graph: ModelGraph):
    """Canonical structural form: everything except display names."""
    def tsig(t: TensorInfo):
        return (t.tensor_id, int(t.kind), t.shape, int(t.precision), t.bias)
    return (graph.model_class, int(graph.precision),
            tuple(tsig(t) for t in graph.inputs),
            tuple((l.layer_id, int(l.op), tuple(sorted(l.attrs.items())),
                   tuple(tsig(t) for t in l.inputs),
                   tuple(tsig(t) for t in l.outputs), l.predecessors)
                  for l in graph.layers))


def structure_equal(a: ModelGraph, b: ModelGraph) -> bool:
    return structure_signature(a) == structure_signature(b)


# ---------------------------------------------------------------------------
# text-format ingestion

_OP_NAMES = {
    "conv": OpType.CONV, "gemm": OpType.GEMM, "matmul": OpType.MATMUL,
    "pool": OpType.POOL, "softmax": OpType.SOFTMAX, "layernorm": OpType.LAYERNORM,
    "activation": OpType.ACTIVATION, "elementwiseadd": OpType.ELEMENTWISE_ADD,
    "add": OpType.ELEMENTWISE_ADD, "reshape": OpType.RESHAPE,
    "concat": OpType.CONCAT, "transpose": OpType.TRANSPOSE,
}

_ATTR_KEYS = ("kernel", "stride", "padding", "groups", "out_features", "axis",
              "perm", "target")


def ingest_graph(text) -> ModelGraph:
    """Build a graph from the JSON model description.

    Expected document shape::

        {"name": ..., "class": "cnn"|"transformer", "precision": "int8",
         "inputs": [{"name": ..., "shape": [...]}],
         "layers": [{"name": ..., "op": ..., "inputs": [names],
                     "kernel": ..., "stride": ..., "bias": true, ...}]}

    Layers may reference any other layer by name; the list is topologically
    sorted during ingestion.
    """
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}") from None
    else:
        doc = text
    if not isinstance(doc, dict):
        raise SchemaError("model description must be a JSON object")
    for key in ("name", "inputs", "layers"):
        if key not in doc:
            raise SchemaError(f"missing required key {key!r}")

    specs = []
    names = set()
    for i, spec in enumerate(doc["layers"]):
        if not isinstance(spec, dict) or "op" not in spec or "inputs" not in spec:
            raise SchemaError(f"layer {i}: needs 'op' and 'inputs'")
        op_name = str(spec["op"]).lower()
        if op_name not in _OP_NAMES:
            raise SchemaError(f"layer {i}: unknown op {spec['op']!r}")
        name = spec.get("name", f"layer{i}")
        if name in names:
            raise SchemaError(f"duplicate layer name {name!r}")
        names.add(name)
        specs.append((name, _OP_NAMES[op_name], spec))

    input_names = []
    input_shapes = {}
    for spec in doc["inputs"]:
        if "name" not in spec or "shape" not in spec:
            raise SchemaError("graph inputs need 'name' and 'shape'")
        input_names.append(spec["name"])
        input_shapes[spec["name"]] = tuple(int(d) for d in spec["shape"])

    # topological sort over name references (forward references allowed)
    by_name = {name: (name, op, spec) for name, op, spec in specs}
    for name, _, spec in specs:
        for ref in spec["inputs"]:
            if ref not in by_name and ref not in input_shapes:
                raise SchemaError(f"layer {name!r}: unknown input {ref!r}")
    order: list[str] = []
    state: dict[str, int] = {}  # 1 visiting, 2 done

    def visit(name: str, stack: list[str]):
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            raise CycleDetected(" -> ".join(stack + [name]))
        state[name] = 1
        for ref in by_name[name][2]["inputs"]:
            if ref in by_name:
                visit(ref, stack + [name])
        state[name] = 2
        order.append(name)

    for name, _, _ in specs:
        visit(name, [])

    mclass = _parse_class(doc.get("class"), (op for _, op, _ in specs))
    precision = _parse_precision(doc.get("precision"), mclass)
    b = GraphBuilder(str(doc["name"]), mclass, precision)
    produced: dict[str, TensorInfo] = {n: b.input(input_shapes[n]) for n in input_names}
    for name in order:
        _, op, spec = by_name[name]
        acts = [produced[ref] for ref in spec["inputs"]]
        attrs = {k: (tuple(spec[k]) if isinstance(spec[k], list) else int(spec[k]))
                 for k in _ATTR_KEYS if k in spec}
        try:
            produced[name] = b.layer(op, acts, attrs,
                                     with_bias=bool(spec.get("bias", False)), name=name)
        except KeyError as e:
            raise SchemaError(f"layer {name!r}: missing attribute {e}") from None
    return b.build()


def _parse_class(value, ops) -> ModelClass:
    if value is not None:
        try:
            return ModelClass(str(value).lower())
        except ValueError:
            raise SchemaError(f"unknown model class {value!r}") from None
    ops = set(ops)
    return ModelClass.CNN if (OpType.CONV in ops or OpType.POOL in ops) \
        else ModelClass.TRANSFORMER


def _parse_precision(value, mclass: ModelClass) -> Precision:
    if value is None:
        return Precision.INT8 if mclass == ModelClass.CNN else Precision.FP16
    try:
        return Precision[str(value).upper()]
    except KeyError:
        raise SchemaError(f"unknown precision {value!r}") from None


# ---------------------------------------------------------------------------
# builtin benchmark models

CNN_MODELS = ("resnet50", "vgg16", "mobilenetv2", "alexnet")
TRANSFORMER_MODELS = ("bert_base", "bert_large", "gpt2", "gpt2_medium")
BUILTIN_MODELS = CNN_MODELS + TRANSFORMER_MODELS


def builtin_model(name: str, size: int | None = None, *, batch: int = 1,
                  depth_reduction: int = 1, precision: Precision | None = None) -> ModelGraph:
    """Shape table of a published architecture as a schedulable graph.

    ``size`` is the image edge for CNNs (default 224) and the sequence
    length for transformers (default 128).  ``depth_reduction`` divides the
    repeat count of repeated stages/blocks (never touching layer shapes) so
    big models stay cheap to simulate.  Transformers are single forward
    passes at batch 1.
    """
    key = name.lower()
    if key not in _BUILDERS:
        raise UnknownModel(f"unknown builtin model {name!r} "
                           f"(available: {', '.join(BUILTIN_MODELS)})")
    if depth_reduction < 1:
        raise SchemaError("depth_reduction must be >= 1")
    if batch < 1:
        raise SchemaError("batch must be >= 1")
    if key in TRANSFORMER_MODELS and batch != 1:
        raise SchemaError("transformer builtins run at batch 1")
    return _BUILDERS[key](size, batch, depth_reduction, precision)


def _repeat(count: int, k: int) -> int:
    return max(1, count // k)


def _cnn_builder(name):
    def outer(fn):
        def build(size, batch, k, precision):
            img = size or 224
            b = GraphBuilder(name, ModelClass.CNN, precision or Precision.INT8)
            shape = (batch, 3, img, img) if batch > 1 else (3, img, img)
            fn(b, b.input(shape), k)
            return b.build()
        _BUILDERS[name] = build
        return fn
    return outer


_BUILDERS: dict = {}


@_cnn_builder("alexnet")
def _alexnet(b, x, k):
    x = b.conv(x, 96, 11, stride=4, padding=2, name="conv1")
    x = b.activation(x)
    x = b.pool(x, 3, stride=2)
    x = b.conv(x, 256, 5, padding=2, name="conv2")
    x = b.activation(x)
    x = b.pool(x, 3, stride=2)
    x = b.conv(x, 384, 3, padding=1, name="conv3")
    x = b.activation(x)
    if k == 1:  # conv4 repeats conv3's 384-channel shape
        x = b.conv(x, 384, 3, padding=1, name="conv4")
        x = b.activation(x)
    x = b.conv(x, 256, 3, padding=1, name="conv5")
    x = b.activation(x)
    x = b.pool(x, 3, stride=2)
    x = b.flatten(x)
    x = b.gemm(x, 4096, name="fc6")
    x = b.activation(x)
    if k == 1:
        x = b.gemm(x, 4096, name="fc7")
        x = b.activation(x)
    x = b.gemm(x, 1000, name="fc8")
    b.softmax(x)


@_cnn_builder("vgg16")
def _vgg16(b, x, k):
    for stage, (ch, n) in enumerate(((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))):
        for i in range(1 + (n - 1) // k):
            x = b.conv(x, ch, 3, padding=1, name=f"conv{stage + 1}_{i + 1}")
            x = b.activation(x)
        x = b.pool(x, 2, stride=2)
    x = b.flatten(x)
    x = b.gemm(x, 4096, name="fc1")
    x = b.activation(x)
    if k == 1:
        x = b.gemm(x, 4096, name="fc2")
        x = b.activation(x)
    x = b.gemm(x, 1000, name="fc3")
    b.softmax(x)


@_cnn_builder("resnet50")
def _resnet50(b, x, k):
    def block(x, mid, out, stride, downsample, tag):
        y = b.conv(x, mid, 1, bias=False, name=f"{tag}_c1")
        y = b.layer_norm(y)
        y = b.activation(y)
        y = b.conv(y, mid, 3, stride=stride, padding=1, bias=False, name=f"{tag}_c2")
        y = b.layer_norm(y)
        y = b.activation(y)
        y = b.conv(y, out, 1, bias=False, name=f"{tag}_c3")
        y = b.layer_norm(y)
        if downsample:
            x = b.conv(x, out, 1, stride=stride, bias=False, name=f"{tag}_down")
            x = b.layer_norm(x)
        y = b.add(y, x)
        return b.activation(y)

    x = b.conv(x, 64, 7, stride=2, padding=3, bias=False, name="stem")
    x = b.layer_norm(x)
    x = b.activation(x)
    x = b.pool(x, 3, stride=2, padding=1)
    for stage, (mid, out, n, stride) in enumerate(
            ((64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2))):
        for i in range(_repeat(n, k)):
            x = block(x, mid, out, stride if i == 0 else 1, i == 0,
                      f"s{stage + 1}b{i + 1}")
    x = b.pool(x, x.shape[-1])  # global average pool
    x = b.flatten(x)
    x = b.gemm(x, 1000, name="fc")
    b.softmax(x)


@_cnn_builder("mobilenetv2")
def _mobilenetv2(b, x, k):
    def block(x, expand, out, stride, tag):
        cin = x.shape[-3]
        y = x
        if expand != 1:
            y = b.conv(y, cin * expand, 1, bias=False, name=f"{tag}_expand")
            y = b.layer_norm(y)
            y = b.activation(y)
        y = b.conv(y, cin * expand, 3, stride=stride, padding=1,
                   groups=cin * expand, bias=False, name=f"{tag}_dw")
        y = b.layer_norm(y)
        y = b.activation(y)
        y = b.conv(y, out, 1, bias=False, name=f"{tag}_project")
        y = b.layer_norm(y)
        if stride == 1 and cin == out:
            y = b.add(y, x)
        return y

    x = b.conv(x, 32, 3, stride=2, padding=1, bias=False, name="stem")
    x = b.layer_norm(x)
    x = b.activation(x)
    for stage, (t, c, n, s) in enumerate(
            ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
             (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))):
        for i in range(_repeat(n, k)):
            x = block(x, t, c, s if i == 0 else 1, f"s{stage + 1}b{i + 1}")
    x = b.conv(x, 1280, 1, bias=False, name="head")
    x = b.layer_norm(x)
    x = b.activation(x)
    x = b.pool(x, x.shape[-1])
    x = b.flatten(x)
    x = b.gemm(x, 1000, name="fc")
    b.softmax(x)


def _transformer_block(b: GraphBuilder, x, hidden: int, ffn: int, tag: str):
    # attention is modeled at whole-matrix granularity; heads are folded into
    # the hidden dimension, which preserves MAC and element counts
    q = b.gemm(x, hidden, name=f"{tag}_q")
    kk = b.gemm(x, hidden, name=f"{tag}_k")
    v = b.gemm(x, hidden, name=f"{tag}_v")
    kt = b.transpose(kk, (1, 0))
    scores = b.matmul(q, kt, name=f"{tag}_qk")
    probs = b.softmax(scores)
    ctx = b.matmul(probs, v, name=f"{tag}_av")
    proj = b.gemm(ctx, hidden, name=f"{tag}_proj")
    x = b.add(proj, x)
    x = b.layer_norm(x)
    f = b.gemm(x, ffn, name=f"{tag}_ffn1")
    f = b.activation(f)
    f = b.gemm(f, hidden, name=f"{tag}_ffn2")
    x = b.add(f, x)
    return b.layer_norm(x)


def _transformer_builder(name, hidden, blocks, ffn, lm_vocab=None):
    def build(size, batch, k, precision):
        seq = size or 128
        b = GraphBuilder(name, ModelClass.TRANSFORMER, precision or Precision.FP16)
        x = b.input((seq, hidden))
        for i in range(_repeat(blocks, k)):
            x = _transformer_block(b, x, hidden, ffn, f"blk{i + 1}")
        if lm_vocab:
            x = b.gemm(x, lm_vocab, bias=False, name="lm_head")
            b.softmax(x)
        return b.build()
    _BUILDERS[name] = build


_transformer_builder("bert_base", 768, 12, 3072)
_transformer_builder("bert_large", 1024, 24, 4096)
_transformer_builder("gpt2", 768, 12, 3072, lm_vocab=50257)
_transformer_builder("gpt2_medium", 1024, 24, 4096, lm_vocab=50257)


# ---------------------------------------------------------------------------
# UMF conversion

def _encode_attrs(layer: LayerNode, graph: ModelGraph) -> tuple[tuple[Attr, int], ...]:
    attrs: dict[Attr, int] = {}
    a = layer.attrs
    if "kernel" in a:
        attrs[Attr.KERNEL] = a["kernel"]
    if "stride" in a:
        attrs[Attr.STRIDE] = a["stride"]
    if "padding" in a:
        attrs[Attr.PADDING] = a["padding"]
    if layer.op == OpType.CONV:
        attrs[Attr.GROUPS] = a.get("groups", 1)
        attrs[Attr.OUT_FEATURES] = layer.outputs[0].shape[-3]
    elif layer.op == OpType.GEMM or (layer.op == OpType.MATMUL and layer.weight_inputs):
        attrs[Attr.OUT_FEATURES] = layer.outputs[0].shape[-1]
    if "axis" in a:
        attrs[Attr.AXIS] = a["axis"]
    if "perm" in a:
        packed = 0
        for i, p in enumerate(a["perm"]):
            packed |= p << (4 * i)
        attrs[Attr.PERM] = packed
    if "target" in a:
        for i, d in enumerate(a["target"]):
            attrs[Attr(int(Attr.TARGET_DIM0) + i)] = d
    ext_ids = {t.tensor_id for t in graph.inputs}
    ext = [t for t in layer.activation_inputs if t.tensor_id in ext_ids]
    if ext:
        for i, d in enumerate(ext[0].shape):
            attrs[Attr(int(Attr.INPUT_DIM0) + i)] = d
    return make_attrs(attrs)


def to_umf(graph: ModelGraph, *, user_id: int = 0, transaction_id: int = 0,
           model_id: int = 0, include_payloads: bool = False) -> UmfFrame:
    """Pack a graph into a model-load frame, one info packet per layer."""
    info = []
    data = []
    for layer in graph.layers:
        inputs = tuple((t.tensor_id, t.kind) for t in layer.inputs)
        info.append(InfoPacket(layer.layer_id, layer.op, inputs,
                               len(layer.outputs), _encode_attrs(layer, graph)))
        for t in layer.weight_inputs:
            data.append(DataPacket(
                t.tensor_id, DataType.BIAS if t.bias else DataType.WEIGHT,
                t.precision, t.byte_size,
                bytes(t.byte_size) if include_payloads else None))
    header = FrameHeader(PacketType.MODEL_LOAD, user_id, transaction_id, model_id)
    return UmfFrame(header, tuple(info), tuple(data))


def from_umf(frame: UmfFrame) -> ModelGraph:
    """Rebuild a graph from a model-load frame.

    Shapes are reconstructed by re-running shape inference over the packet
    stream; weight byte sizes are cross-checked against the data packets.
    """
    if PacketType(frame.header.packet_type) != PacketType.MODEL_LOAD:
        raise WrongPacketType(
            f"expected MODEL_LOAD, got {PacketType(frame.header.packet_type).name}")
    data_by_id = {p.tensor_id: p for p in frame.data_packets}
    precisions = [Precision(p.precision) for p in frame.data_packets]
    precision = (max(set(precisions), key=precisions.count) if precisions
                 else Precision.INT8)

    ops = [OpType(p.op_type) for p in frame.info_packets]
    mclass = _parse_class(None, ops)
    graph_inputs: dict[int, TensorInfo] = {}
    produced: dict[int, TensorInfo] = {}
    layers: list[LayerNode] = []

    for pkt in frame.info_packets:
        wire = pkt.attr_dict()
        acts: list[TensorInfo] = []
        weights: list[TensorInfo] = []
        for ref, kind in pkt.inputs:
            if kind == TensorKind.WEIGHT:
                if ref not in data_by_id:
                    raise DanglingTensorRef(
                        f"layer {pkt.layer_id}: weight {ref} has no data packet")
                weights.append(ref)  # shapes resolved after inference
            elif ref >= (1 << _ACT_ID_SHIFT):
                if ref not in produced:
                    raise DanglingTensorRef(
                        f"layer {pkt.layer_id}: activation {ref} has no producer")
                acts.append(produced[ref])
            else:
                if ref not in graph_inputs:
                    dims = tuple(wire[Attr(int(Attr.INPUT_DIM0) + i)]
                                 for i in range(4)
                                 if Attr(int(Attr.INPUT_DIM0) + i) in wire)
                    if not dims:
                        raise DanglingTensorRef(
                            f"layer {pkt.layer_id}: external input {ref} "
                            f"carries no shape attributes")
                    graph_inputs[ref] = TensorInfo(ref, TensorKind.ACTIVATION,
                                                   dims, precision)
                acts.append(graph_inputs[ref])

        attrs: dict = {}
        infer_attrs: dict = {}
        for key, abit in (("kernel", Attr.KERNEL), ("stride", Attr.STRIDE),
                          ("padding", Attr.PADDING), ("axis", Attr.AXIS)):
            if abit in wire:
                attrs[key] = infer_attrs[key] = wire[abit]
        if Attr.GROUPS in wire:
            attrs["groups"] = infer_attrs["groups"] = wire[Attr.GROUPS]
        if Attr.OUT_FEATURES in wire:
            infer_attrs["out_features"] = wire[Attr.OUT_FEATURES]
        if Attr.PERM in wire:
            nd = len(acts[0].shape)
            perm = tuple((wire[Attr.PERM] >> (4 * i)) & 0xF for i in range(nd))
            attrs["perm"] = infer_attrs["perm"] = perm
        target = tuple(wire[Attr(int(Attr.TARGET_DIM0) + i)] for i in range(4)
                       if Attr(int(Attr.TARGET_DIM0) + i) in wire)
        if target:
            attrs["target"] = infer_attrs["target"] = target

        op = OpType(pkt.op_type)
        in_shapes = [t.shape for t in acts]
        out_shape = infer_output_shape(op, in_shapes, infer_attrs)
        w_shapes = infer_weight_shapes(op, in_shapes, infer_attrs,
                                       with_bias=len(weights) > 1)
        if len(w_shapes) != len(weights):
            raise ShapeMismatch(
                f"layer {pkt.layer_id}: expected {len(w_shapes)} weight tensors, "
                f"frame carries {len(weights)}")
        weight_infos = []
        for ref, (shape, is_bias) in zip(weights, w_shapes):
            d = data_by_id[ref]
            t = TensorInfo(ref, TensorKind.WEIGHT, shape, Precision(d.precision),
                           bias=is_bias)
            if t.byte_size != d.payload_size:
                raise ShapeMismatch(
                    f"layer {pkt.layer_id}: weight {ref} carries {d.payload_size} B, "
                    f"inferred shape {shape} needs {t.byte_size} B")
            weight_infos.append(t)

        out = TensorInfo((pkt.layer_id + 1) << _ACT_ID_SHIFT, TensorKind.ACTIVATION,
                         out_shape, precision)
        preds = tuple(sorted({(t.tensor_id >> _ACT_ID_SHIFT) - 1 for t in acts
                              if t.tensor_id >= (1 << _ACT_ID_SHIFT)}))
        layers.append(LayerNode(pkt.layer_id, f"layer{pkt.layer_id}", op,
                                tuple(acts) + tuple(weight_infos), (out,),
                                attrs, preds))
        produced[out.tensor_id] = layers[-1].outputs[0]

    graph = ModelGraph(f"model_{frame.header.model_id}", mclass, precision,
                       tuple(t for _, t in sorted(graph_inputs.items())),
                       tuple(layers))
    validate_graph(graph)
    return graph
