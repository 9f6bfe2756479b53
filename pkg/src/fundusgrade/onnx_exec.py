"""Minimal ONNX inference: a protobuf wire-format reader plus numpy kernels.

Covers the operator subset found in exported image classifiers
(Conv, BatchNormalization, Relu, MaxPool, AveragePool, GlobalAveragePool,
Gemm, MatMul, Add, Mul, Flatten, Reshape, Concat, Identity, Constant,
Softmax). Graphs whose nodes fall outside this set fail loudly with the
op name. Inference is pure numpy, single-input single-output, CPU only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


# ---------------------------------------------------------------------------
# Protobuf wire format
# ---------------------------------------------------------------------------

def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise InvalidInputError("truncated protobuf varint")
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 70:
            raise InvalidInputError("malformed protobuf varint")


def _signed(value: int) -> int:
    # int64 fields use two's complement varints, no zigzag.
    return value - (1 << 64) if value >= (1 << 63) else value


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value) triples from a message buffer."""
    pos = 0
    n = len(buf)
    while pos < n:
        key, pos = _read_varint(buf, pos)
        number, wire = key >> 3, key & 7
        if wire == 0:  # varint
            value, pos = _read_varint(buf, pos)
        elif wire == 1:  # 64-bit
            value = buf[pos : pos + 8]
            pos += 8
        elif wire == 2:  # length-delimited
            length, pos = _read_varint(buf, pos)
            value = buf[pos : pos + length]
            pos += length
        elif wire == 5:  # 32-bit
            value = buf[pos : pos + 4]
            pos += 4
        else:
            raise InvalidInputError(f"unsupported protobuf wire type {wire}")
        if pos > n:
            raise InvalidInputError("truncated protobuf message")
        yield number, wire, value


def _repeated_int64(existing: list[int], wire: int, value) -> None:
    """Append one unpacked value or a packed run of int64 varints."""
    if wire == 0:
        existing.append(_signed(value))
    else:
        pos = 0
        while pos < len(value):
            item, pos = _read_varint(value, pos)
            existing.append(_signed(item))


_TENSOR_DTYPES = {
    1: np.float32,
    6: np.int32,
    7: np.int64,
    9: np.bool_,
    11: np.float64,
}


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    data_type = 1
    raw: bytes | None = None
    floats: list[float] = []
    int64s: list[int] = []
    int32s: list[int] = []
    name = ""
    for number, wire, value in _iter_fields(buf):
        if number == 1:
            _repeated_int64(dims, wire, value)
        elif number == 2:
            data_type = value
        elif number == 4:  # float_data
            if wire == 5:
                floats.append(struct.unpack("<f", value)[0])
            else:
                floats.extend(np.frombuffer(value, dtype="<f4").tolist())
        elif number == 5:
            _repeated_int64(int32s, wire, value)
        elif number == 7:
            _repeated_int64(int64s, wire, value)
        elif number == 8:
            name = value.decode()
        elif number == 9:
            raw = bytes(value)
    dtype = _TENSOR_DTYPES.get(data_type)
    if dtype is None:
        raise InvalidInputError(f"unsupported tensor data type {data_type}")
    if raw is not None:
        array = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
    elif floats:
        array = np.asarray(floats, dtype=dtype)
    elif int64s:
        array = np.asarray(int64s, dtype=dtype)
    elif int32s:
        array = np.asarray(int32s, dtype=dtype)
    else:
        array = np.zeros(0, dtype=dtype)
    return name, array.reshape(dims) if dims else array


def _parse_attribute(buf: bytes):
    name = ""
    value = None
    ints: list[int] = []
    floats: list[float] = []
    for number, wire, raw in _iter_fields(buf):
        if number == 1:
            name = raw.decode()
        elif number == 2:  # f
            value = struct.unpack("<f", raw)[0]
        elif number == 3:  # i
            value = _signed(raw) if isinstance(raw, int) else raw
        elif number == 4:  # s
            value = bytes(raw)
        elif number == 5:  # t
            value = _parse_tensor(raw)[1]
        elif number == 7:  # floats
            if wire == 5:
                floats.append(struct.unpack("<f", raw)[0])
            else:
                floats.extend(np.frombuffer(raw, dtype="<f4").tolist())
        elif number == 8:  # ints
            _repeated_int64(ints, wire, raw)
    if ints:
        value = ints
    elif floats:
        value = floats
    return name, value


@dataclass(frozen=True)
class Node:
    op_type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    initializers: dict[str, np.ndarray]
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    input_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)


def _parse_value_info(buf: bytes) -> tuple[str, tuple[int, ...]]:
    name = ""
    dims: list[int] = []
    for number, _, value in _iter_fields(buf):
        if number == 1:
            name = value.decode()
        elif number == 2:  # TypeProto
            for n2, _, v2 in _iter_fields(value):
                if n2 != 1:  # tensor_type
                    continue
                for n3, _, v3 in _iter_fields(v2):
                    if n3 != 2:  # shape
                        continue
                    for n4, _, v4 in _iter_fields(v3):
                        if n4 != 1:  # dim
                            continue
                        dim_value = 0
                        for n5, _, v5 in _iter_fields(v4):
                            if n5 == 1:
                                dim_value = v5
                        dims.append(dim_value)
    return name, tuple(dims)


def _parse_node(buf: bytes) -> Node:
    inputs: list[str] = []
    outputs: list[str] = []
    op_type = ""
    attrs: dict = {}
    for number, _, value in _iter_fields(buf):
        if number == 1:
            inputs.append(value.decode())
        elif number == 2:
            outputs.append(value.decode())
        elif number == 4:
            op_type = value.decode()
        elif number == 5:
            name, attr_value = _parse_attribute(value)
            attrs[name] = attr_value
    return Node(op_type=op_type, inputs=tuple(inputs), outputs=tuple(outputs), attrs=attrs)


def load_graph(path: str | Path) -> Graph:
    """Parse an ONNX model file into an executable graph description."""
    buf = Path(path).read_bytes()
    graph_buf = None
    for number, _, value in _iter_fields(buf):
        if number == 7:  # ModelProto.graph
            graph_buf = value
    if graph_buf is None:
        raise InvalidInputError(f"'{path}' contains no graph")

    nodes: list[Node] = []
    initializers: dict[str, np.ndarray] = {}
    inputs: list[tuple[str, tuple[int, ...]]] = []
    outputs: list[str] = []
    for number, _, value in _iter_fields(graph_buf):
        if number == 1:
            nodes.append(_parse_node(value))
        elif number == 5:
            name, array = _parse_tensor(value)
            initializers[name] = array
        elif number == 11:
            inputs.append(_parse_value_info(value))
        elif number == 12:
            outputs.append(_parse_value_info(value)[0])
    feed_inputs = [(n, s) for n, s in inputs if n not in initializers]
    return Graph(
        nodes=tuple(nodes),
        initializers=initializers,
        input_names=tuple(n for n, _ in feed_inputs),
        output_names=tuple(outputs),
        input_shapes={n: s for n, s in feed_inputs},
    )


# ---------------------------------------------------------------------------
# Operator kernels
# ---------------------------------------------------------------------------

def _pair(attr, default) -> tuple[int, int]:
    if attr is None:
        return (default, default)
    return (int(attr[0]), int(attr[1]))


def _conv(node: Node, x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    sh, sw = _pair(node.attrs.get("strides"), 1)
    dh, dw = _pair(node.attrs.get("dilations"), 1)
    pads = node.attrs.get("pads") or [0, 0, 0, 0]
    groups = int(node.attrs.get("group", 1))
    pt, pl, pb, pr = (int(p) for p in pads)

    n, c, h, width = x.shape
    m, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    eff_kh = (kh - 1) * dh + 1
    eff_kw = (kw - 1) * dw + 1
    out_h = (h + pt + pb - eff_kh) // sh + 1
    out_w = (width + pl + pr - eff_kw) // sw + 1

    out = np.zeros((n, m, out_h, out_w), dtype=np.float64)
    mg = m // groups
    for g in range(groups):
        xg = xp[:, g * cg : (g + 1) * cg]
        wg = w[g * mg : (g + 1) * mg]
        acc = np.zeros((n, mg, out_h, out_w), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                patch = xg[
                    :,
                    :,
                    i * dh : i * dh + sh * out_h : sh,
                    j * dw : j * dw + sw * out_w : sw,
                ]
                # (mg, cg) x (n, cg, oh, ow) -> (mg, n, oh, ow)
                acc += np.tensordot(wg[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
        out[:, g * mg : (g + 1) * mg] = acc
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def _pool_output_size(size: int, pad_a: int, pad_b: int, kernel: int, stride: int, ceil_mode: bool) -> int:
    span = size + pad_a + pad_b - kernel
    if ceil_mode:
        return -(-span // stride) + 1
    return span // stride + 1


def _window_reduce(node: Node, x: np.ndarray, kind: str) -> np.ndarray:
    kh, kw = _pair(node.attrs.get("kernel_shape"), 1)
    sh, sw = _pair(node.attrs.get("strides"), 1)
    pads = node.attrs.get("pads") or [0, 0, 0, 0]
    pt, pl, pb, pr = (int(p) for p in pads)
    ceil_mode = bool(node.attrs.get("ceil_mode", 0))
    include_pad = bool(node.attrs.get("count_include_pad", 0))

    n, c, h, w = x.shape
    out_h = _pool_output_size(h, pt, pb, kh, sh, ceil_mode)
    out_w = _pool_output_size(w, pl, pr, kw, sw, ceil_mode)
    # Extra trailing pad so ceil-mode windows stay in bounds.
    need_h = (out_h - 1) * sh + kh
    need_w = (out_w - 1) * sw + kw
    fill = -np.inf if kind == "max" else 0.0
    xp = np.full((n, c, need_h, need_w), fill, dtype=np.float64)
    xp[:, :, pt : pt + h, pl : pl + w] = x

    acc = None
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw]
            if kind == "max":
                acc = patch if acc is None else np.maximum(acc, patch)
            else:
                acc = patch.copy() if acc is None else acc + patch
    if kind == "max":
        return acc
    if include_pad:
        return acc / (kh * kw)
    ones = np.zeros((1, 1, need_h, need_w), dtype=np.float64)
    ones[:, :, pt : pt + h, pl : pl + w] = 1.0
    counts = None
    for i in range(kh):
        for j in range(kw):
            patch = ones[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw]
            counts = patch.copy() if counts is None else counts + patch
    return acc / counts


def _gemm(node: Node, a: np.ndarray, b: np.ndarray, c: np.ndarray | None) -> np.ndarray:
    alpha = float(node.attrs.get("alpha", 1.0))
    beta = float(node.attrs.get("beta", 1.0))
    if node.attrs.get("transA", 0):
        a = a.T
    if node.attrs.get("transB", 0):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return out


def _flatten(node: Node, x: np.ndarray) -> np.ndarray:
    axis = int(node.attrs.get("axis", 1))
    if axis < 0:
        axis += x.ndim
    lead = int(np.prod(x.shape[:axis])) if axis > 0 else 1
    return x.reshape(lead, -1)


def _reshape(x: np.ndarray, shape: np.ndarray) -> np.ndarray:
    target = []
    for i, dim in enumerate(int(d) for d in shape):
        target.append(x.shape[i] if dim == 0 else dim)
    return x.reshape(target)


def _batchnorm(node: Node, x, scale, bias, mean, var) -> np.ndarray:
    eps = float(node.attrs.get("epsilon", 1e-5))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) * scale.reshape(
        shape
    ) + bias.reshape(shape)


def _softmax(node: Node, x: np.ndarray) -> np.ndarray:
    axis = int(node.attrs.get("axis", -1))
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def run_graph(graph: Graph, feeds: dict[str, np.ndarray]) -> np.ndarray:
    """Execute the graph on the given inputs and return its first output."""
    env: dict[str, np.ndarray] = {
        name: np.asarray(arr, dtype=np.float64 if arr.dtype.kind == "f" else arr.dtype)
        for name, arr in graph.initializers.items()
    }
    for name, arr in feeds.items():
        env[name] = np.asarray(arr, dtype=np.float64)

    for node in graph.nodes:
        args = [env[name] if name else None for name in node.inputs]
        op = node.op_type
        if op == "Conv":
            result = _conv(node, args[0], args[1], args[2] if len(args) > 2 else None)
        elif op == "Relu":
            result = np.maximum(args[0], 0)
        elif op == "MaxPool":
            result = _window_reduce(node, args[0], "max")
        elif op == "AveragePool":
            result = _window_reduce(node, args[0], "avg")
        elif op == "GlobalAveragePool":
            result = args[0].mean(axis=(2, 3), keepdims=True)
        elif op == "BatchNormalization":
            result = _batchnorm(node, *args[:5])
        elif op == "Gemm":
            result = _gemm(node, args[0], args[1], args[2] if len(args) > 2 else None)
        elif op == "MatMul":
            result = args[0] @ args[1]
        elif op == "Add":
            result = args[0] + args[1]
        elif op == "Mul":
            result = args[0] * args[1]
        elif op == "Flatten":
            result = _flatten(node, args[0])
        elif op == "Reshape":
            result = _reshape(args[0], args[1])
        elif op == "Concat":
            axis = int(node.attrs["axis"])
            result = np.concatenate(args, axis=axis)
        elif op == "Identity":
            result = args[0]
        elif op == "Constant":
            value = node.attrs.get("value")
            if value is None and "value_float" in node.attrs:
                value = np.asarray(node.attrs["value_float"], dtype=np.float64)
            if value is None and "value_int" in node.attrs:
                value = np.asarray(node.attrs["value_int"], dtype=np.int64)
            if value is None and "value_ints" in node.attrs:
                value = np.asarray(node.attrs["value_ints"], dtype=np.int64)
            if value is None:
                raise InvalidInputError("Constant node without a supported value")
            result = np.asarray(value)
        elif op == "Softmax":
            result = _softmax(node, args[0])
        else:
            raise InvalidInputError(f"unsupported ONNX operator '{op}'")
        env[node.outputs[0]] = result

    out_name = graph.output_names[0]
    if out_name not in env:
        raise InvalidInputError(f"graph produced no value named '{out_name}'")
    return env[out_name]
