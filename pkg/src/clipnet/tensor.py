"""Dense tensors with reverse-mode autograd on an explicit tape.

The tape is rebuilt for every forward pass: leaves are attached with
``Tensor.attach(tape)``, every differentiable op appends one node, and
``backward(loss)`` walks the node list in reverse append order (which is
a valid topological order by construction).
"""

import struct

import numpy as np

from .errors import ContractError, DimensionError, FormatError, ParameterError

FLOAT_DTYPES = (np.float32, np.float64)

# Shared dtype codes for the TNSR and FSEQ binary formats.
DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

_TNSR_MAGIC = b"TNSR"


class Node:
    """One tape entry: the op kind, parent nodes, and a backward closure.

    ``backward_fn(grad_out)`` returns one gradient array per parent (or
    None for parents that do not need a gradient). Leaves have no closure.
    """

    __slots__ = ("tape", "index", "op", "parents", "backward_fn", "shape", "grad")

    def __init__(self, tape, index, op, parents, backward_fn, shape):
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.shape = shape
        self.grad = None


class Tape:
    """Append-only record of one forward pass; append order is topological."""

    def __init__(self):
        self.nodes = []

    def add_node(self, op, parents, backward_fn, shape):
        for p in parents:
            if p.tape is not self:
                raise ContractError(f"op '{op}' mixes tensors from different tapes")
        node = Node(self, len(self.nodes), op, tuple(parents), backward_fn, shape)
        self.nodes.append(node)
        return node


class Tensor:
    """N-dimensional row-major array, optionally linked to a tape node.

    dtype is float32 or float64 for anything arithmetic touches; uint8 is
    allowed as a storage-only dtype for raw pixel payloads.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPE_CODES:
            raise ParameterError(
                f"unsupported tensor dtype {arr.dtype}; expected float32, float64, or uint8"
            )
        # ascontiguousarray would promote 0-d to 1-d; 0-d is already contiguous.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        """Gradient array accumulated by the last backward(), or None."""
        return self.node.grad if self.node is not None else None

    def attach(self, tape):
        """Register this tensor as a leaf on ``tape`` and return self."""
        _require_float(self, "attach")
        self.node = tape.add_node("leaf", (), None, self.data.shape)
        return self

    def detach(self):
        """Return a view of the same data with no tape linkage."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.node = None
        return out

    def detach_(self):
        self.node = None
        return self

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype))

    def copy(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f", op={self.node.op!r}" if self.node is not None else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{tag})"

    # -- arithmetic (same shape, same dtype; broadcasting is out of scope) --

    def __add__(self, other):
        _check_binary(self, other, "add")
        out_data = self.data + other.data
        return make_op_output(
            "add",
            out_data,
            (self, other),
            lambda g: (g, g),
        )

    def __sub__(self, other):
        _check_binary(self, other, "sub")
        out_data = self.data - other.data
        return make_op_output(
            "sub",
            out_data,
            (self, other),
            lambda g: (g, -g),
        )

    def __neg__(self):
        _require_float(self, "neg")
        return make_op_output("neg", -self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        _check_binary(self, other, "mul")
        a, b = self.data, other.data
        return make_op_output(
            "mul",
            a * b,
            (self, other),
            lambda g: (g * b, g * a),
        )

    def sum(self):
        """Full reduction to a scalar tensor."""
        _require_float(self, "sum")
        data = self.data
        out_data = np.asarray(data.sum(), dtype=data.dtype)
        return make_op_output(
            "sum",
            out_data,
            (self,),
            lambda g: (np.full(data.shape, g, dtype=data.dtype),),
        )

    def reshape(self, shape):
        _require_float(self, "reshape")
        in_shape = self.data.shape
        out_data = self.data.reshape(shape)
        return make_op_output(
            "reshape",
            out_data,
            (self,),
            lambda g: (g.reshape(in_shape),),
        )

    def transpose(self, axes):
        _require_float(self, "transpose")
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out_data = np.ascontiguousarray(self.data.transpose(axes))
        return make_op_output(
            "transpose",
            out_data,
            (self,),
            lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        )


def _require_float(t, op):
    if t.data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DimensionError(f"op '{op}' requires a float tensor, got dtype {t.data.dtype}")


def _check_binary(a, b, op):
    if not isinstance(b, Tensor):
        raise ContractError(f"op '{op}' expects a Tensor operand, got {type(b).__name__}")
    _require_float(a, op)
    if a.data.dtype != b.data.dtype:
        raise DimensionError(
            f"op '{op}' dtype mismatch: {a.data.dtype} vs {b.data.dtype}"
        )
    if a.data.shape != b.data.shape:
        axis = _first_mismatched_axis(a.data.shape, b.data.shape)
        raise DimensionError(
            f"op '{op}' shape mismatch at axis {axis}: {a.data.shape} vs {b.data.shape}"
        )


def _first_mismatched_axis(sa, sb):
    if len(sa) != len(sb):
        return min(len(sa), len(sb))
    for i, (x, y) in enumerate(zip(sa, sb)):
        if x != y:
            return i
    return 0


def make_op_output(op, out_data, inputs, backward_fn):
    """Wrap ``out_data`` in a Tensor; append a tape node iff any input has one.

    ``backward_fn`` receives the output gradient and must return one array
    (or None) per tracked input, in the same order as ``inputs``.
    """
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data)
    out.data = out_data if out_data.ndim == 0 else np.ascontiguousarray(out_data)
    out.node = None
    parents = [t.node for t in inputs if t.node is not None]
    if parents:
        tape = parents[0].tape
        tracked = tuple(t.node is not None for t in inputs)

        def dispatch(grad_out, backward_fn=backward_fn, tracked=tracked):
            grads = backward_fn(grad_out)
            return tuple(g for g, keep in zip(grads, tracked) if keep)

        out.node = tape.add_node(op, parents, dispatch, out.data.shape)
    return out


def backward(loss):
    """Reverse-accumulate gradients of a scalar loss over its tape.

    Returns a map {node -> Tensor gradient}; nodes unreachable from the
    loss get no entry. Each reachable tensor's ``grad`` is also populated.
    """
    if not isinstance(loss, Tensor) or loss.node is None:
        raise ContractError("backward() needs a tape-linked loss tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {tuple(loss.data.shape)}")
    tape = loss.node.tape
    for node in tape.nodes:
        node.grad = None
    seed = np.ones_like(loss.data)
    loss.node.grad = seed
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = node.grad
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        if len(parent_grads) != len(node.parents):
            raise ContractError(
                f"op '{node.op}' returned {len(parent_grads)} gradients for {len(node.parents)} parents"
            )
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            pg = np.asarray(pg)
            if pg.shape != parent.shape:
                raise ContractError(
                    f"op '{node.op}' produced a gradient of shape {pg.shape} "
                    f"for a parent of shape {parent.shape}"
                )
            if parent.grad is None:
                parent.grad = pg.copy()
            else:
                parent.grad += pg
    return {node: Tensor(node.grad) for node in tape.nodes if node.grad is not None}


# -- binary serialization (magic "TNSR", little-endian) ----------------------


def tensor_to_bytes(t):
    """Serialize: magic, u8 dtype code, u8 rank, u32 extents, raw payload."""
    data = t.data if t.data.ndim == 0 else np.ascontiguousarray(t.data)
    if data.ndim > 255:
        raise FormatError("tensor rank exceeds the u8 rank field")
    header = _TNSR_MAGIC + struct.pack("<BB", DTYPE_CODES[data.dtype], data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    payload = data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + payload


def tensor_from_bytes(buf, offset=0):
    """Parse one serialized tensor; returns (Tensor, next_offset)."""
    if buf[offset : offset + 4] != _TNSR_MAGIC:
        raise FormatError(f"bad tensor magic at byte {offset}")
    offset += 4
    if len(buf) < offset + 2:
        raise FormatError(f"truncated tensor header at byte {offset}")
    code, rank = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte {offset - 2}")
    if len(buf) < offset + 4 * rank:
        raise FormatError(f"truncated extents at byte {offset}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise FormatError(
            f"truncated payload at byte {offset}: need {nbytes} bytes, have {len(buf) - offset}"
        )
    data = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
    offset += nbytes
    out = Tensor(data.astype(dtype).reshape(shape))
    return out, offset


def write_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"trailing bytes after tensor payload at byte {end}")
    return t
