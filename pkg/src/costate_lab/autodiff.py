"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations while it is the active tape of the
current thread.  Operations on :class:`Tensor` values outside any tape just
compute values.  Backward sweeps accept a stack of cotangents along a leading
axis, so a full Jacobian costs one sweep rather than one per output row.

Every VJP rule below receives the cotangent with that leading seed axis, i.e.
an array of shape ``(n_seeds,) + node_shape``.
"""

import threading

import numpy as np

from costate_lab import _accel

DENSE_ROW_GUARD = 4096


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally bound to a node on a tape."""

    __slots__ = ("data", "node", "tape")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor
    __array_priority__ = 100.0

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Node:
    __slots__ = ("id", "op", "inputs", "saved", "attrs", "shape", "out")

    def __init__(self, nid, op, inputs, saved, attrs, out):
        self.id = nid
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.attrs = attrs
        self.out = out
        self.shape = out.shape


class Gradients:
    """Adjoint map returned by a backward sweep."""

    def __init__(self, tape, adjoints, batched):
        self._tape = tape
        self._adj = adjoints
        self.batched = batched

    def __contains__(self, t):
        return _node_id(t) in self._adj

    def __getitem__(self, t):
        nid = _node_id(t)
        g = self._adj.get(nid)
        if g is None:
            shape = self._tape.nodes[nid].shape
            nb = self._nb if self.batched else None
            return np.zeros(((nb,) if nb is not None else ()) + shape)
        return g if self.batched else g[0]

    @property
    def _nb(self):
        for g in self._adj.values():
            return g.shape[0]
        return 1

    def items(self):
        for nid, g in self._adj.items():
            yield nid, (g if self.batched else g[0])


def _node_id(t):
    if isinstance(t, Tensor):
        if t.node is None:
            raise TapeError("tensor is not recorded on a tape")
        return t.node
    return int(t)


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None):
        out = np.array(value, dtype=np.float64)
        _check_finite(out, "leaf")
        node = Node(len(self.nodes), "leaf", (), None, {"name": name}, out)
        self.nodes.append(node)
        return Tensor(out, node.id, self)

    def record(self, op_kind, inputs, **attrs):
        return _apply(op_kind, inputs, attrs, self)

    # ---------------------------------------------------------------- sweeps

    def _relevant(self, seed_id, wrt):
        mark = bytearray(seed_id + 1)
        mark[seed_id] = 1
        nodes = self.nodes
        for nid in range(seed_id, -1, -1):
            if mark[nid]:
                for i in nodes[nid].inputs:
                    if i is not None:
                        mark[i] = 1
        if wrt is None:
            return mark
        lo = min(wrt)
        desc = bytearray(seed_id + 1)
        for w in wrt:
            if w <= seed_id:
                desc[w] = 1
        for nid in range(lo, seed_id + 1):
            if not desc[nid]:
                for i in nodes[nid].inputs:
                    if i is not None and desc[i]:
                        desc[nid] = 1
                        break
        return bytearray(a & b for a, b in zip(mark, desc))

    def backward(self, seed, seed_value=None, wrt=None, batched=False):
        """Reverse sweep from ``seed``.

        ``seed_value`` defaults to ones.  With ``batched=True`` it carries a
        leading axis of independent cotangents and every returned adjoint keeps
        that axis.  ``wrt`` (tensors or node ids) prunes the sweep to paths that
        reach those nodes; adjoints elsewhere are then not computed.
        """
        sid = _node_id(seed)
        if sid >= len(self.nodes):
            raise TapeError(f"seed node {sid} not on this tape")
        shape = self.nodes[sid].shape
        if seed_value is None:
            sv = np.ones((1,) + shape)
        else:
            sv = np.asarray(seed_value, dtype=np.float64)
            if not batched:
                if sv.shape != shape:
                    raise ShapeError(f"seed value shape {sv.shape} != node shape {shape}")
                sv = sv[None]
            elif sv.shape[1:] != shape:
                raise ShapeError(f"batched seed shape {sv.shape} does not end in {shape}")
        wrt_ids = None if wrt is None else [_node_id(w) for w in wrt]
        rel = self._relevant(sid, wrt_ids)
        adj = {sid: sv}
        nodes = self.nodes
        for nid in range(sid, -1, -1):
            g = adj.get(nid)
            if g is None or not rel[nid]:
                continue
            node = nodes[nid]
            if node.op == "leaf" or not node.inputs:
                continue
            need = [i is not None and rel[i] for i in node.inputs]
            if not any(need):
                continue
            rule = _OPS[node.op][1]
            ins = [nodes[i].out if i is not None else c for i, c in zip(node.inputs, node.saved[0])]
            grads = rule(g, ins, node.out, node.saved[1], node.attrs, need)
            for i, gi, nd in zip(node.inputs, grads, need):
                if not nd or gi is None:
                    continue
                prev = adj.get(i)
                adj[i] = gi if prev is None else prev + gi
        return Gradients(self, adj, batched)

    def dump(self, path):
        with open(path, "w") as fh:
            for n in self.nodes:
                ins = ",".join("c" if i is None else str(i) for i in n.inputs)
                fh.write(f"{n.id}\t{n.op}\t{ins}\n")


def record(op_kind, inputs, **attrs):
    """Apply ``op_kind`` to ``inputs`` on the active tape (or eagerly)."""
    return _apply(op_kind, inputs, attrs, active_tape())


def backward(tape, seed_node, seed_value=None, wrt=None, batched=False):
    return tape.backward(seed_node, seed_value, wrt=wrt, batched=batched)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _apply(op_kind, inputs, attrs, tape):
    try:
        fwd = _OPS[op_kind][0]
    except KeyError:
        raise TapeError(f"unknown op {op_kind!r}") from None
    ids = []
    consts = []
    arrays = []
    for x in inputs:
        if isinstance(x, Tensor):
            if tape is not None and x.tape is tape and x.node is not None:
                ids.append(x.node)
                consts.append(None)
            else:
                ids.append(None)
                consts.append(x.data)
            arrays.append(x.data)
        else:
            a = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) or x.dtype != np.float64 else x
            ids.append(None)
            consts.append(a)
            arrays.append(a)
    try:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            out, saved = fwd(arrays, attrs)
    except ValueError as e:
        raise ShapeError(f"{op_kind}: {e}") from None
    _check_finite(out, op_kind)
    if tape is None or all(i is None for i in ids):
        return Tensor(out)
    node = Node(len(tape.nodes), op_kind, tuple(ids), (consts, saved), attrs, out)
    tape.nodes.append(node)
    return Tensor(out, node.id, tape)


# ------------------------------------------------------------------ helpers


def _unbroadcast(g, shape):
    """Sum a seed-leading cotangent down to ``(nb,) + shape``."""
    extra = g.ndim - 1 - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(1, 1 + extra)))
    axes = tuple(i + 1 for i, s in enumerate(shape) if s == 1 and g.shape[i + 1] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _rows(a):
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


def _bcast_rows(a, shape):
    return np.ascontiguousarray(np.broadcast_to(a, shape)).reshape(-1, shape[-1])


# --------------------------------------------------------------------- ops

_OPS = {}


def _op(name):
    def deco(pair):
        _OPS[name] = pair
        return pair

    return deco


def _binary_shape_check(a, b):
    np.broadcast_shapes(a.shape, b.shape)


_op("add")(
    (
        lambda x, at: (_binary_shape_check(*x) or x[0] + x[1], None),
        lambda g, x, out, s, at, need: [
            _unbroadcast(g, x[0].shape) if need[0] else None,
            _unbroadcast(g, x[1].shape) if need[1] else None,
        ],
    )
)
_op("sub")(
    (
        lambda x, at: (_binary_shape_check(*x) or x[0] - x[1], None),
        lambda g, x, out, s, at, need: [
            _unbroadcast(g, x[0].shape) if need[0] else None,
            -_unbroadcast(g, x[1].shape) if need[1] else None,
        ],
    )
)
_op("mul")(
    (
        lambda x, at: (_binary_shape_check(*x) or x[0] * x[1], None),
        lambda g, x, out, s, at, need: [
            _unbroadcast(g * x[1], x[0].shape) if need[0] else None,
            _unbroadcast(g * x[0], x[1].shape) if need[1] else None,
        ],
    )
)
_op("div")(
    (
        lambda x, at: (_binary_shape_check(*x) or x[0] / x[1], None),
        lambda g, x, out, s, at, need: [
            _unbroadcast(g / x[1], x[0].shape) if need[0] else None,
            _unbroadcast(-g * out / x[1], x[1].shape) if need[1] else None,
        ],
    )
)
_op("neg")((lambda x, at: (-x[0], None), lambda g, x, out, s, at, need: [-g]))
_op("exp")((lambda x, at: (np.exp(x[0]), None), lambda g, x, out, s, at, need: [g * out]))
_op("log")((lambda x, at: (np.log(x[0]), None), lambda g, x, out, s, at, need: [g / x[0]]))
_op("tanh")(
    (lambda x, at: (np.tanh(x[0]), None), lambda g, x, out, s, at, need: [g * (1.0 - out * out)])
)
_op("sin")((lambda x, at: (np.sin(x[0]), None), lambda g, x, out, s, at, need: [g * np.cos(x[0])]))
_op("cos")((lambda x, at: (np.cos(x[0]), None), lambda g, x, out, s, at, need: [-g * np.sin(x[0])]))
_op("square")(
    (lambda x, at: (x[0] * x[0], None), lambda g, x, out, s, at, need: [2.0 * g * x[0]])
)
_op("sqrt")(
    (lambda x, at: (np.sqrt(x[0]), None), lambda g, x, out, s, at, need: [0.5 * g / out])
)
_op("stop_gradient")((lambda x, at: (x[0].copy(), None), lambda g, x, out, s, at, need: [None]))


def _clip_fwd(x, at):
    return np.clip(x[0], at["lo"], at["hi"]), None


def _clip_bwd(g, x, out, s, at, need):
    inside = (x[0] >= at["lo"]) & (x[0] <= at["hi"])
    return [g * inside]


_op("clip")((_clip_fwd, _clip_bwd))


def _minimum_fwd(x, at):
    _binary_shape_check(*x)
    return np.minimum(x[0], x[1]), None


def _minimum_bwd(g, x, out, s, at, need):
    pick_a = x[0] <= x[1]
    return [
        _unbroadcast(g * pick_a, x[0].shape) if need[0] else None,
        _unbroadcast(g * ~pick_a, x[1].shape) if need[1] else None,
    ]


_op("minimum")((_minimum_fwd, _minimum_bwd))


def _matmul_fwd(x, at):
    a, b = x
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    return np.matmul(a, b), None


def _matmul_bwd(g, x, out, s, at, need):
    a, b = x
    ga = gb = None
    if need[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if need[1]:
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return [ga, gb]


_op("matmul")((_matmul_fwd, _matmul_bwd))


def _sum_fwd(x, at):
    return np.sum(x[0], axis=at["axis"], keepdims=at["keepdims"]), None


def _expand_back(g, in_shape, axis, keepdims):
    if axis is None:
        axes = tuple(range(len(in_shape)))
    else:
        axes = tuple(a % len(in_shape) for a in (axis if isinstance(axis, tuple) else (axis,)))
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a + 1)
    return np.broadcast_to(g, (g.shape[0],) + tuple(in_shape))


def _sum_bwd(g, x, out, s, at, need):
    return [np.array(_expand_back(g, x[0].shape, at["axis"], at["keepdims"]))]


_op("reduce_sum")((_sum_fwd, _sum_bwd))


def _mean_fwd(x, at):
    return np.mean(x[0], axis=at["axis"], keepdims=at["keepdims"]), None


def _mean_bwd(g, x, out, s, at, need):
    n = x[0].size // max(out.size, 1)
    return [np.array(_expand_back(g, x[0].shape, at["axis"], at["keepdims"])) / n]


_op("reduce_mean")((_mean_fwd, _mean_bwd))


def _softmax_fwd(x, at):
    z = x[0]
    mask = at.get("mask")
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(np.broadcast_to(mask, z.shape)).reshape(-1, z.shape[-1])
    y = _accel.K.softmax(_rows(z), m2).reshape(z.shape)
    return y, None


def _softmax_bwd(g, x, out, s, at, need):
    return [_accel.K.softmax_bwd(_bcast_rows(out, g.shape), _rows(g)).reshape(g.shape)]


_op("softmax")((_softmax_fwd, _softmax_bwd))


def _log_softmax_fwd(x, at):
    z = x[0]
    return _accel.K.log_softmax(_rows(z)).reshape(z.shape), None


def _log_softmax_bwd(g, x, out, s, at, need):
    return [_accel.K.log_softmax_bwd(_bcast_rows(out, g.shape), _rows(g)).reshape(g.shape)]


_op("log_softmax")((_log_softmax_fwd, _log_softmax_bwd))


def _gelu_fwd(x, at):
    return _accel.K.gelu(_rows(x[0])).reshape(x[0].shape), None


def _gelu_bwd(g, x, out, s, at, need):
    return [_accel.K.gelu_bwd(_bcast_rows(x[0], g.shape), _rows(g)).reshape(g.shape)]


_op("gelu")((_gelu_fwd, _gelu_bwd))


def _layernorm_fwd(x, at):
    z, gamma, beta = x
    n = z.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layernorm affine params must have shape ({n},)")
    out, xhat, rstd = _accel.K.layernorm(_rows(z), gamma, beta, at["eps"])
    return out.reshape(z.shape), (xhat.reshape(z.shape), rstd.reshape(z.shape[:-1]))


def _layernorm_bwd(g, x, out, saved, at, need):
    z, gamma, beta = x
    xhat, rstd = saved
    n = z.shape[-1]
    res = [None, None, None]
    if need[0]:
        xh = _bcast_rows(xhat, g.shape)
        rs = np.ascontiguousarray(np.broadcast_to(rstd, g.shape[:-1])).reshape(-1)
        res[0] = _accel.K.layernorm_bwd(xh, rs, gamma, _rows(g)).reshape(g.shape)
    if need[1]:
        res[1] = (g * xhat).reshape(g.shape[0], -1, n).sum(axis=1)
    if need[2]:
        res[2] = g.reshape(g.shape[0], -1, n).sum(axis=1)
    return res


_op("layernorm")((_layernorm_fwd, _layernorm_bwd))


def _reshape_fwd(x, at):
    return x[0].reshape(at["shape"]), None


def _reshape_bwd(g, x, out, s, at, need):
    return [g.reshape((g.shape[0],) + x[0].shape)]


_op("reshape")((_reshape_fwd, _reshape_bwd))


def _transpose_fwd(x, at):
    return np.transpose(x[0], at["axes"]), None


def _transpose_bwd(g, x, out, s, at, need):
    axes = at["axes"]
    if axes is None:
        axes = tuple(reversed(range(x[0].ndim)))
    inv = np.argsort(axes)
    return [np.transpose(g, (0,) + tuple(int(i) + 1 for i in inv))]


_op("transpose")((_transpose_fwd, _transpose_bwd))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def _getitem_fwd(x, at):
    return np.array(x[0][at["idx"]]), None


def _getitem_bwd(g, x, out, s, at, need):
    idx = at["idx"]
    full = (slice(None),) + (idx if isinstance(idx, tuple) else (idx,))
    gx = np.zeros((g.shape[0],) + x[0].shape)
    if _is_basic(idx):
        gx[full] += g
    else:
        np.add.at(gx, full, g)
    return [gx]


_op("getitem")((_getitem_fwd, _getitem_bwd))


def _gather_fwd(x, at):
    table = x[0]
    if table.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")
    return table[at["index"]], None


def _gather_bwd(g, x, out, s, at, need):
    idx = np.asarray(at["index"]).reshape(-1)
    d = x[0].shape[1]
    nb = g.shape[0]
    gt = np.zeros((nb,) + x[0].shape)
    np.add.at(gt, (slice(None), idx), g.reshape(nb, -1, d))
    return [gt]


_op("gather_rows")((_gather_fwd, _gather_bwd))


def _pick_fwd(x, at):
    idx = np.asarray(at["index"])
    return np.take_along_axis(x[0], idx[..., None], axis=-1)[..., 0], None


def _pick_bwd(g, x, out, s, at, need):
    idx = np.asarray(at["index"])
    gx = np.zeros((g.shape[0],) + x[0].shape)
    bidx = np.broadcast_to(idx[None, ..., None], g.shape + (1,))
    np.put_along_axis(gx, bidx, g[..., None], axis=-1)
    return [gx]


_op("pick")((_pick_fwd, _pick_bwd))


def _concat_fwd(x, at):
    return np.concatenate(x, axis=at["axis"]), None


def _concat_bwd(g, x, out, s, at, need):
    axis = at["axis"] % x[0].ndim + 1
    sizes = np.cumsum([a.shape[at["axis"]] for a in x])[:-1]
    parts = np.split(g, sizes, axis=axis)
    return [p if n else None for p, n in zip(parts, need)]


_op("concat")((_concat_fwd, _concat_bwd))


def _stack_fwd(x, at):
    return np.stack(x, axis=at["axis"]), None


def _stack_bwd(g, x, out, s, at, need):
    axis = at["axis"] % (x[0].ndim + 1) + 1
    return [np.take(g, i, axis=axis) if n else None for i, n in enumerate(need)]


_op("stack")((_stack_fwd, _stack_bwd))


# ----------------------------------------------------------- public wrappers


def add(a, b):
    return record("add", [a, b])


def sub(a, b):
    return record("sub", [a, b])


def mul(a, b):
    return record("mul", [a, b])


def div(a, b):
    return record("div", [a, b])


def neg(a):
    return record("neg", [a])


def exp(a):
    return record("exp", [a])


def log(a):
    return record("log", [a])


def tanh(a):
    return record("tanh", [a])


def sin(a):
    return record("sin", [a])


def cos(a):
    return record("cos", [a])


def square(a):
    return record("square", [a])


def sqrt(a):
    return record("sqrt", [a])


def gelu(a):
    return record("gelu", [a])


def stop_gradient(a):
    return record("stop_gradient", [a])


def clip(a, lo, hi):
    return record("clip", [a], lo=float(lo), hi=float(hi))


def minimum(a, b):
    return record("minimum", [a, b])


def matmul(a, b):
    return record("matmul", [a, b])


def reduce_sum(a, axis=None, keepdims=False):
    return record("reduce_sum", [a], axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims=False):
    return record("reduce_mean", [a], axis=axis, keepdims=keepdims)


def softmax(a, mask=None):
    """Softmax over the last axis; ``mask`` (bool, broadcastable) marks allowed entries."""
    return record("softmax", [a], mask=mask)


def log_softmax(a):
    return record("log_softmax", [a])


def layernorm(a, gamma, beta, eps=1e-5):
    return record("layernorm", [a, gamma, beta], eps=float(eps))


def reshape(a, shape):
    return record("reshape", [a], shape=tuple(shape))


def transpose(a, axes=None):
    return record("transpose", [a], axes=None if axes is None else tuple(axes))


def getitem(a, idx):
    return record("getitem", [a], idx=idx)


def gather_rows(table, index):
    return record("gather_rows", [table], index=np.asarray(index, dtype=np.int64))


def pick(a, index):
    """``a[..., index[...]]`` along the last axis (e.g. log-prob of sampled tokens)."""
    return record("pick", [a], index=np.asarray(index, dtype=np.int64))


def concat(items, axis=0):
    return record("concat", list(items), axis=axis)


def stack(items, axis=0):
    return record("stack", list(items), axis=axis)


# --------------------------------------------------------- function-level API


def vjp(function, point, cotangent):
    """Return ``cotangent^T J_function(point)`` shaped like ``point``."""
    point = np.asarray(point, dtype=np.float64)
    with Tape() as tape:
        x = tape.leaf(point)
        y = function(x)
        if not isinstance(y, Tensor) or y.tape is not tape:
            return np.zeros_like(point)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != y.shape:
            raise ShapeError(f"cotangent shape {cot.shape} != output shape {y.shape}")
        grads = tape.backward(y, cot, wrt=[x])
    return grads[x]


def dense_jacobian(function, point):
    """Full Jacobian (out_size x in_size) assembled from basis-cotangent VJPs."""
    point = np.asarray(point, dtype=np.float64)
    with Tape() as tape:
        x = tape.leaf(point)
        y = function(x)
        out_shape = np.shape(y.data if isinstance(y, Tensor) else y)
        m = int(np.prod(out_shape, dtype=np.int64))
        if m > DENSE_ROW_GUARD:
            raise ShapeError(f"dense Jacobian with {m} rows exceeds guard {DENSE_ROW_GUARD}")
        if not isinstance(y, Tensor) or y.tape is not tape:
            return np.zeros((m, point.size))
        seeds = np.eye(m).reshape((m,) + out_shape)
        grads = tape.backward(y, seeds, wrt=[x], batched=True)
    return grads[x].reshape(m, point.size)


def operator_norm(matrix=None, matvec=None, rmatvec=None, dim=None, iters=50, tol=1e-9, rng=None):
    """Largest singular value by power iteration on ``A^T A``.

    Stops after ``iters`` rounds or when the estimate changes by less than
    ``tol`` relative.  The start vector comes from ``rng`` (seed 0 when absent).
    """
    if matrix is not None:
        A = np.asarray(matrix, dtype=np.float64)
        matvec = A.__matmul__
        rmatvec = A.T.__matmul__
        dim = A.shape[1]
    if rng is None:
        rng = np.random.default_rng(0)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = matvec(v)
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return 0.0
        w = rmatvec(u)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return new
        v = w / nw
        if sigma > 0 and abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(matvec(v)))


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` at ``x`` (oracle for tests)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def numerical_jacobian(f, x, eps=1e-5):
    x = np.array(x, dtype=np.float64)
    y0 = np.asarray(f(x))
    J = np.zeros((y0.size, x.size))
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        yp = np.asarray(f(x)).reshape(-1)
        flat[i] = old - eps
        ym = np.asarray(f(x)).reshape(-1)
        flat[i] = old
        J[:, i] = (yp - ym) / (2 * eps)
    return J
