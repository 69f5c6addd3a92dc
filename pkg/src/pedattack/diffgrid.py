"""Minimal reverse-mode differentiation over dense numeric grids (float64 by default).

A :class:`Graph` is an append-only list of primitive applications. Node ids
are integers, parents always precede children, and every node carries the
output shape inferred when it was added. :func:`evaluate` runs the graph
forward for a set of input bindings; :func:`grad` additionally runs the
reverse sweep from a scalar node.

    g = Graph()
    x = g.input("x", (3,), trainable=True)
    y = g.sum(g.relu(x))
    evaluate(g, {"x": np.array([-1.0, 0.0, 2.0])}, [y])[y]   # -> [2.]

The op set is closed: everything the detector and the patch losses need
and nothing else.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

BCE_EPS = 1e-7


class GraphError(ValueError):
    """Raised for shape mismatches, non-finite values and bad grad requests."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"node {node}: {message}")
        self.node = node


@dataclass(frozen=True)
class Node:
    op: str
    parents: tuple
    params: dict
    shape: tuple


@dataclass
class Graph:
    nodes: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)     # name -> node id
    trainable: set = field(default_factory=set)    # names
    dtype: type = np.float64                       # dtype inputs are cast to

    # ------------------------------------------------------------ building

    def _add(self, op, parents, params, shape):
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"unknown parent {p}", len(self.nodes))
        self.nodes.append(Node(op, tuple(parents), params, tuple(int(s) for s in shape)))
        return len(self.nodes) - 1

    def shape(self, node):
        return self.nodes[node].shape

    def input(self, name, shape, trainable=False):
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        if any(int(s) <= 0 for s in shape):
            raise GraphError(f"input {name!r} has non-positive dimension {shape}")
        nid = self._add("input", (), {"name": name}, shape)
        self.inputs[name] = nid
        if trainable:
            self.trainable.add(name)
        return nid

    def const(self, value):
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1)
        value.setflags(write=False)
        return self._add("const", (), {"value": value}, value.shape)

    def _same(self, a, b, op):
        if self.shape(a) != self.shape(b):
            raise GraphError(f"{op}: shapes {self.shape(a)} and {self.shape(b)} differ", len(self.nodes))

    def add(self, a, b):
        self._same(a, b, "add")
        return self._add("add", (a, b), {}, self.shape(a))

    def mul(self, a, b):
        self._same(a, b, "mul")
        return self._add("mul", (a, b), {}, self.shape(a))

    def scale(self, a, factor):
        return self._add("scale", (a,), {"factor": float(factor)}, self.shape(a))

    def relu(self, a):
        return self._add("relu", (a,), {}, self.shape(a))

    def sigmoid(self, a):
        return self._add("sigmoid", (a,), {}, self.shape(a))

    def exp(self, a):
        return self._add("exp", (a,), {}, self.shape(a))

    def sqrt(self, a):
        return self._add("sqrt", (a,), {}, self.shape(a))

    def minimum(self, a, cap):
        """Elementwise min with a constant cap (gradient 0 where capped)."""
        return self._add("minimum", (a,), {"cap": float(cap)}, self.shape(a))

    def sum(self, a):
        return self._add("sum", (a,), {}, (1,))

    def mean(self, a):
        return self._add("mean", (a,), {}, (1,))

    def squared_error(self, a, b):
        """Elementwise (a - b)**2."""
        self._same(a, b, "squared_error")
        return self._add("squared_error", (a, b), {}, self.shape(a))

    def reshape(self, a, shape):
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(self.shape(a))):
            raise GraphError(f"reshape {self.shape(a)} -> {shape}", len(self.nodes))
        return self._add("reshape", (a,), {"shape": shape}, shape)

    def transpose(self, a, axes):
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(len(self.shape(a)))):
            raise GraphError(f"bad transpose axes {axes}", len(self.nodes))
        return self._add("transpose", (a,), {"axes": axes}, tuple(self.shape(a)[i] for i in axes))

    def columns(self, a, start, stop):
        """Slice columns [start, stop) of a 2-D grid."""
        m, k = self.shape(a)
        if not 0 <= start < stop <= k:
            raise GraphError(f"columns [{start},{stop}) of width {k}", len(self.nodes))
        return self._add("columns", (a,), {"start": start, "stop": stop}, (m, stop - start))

    def rows(self, a, index):
        """Gather rows of a 2-D grid (duplicates allowed)."""
        index = np.asarray(index, dtype=np.int64).ravel()
        m = self.shape(a)[0]
        if len(index) == 0 or index.min() < 0 or index.max() >= m:
            raise GraphError("row index out of range or empty", len(self.nodes))
        return self._add("rows", (a,), {"index": index}, (len(index),) + self.shape(a)[1:])

    def conv2d(self, x, kernel, bias=None, stride=1, pad=0, channels_last=False):
        """Cross-correlation of (C,H,W) or (N,C,H,W) with a (Co,C,k,k) kernel.

        With ``channels_last`` the input is (H,W,C) or (N,H,W,C) and so is the output.
        """
        xs, ks = self.shape(x), self.shape(kernel)
        nid = len(self.nodes)
        if len(xs) not in (3, 4) or len(ks) != 4:
            raise GraphError(f"conv2d shapes {xs} * {ks}", nid)
        h, w, c = xs[-3:] if channels_last else (xs[-2], xs[-1], xs[-3])
        co, ci, k, k2 = ks
        if ci != c or k != k2 or k % 2 == 0:
            raise GraphError(f"conv2d kernel {ks} incompatible with input {xs}", nid)
        if stride < 1:
            raise GraphError("stride must be >= 1", nid)
        if k > h + 2 * pad or k > w + 2 * pad:
            raise GraphError("kernel larger than padded input", nid)
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        parents = (x, kernel) if bias is None else (x, kernel, bias)
        if bias is not None and self.shape(bias) != (co,):
            raise GraphError(f"bias shape {self.shape(bias)} != ({co},)", nid)
        shape = xs[:-3] + ((ho, wo, co) if channels_last else (co, ho, wo))
        params = {"stride": int(stride), "pad": int(pad), "k": k, "channels_last": bool(channels_last)}
        return self._add("conv2d", parents, params, shape)

    def maxpool2(self, x, channels_last=False):
        """2x2 stride-2 max pool over the two trailing axes (or axes -3, -2 if channels_last)."""
        xs = self.shape(x)
        if channels_last:
            if len(xs) != 4 or xs[1] % 2 or xs[2] % 2:
                raise GraphError(f"maxpool2 needs (N, even H, even W, C), got {xs}", len(self.nodes))
            shape = (xs[0], xs[1] // 2, xs[2] // 2, xs[3])
        else:
            if len(xs) < 2 or xs[-1] % 2 or xs[-2] % 2:
                raise GraphError(f"maxpool2 needs even spatial dims, got {xs}", len(self.nodes))
            shape = xs[:-2] + (xs[-2] // 2, xs[-1] // 2)
        return self._add("maxpool2", (x,), {"channels_last": bool(channels_last)}, shape)

    def bilinear_sample(self, texture, coords):
        """Sample an (H, W, C) texture at fixed (x, y) pixel coords (N, 2).

        Coordinates outside [0, W-1] x [0, H-1] are clamped to the border
        and the number of clamped points is kept in ``params['clamped']``.
        """
        ts = self.shape(texture)
        if len(ts) != 3:
            raise GraphError(f"texture must be HxWxC, got {ts}", len(self.nodes))
        h, w, c = ts
        coords = np.array(coords, dtype=np.float64).reshape(-1, 2)
        lo = np.zeros(2)
        hi = np.array([w - 1, h - 1], dtype=np.float64)
        clamped = int(np.any((coords < lo) | (coords > hi), axis=1).sum())
        coords = np.clip(coords, lo, hi)
        coords.setflags(write=False)
        return self._add("bilinear_sample", (texture,),
                         {"coords": coords, "clamped": clamped}, (len(coords), c))

    def place(self, base, values, flat_index):
        """Copy of ``base`` with pixels ``flat_index`` (over all but the last axis) overwritten."""
        bs, vs = self.shape(base), self.shape(values)
        flat_index = np.asarray(flat_index, dtype=np.int64).ravel()
        npix = int(np.prod(bs[:-1]))
        nid = len(self.nodes)
        if vs != (len(flat_index), bs[-1]):
            raise GraphError(f"place values {vs} vs {len(flat_index)} pixels of {bs}", nid)
        if len(flat_index) and (flat_index.min() < 0 or flat_index.max() >= npix):
            raise GraphError("place index out of range", nid)
        if len(np.unique(flat_index)) != len(flat_index):
            raise GraphError("place index has duplicates", nid)
        return self._add("place", (base, values), {"index": flat_index}, bs)

    def softmax_cross_entropy(self, logits, targets):
        """Per-row cross-entropy of (M, K) logits against integer targets (M,)."""
        m, k = self.shape(logits)
        targets = np.asarray(targets, dtype=np.int64).ravel()
        if len(targets) != m or targets.min() < 0 or targets.max() >= k:
            raise GraphError("targets do not match logits", len(self.nodes))
        return self._add("softmax_ce", (logits,), {"targets": targets}, (m,))

    def binary_cross_entropy(self, prob, targets):
        """Elementwise BCE of probabilities against fixed targets in [0, 1]."""
        targets = np.asarray(targets, dtype=np.float64).reshape(self.shape(prob))
        return self._add("bce", (prob,), {"targets": targets}, self.shape(prob))


# ---------------------------------------------------------------- forward

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_forward(x, w, b, stride, pad, k, channels_last):
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if channels_last:
        cols = _kernels.im2col_hwc(x, k, stride, pad)
    else:
        cols = _kernels.im2col(x, k, stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out += b
    if not channels_last:
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return (out if batched else out[0]), cols


def _forward(node, vals):
    p = node.params
    op = node.op
    a = vals[0] if vals else None
    if op == "add":
        return a + vals[1], None
    if op == "mul":
        return a * vals[1], None
    if op == "scale":
        return a * p["factor"], None
    if op == "relu":
        return np.maximum(a, 0.0), None
    if op == "sigmoid":
        return _sigmoid(a), None
    if op == "exp":
        return np.exp(a), None
    if op == "sqrt":
        if np.any(a < 0):
            raise GraphError("sqrt of negative value")
        return np.sqrt(a), None
    if op == "minimum":
        return np.minimum(a, p["cap"]), None
    if op == "sum":
        return np.array([a.sum()]), None
    if op == "mean":
        return np.array([a.mean()]), None
    if op == "squared_error":
        return (a - vals[1]) ** 2, None
    if op == "reshape":
        return a.reshape(p["shape"]), None
    if op == "transpose":
        return np.ascontiguousarray(a.transpose(p["axes"])), None
    if op == "columns":
        return a[:, p["start"]:p["stop"]].copy(), None
    if op == "rows":
        return a[p["index"]], None
    if op == "conv2d":
        b = vals[2] if len(vals) > 2 else None
        return _conv_forward(a, vals[1], b, p["stride"], p["pad"], p["k"], p["channels_last"])
    if op == "maxpool2":
        if p["channels_last"]:
            return _kernels.maxpool2_hwc(a)
        return _kernels.maxpool2(a)
    if op == "bilinear_sample":
        return _kernels.bilinear(a, p["coords"]), None
    if op == "place":
        out = a.copy()
        flat = out.reshape(-1, out.shape[-1])
        flat[p["index"]] = vals[1]
        return out, None
    if op == "softmax_ce":
        shifted = a - a.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        loss = lse - shifted[np.arange(len(a)), p["targets"]]
        return loss, shifted
    if op == "bce":
        t = p["targets"]
        q = np.clip(a, BCE_EPS, 1.0 - BCE_EPS)
        return -(t * np.log(q) + (1.0 - t) * np.log(1.0 - q)), q
    raise GraphError(f"unknown op {op}")


# ---------------------------------------------------------------- backward

def _backward(node, g, vals, out, cache, need=None):
    """Return gradients for each parent (None where not needed)."""
    p = node.params
    op = node.op
    a = vals[0] if vals else None
    if op == "add":
        return g, g
    if op == "mul":
        return g * vals[1], g * a
    if op == "scale":
        return (g * p["factor"],)
    if op == "relu":
        return (g * (a > 0),)
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "exp":
        return (g * out,)
    if op == "sqrt":
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)
    if op == "minimum":
        return (g * (a < p["cap"]),)
    if op == "sum":
        return (np.full(a.shape, g[0]),)
    if op == "mean":
        return (np.full(a.shape, g[0] / a.size),)
    if op == "squared_error":
        d = 2.0 * (a - vals[1]) * g
        return d, -d
    if op == "reshape":
        return (g.reshape(a.shape),)
    if op == "transpose":
        return (g.transpose(np.argsort(p["axes"])),)
    if op == "columns":
        d = np.zeros_like(a)
        d[:, p["start"]:p["stop"]] = g
        return (d,)
    if op == "rows":
        d = np.zeros_like(a)
        np.add.at(d, p["index"], g)
        return (d,)
    if op == "conv2d":
        w = vals[1]
        co = w.shape[0]
        batched = a.ndim == 4
        xs = a.shape if batched else (1,) + a.shape
        gb = g if batched else g[None]
        gm = gb if p["channels_last"] else gb.transpose(0, 2, 3, 1)   # N, Ho, Wo, Co
        g2 = gm.reshape(-1, co)
        gw = (g2.T @ cache.reshape(-1, cache.shape[-1])).reshape(w.shape)
        gx = None
        if need is None or need[0]:
            dcols = gm @ w.reshape(co, -1)
            if p["channels_last"]:
                gx = _kernels.col2im_hwc(dcols, xs, p["k"], p["stride"], p["pad"])
            else:
                gx = _kernels.col2im(dcols, xs, p["k"], p["stride"], p["pad"])
            gx = gx if batched else gx[0]
        if len(vals) > 2:
            return gx, gw, g2.sum(axis=0)
        return gx, gw
    if op == "maxpool2":
        if p["channels_last"]:
            return (_kernels.maxpool2_hwc_back(g, cache, a.shape),)
        return (_kernels.maxpool2_back(g, cache, a.shape),)
    if op == "bilinear_sample":
        return (_kernels.bilinear_back(g, p["coords"], a.shape),)
    if op == "place":
        gbase = g.copy()
        flat = gbase.reshape(-1, g.shape[-1])
        gv = flat[p["index"]].copy()
        flat[p["index"]] = 0.0
        return gbase, gv
    if op == "softmax_ce":
        e = np.exp(cache)
        soft = e / e.sum(axis=1, keepdims=True)
        soft[np.arange(len(a)), p["targets"]] -= 1.0
        return (soft * g[:, None],)
    if op == "bce":
        t = p["targets"]
        q = cache
        inside = (a > BCE_EPS) & (a < 1.0 - BCE_EPS)
        return (np.where(inside, g * (q - t) / (q * (1.0 - q)), 0.0),)
    raise GraphError(f"unknown op {op}")


# ---------------------------------------------------------------- drivers

def _needed(graph, outputs):
    need = set()
    stack = list(outputs)
    while stack:
        n = stack.pop()
        if n in need:
            continue
        need.add(n)
        stack.extend(graph.nodes[n].parents)
    return need


def _run(graph, bindings, outputs, keep_cache):
    for n in outputs:
        if not 0 <= n < len(graph.nodes):
            raise GraphError("unknown output node", n)
    need = _needed(graph, outputs)
    values, caches = {}, {}
    for nid in sorted(need):
        node = graph.nodes[nid]
        if node.op == "input":
            name = node.params["name"]
            if name not in bindings:
                raise GraphError(f"missing binding for {name!r}", nid)
            v = np.asarray(bindings[name], dtype=graph.dtype)
            if v.shape != node.shape:
                raise GraphError(f"binding {name!r} has shape {v.shape}, expected {node.shape}", nid)
            if not np.all(np.isfinite(v)):
                raise GraphError(f"binding {name!r} is not finite", nid)
            values[nid] = v
            continue
        if node.op == "const":
            values[nid] = node.params["value"]
            continue
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = _forward(node, [values[q] for q in node.parents])
        except GraphError as exc:
            raise GraphError(str(exc), nid) from None
        if out.shape != node.shape:
            raise GraphError(f"produced shape {out.shape}, declared {node.shape}", nid)
        if not np.all(np.isfinite(out)):
            raise GraphError(f"non-finite value in {node.op}", nid)
        values[nid] = out
        if keep_cache and cache is not None:
            caches[nid] = cache
    return values, caches


def evaluate(graph, bindings, outputs=None):
    """Forward pass; returns {node id: value} for the requested nodes (default: last node)."""
    outputs = [len(graph.nodes) - 1] if outputs is None else list(outputs)
    values, _ = _run(graph, bindings, outputs, keep_cache=False)
    return {n: values[n] for n in outputs}


def grad(graph, output, wrt, bindings, extra_outputs=()):
    """Gradients of scalar node ``output`` w.r.t. the named trainable inputs.

    Returns ``(value, {name: gradient})``; ``value`` is the scalar output.
    Any ``extra_outputs`` node values are attached under ``grads['__values__']``.
    """
    if graph.shape(output) != (1,):
        raise GraphError(f"output must have shape (1,), got {graph.shape(output)}", output)
    wrt = list(wrt)
    for name in wrt:
        if name not in graph.inputs:
            raise GraphError(f"unknown input {name!r}")
        if name not in graph.trainable:
            raise GraphError(f"input {name!r} is not trainable")
    values, caches = _run(graph, bindings, [output, *extra_outputs], keep_cache=True)
    sources = {graph.inputs[name] for name in wrt}
    req = set()
    for nid in sorted(values):
        if nid in sources or any(q in req for q in graph.nodes[nid].parents):
            req.add(nid)
    grads = {output: np.ones(1)}
    for nid in sorted(values, reverse=True):
        g = grads.pop(nid, None)
        node = graph.nodes[nid]
        if g is None or not node.parents:
            if node.op == "input":
                grads[nid] = g
            continue
        need = [q in req for q in node.parents]
        pg = _backward(node, g, [values[q] for q in node.parents], values[nid],
                       caches.get(nid), need)
        for q, gq, nq in zip(node.parents, pg, need):
            if gq is None or not nq:
                continue
            if gq.dtype != values[q].dtype:
                gq = gq.astype(values[q].dtype)
            grads[q] = grads[q] + gq if q in grads else gq
    result = {}
    for name in wrt:
        nid = graph.inputs[name]
        g = grads.get(nid)
        result[name] = np.zeros(graph.shape(nid)) if g is None else np.asarray(g).reshape(graph.shape(nid))
    if extra_outputs:
        result["__values__"] = {n: values[n] for n in extra_outputs}
    return float(values[output][0]), result
