"""Reverse-mode automatic differentiation on numpy arrays.

A ``Graph`` is an eager tape: every operation runs immediately, appends a
node recording its kind/parents, and (when gradients are enabled) captures
what its backward rule needs inside a closure. ``Graph.backward`` walks the
tape in reverse creation order, which is already topological.

Conventions
-----------
* one Graph per forward/backward pass; graphs are single-writer and cheap
* parameters are bound by name via ``Graph.param`` so gradients accumulate
  when the same parameter is used several times in one pass
* float32 by default; ``dtype=np.float64`` is used by ``grad_check`` so the
  finite-difference comparison is not drowned by single-precision noise
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class GraphError(Exception):
    """Base class for tape construction/execution failures."""


class ShapeError(GraphError):
    """Incompatible operand shapes; message names the offending node."""


class NonFiniteError(GraphError):
    """An operation produced NaN/Inf; message names the offending node."""


@dataclass
class Node:
    kind: str
    parents: tuple
    shape: tuple
    backward: object = None  # closure grad_out -> [(parent_idx, grad), ...]
    grad: np.ndarray | None = None


class Tensor:
    """Handle to one node of a Graph; ``data`` is the cached forward value."""

    __slots__ = ("graph", "index", "data", "requires_grad")

    def __init__(self, graph, index, data, requires_grad):
        self.graph = graph
        self.index = index
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        return self.graph.nodes[self.index].grad

    def __repr__(self):
        return f"Tensor(kind={self.graph.nodes[self.index].kind}, shape={self.shape})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Graph:
    """Eager computation tape with reverse-mode gradients."""

    def __init__(self, dtype=np.float32, check_finite=True, grad_enabled=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.grad_enabled = grad_enabled
        self.nodes: list[Node] = []
        self._params: dict[str, Tensor] = {}

    # ---------------------------------------------------------------- leaves

    def input(self, array) -> Tensor:
        """Bind a constant input (no gradient)."""
        data = np.asarray(array, dtype=self.dtype)
        return self._record("input", (), data, requires_grad=False)

    def param(self, name, array) -> Tensor:
        """Bind a named trainable leaf; repeated binds return the same node."""
        if name in self._params:
            return self._params[name]
        data = np.asarray(array, dtype=self.dtype)
        t = self._record("param", (), data, requires_grad=self.grad_enabled)
        self._params[name] = t
        return t

    @property
    def param_names(self):
        return list(self._params)

    def param_grads(self) -> dict[str, np.ndarray]:
        """Gradient per bound parameter; zeros where the loss never reached."""
        out = {}
        for name, t in self._params.items():
            g = self.nodes[t.index].grad
            out[name] = np.zeros_like(t.data) if g is None else g
        return out

    # ------------------------------------------------------------- recording

    def _record(self, kind, parents, data, requires_grad, backward=None) -> Tensor:
        idx = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values in node {idx} ({kind})")
        keep_grad = requires_grad and self.grad_enabled
        self.nodes.append(
            Node(kind, parents, tuple(data.shape), backward if keep_grad else None)
        )
        return Tensor(self, idx, data, keep_grad)

    def _shape_err(self, kind, msg):
        return ShapeError(f"{kind} (node {len(self.nodes)}): {msg}")

    # ------------------------------------------------------------ arithmetic

    def add(self, a, b) -> Tensor:
        out = a.data + b.data

        def bwd(g):
            return [
                (a.index, _unbroadcast(g, a.shape)),
                (b.index, _unbroadcast(g, b.shape)),
            ]

        return self._record(
            "add", (a.index, b.index), out, a.requires_grad or b.requires_grad, bwd
        )

    def sub(self, a, b) -> Tensor:
        out = a.data - b.data

        def bwd(g):
            return [
                (a.index, _unbroadcast(g, a.shape)),
                (b.index, _unbroadcast(-g, b.shape)),
            ]

        return self._record(
            "sub", (a.index, b.index), out, a.requires_grad or b.requires_grad, bwd
        )

    def mul(self, a, b) -> Tensor:
        out = a.data * b.data
        ad, bd = a.data, b.data

        def bwd(g):
            return [
                (a.index, _unbroadcast(g * bd, a.shape)),
                (b.index, _unbroadcast(g * ad, b.shape)),
            ]

        return self._record(
            "mul", (a.index, b.index), out, a.requires_grad or b.requires_grad, bwd
        )

    def scale(self, a, c) -> Tensor:
        c = self.dtype.type(c)
        out = a.data * c

        def bwd(g):
            return [(a.index, g * c)]

        return self._record("scale", (a.index,), out, a.requires_grad, bwd)

    def matmul(self, a, b) -> Tensor:
        """2-D or batched (leading dims must match) matrix product."""
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise self._shape_err("matmul", f"operands {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise self._shape_err("matmul", f"inner dims {a.shape} @ {b.shape}")
        out = a.data @ b.data
        ad, bd = a.data, b.data

        def bwd(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return [
                (a.index, _unbroadcast(ga, a.shape)),
                (b.index, _unbroadcast(gb, b.shape)),
            ]

        return self._record(
            "matmul", (a.index, b.index), out, a.requires_grad or b.requires_grad, bwd
        )

    def affine(self, x, w, b) -> Tensor:
        """x @ w + b over the last axis; x (..., in), w (in, out), b (out,)."""
        if x.shape[-1] != w.shape[0]:
            raise self._shape_err("affine", f"x {x.shape} vs w {w.shape}")
        out = x.data @ w.data + b.data
        xd, wd = x.data, w.data

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xd.reshape(-1, xd.shape[-1])
            return [
                (x.index, (g @ wd.T).reshape(xd.shape)),
                (w.index, x2.T @ g2),
                (b.index, g2.sum(axis=0)),
            ]

        req = x.requires_grad or w.requires_grad or b.requires_grad
        return self._record("affine", (x.index, w.index, b.index), out, req, bwd)

    # ----------------------------------------------------------- activations

    def gelu(self, x) -> Tensor:
        """tanh-approximation gelu."""
        xd = x.data
        inner = SQRT_2_OVER_PI * (xd + GELU_CUBIC * xd**3)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)

        def bwd(g):
            dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xd**2)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
            return [(x.index, g * dx)]

        return self._record("gelu", (x.index,), out, x.requires_grad, bwd)

    def tanh(self, x) -> Tensor:
        out = np.tanh(x.data)

        def bwd(g):
            return [(x.index, g * (1.0 - out**2))]

        return self._record("tanh", (x.index,), out, x.requires_grad, bwd)

    # -------------------------------------------------------- shape plumbing

    def reshape(self, x, shape) -> Tensor:
        out = x.data.reshape(shape)
        orig = x.data.shape

        def bwd(g):
            return [(x.index, g.reshape(orig))]

        return self._record("reshape", (x.index,), out, x.requires_grad, bwd)

    def transpose(self, x, axes) -> Tensor:
        axes = tuple(axes)
        out = np.ascontiguousarray(x.data.transpose(axes))
        inv = tuple(np.argsort(axes))

        def bwd(g):
            return [(x.index, g.transpose(inv))]

        return self._record("transpose", (x.index,), out, x.requires_grad, bwd)

    def concat(self, tensors, axis) -> Tensor:
        out = np.concatenate([t.data for t in tensors], axis=axis)
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            pieces = np.split(g, splits, axis=axis)
            return [(t.index, p) for t, p in zip(tensors, pieces)]

        req = any(t.requires_grad for t in tensors)
        return self._record("concat", tuple(t.index for t in tensors), out, req, bwd)

    def narrow(self, x, axis, start, length) -> Tensor:
        """Contiguous slice [start, start+length) along ``axis``."""
        key = [slice(None)] * x.data.ndim
        key[axis] = slice(start, start + length)
        key = tuple(key)
        out = np.ascontiguousarray(x.data[key])
        shape = x.data.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] = g
            return [(x.index, full)]

        return self._record("narrow", (x.index,), out, x.requires_grad, bwd)

    def gather(self, table, ids) -> Tensor:
        """Row lookup: table (V, d), ids int array (...,) -> (..., d)."""
        ids = np.asarray(ids)
        out = table.data[ids]
        vshape = table.data.shape

        def bwd(g):
            gt = np.zeros(vshape, dtype=g.dtype)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, vshape[-1]))
            return [(table.index, gt)]

        return self._record("gather", (table.index,), out, table.requires_grad, bwd)

    # ------------------------------------------------------------ reductions

    def sum(self, x) -> Tensor:
        out = np.asarray(x.data.sum(), dtype=self.dtype).reshape(())
        shape = x.data.shape

        def bwd(g):
            return [(x.index, np.broadcast_to(g, shape).astype(g.dtype))]

        return self._record("sum", (x.index,), out, x.requires_grad, bwd)

    def mean(self, x) -> Tensor:
        n = x.data.size
        out = np.asarray(x.data.mean(), dtype=self.dtype).reshape(())
        shape = x.data.shape

        def bwd(g):
            return [(x.index, np.broadcast_to(g / n, shape).astype(g.dtype))]

        return self._record("mean", (x.index,), out, x.requires_grad, bwd)

    def square(self, x) -> Tensor:
        out = x.data * x.data
        xd = x.data

        def bwd(g):
            return [(x.index, 2.0 * xd * g)]

        return self._record("square", (x.index,), out, x.requires_grad, bwd)

    def mean_square(self, a, b=None) -> Tensor:
        """mean((a-b)**2), or mean(a**2) when b is omitted. Scalar output."""
        diff = a.data if b is None else a.data - b.data
        n = diff.size
        out = np.asarray(np.mean(diff * diff), dtype=self.dtype).reshape(())

        def bwd(g):
            base = (2.0 / n) * diff * g
            grads = [(a.index, base)]
            if b is not None:
                grads.append((b.index, -base))
            return grads

        parents = (a.index,) if b is None else (a.index, b.index)
        req = a.requires_grad or (b is not None and b.requires_grad)
        return self._record("mean_square", parents, out, req, bwd)

    # ------------------------------------------------------------ norm/probs

    def layer_norm(self, x, gain, bias, eps=1e-5) -> Tensor:
        """Normalize the last axis to zero mean / unit variance, then scale."""
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise self._shape_err("layer_norm", f"x {x.shape}, gain {gain.shape}")
        xd = x.data
        mu = xd.mean(axis=-1, keepdims=True)
        var = xd.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        out = xhat * gain.data + bias.data
        gd = gain.data
        d = xd.shape[-1]

        def bwd(g):
            gxhat = g * gd
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (gxhat - m1 - xhat * m2)
            axes = tuple(range(g.ndim - 1))
            return [
                (x.index, dx),
                (gain.index, (g * xhat).sum(axis=axes) if axes else g * xhat),
                (bias.index, g.sum(axis=axes) if axes else g),
            ]

        req = x.requires_grad or gain.requires_grad or bias.requires_grad
        return self._record(
            "layer_norm", (x.index, gain.index, bias.index), out, req, bwd
        )

    def softmax(self, x) -> Tensor:
        """Softmax over the last axis."""
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)

        def bwd(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return [(x.index, out * (g - dot))]

        return self._record("softmax", (x.index,), out, x.requires_grad, bwd)

    def attention(self, q, k, v, mask=None) -> Tensor:
        """Scaled dot-product attention.

        q, k, v: (..., T, dh) with matching leading dims; optional additive
        ``mask`` broadcastable to the (..., Tq, Tk) score matrix (use -inf to
        forbid a key). Returns (..., Tq, dh).
        """
        if q.shape[-1] != k.shape[-1] or k.shape[:-2] != v.shape[:-2]:
            raise self._shape_err("attention", f"q {q.shape} k {k.shape} v {v.shape}")
        dh = q.shape[-1]
        inv_sqrt = 1.0 / math.sqrt(dh)
        scores = (q.data @ np.swapaxes(k.data, -1, -2)) * inv_sqrt
        if mask is not None:
            scores = scores + mask
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        out = attn @ v.data
        qd, kd, vd = q.data, k.data, v.data

        def bwd(g):
            gv = np.swapaxes(attn, -1, -2) @ g
            ga = g @ np.swapaxes(vd, -1, -2)
            ds = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True))
            gq = (ds @ kd) * inv_sqrt
            gk = (np.swapaxes(ds, -1, -2) @ qd) * inv_sqrt
            return [(q.index, gq), (k.index, gk), (v.index, gv)]

        req = q.requires_grad or k.requires_grad or v.requires_grad
        return self._record("attention", (q.index, k.index, v.index), out, req, bwd)

    def cross_entropy(self, logits, targets, mask=None) -> Tensor:
        """Token-mean cross-entropy over logits (N, V) vs int targets (N,).

        ``mask`` (N,) selects which positions count; the mean is over the
        selected positions only.
        """
        if logits.data.ndim != 2:
            raise self._shape_err("cross_entropy", f"logits {logits.shape}")
        targets = np.asarray(targets, dtype=np.int64)
        n, v = logits.shape
        if targets.shape != (n,):
            raise self._shape_err("cross_entropy", f"targets {targets.shape} for N={n}")
        m = np.ones(n, dtype=self.dtype) if mask is None else np.asarray(
            mask, dtype=self.dtype
        )
        denom = float(m.sum())
        if denom <= 0:
            raise GraphError("cross_entropy: mask selects no positions")
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1))
        nll = logsumexp - z[np.arange(n), targets]
        out = np.asarray((nll * m).sum() / denom, dtype=self.dtype).reshape(())
        probs = np.exp(z - logsumexp[:, None])

        def bwd(g):
            dl = probs.copy()
            dl[np.arange(n), targets] -= 1.0
            dl *= (m / denom)[:, None]
            return [(logits.index, dl * g)]

        return self._record("cross_entropy", (logits.index,), out,
                            logits.requires_grad, bwd)

    # ---------------------------------------------------------- convolutions

    def conv2d(self, x, w, b, stride=1, pad=0) -> Tensor:
        """x (B,C,H,W) * w (O,C,kh,kw) + b (O,), stride s, symmetric zero pad."""
        bsz, c, h, wd_ = x.shape
        o, cw, kh, kw = w.shape
        if cw != c:
            raise self._shape_err("conv2d", f"x {x.shape} vs w {w.shape}")
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (wd_ + 2 * pad - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise self._shape_err("conv2d", f"empty output for x {x.shape}")
        cols = _im2col(x.data, kh, kw, stride, pad, oh, ow)  # (B, C*kh*kw, L)
        w2 = w.data.reshape(o, -1)
        out = (w2 @ cols).reshape(bsz, o, oh, ow) + b.data.reshape(1, o, 1, 1)

        def bwd(g):
            g2 = g.reshape(bsz, o, -1)
            gflat = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(o, -1)
            cflat = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], -1)
            gw = (gflat @ cflat.T).reshape(w.shape)
            gcols = np.matmul(w2.T, g2)
            gx = _col2im(gcols, x.shape, kh, kw, stride, pad, oh, ow)
            return [(x.index, gx), (w.index, gw), (b.index, g.sum(axis=(0, 2, 3)))]

        req = x.requires_grad or w.requires_grad or b.requires_grad
        return self._record("conv2d", (x.index, w.index, b.index), out, req, bwd)

    def conv_transpose2d(self, x, w, b, stride=2, pad=1) -> Tensor:
        """Transposed conv: x (B,C,H,W), w (C,O,kh,kw), output (B,O,H',W')
        with H' = (H-1)*stride - 2*pad + kh."""
        bsz, c, h, wd_ = x.shape
        cw, o, kh, kw = w.shape
        if cw != c:
            raise self._shape_err("conv_transpose2d", f"x {x.shape} vs w {w.shape}")
        oh = (h - 1) * stride - 2 * pad + kh
        ow = (wd_ - 1) * stride - 2 * pad + kw
        if oh <= 0 or ow <= 0:
            raise self._shape_err("conv_transpose2d", f"empty output for x {x.shape}")
        w2 = w.data.reshape(c, -1)  # (C, O*kh*kw)
        x2 = x.data.reshape(bsz, c, -1)  # (B, C, H*W)
        cols = np.matmul(w2.T, x2)  # (B, O*kh*kw, H*W)
        out = _col2im(cols, (bsz, o, oh, ow), kh, kw, stride, pad, h, wd_)
        out = out + b.data.reshape(1, o, 1, 1)

        def bwd(g):
            gcols = _im2col(g, kh, kw, stride, pad, h, wd_)  # (B, O*kh*kw, H*W)
            gx = np.matmul(w2, gcols).reshape(x.shape)
            xflat = np.ascontiguousarray(x2.transpose(1, 0, 2)).reshape(c, -1)
            gcflat = np.ascontiguousarray(gcols.transpose(1, 0, 2)).reshape(gcols.shape[1], -1)
            gw = (xflat @ gcflat.T).reshape(w.shape)
            return [(x.index, gx), (w.index, gw), (b.index, g.sum(axis=(0, 2, 3)))]

        req = x.requires_grad or w.requires_grad or b.requires_grad
        return self._record(
            "conv_transpose2d", (x.index, w.index, b.index), out, req, bwd
        )

    # -------------------------------------------------------------- backward

    def backward(self, loss: Tensor) -> None:
        """Populate gradients for every node on a path from ``loss``."""
        if loss.graph is not self:
            raise GraphError("backward: loss tensor belongs to a different graph")
        if loss.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.grad_enabled:
            raise GraphError("backward: graph was built with gradients disabled")
        if not self.nodes:
            raise GraphError("backward: empty graph (no forward pass recorded)")
        seed = self.nodes[loss.index]
        seed.grad = np.ones(seed.shape, dtype=self.dtype)
        for idx in range(loss.index, -1, -1):
            node = self.nodes[idx]
            if node.grad is None or node.backward is None:
                continue
            for pidx, g in node.backward(node.grad):
                parent = self.nodes[pidx]
                if parent.backward is None and parent.kind not in ("param", "input"):
                    continue
                if parent.kind == "input":
                    continue
                g = np.asarray(g, dtype=self.dtype)
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g


def _im2col(x, kh, kw, stride, pad, oh, ow):
    """(B,C,H,W) -> (B, C*kh*kw, oh*ow) patch matrix."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride,
                                 j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    """Adjoint of _im2col: scatter-add (B, C*kh*kw, oh*ow) back to (B,C,H,W)."""
    b, c, h, w = x_shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride,
                j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def grad_check(fn, point, eps=1e-3):
    """Max relative error between taped gradients and central differences.

    ``fn(graph, tensors) -> scalar Tensor`` builds the computation on the
    supplied graph from leaf tensors bound at ``point`` (a list of arrays).
    The check runs in float64 so the difference quotient itself is accurate.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    point = [np.asarray(p, dtype=np.float64) for p in point]

    def run(arrays):
        g = Graph(dtype=np.float64)
        leaves = [g.param(f"arg{i}", a) for i, a in enumerate(arrays)]
        loss = fn(g, leaves)
        return g, leaves, loss

    g, leaves, loss = run(point)
    if loss.size != 1:
        raise GraphError("grad_check: function must be scalar-valued")
    g.backward(loss)
    analytic = [
        np.zeros_like(point[i]) if leaf.grad is None else leaf.grad.copy()
        for i, leaf in enumerate(leaves)
    ]

    worst = 0.0
    for i, base in enumerate(point):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            _, _, up = run(point)
            flat[j] = orig - eps
            _, _, down = run(point)
            flat[j] = orig
            numeric = (float(up.data) - float(down.data)) / (2.0 * eps)
            a = analytic[i].reshape(-1)[j]
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            worst = max(worst, rel)
    return worst
