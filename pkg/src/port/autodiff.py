"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray.  While a ``Tape`` is active, every primitive
that touches a gradient-requiring input appends a node (output, inputs,
backward closure) to the tape in execution order.  ``Tape.backward`` replays
the node list in reverse, which is reverse topological order because
execution order is topological.  Tapes are meant to live for one training
step and be dropped after backward, so memory stays bounded.

Training runs in float32; gradient checking requires float64 because
float32 central differences are too noisy for a 1e-4 gate.  Repeated
backward calls without resetting ``grad`` accumulate, matching the usual
framework convention.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12  # floor for log arguments in cross-entropy and KL terms

_TAPE: "Tape | None" = None


class Tensor:
    """An ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same values that is cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # shape ops

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out = Tensor(self.data.reshape(shape))
        return _record(out, (self,), lambda g: (g.reshape(src_shape),))

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = Tensor(np.transpose(self.data, axes))
        return _record(out, (self,), lambda g: (np.transpose(g, inv),))

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        src_shape = self.data.shape
        out = Tensor(np.broadcast_to(self.data, shape).copy())
        return _record(out, (self,), lambda g: (_unbroadcast(g, src_shape),))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src_shape = self.data.shape
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return _record(out, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        src_shape = self.data.shape
        n = self.data.size if axis is None else self.data.shape[axis]
        out = Tensor(self.data.mean(axis=axis, keepdims=keepdims))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape) / n,)

        return _record(out, (self,), bwd)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        """Contiguous slice [start, start+length) along one axis."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        src_shape = self.data.shape
        out = Tensor(self.data[idx].copy())

        def bwd(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return _record(out, (self,), bwd)

    def select(self, axis: int, index: int) -> "Tensor":
        """Pick one index along an axis, dropping that axis."""
        src_shape = self.data.shape
        out = Tensor(np.take(self.data, index, axis=axis))

        def bwd(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            sl = [slice(None)] * len(src_shape)
            sl[axis] = index
            full[tuple(sl)] = g
            return (full,)

        return _record(out, (self,), bwd)

    # operator sugar

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Tape:
    """Ordered record of executed primitives for one backward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _TAPE
        self._prev = _TAPE
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

        Walks the node list in reverse execution order (reverse topological
        order).  Calling backward again without clearing grads accumulates.
        """
        if loss.data.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, bwd in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gt in zip(inputs, bwd(g)):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                    holders[key] = t
        for key, t in holders.items():
            if not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = grads[key].copy()
            else:
                t.grad = t.grad + grads[key]


def backward(loss: Tensor) -> None:
    """Backward on the currently active tape."""
    if _TAPE is None:
        raise RuntimeError("backward: no active tape")
    _TAPE.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    if _TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.nodes.append((out, inputs, bwd))
    return out


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# elementwise / linear-algebra primitives


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    ash, bsh = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    ash, bsh = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, ash), -_unbroadcast(g, bsh)))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    out = Tensor(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ash)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bsh)
        return ga, gb

    return _record(out, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with a fused backward; weight is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = np.matmul(x.data, weight.data)
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    xd, wd = x.data, weight.data

    def bwd(g):
        gx = np.matmul(g, wd.T)
        g2 = g.reshape(-1, g.shape[-1])
        gw = np.matmul(xd.reshape(-1, xd.shape[-1]).T, g2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    n = len(tensors)
    return _record(
        out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.maximum(x.data, 0))
    xd = x.data
    return _record(out, (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    s = _sigmoid(x.data)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, (x,), lambda g: (g * (1 - t * t),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gru_cell(xi: Tensor, h: Tensor, w_hh: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU timestep as a single tape node.

    ``xi`` is the precomputed input projection x W_ih + b_ih for this step,
    shape [B, 3H]; gate order r, z, n:
        r  = sigmoid(xi_r + h W_hr + b_hr)
        z  = sigmoid(xi_z + h W_hz + b_hz)
        n  = tanh(xi_n + r * (h W_hn + b_hn))
        h' = n + z * (h - n)
    The T-step recurrence dominates the training profile when each gate is
    its own node, so the step is fused with a hand-derived backward.
    """
    xi, h = _wrap(xi), _wrap(h)
    H = w_hh.shape[0]
    if xi.shape[-1] != 3 * H or h.shape[-1] != H:
        raise ValueError(f"gru_cell: xi {xi.shape} / h {h.shape} do not fit hidden size {H}")
    hh = np.matmul(h.data, w_hh.data) + b_hh.data
    r = _sigmoid(xi.data[..., :H] + hh[..., :H])
    z = _sigmoid(xi.data[..., H : 2 * H] + hh[..., H : 2 * H])
    hh_n = hh[..., 2 * H :]
    n = np.tanh(xi.data[..., 2 * H :] + r * hh_n)
    out = Tensor(n + z * (h.data - n))
    hd, wd = h.data, w_hh.data

    def bwd(g):
        dpre_n = g * (1 - z) * (1 - n * n)
        dpre_r = dpre_n * hh_n * r * (1 - r)
        dpre_z = g * (hd - n) * z * (1 - z)
        dxi = np.concatenate([dpre_r, dpre_z, dpre_n], axis=-1)
        dhh = np.concatenate([dpre_r, dpre_z, dpre_n * r], axis=-1)
        gh = g * z + np.matmul(dhh, wd.T)
        gw = np.matmul(hd.reshape(-1, H).T, dhh.reshape(-1, 3 * H))
        gb = dhh.reshape(-1, 3 * H).sum(axis=0)
        return dxi, gh, gw, gb

    return _record(out, (xi, h, w_hh, b_hh), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        dxhat = g * gd
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a [vocab, dim] table; ids is an integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: ids out of range for table {table.shape}")
    out = Tensor(table.data[ids])
    tshape = table.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype.type) / (1.0 - p)
    out = Tensor(x.data * keep)
    return _record(out, (x,), lambda g: (g * keep,))


# probability primitives


def masked_softmax(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over unmasked positions; masked positions are exactly zero.

    ``mask`` is boolean and broadcastable to the logits' shape.  The max
    unmasked logit is subtracted before exponentiation, so the result is
    overflow-safe and exactly invariant to shifting all unmasked logits
    when the shift is exactly representable.
    """
    logits = _wrap(logits)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not m.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has every position masked")
    neg = np.array(-np.inf, dtype=logits.dtype)
    xm = np.where(m, logits.data, neg)
    shift = xm.max(axis=axis, keepdims=True)
    e = np.exp(xm - shift)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _record(out, (logits,), bwd)


def cross_entropy(dist: Tensor, target: int) -> Tensor:
    """-log(dist[target]) for an already-normalized 1-D distribution.

    The log argument is floored at LOG_FLOOR so degenerate distributions
    yield a large finite loss instead of inf.  The training path uses the
    softmax-fused `cross_entropy_with_logits` instead.
    """
    dist = _wrap(dist)
    if dist.ndim != 1:
        raise ValueError(f"cross_entropy: expected 1-D distribution, got {dist.shape}")
    t = int(target)
    if not 0 <= t < dist.shape[0]:
        raise ValueError(f"cross_entropy: target {t} outside [0, {dist.shape[0]})")
    p = float(dist.data[t])
    out = Tensor(np.asarray(-np.log(max(p, LOG_FLOOR)), dtype=dist.dtype))

    def bwd(g):
        gd = np.zeros(dist.shape, dtype=dist.dtype)
        if p > LOG_FLOOR:
            gd[t] = -g / p
        return (gd,)

    return _record(out, (dist,), bwd)


def cross_entropy_with_logits(logits: Tensor, mask: np.ndarray, targets) -> Tensor:
    """Fused masked softmax + cross-entropy, per row.

    logits is [T] or [B, T]; targets an int or int array [B].  Returns the
    per-row loss (scalar or [B]).  Masked positions carry no probability;
    a masked target index is rejected.
    """
    logits = _wrap(logits)
    squeeze = logits.ndim == 1
    x = logits.data[None, :] if squeeze else logits.data
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    m = m[None, :] if squeeze else m
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, T = x.shape
    if t.shape != (n,):
        raise ValueError(f"cross_entropy_with_logits: targets {t.shape} for batch {n}")
    if (t < 0).any() or (t >= T).any():
        raise ValueError(f"cross_entropy_with_logits: target outside [0, {T})")
    if not m[np.arange(n), t].all():
        raise ValueError("cross_entropy_with_logits: target position is masked")
    neg = np.array(-np.inf, dtype=x.dtype)
    xm = np.where(m, x, neg)
    shift = xm.max(axis=-1, keepdims=True)
    e = np.exp(xm - shift)
    z = e.sum(axis=-1, keepdims=True)
    losses = (shift[:, 0] + np.log(z[:, 0])) - x[np.arange(n), t]
    out = Tensor(losses[0] if squeeze else losses)

    def bwd(g):
        p = e / z
        p[np.arange(n), t] -= 1.0
        gl = p * (np.atleast_1d(g))[:, None]
        return (gl[0] if squeeze else gl,)

    return _record(out, (logits,), bwd)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """sum_t p_t log(p_t / q_t) over the last axis, with 0*log0 = 0.

    Log arguments are floored at LOG_FLOOR, so q_t = 0 under p_t > 0 gives
    a large finite penalty instead of inf.
    """
    p, q = _wrap(p), _wrap(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    pd, qd = p.data, q.data
    active = pd > 0
    logp = np.log(np.maximum(pd, LOG_FLOOR))
    logq = np.log(np.maximum(qd, LOG_FLOOR))
    terms = np.where(active, pd * (logp - logq), 0.0)
    out = Tensor(terms.sum(axis=-1))

    def bwd(g):
        ge = np.expand_dims(np.asarray(g), -1)
        gp = np.where(active, (logp - logq + 1.0) * ge, 0.0)
        gq = np.where(active, -pd / np.maximum(qd, LOG_FLOOR) * ge, 0.0)
        return gp, gq

    return _record(out, (p, q), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over unmasked positions, fused with sigmoid."""
    logits = _wrap(logits)
    y = np.asarray(targets, dtype=logits.dtype)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("bce_with_logits: every position is masked")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray((per * m).sum() / n, dtype=logits.dtype))

    def bwd(g):
        return (g * (_sigmoid(z) - y) * m / n,)

    return _record(out, (logits,), bwd)


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` must rebuild the scalar loss from the current parameter values on
    every call and be deterministic (fixed RNG, dropout off); two forward
    passes are compared bitwise to catch violations.  Requires float64
    parameters.  Returns max over parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check: parameter {name!r} must be float64")
    y0 = fn().item()
    y1 = fn().item()
    if y0 != y1:
        raise ValueError("grad_check: computation is not deterministic")
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        tape.backward(fn())
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if p.grad is None:
            analytic = np.zeros_like(flat)
        else:
            analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
