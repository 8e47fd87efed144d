"""Neural building blocks on top of the autodiff core.

Parameters are plain ``Tensor`` objects discovered by attribute walking, so
a module tree exposes a flat name -> tensor mapping for the optimizer and
for checkpoints.  Linear and attention weights use fan-based uniform
initialization; recurrent weights and embedding tables use N(0, 0.02^2);
biases start at zero and layer-norm gains at one.

Parameters whose gradient is mathematically zero by construction are not
created at all: a bias on the attention key projection and a bias on a
softmax-bound output head only shift logits uniformly, which the softmax
cancels.  Leaving them in would never train them and would poison
finite-difference gradient gates with 0/0 noise.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


class Module:
    """Base class providing parameter discovery and train/eval switching."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Flat {dotted.name: tensor} map over this module and submodules."""
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> None:
        self._set_mode(True)

    def eval(self) -> None:
        self._set_mode(False)

    def to_dtype(self, dtype) -> "Module":
        """Cast all parameters in place; used to run gradient checks in 64-bit."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def _set_mode(self, training: bool) -> None:
        self.training = training
        for value in vars(self).values():
            if isinstance(value, Module):
                value._set_mode(training)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item._set_mode(training)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32), requires_grad=True)


def fan_uniform(rng: np.random.Generator, d_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(d_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = fan_uniform(rng, d_in, (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class GRU(Module):
    """Unidirectional GRU over [B, T, d_in], returning all states [B, T, H].

    Gate equations follow the usual convention with gate order r, z, n:
        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = n + z * (h - n)
    The input projection for all steps is computed in one matmul; only the
    recurrent matmul runs per step.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_hidden = d_hidden
        self.w_ih = _normal(rng, (d_in, 3 * d_hidden))
        self.b_ih = Tensor(np.zeros(3 * d_hidden, dtype=np.float32), requires_grad=True)
        self.w_hh = _normal(rng, (d_hidden, 3 * d_hidden))
        self.b_hh = Tensor(np.zeros(3 * d_hidden, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        H = self.d_hidden
        xi_all = ad.linear(x, self.w_ih, self.b_ih)
        h = Tensor(np.zeros((B, H), dtype=np.float32))
        states = []
        for t in range(T):
            h = ad.gru_cell(xi_all.select(1, t), h, self.w_hh, self.b_hh)
            states.append(h)
        return ad.stack(states, axis=1)


class PredHead(Module):
    """Per-position scalar scorer: LayerNorm -> Linear -> ReLU -> Linear(1).

    Maps [B, T, d_in] to logits [B, T].  The output layer has no bias: the
    logits only ever feed position softmaxes, which ignore a uniform shift.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(d_in)
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, 1, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc2(ad.relu(self.fc1(self.norm(x))))
        B, T, _ = h.shape
        return h.reshape(B, T)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with h heads over [B, T, d] inputs.

    ``key_mask`` [B, T_k] marks valid key positions; invalid keys receive
    exactly zero attention.  Queries and keys may come from different
    sequences (cross-attention).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"attention: dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        # a key bias shifts each query's score row uniformly, which the
        # attention softmax cancels, so the parameter would be inert
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.d_head).transpose((0, 2, 1, 3))

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask: np.ndarray) -> Tensor:
        B, Tq, dim = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = ad.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        attn = ad.masked_softmax(scores, np.asarray(key_mask, dtype=bool)[:, None, None, :])
        ctx = ad.matmul(attn, v)
        ctx = ctx.transpose((0, 2, 1, 3)).reshape(B, Tq, dim)
        return self.out_proj(ctx)
