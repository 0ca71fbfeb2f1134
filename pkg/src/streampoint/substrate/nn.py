"""Parameter containers and the attention building blocks used by the model."""

from __future__ import annotations

import math

import numpy as np

from streampoint.errors import ShapeError
from streampoint.substrate import tensor as T
from streampoint.substrate.tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always tracks gradients."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal module tree; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return dict(sorted(out.items()))

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (identity of the Parameter objects is kept)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} vs model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = init_normal(rng, (d_in, d_out), std)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class ModulatedLayerNorm(Module):
    """Layer norm with gain/bias predicted from a conditioning vector."""

    def __init__(self, d: int, d_cond: int, rng: np.random.Generator):
        self.w_gain = init_normal(rng, (d_cond, d), 0.02)
        self.b_gain = Parameter(np.ones(d))
        self.w_bias = init_normal(rng, (d_cond, d), 0.02)
        self.b_bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        return T.modulated_layer_norm(x, cond, self.w_gain, self.b_gain, self.w_bias, self.b_bias)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d if d_out is None else d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, q_pos=None, k_pos=None) -> Tensor:
    """Multi-head scaled dot-product attention over token matrices.

    ``q`` is ``(n_q, d)``, ``k`` and ``v`` are ``(n_k, d)``. RoPE is applied
    per head to ``q``/``k`` when their positions are given; a side without
    positions is left unrotated.
    """
    nq, d = q.shape
    nk = k.shape[0]
    if d % heads or k.shape[1] != d or v.shape[1] % heads:
        raise ShapeError(f"attention: widths q={q.shape}, k={k.shape}, v={v.shape} vs {heads} heads")
    if v.shape[0] != nk:
        raise ShapeError(f"attention: {nk} keys but {v.shape[0]} values")
    dh = d // heads
    dv = v.shape[1] // heads
    qh = T.transpose(T.reshape(q, (nq, heads, dh)), (1, 0, 2))
    kh = T.transpose(T.reshape(k, (nk, heads, dh)), (1, 2, 0))
    vh = T.transpose(T.reshape(v, (nk, heads, dv)), (1, 0, 2))
    if q_pos is not None:
        qh = T.rope_apply(qh, q_pos)
    if k_pos is not None:
        kh = T.transpose(T.rope_apply(T.transpose(kh, (0, 2, 1)), k_pos), (0, 2, 1))
    scores = T.matmul(T.scale(qh, 1.0 / math.sqrt(dh)), kh)
    out = T.matmul(T.softmax(scores), vh)
    return T.reshape(T.transpose(out, (1, 0, 2)), (nq, heads * dv))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)

    def __call__(self, x: Tensor, pos=None) -> Tensor:
        d = x.shape[-1]
        q, k, v = T.split(self.qkv(x), [d, d, d], axis=-1)
        return self.proj(attention(q, k, v, self.heads, pos, pos))


class CrossAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.kv = Linear(d, 2 * d, rng)
        self.proj = Linear(d, d, rng)

    def __call__(self, x: Tensor, context: Tensor, x_pos=None, ctx_pos=None) -> Tensor:
        d = x.shape[-1]
        k, v = T.split(self.kv(context), [d, d], axis=-1)
        return self.proj(attention(self.q(x), k, v, self.heads, x_pos, ctx_pos))


class Block(Module):
    """Pre-norm transformer block: self-attention then MLP, both residual."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, x: Tensor, pos=None) -> Tensor:
        x = x + self.attn(self.norm1(x), pos)
        return x + self.mlp(self.norm2(x))


class ModulatedBlock(Module):
    """Transformer block whose layer norms are modulated by a conditioning vector."""

    def __init__(self, d: int, d_cond: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = ModulatedLayerNorm(d, d_cond, rng)
        self.attn = SelfAttention(d, heads, rng)
        self.norm2 = ModulatedLayerNorm(d, d_cond, rng)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, x: Tensor, cond: Tensor, pos=None, modulate: bool = True) -> Tensor:
        """``modulate=False`` swaps each modulated norm for a plain unit-gain layer norm."""
        norm1 = self.norm1(x, cond) if modulate else T.layer_norm(x)
        x = x + self.attn(norm1, pos)
        norm2 = self.norm2(x, cond) if modulate else T.layer_norm(x)
        return x + self.mlp(norm2)
