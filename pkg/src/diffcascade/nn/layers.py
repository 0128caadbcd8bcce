"""Parameterized building blocks for the denoiser networks."""

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Tiny parameter container: tracks child modules and named tensors."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        """name -> ndarray view of every parameter (checkpointing)."""
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(rng, shape, std, dtype):
    if std == 0.0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = rng.standard_normal(shape).astype(dtype) * dtype.type(std)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, zero_init=False, bias=True):
        super().__init__()
        dtype = np.dtype(dtype)
        std = 0.0 if zero_init else 1.0 / math.sqrt(in_dim)
        self.w = _param(rng, (in_dim, out_dim), std, dtype)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        out = ag.matmul(x, self.w)
        if self.b is not None:
            out = ag.add(out, self.b)
        return out


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, rng=None, stride=1, padding=None,
                 dtype=np.float32, zero_init=False, bias=True):
        super().__init__()
        dtype = np.dtype(dtype)
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        std = 0.0 if zero_init else 1.0 / math.sqrt(fan_in)
        self.w = _param(rng, (out_ch, in_ch, kernel, kernel), std, dtype)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return ag.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    """Group normalization over (C/G, H, W) groups, NCHW input."""

    def __init__(self, channels, groups=None, eps=1e-5, dtype=np.float32):
        super().__init__()
        dtype = np.dtype(dtype)
        if groups is None:
            groups = 8
            while channels % groups != 0:
                groups //= 2
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.g = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        bsz, c, h, w = x.shape
        xg = x.reshape(bsz, self.groups, c // self.groups, h, w)
        mu = xg.mean(axis=(2, 3, 4), keepdims=True)
        centered = xg - mu
        var = (centered ** 2).mean(axis=(2, 3, 4), keepdims=True)
        normed = centered * ((var + self.eps) ** -0.5)
        out = normed.reshape(bsz, c, h, w)
        return out * self.g.reshape(1, c, 1, 1) + self.b.reshape(1, c, 1, 1)


class LayerNorm(Module):
    """Layer normalization over the last axis."""

    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        dtype = np.dtype(dtype)
        self.eps = eps
        self.g = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered ** 2).mean(axis=-1, keepdims=True)
        return centered * ((var + self.eps) ** -0.5) * self.g + self.b


class Attention(Module):
    """Multi-head scaled dot-product attention.

    Queries come from ``x`` (B, Nq, C); keys/values from ``context``
    (B, Nk, kv_dim), which defaults to ``x`` (self-attention).  An optional
    boolean key mask (B, Nk) excludes padding tokens exactly: masked
    positions receive -1e30 before the softmax, so their weight is 0.
    """

    def __init__(self, dim, kv_dim=None, head_dim=16, rng=None, dtype=np.float32):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = max(1, dim // head_dim)
        self.head_dim = dim // self.heads
        if self.head_dim * self.heads != dim:
            raise ValueError(f"dim {dim} not divisible into heads of {head_dim}")
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.to_q = Linear(dim, dim, rng, dtype=dtype, bias=False)
        self.to_k = Linear(kv_dim, dim, rng, dtype=dtype, bias=False)
        self.to_v = Linear(kv_dim, dim, rng, dtype=dtype, bias=False)
        self.to_out = Linear(dim, dim, rng, dtype=dtype, zero_init=True)

    def __call__(self, x, context=None, key_mask=None):
        context = x if context is None else context
        bsz, nq, c = x.shape
        nk = context.shape[1]
        h, d = self.heads, self.head_dim

        q = self.to_q(x).reshape(bsz, nq, h, d).transpose(0, 2, 1, 3)
        k = self.to_k(context).reshape(bsz, nk, h, d).transpose(0, 2, 1, 3)
        v = self.to_v(context).reshape(bsz, nk, h, d).transpose(0, 2, 1, 3)

        scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * self.scale   # (B, h, Nq, Nk)
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e30)
            scores = scores + bias[:, None, None, :].astype(scores.dtype)
        attn = ag.softmax(scores, axis=-1)
        out = ag.matmul(attn, v)                                       # (B, h, Nq, d)
        out = out.transpose(0, 2, 1, 3).reshape(bsz, nq, c)
        return self.to_out(out)


def sinusoidal_embedding(values, dim, dtype=np.float32):
    """Sinusoidal features for scalars in [0, 1] (timestep / augmentation level).

    values: array of shape (B,). Returns (B, dim) as a constant Tensor.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = values[:, None] * 1000.0 * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)
    return Tensor(emb)
