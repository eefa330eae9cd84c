"""Layers: convolution, batch/layer normalization, Swish, attention, transformer.

Each layer exists as a function over tensors (``conv2d``, ``batch_norm``, ...)
and as a :class:`Module` that owns its weights. Modules register parameters,
buffers and children by attribute assignment, in declaration order.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .rng import Rng
from .tensor import DTYPE, ShapeError, Tensor, make, matmul, softmax, swish
from .tensor import add, concat, permute, reshape  # noqa: F401  (re-exported)

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- specs ------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    groups: int = 1
    same_padding: bool = True
    bias: bool = False

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}")
        if self.same_padding and self.kernel % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got {self.kernel}")
        if self.stride < 1 or self.kernel < 1:
            raise ValueError("kernel and stride must be >= 1")

    @property
    def padding(self) -> int:
        return self.kernel // 2 if self.same_padding else 0

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)


@dataclass(frozen=True)
class AttentionSpec:
    dim: int
    heads: int = 4

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"model dim {self.dim} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


# -- functional ops -------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups or o % groups:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}, groups={groups}")
    kern = _kernels.get()
    if x.data.dtype != DTYPE or weight.data.dtype != DTYPE:
        kern = _kernels.BACKENDS["python"]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xd, wd = x.data, weight.data

    if groups == c and o == c and cg == 1:
        out = kern.depthwise_forward(xd, wd, stride, padding)

        def backward_core(g):
            return kern.depthwise_backward(np.ascontiguousarray(g), xd, wd, stride, padding)
    else:
        og = o // groups
        pointwise = kh == kw == 1 and stride == 1 and padding == 0
        cols = xd.reshape(b, c, h * w) if pointwise else kern.im2col(xd, kh, kw, stride, padding)
        cols = cols.reshape(b, groups, cg * kh * kw, ho * wo)
        w2 = wd.reshape(groups, og, cg * kh * kw)
        out = np.matmul(w2[None], cols).reshape(b, o, ho, wo)

        def backward_core(g):
            g = g.reshape(b, groups, og, ho * wo)
            gw = np.einsum("bgol,bgkl->gok", g, cols, optimize=True).reshape(wd.shape)
            gcols = np.matmul(np.swapaxes(w2, -1, -2)[None], g).reshape(b, c * kh * kw, ho * wo)
            if pointwise:
                gx = gcols.reshape(b, c, h, w)
            else:
                gx = kern.col2im(np.ascontiguousarray(gcols, dtype=DTYPE), (b, c, h, w), kh, kw, stride, padding)
            return gx, gw

    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def backward(g):
        gx, gw = backward_core(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make(out, inputs, "conv2d", backward)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, like most frameworks).
    """
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    shp = (1, c, 1, 1)
    gamma = weight.data.reshape(shp)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))

        def backward(g):
            dxhat = g * gamma
            gx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(DTYPE).reshape(shp)
        xhat = (x.data - running_mean.reshape(shp)) * inv

        def backward(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gamma + bias.data.reshape(shp)
    return make(out, (x, weight, bias), "batch_norm", backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm parameters must have shape ({d},), input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        dxhat = g * weight.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(out, (x, weight, bias), "layer_norm", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return x.mean(axis=(2, 3))


def multi_head_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int,
                         return_weights: bool = False):
    """Scaled dot-product self-attention over (S, N, d); S sequences are independent."""
    s, n, d = x.shape
    if d % heads:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return permute(reshape(t, (s, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (s, n, d))
    out = linear(ctx, wo, bo)
    return (out, attn) if return_weights else out


# -- modules ----------------------------------------------------------------------


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_no_decay", set())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, data, decay: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        setattr(self, name, t)
        if not decay:
            self._no_decay.add(name)
        return t

    def buffer(self, name: str, data) -> np.ndarray:
        arr = np.ascontiguousarray(data, dtype=DTYPE)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)
        return arr

    def children(self):
        return self._children.items()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def decay_mask(self, prefix: str = "") -> dict:
        """Full parameter name -> whether weight decay applies."""
        mask = {prefix + n: n not in self._no_decay for n in self._params}
        for cname, child in self._children.items():
            mask.update(child.decay_mask(f"{prefix}{cname}."))
        return mask

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((n, p.data) for n, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if own[name].shape != tuple(arr.shape):
                raise ShapeError(f"{name}: expected {own[name].shape}, got {tuple(arr.shape)}")
            own[name][...] = arr

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_weight(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.truncated_normal(shape, std=math.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: Rng):
        super().__init__()
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel * spec.kernel
        self.param("weight", init_weight(rng, spec.weight_shape, fan_in))
        if spec.bias:
            self.param("bias", np.zeros(spec.out_channels), decay=False)

    def forward(self, x):
        s = self.spec
        return conv2d(x, self.weight, getattr(self, "bias", None), s.stride, s.padding, s.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.param("weight", np.ones(channels), decay=False)
        self.param("bias", np.zeros(channels), decay=False)
        self.buffer("running_mean", np.zeros(channels))
        self.buffer("running_var", np.ones(channels))

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class ConvBN(Module):
    """conv -> BN -> optional Swish; the conv carries no bias."""

    def __init__(self, spec: ConvSpec, rng: Rng, act: bool = True):
        super().__init__()
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(spec.out_channels)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return swish(y) if self.act else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.param("weight", np.ones(dim), decay=False)
        self.param("bias", np.zeros(dim), decay=False)

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True):
        super().__init__()
        self.param("weight", init_weight(rng, (in_features, out_features), in_features))
        if bias:
            self.param("bias", np.zeros(out_features), decay=False)

    def forward(self, x):
        return linear(x, self.weight, getattr(self, "bias", None))


class MultiHeadAttention(Module):
    def __init__(self, spec: AttentionSpec, rng: Rng):
        super().__init__()
        self.spec = spec
        d = spec.dim
        self.q = Linear(d, d, rng.split("q"))
        self.k = Linear(d, d, rng.split("k"))
        self.v = Linear(d, d, rng.split("v"))
        self.out = Linear(d, d, rng.split("out"))

    def forward(self, x, return_weights: bool = False):
        return multi_head_attention(
            x, self.q.weight, self.q.bias, self.k.weight, self.k.bias, self.v.weight, self.v.bias,
            self.out.weight, self.out.bias, self.spec.heads, return_weights=return_weights)


class TransformerLayer(Module):
    """Pre-norm encoder layer: x + MHA(LN(x)), then + FFN(LN(.)) with FFN width ``ffn_dim``."""

    def __init__(self, dim: int, heads: int, rng: Rng, ffn_dim: int | None = None):
        super().__init__()
        ffn_dim = ffn_dim or 2 * dim
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(AttentionSpec(dim, heads), rng.split("attn"))
        self.norm2 = LayerNorm(dim)
        self.ffn1 = Linear(dim, ffn_dim, rng.split("ffn1"))
        self.ffn2 = Linear(ffn_dim, dim, rng.split("ffn2"))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn2(swish(self.ffn1(self.norm2(x))))
