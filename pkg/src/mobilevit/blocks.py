"""MobileNetv2 inverted residual and MobileViT blocks.

The MobileViT block runs a transformer across patches: a feature map
(B, d, H, W) is unfolded into (B*P, N, d) where each of the P intra-patch
positions becomes an independent sequence over the N patches, and folded
back afterwards. :class:`PatchGrid` is the pixel <-> (patch, position) map
both directions use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ConvBN, ConvSpec, Conv2d, LayerNorm, Module, TransformerLayer
from .rng import Rng
from .tensor import DTYPE, ShapeError, Tensor, concat, make, matmul


@dataclass(frozen=True)
class PatchGrid:
    h: int
    w: int
    H: int
    W: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError("patch dims must be >= 1")
        if self.H % self.h or self.W % self.w:
            raise ShapeError(f"patch {self.h}x{self.w} does not tile {self.H}x{self.W}; resize first")

    @property
    def P(self) -> int:
        return self.h * self.w

    @property
    def N(self) -> int:
        return (self.H // self.h) * (self.W // self.w)

    def to_token(self, y: int, x: int) -> tuple:
        """Pixel (y, x) -> (patch index n, intra-patch position p)."""
        n = (y // self.h) * (self.W // self.w) + x // self.w
        p = (y % self.h) * self.w + x % self.w
        return n, p

    def to_pixel(self, n: int, p: int) -> tuple:
        nw = self.W // self.w
        return (n // nw) * self.h + p // self.w, (n % nw) * self.w + p % self.w


def _unfold_array(a: np.ndarray, g: PatchGrid) -> np.ndarray:
    b, d = a.shape[:2]
    a = a.reshape(b, d, g.H // g.h, g.h, g.W // g.w, g.w).transpose(0, 3, 5, 2, 4, 1)
    return np.ascontiguousarray(a).reshape(b * g.P, g.N, d)


def _fold_array(a: np.ndarray, g: PatchGrid) -> np.ndarray:
    bp, _, d = a.shape
    b = bp // g.P
    a = a.reshape(b, g.h, g.w, g.H // g.h, g.W // g.w, d).transpose(0, 5, 3, 1, 4, 2)
    return np.ascontiguousarray(a).reshape(b, d, g.H, g.W)


def unfold(x: Tensor, grid: PatchGrid) -> Tensor:
    """(B, d, H, W) -> (B*P, N, d); ``out[b*P + p, n, c] = x[b, c, y, x]``."""
    if x.ndim != 4 or x.shape[2:] != (grid.H, grid.W):
        raise ShapeError(f"unfold: input {x.shape} does not match grid {grid.H}x{grid.W}")
    return make(_unfold_array(x.data, grid), (x,), "unfold", lambda g: (_fold_array(g, grid),))


def fold(x: Tensor, grid: PatchGrid) -> Tensor:
    """Inverse of :func:`unfold`."""
    if x.ndim != 3 or x.shape[0] % grid.P or x.shape[1] != grid.N:
        raise ShapeError(f"fold: input {x.shape} inconsistent with P={grid.P}, N={grid.N}")
    return make(_fold_array(x.data, grid), (x,), "fold", lambda g: (_unfold_array(g, grid),))


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) 1-D interpolation weights, half-pixel centers (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(DTYPE)


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    if height < 1 or width < 1:
        raise ValueError("target size must be >= 1")
    if x.shape[2:] == (height, width):
        return x
    rows = Tensor(bilinear_matrix(height, x.shape[2]))
    cols = Tensor(bilinear_matrix(width, x.shape[3]).T)
    return matmul(matmul(rows, x), cols)


def resize_array(a: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (..., H, W) numpy array, same sampling as :func:`resize_bilinear`."""
    if a.shape[-2:] == (height, width):
        return a
    return bilinear_matrix(height, a.shape[-2]) @ a @ bilinear_matrix(width, a.shape[-1]).T


# -- MV2 ----------------------------------------------------------------------------


@dataclass(frozen=True)
class MV2Spec:
    in_channels: int
    out_channels: int
    stride: int = 1
    expansion: int = 4

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


class MV2Block(Module):
    """1x1 expand -> 3x3 depthwise -> 1x1 project, plus identity when shapes allow."""

    def __init__(self, spec: MV2Spec, rng: Rng):
        super().__init__()
        if spec.stride not in (1, 2):
            raise ValueError(f"MV2 stride must be 1 or 2, got {spec.stride}")
        self.spec = spec
        hidden = spec.in_channels * spec.expansion
        self.expand = ConvBN(ConvSpec(spec.in_channels, hidden, kernel=1), rng.split("expand"))
        self.depthwise = ConvBN(ConvSpec(hidden, hidden, kernel=3, stride=spec.stride, groups=hidden),
                                rng.split("depthwise"))
        self.project = ConvBN(ConvSpec(hidden, spec.out_channels, kernel=1), rng.split("project"), act=False)

    def forward(self, x):
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.spec.residual else y


# -- MobileViT block ----------------------------------------------------------------


@dataclass(frozen=True)
class MobileViTBlockSpec:
    channels: int
    dim: int
    depth: int
    kernel: int = 3
    patch: tuple = (2, 2)
    heads: int = 4
    skip: bool = True
    ffn_dim: int | None = None

    @property
    def full_receptive_field(self) -> bool:
        return self.patch[0] <= self.kernel and self.patch[1] <= self.kernel


class MobileViTBlock(Module):
    def __init__(self, spec: MobileViTBlockSpec, rng: Rng):
        super().__init__()
        self.spec = spec
        c, d, n = spec.channels, spec.dim, spec.kernel
        self.local = ConvBN(ConvSpec(c, c, kernel=n), rng.split("local"))
        self.proj_in = Conv2d(ConvSpec(c, d, kernel=1), rng.split("proj_in"))
        self.layers = []
        for i in range(spec.depth):
            layer = TransformerLayer(d, spec.heads, rng.split("transformer", i), spec.ffn_dim)
            setattr(self, f"transformer{i}", layer)
            self.layers.append(layer)
        self.norm = LayerNorm(d)
        self.proj_out = ConvBN(ConvSpec(d, c, kernel=1), rng.split("proj_out"))
        self.fuse = ConvBN(ConvSpec(2 * c if spec.skip else c, c, kernel=n), rng.split("fuse"))

    def padded_size(self, height: int, width: int) -> tuple:
        """Spatial size after rounding up to multiples of the patch."""
        ph, pw = self.spec.patch
        return -(-height // ph) * ph, -(-width // pw) * pw

    def global_features(self, x: Tensor) -> Tensor:
        """Local conv, projection, unfold, transformers, fold: (B, d, H, W)."""
        _, _, hgt, wid = x.shape
        y = self.proj_in(self.local(x))
        ht, wt = self.padded_size(hgt, wid)
        y = resize_bilinear(y, ht, wt)
        grid = PatchGrid(self.spec.patch[0], self.spec.patch[1], ht, wt)
        tokens = unfold(y, grid)
        for layer in self.layers:
            tokens = layer(tokens)
        y = fold(self.norm(tokens), grid)
        return resize_bilinear(y, hgt, wid)

    def forward(self, x):
        y = self.proj_out(self.global_features(x))
        if self.spec.skip:
            y = concat([x, y], axis=1)
        return self.fuse(y)
