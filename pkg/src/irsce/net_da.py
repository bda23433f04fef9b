"""Denoising and attention blocks that refine the correlation matrix.

A complex correlation matrix ``C`` of shape ``[B, G, K]`` is folded into
images with :func:`vec2mat_corr`; real and imaginary parts become two
images of the same batch, each with ``K`` channels (one per subcarrier), and
share every filter.

``DaBlock`` is the DnCNN denoiser followed by frequency (FAN) and spatial
(SAN) attention.  ``MdaBlock`` replaces the DnCNN with chained depthwise
separable blocks and uses a 1x1 spatial attention.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensorlab as tl
from .config import ConfigError
from .tensorlab import CTensor, Tensor

# ---------------------------------------------------------------- reshaping


def vec2mat_corr(c: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Column-major unflattening of ``[..., rows*cols, K]`` to ``[..., rows, cols, K]``."""
    lead = c.shape[:-2]
    k = c.shape[-1]
    out = c.reshape(lead + (cols, rows, k))
    return np.swapaxes(out, -3, -2)


def mat2vec_corr(m: np.ndarray) -> np.ndarray:
    lead = m.shape[:-3]
    rows, cols, k = m.shape[-3:]
    return np.swapaxes(m, -3, -2).reshape(lead + (rows * cols, k))


def to_images(c: CTensor, rows: int, cols: int) -> Tensor:
    """``[B, rows*cols, K]`` complex to ``[2B, K, rows, cols]`` real images (re batch first)."""
    b, g, k = c.shape
    if g != rows * cols:
        raise tl.DimensionError(f"correlation length {g} does not fold into {rows}x{cols}")
    parts = [p.reshape((b, cols, rows, k)).transpose((0, 3, 2, 1)) for p in (c.re, c.im)]
    return tl.concat(parts, axis=0)


def from_images(img: Tensor) -> CTensor:
    """Inverse of :func:`to_images`."""
    b2, k, rows, cols = img.shape
    b = b2 // 2
    flat = img.transpose((0, 3, 2, 1)).reshape((b2, rows * cols, k))
    return CTensor(flat[:b], flat[b:])


# ---------------------------------------------------------------- parameters


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Block:
    """Named parameter container shared by the two block types."""

    prefix = "block"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[f"{self.prefix}.{name}"] = Tensor(np.asarray(value, dtype=float), requires_grad=True)

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def n_params(self, conv_only: bool = False) -> int:
        keys = [k for k in self.params if not conv_only or ".fc" not in k]
        return int(sum(self.params[k].data.size for k in keys))

    def zero_(self) -> None:
        for key, t in list(self.params.items()):
            self.params[key] = Tensor(np.zeros_like(t.data), requires_grad=True)


class DaBlock(Block):
    """DnCNN with frequency and spatial attention on a ``G_i x G_b`` grid."""

    prefix = "da"

    def __init__(self, k: int, g_i: int, g_b: int, l_d: int = 2,
                 rng: np.random.Generator | None = None, zero_last: bool = True):
        super().__init__()
        self.k, self.g_i, self.g_b, self.l_d = k, g_i, g_b, l_d
        rng = rng if rng is not None else np.random.default_rng(0)
        for j in range(l_d):
            w = _he(rng, (k, k, 3, 3), 9 * k)
            if zero_last and j == l_d - 1:
                w = np.zeros_like(w)
            self._add(f"dn{j}.w", w)
            self._add(f"dn{j}.b", np.zeros(k))
        self._add("fc1.w", _he(rng, (2 * k, 4 * k), 4 * k))
        self._add("fc1.b", np.zeros(2 * k))
        self._add("fc2.w", np.zeros((2 * k, 2 * k)) if zero_last else _he(rng, (2 * k, 2 * k), 2 * k))
        self._add("fc2.b", np.zeros(2 * k))
        self._add("s1.w", _he(rng, (k, k, 3, 3), 9 * k))
        self._add("s1.b", np.zeros(k))
        self._add("s2.w", np.zeros((1, 2, 3, 3)) if zero_last else _he(rng, (1, 2, 3, 3), 18))
        self._add("s2.b", np.zeros(1))

    def dncnn(self, img: Tensor) -> Tensor:
        """``C_a - F_D(C_a)`` on ``[2B, K, G_i, G_b]`` images."""
        if img.shape[1] != self.k:
            raise tl.DimensionError(f"input has {img.shape[1]} subcarrier channels, filters expect {self.k}")
        h = img
        for j in range(self.l_d):
            h = tl.conv2d(h, self.p(f"dn{j}.w"), self.p(f"dn{j}.b"))
            if j < self.l_d - 1:
                h = tl.leaky_relu(h)
        return tl.sub(img, h)

    def fan(self, gd: Tensor) -> tuple[Tensor, Tensor]:
        """Frequency attention; returns ``Z''_c`` and the per-subcarrier weights ``[B, K, 2]``."""
        b2, k, r, c = gd.shape
        b = b2 // 2
        planes = gd.reshape((2, b, k, r * c))
        avg = tl.pool_reduce(planes, (3,), "avg")
        mx = tl.pool_reduce(planes, (3,), "max")
        stats = tl.concat([avg, mx], axis=0)                    # [4, B, K, 1]
        vec = stats.transpose((1, 0, 2, 3)).reshape((b, 4 * k))
        hid = tl.leaky_relu(tl.dense(vec, self.p("fc1.w"), self.p("fc1.b")))
        z = tl.dense(hid, self.p("fc2.w"), self.p("fc2.b"))       # [B, 2K]
        zk = z.reshape((b, k, 2))
        scale = zk.transpose((2, 0, 1)).reshape((2, b, k, 1))
        out = tl.add(planes, tl.mul(scale, planes)).reshape((b2, k, r, c))
        return out, zk

    def san(self, zc: Tensor, gd: Tensor) -> Tensor:
        """Spatial attention fused with the skip path: ``G_D + Z''_s * Z''_c``."""
        zs = tl.leaky_relu(tl.conv2d(zc, self.p("s1.w"), self.p("s1.b")))
        pooled = tl.concat([tl.pool_reduce(zs, (1,), "avg"), tl.pool_reduce(zs, (1,), "max")], axis=1)
        att = tl.leaky_relu(tl.conv2d(pooled, self.p("s2.w"), self.p("s2.b")))
        return tl.add(gd, tl.mul(att, zc))

    def __call__(self, c: CTensor) -> CTensor:
        img = to_images(c, self.g_i, self.g_b)
        gd = self.dncnn(img)
        zc, _ = self.fan(gd)
        return from_images(self.san(zc, gd))


class MdaBlock(Block):
    """Mobile denoising blocks plus a 1x1 spatial attention on a ``sqrt(G_i)`` square."""

    prefix = "mda"

    def __init__(self, k: int, g_i: int, l_di: int = 2,
                 rng: np.random.Generator | None = None, zero_last: bool = True):
        super().__init__()
        side = math.isqrt(g_i)
        if side * side != g_i:
            raise ConfigError(f"g_i={g_i} is not a perfect square")
        self.k, self.g_i, self.side, self.l_di = k, g_i, side, l_di
        rng = rng if rng is not None else np.random.default_rng(0)
        for j in range(l_di):
            self._add(f"dw{j}.w", _he(rng, (k, 3, 3), 9))
            self._add(f"dw{j}.b", np.zeros(k))
            pw = np.zeros((k, k, 1, 1)) if zero_last else _he(rng, (k, k, 1, 1), k)
            self._add(f"pw{j}.w", pw)
            self._add(f"pw{j}.b", np.zeros(k))
        self._add("sa.w", np.zeros((1, 2, 1, 1)) if zero_last else _he(rng, (1, 2, 1, 1), 2))
        self._add("sa.b", np.zeros(1))

    def denoise(self, img: Tensor) -> Tensor:
        if img.shape[1] != self.k:
            raise tl.DimensionError(f"input has {img.shape[1]} subcarrier channels, filters expect {self.k}")
        h = img
        total = None
        for j in range(self.l_di):
            h = tl.leaky_relu(tl.depthwise_conv2d(h, self.p(f"dw{j}.w"), self.p(f"dw{j}.b")))
            h = tl.leaky_relu(tl.conv2d(h, self.p(f"pw{j}.w"), self.p(f"pw{j}.b")))
            total = h if total is None else tl.add(total, h)
        return tl.sub(img, total)

    def attend(self, gd: Tensor) -> Tensor:
        pooled = tl.concat([tl.pool_reduce(gd, (1,), "avg"), tl.pool_reduce(gd, (1,), "max")], axis=1)
        att = tl.leaky_relu(tl.conv2d(pooled, self.p("sa.w"), self.p("sa.b")))
        return tl.add(gd, tl.mul(att, gd))

    def __call__(self, c: CTensor) -> CTensor:
        img = to_images(c, self.side, self.side)
        return from_images(self.attend(self.denoise(img)))


def dncnn_conv_params(k: int, l_d: int) -> int:
    """Weights and biases of ``l_d`` full ``K x (3x3xK)`` layers."""
    return l_d * (9 * k * k + k)


def mda_params(k: int, l_di: int) -> int:
    return l_di * (9 * k + k + k * k + k) + 3
