"""Small dense-tensor core with reverse-mode automatic differentiation.

Only the operations the estimation networks need are provided.  Complex
quantities are carried as :class:`CTensor` pairs of real tensors, and every
complex linear map is expanded into real products following the 2x2 block
form ``[[Re, -Im], [Im, Re]]``.

A :class:`Tensor` is immutable once built.  Operations record their inputs
and a closure that pushes the output adjoint back to them; :func:`backward`
walks the graph in reverse topological order.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 4
LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class NumericalError(FloatingPointError):
    """A forward value became NaN or infinite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents: tuple = (), backward_fn=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype(data))
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite value produced by '{op}'")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype == np.float32:
        return np.float32
    return np.float64


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, dtype=data.dtype, op=op,
                  parents=tuple(parents) if needs else (),
                  backward_fn=backward_fn if needs else None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: ((a, g / b.data), (b, -g * out / b.data)), "div")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: ((x, 2.0 * g * x.data),), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: ((x, 0.5 * g / out),), "sqrt")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``; the kink takes the positive branch."""
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: ((x, np.where(pos, g, slope * g)),), "leaky_relu")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (a, ga), (b, gb)

    return _make(out, (a, b), back, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: ((x, g.reshape(x.shape)),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inv)),), "transpose")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape)),)

    return _make(np.asarray(out), (x,), back, "sum")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return ((x, full),)

    # np.array keeps 0-d results 0-d, unlike ascontiguousarray
    return _make(np.array(out, copy=True), (x,), back, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(zip(xs, np.split(g, cuts, axis=axis)))

    return _make(out, tuple(xs), back, "concat")


# ---------------------------------------------------------------- layers

def _check_odd(kh: int, kw: int) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel extents must be odd, got {kh}x{kw}")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Same-padded patches ``[N, C, kh, kw, H, W]`` of ``[N, C, H, W]``."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols


def _col2im(cols: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to ``[N, C, H, W]``."""
    n, c, kh, kw, h, w = cols.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"convolution input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernels`` is
    ``[C_out, C_in, kh, kw]`` and ``bias`` is ``[C_out]``.
    """
    xb, squeeze = _batched(x)
    co, ci, kh, kw = kernels.shape
    _check_odd(kh, kw)
    if xb.shape[1] != ci or bias.shape != (co,):
        raise DimensionError(f"conv2d input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    n, _, h, w = xb.shape
    cols = _im2col(xb.data, kh, kw).reshape(n, ci * kh * kw, h * w)
    wmat = kernels.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, co, h, w) + bias.data[:, None, None]

    def back(g):
        g2 = g.reshape(n, co, h * w)
        gw = gx = None
        if kernels.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        if xb.requires_grad:
            gx = _col2im(np.matmul(wmat.T, g2).reshape(n, ci, kh, kw, h, w))
        return (xb, gx), (kernels, gw), (bias, g.sum(axis=(0, 2, 3)))

    out_t = _make(out, (xb, kernels, bias), back, "conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def depthwise_conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """One same-padded filter per channel: ``kernels`` is ``[C, kh, kw]``."""
    xb, squeeze = _batched(x)
    c, kh, kw = kernels.shape
    _check_odd(kh, kw)
    if xb.shape[1] != c or bias.shape != (c,):
        raise DimensionError(f"depthwise input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    cols = _im2col(xb.data, kh, kw)
    out = np.einsum("ncijhw,cij->nchw", cols, kernels.data) + bias.data[:, None, None]

    def back(g):
        gw = np.einsum("nchw,ncijhw->cij", g, cols) if kernels.requires_grad else None
        gx = None
        if xb.requires_grad:
            gx = _col2im(np.einsum("nchw,cij->ncijhw", g, kernels.data))
        return (xb, gx), (kernels, gw), (bias, g.sum(axis=(0, 2, 3)))

    out_t = _make(out, (xb, kernels, bias), back, "depthwise_conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias`` on the last axis of ``x``."""
    m, n = weights.shape
    if x.shape[-1] != n or bias.shape != (m,):
        raise DimensionError(f"dense input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return add(matmul(x, transpose(weights, (1, 0))), bias)


def pool_reduce(x: Tensor, axes: Iterable[int], mode: str = "avg", keepdims: bool = True) -> Tensor:
    """Average or max over ``axes``.  Max ties resolve to the lowest flat index."""
    axes = tuple(sorted(a % x.ndim for a in axes))
    if mode == "avg":
        count = int(np.prod([x.shape[a] for a in axes]))
        return mul(tsum(x, axes, keepdims), 1.0 / count)
    if mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")
    rest = tuple(a for a in range(x.ndim) if a not in axes)
    perm = rest + axes
    moved = np.transpose(x.data, perm)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if a in axes else x.shape[a] for a in range(x.ndim)) if keepdims else out.shape

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return ((x, np.transpose(gmoved, np.argsort(perm))),)

    return _make(out.reshape(out_shape), (x,), back, "pool_max")


def shrink_scale(re: Tensor, im: Tensor, lam1: Tensor, lam2: Tensor, sigma: Tensor) -> Tensor:
    """Per-entry gain ``s`` with ``s * r = lam1 * max(|r| - lam2*sigma, 0) * r/|r|``.

    Entries with ``|r| = 0`` or below threshold get gain 0, including their
    (sub)gradients.
    """
    mag = np.sqrt(re.data * re.data + im.data * im.data)
    thr = lam2.data * sigma.data
    active = mag > thr
    safe = np.where(active & (mag > 0), mag, 1.0)
    active &= mag > 0
    s = np.where(active, lam1.data * (1.0 - thr / safe), 0.0)

    def back(g):
        ga = np.where(active, g, 0.0)
        inv3 = 1.0 / (safe * safe * safe)
        coef = ga * lam1.data * thr * inv3
        return ((re, coef * re.data), (im, coef * im.data),
                (lam1, ga * (1.0 - thr / safe)),
                (lam2, -ga * lam1.data * sigma.data / safe),
                (sigma, -ga * lam1.data * lam2.data / safe))

    return _make(s.astype(re.dtype, copy=False), (re, im, lam1, lam2, sigma), back, "shrink_scale")


# ---------------------------------------------------------------- complex

class CTensor:
    """Complex tensor stored as a real/imaginary pair of equal shape."""

    __slots__ = ("re", "im")

    def __init__(self, re: Tensor, im: Tensor):
        if re.shape != im.shape:
            raise DimensionError(f"real part {re.shape} and imaginary part {im.shape} differ")
        self.re = re
        self.im = im

    @classmethod
    def from_numpy(cls, z, requires_grad: bool = False, dtype=np.float64) -> "CTensor":
        z = np.asarray(z)
        return cls(Tensor(z.real.astype(dtype), requires_grad=requires_grad),
                   Tensor(z.imag.astype(dtype), requires_grad=requires_grad))

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def __add__(self, other: "CTensor") -> "CTensor":
        return CTensor(add(self.re, other.re), add(self.im, other.im))

    def __sub__(self, other: "CTensor") -> "CTensor":
        return CTensor(sub(self.re, other.re), sub(self.im, other.im))

    def scale(self, s) -> "CTensor":
        """Multiply by a real tensor or scalar."""
        return CTensor(mul(self.re, s), mul(self.im, s))

    def __matmul__(self, other: "CTensor") -> "CTensor":
        return cmatmul(self, other)

    def reshape(self, shape) -> "CTensor":
        return CTensor(reshape(self.re, shape), reshape(self.im, shape))

    def transpose(self, axes) -> "CTensor":
        return CTensor(transpose(self.re, axes), transpose(self.im, axes))

    def abs2(self) -> Tensor:
        return add(square(self.re), square(self.im))


def cmatmul(a: CTensor, b: CTensor) -> CTensor:
    """Complex product through the real 2x2 block expansion."""
    re = sub(matmul(a.re, b.re), matmul(a.im, b.im))
    im = add(matmul(a.im, b.re), matmul(a.re, b.im))
    return CTensor(re, im)


def soft_threshold(r: CTensor, lam1, lam2, sigma) -> CTensor:
    """Complex soft threshold ``lam1 * max(|r| - lam2*sigma, 0) * r/|r|``."""
    like = r.re
    lam1, lam2, sigma = (as_tensor(v, like=like) for v in (lam1, lam2, sigma))
    s = shrink_scale(r.re, r.im, lam1, lam2, sigma)
    return CTensor(mul(s, r.re), mul(s, r.im))


# ---------------------------------------------------------------- snapshots

SNAPSHOT_MAGIC = b"IRSW"
SNAPSHOT_VERSION = 1
MANIFEST_PREFIX = "manifest:"


def save_snapshot(path, params: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    """Write named arrays as float64 little-endian records.

    An optional manifest is stored as an extra empty record whose name is
    ``"manifest:" + JSON``.
    """
    records = []
    if manifest is not None:
        records.append((MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True), np.zeros((0,))))
    records.extend((name, np.asarray(params[name], dtype="<f8")) for name in sorted(params))
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<HI", SNAPSHOT_VERSION, len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_snapshot(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos = 10
    params: dict[str, np.ndarray] = {}
    manifest = None
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        if name.startswith(MANIFEST_PREFIX):
            manifest = json.loads(name[len(MANIFEST_PREFIX):])
        else:
            params[name] = arr
    return params, manifest
