"""Unrolled AMP layers with learned linear maps and shrinkage.

One layer ``n`` maps ``(R_n, X_{n-1}, V_{n-1})`` to ``(X_n, V_n, R_{n+1})``::

    sigma_n = ||V_{n-1}||_F / sqrt(M)
    X_n     = eta(R_n; lam1, lam2, sigma_n) + X_{n-1}        (residual shortcut)
    b_n     = lam_b * lam1 * count_n / sqrt(M)               (or / M)
    V_n     = Y - Ups X_n + b_n V_{n-1}
    R_{n+1} = X_n + beta_{n+1} V_n

with ``V_0 = Y``, ``X_0 = 0`` and ``R_1`` either ``C = beta_1 Y`` or the
output of a denoising/attention block applied to ``C``.  ``count_n`` is the
number of active (above-threshold) entries averaged over subcarriers, which
makes it the per-subcarrier AMP divergence surrogate.

All arrays carry a leading batch axis: ``Y`` is ``[B, M, K]`` and ``X`` is
``[B, G, K]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorlab as tl
from .net_da import Block, DaBlock, MdaBlock
from .tensorlab import CTensor, NumericalError, Tensor

KINDS = ("da-rlamp", "mda-rlamp", "lamp")


class DivergenceError(NumericalError):
    """Non-finite value inside an unrolled layer."""

    def __init__(self, layer: int, detail: str = ""):
        self.layer = layer
        super().__init__(f"numerical divergence in layer {layer}" + (f": {detail}" if detail else ""))


def as_batch(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    return y[None] if y.ndim == 2 else y


def correlate(y, beta) -> np.ndarray:
    """``C = beta Y`` through the real 2x2 block product."""
    yc = CTensor.from_numpy(as_batch(y))
    bc = CTensor.from_numpy(beta)
    out = tl.cmatmul(bc, yc).numpy()
    return out if np.ndim(y) == 3 else out[0]


def shrink(r: CTensor, lam1: Tensor, lam2: Tensor, sigma: Tensor, mode: str = "entry") -> tuple[CTensor, np.ndarray]:
    """Soft threshold and the active count per sample (averaged over subcarriers)."""
    k = r.shape[-1]
    if mode == "entry":
        out = tl.soft_threshold(r, lam1, lam2, sigma)
        mag = np.sqrt(r.re.data ** 2 + r.im.data ** 2)
        active = mag > lam2.data * sigma.data
        count = active.sum(axis=(1, 2)) / k
        return out, count
    # row-group threshold on the l2 norm across subcarriers
    energy = tl.tsum(r.abs2(), axis=2, keepdims=True)
    mag = tl.sqrt(tl.add(energy, 1e-300))
    zero = Tensor(np.zeros_like(mag.data))
    s = tl.shrink_scale(mag, zero, lam1, lam2, sigma)
    active = mag.data > lam2.data * sigma.data
    return CTensor(tl.mul(s, r.re), tl.mul(s, r.im)), active.sum(axis=(1, 2)).astype(float)


@dataclass
class Prefix:
    """Frozen state entering layer ``start``: ``R_start`` (optional), ``X_{start-1}``, ``V_{start-1}``.

    With ``r = None`` the network forms ``R_start = X + beta_start V`` itself,
    which keeps ``beta_start`` trainable.
    """

    start: int
    r: np.ndarray | None
    x: np.ndarray | None
    v: np.ndarray | None

    def take(self, idx) -> "Prefix":
        pick = (lambda a: None if a is None else a[idx])
        return Prefix(self.start, pick(self.r), pick(self.x), pick(self.v))


@dataclass
class Trace:
    """Per-layer quantities of one forward pass (index 0 is layer 1)."""

    r: list = field(default_factory=list)
    x: list = field(default_factory=list)
    v: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    b: list = field(default_factory=list)
    count: list = field(default_factory=list)
    c: CTensor | None = None


class RlampNet:
    """DA-RLAMP, MDA-RLAMP or plain LAMP with ``layers`` unrolled layers.

    Parameters live in ``self.params`` as named leaf tensors:
    ``beta{n}.re``/``beta{n}.im`` (``[G, M]``) and ``lam{n}`` (``[3]`` holding
    ``lam1, lam2, lam_b``), plus the block parameters.  With
    ``shared_beta`` a single ``beta0`` serves every layer.
    """

    def __init__(self, kind: str, ups: np.ndarray, layers: int, block: Block | None = None,
                 shared_beta: bool = False, residual: bool = True, onsager_norm: str = "sqrtM",
                 shrinkage: str = "entry", dims: dict | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        self.kind = kind
        self.ups = np.asarray(ups)
        self.m, self.g = self.ups.shape
        self.layers = layers
        self.block = block
        self.shared_beta = shared_beta
        self.residual = residual
        self.onsager_norm = onsager_norm
        self.shrinkage = shrinkage
        self.dims = dict(dims or {})
        self._ups_c = CTensor.from_numpy(self.ups)
        self.params: dict[str, Tensor] = {}
        beta0 = self.ups.conj().T
        for n in range(1, (1 if shared_beta else layers) + 1):
            self.set_beta(n, beta0)
        for n in range(1, layers + 1):
            self.set_lam(n, (1.0, 1.0, 1.0))
        if block is not None:
            self.params.update(block.params)

    # -- parameter access

    def beta_key(self, n: int) -> str:
        return "beta0" if self.shared_beta else f"beta{n}"

    def set_beta(self, n: int, value: np.ndarray) -> None:
        key = self.beta_key(n)
        value = np.asarray(value)
        self.params[f"{key}.re"] = Tensor(value.real.astype(float), requires_grad=True)
        self.params[f"{key}.im"] = Tensor(value.imag.astype(float), requires_grad=True)

    def beta(self, n: int) -> CTensor:
        key = self.beta_key(n)
        return CTensor(self.params[f"{key}.re"], self.params[f"{key}.im"])

    def beta_value(self, n: int) -> np.ndarray:
        return self.beta(n).numpy()

    def set_lam(self, n: int, value) -> None:
        self.params[f"lam{n}"] = Tensor(np.asarray(value, dtype=float), requires_grad=True)

    def lam(self, n: int) -> np.ndarray:
        return self.params[f"lam{n}"].data

    def block_keys(self) -> list[str]:
        return [] if self.block is None else list(self.block.params)

    def sync_block(self) -> None:
        """Push the current block entries of ``params`` back into the block."""
        if self.block is not None:
            for key in self.block.params:
                self.block.params[key] = self.params[key]

    def replace_params(self, values: dict[str, np.ndarray]) -> None:
        for key, value in values.items():
            self.params[key] = Tensor(np.array(value, dtype=float), requires_grad=True)
        self.sync_block()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def add_layer(self) -> None:
        """Append a layer initialized from the current last one."""
        n = self.layers + 1
        if not self.shared_beta:
            self.set_beta(n, self.beta_value(n - 1) if n > 1 else self.ups.conj().T)
        self.set_lam(n, self.lam(n - 1) if n > 1 else (1.0, 1.0, 1.0))
        self.layers = n

    # -- forward

    def apply_block(self, c: CTensor) -> CTensor:
        """Run the block on ``C / rho`` and scale back by ``rho``.

        ``rho`` is the per-sample RMS of ``C`` rounded to a power of two, so
        both scalings are exact and the estimator is homogeneous in ``Y``
        (the block alone, with its biases, is not).
        """
        rms = np.sqrt(np.mean(c.re.data ** 2 + c.im.data ** 2, axis=(1, 2)))
        rho = np.exp2(np.round(np.log2(np.where(rms > 0, rms, 1.0)))).reshape(-1, 1, 1)
        out = self.block(c.scale(Tensor(1.0 / rho)))
        return out.scale(Tensor(rho))

    def forward(self, y: np.ndarray, upto: int | None = None, want_r_next: bool = False,
                prefix: "Prefix | None" = None) -> Trace:
        """Run layers ``1..upto``; with ``want_r_next`` also form ``R_{upto+1}``.

        ``upto = 0`` only forms ``R_1``.  A :class:`Prefix` skips the layers
        before ``prefix.start`` by supplying their (frozen) outputs; the
        trace then only holds the layers that were actually run.
        """
        upto = self.layers if upto is None else upto
        if upto > self.layers:
            raise ValueError(f"network has {self.layers} layers, asked for {upto}")
        yb = as_batch(y)
        if yb.shape[1] != self.m:
            raise tl.DimensionError(f"pilots have {yb.shape[1]} rows, network expects M={self.m}")
        yc = CTensor.from_numpy(yb)
        tr = Trace()
        norm = np.sqrt(self.m) if self.onsager_norm == "sqrtM" else float(self.m)
        if prefix is None:
            start = 1
            try:
                c = tl.cmatmul(self.beta(1), yc)
            except NumericalError as exc:
                raise DivergenceError(0, str(exc)) from None
            tr.c = c
            r = self.apply_block(c) if self.block is not None else c
            x_prev = None
            v_prev = yc
        else:
            start = prefix.start
            if prefix.r is None and start < 2:
                raise ValueError("a prefix starting at layer 1 must carry R_1")
            x_prev = None if prefix.x is None else CTensor.from_numpy(prefix.x)
            v_prev = CTensor.from_numpy(prefix.v) if prefix.v is not None else yc
            if prefix.r is not None:
                r = CTensor.from_numpy(prefix.r)
            else:
                try:
                    r = x_prev + tl.cmatmul(self.beta(start), v_prev)
                except NumericalError as exc:
                    raise DivergenceError(start - 1, str(exc)) from None
        tr.r.append(r)
        for n in range(start, upto + 1):
            try:
                lam = self.params[f"lam{n}"]
                lam1, lam2, lamb = lam[0], lam[1], lam[2]
                energy = tl.tsum(v_prev.abs2(), axis=(1, 2), keepdims=True)
                sigma = tl.mul(tl.sqrt(energy), 1.0 / np.sqrt(self.m))
                eta, count = shrink(r, lam1, lam2, sigma, self.shrinkage)
                x = eta if (x_prev is None or not self.residual) else eta + x_prev
                bcoef = tl.mul(tl.mul(lamb, lam1), Tensor(count.reshape(-1, 1, 1) / norm))
                v = yc - tl.cmatmul(self._ups_c, x) + v_prev.scale(bcoef)
                tr.sigma.append(sigma)
                tr.b.append(bcoef)
                tr.count.append(count)
                tr.x.append(x)
                tr.v.append(v)
                if n < upto or want_r_next:
                    r = x + tl.cmatmul(self.beta(n + 1), v)
                    tr.r.append(r)
            except NumericalError as exc:
                if isinstance(exc, DivergenceError):
                    raise
                raise DivergenceError(n, str(exc)) from None
            x_prev, v_prev = x, v
        return tr

    def prefix(self, y: np.ndarray, start: int, with_r: bool, batch: int = 256) -> Prefix:
        """Outputs of layers ``1..start-1`` for a whole set, computed in batches."""
        yb = as_batch(y)
        rs, xs, vs = [], [], []
        for s in range(0, len(yb), batch):
            tr = self.forward(yb[s:s + batch], start - 1, want_r_next=with_r)
            if with_r:
                rs.append(tr.r[-1].numpy())
            if start > 1:
                xs.append(tr.x[-1].numpy())
                vs.append(tr.v[-1].numpy())
        cat = (lambda parts: np.concatenate(parts) if parts else None)
        return Prefix(start, cat(rs), cat(xs), cat(vs))

    def estimate(self, y: np.ndarray, upto: int | None = None) -> np.ndarray:
        """Final coefficient estimate ``X_N`` as a complex array."""
        upto = self.layers if upto is None else upto
        tr = self.forward(y, upto)
        out = tr.x[-1].numpy() if upto > 0 else tr.r[0].numpy()
        return out if np.ndim(y) == 3 else out[0]

    def manifest(self) -> dict:
        return {"type": self.kind, "N": self.layers, "M": self.m, "G": self.g,
                "shared_beta": self.shared_beta, "residual": self.residual,
                "onsager_norm": self.onsager_norm, "shrinkage": self.shrinkage,
                "dims": self.dims}


def build_network(kind: str, design, net_cfg, layers: int | None = None,
                  rng: np.random.Generator | None = None) -> RlampNet:
    """Network of the requested kind for a sensing design."""
    cfg = design.cfg
    layers = net_cfg.layers if layers is None else layers
    block = None
    if kind == "da-rlamp" and net_cfg.use_da:
        block = DaBlock(cfg.k, cfg.g_i, cfg.g_b, net_cfg.l_d, rng=rng)
    elif kind == "mda-rlamp" and net_cfg.use_da:
        block = MdaBlock(cfg.k, cfg.g_i, net_cfg.l_di, rng=rng)
    dims = dict(design.dims)
    dims.update(l_d=net_cfg.l_d, l_di=net_cfg.l_di)
    return RlampNet(kind, design.ups_n, layers, block=block, shared_beta=(kind == "mda-rlamp"),
                    residual=net_cfg.residual, onsager_norm=net_cfg.onsager_norm,
                    shrinkage=net_cfg.shrinkage, dims=dims)


def save_network(net: RlampNet, path) -> None:
    tl.save_snapshot(path, net.state_dict(), net.manifest())


def load_network(path, ups: np.ndarray) -> RlampNet:
    """Rebuild a network from a snapshot; ``ups`` must match the stored ``M x G``."""
    params, man = tl.load_snapshot(path)
    if man is None:
        raise ValueError(f"{path}: snapshot has no manifest")
    ups = np.asarray(ups)
    if ups.shape != (man["M"], man["G"]):
        raise tl.DimensionError(f"model expects Ups {man['M']}x{man['G']}, got {ups.shape[0]}x{ups.shape[1]}")
    dims = man.get("dims", {})
    block = None
    if any(k.startswith("da.") for k in params):
        l_d = sum(1 for k in params if k.startswith("da.dn") and k.endswith(".w"))
        k_sub = params["da.dn0.w"].shape[0]
        block = DaBlock(k_sub, dims["g_i"], dims["g_b"], l_d)
    elif any(k.startswith("mda.") for k in params):
        l_di = sum(1 for k in params if k.startswith("mda.dw") and k.endswith(".w"))
        k_sub = params["mda.dw0.w"].shape[0]
        block = MdaBlock(k_sub, dims["g_i"], l_di)
    net = RlampNet(man["type"], ups, man["N"], block=block, shared_beta=man["shared_beta"],
                   residual=man["residual"], onsager_norm=man["onsager_norm"],
                   shrinkage=man["shrinkage"], dims=dims)
    net.replace_params(params)
    return net
