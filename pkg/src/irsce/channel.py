"""Geometric wideband channels for the UE-IRS, IRS-BS and cascaded links.

Array responses are evaluated from virtual (sine-domain) coordinates.  For
the BS ULA the coordinate is ``u = sin(theta)``; for the IRS UPA it is the
pair ``(u, v) = (sin(theta) cos(phi), sin(phi))``.  UPA vectors are flattened
with the x index fastest, so ``a = kron(a_y, a_x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, SystemConfig


# ---------------------------------------------------------------- steering

def ula_from_u(u, n: int) -> np.ndarray:
    """ULA response(s) at virtual coordinate(s) ``u``; shape ``[n]`` or ``[n, len(u)]``."""
    idx = np.arange(n)
    u = np.asarray(u, dtype=float)
    return np.exp(1j * np.pi * np.multiply.outer(idx, u)) / np.sqrt(n)


def upa_from_uv(u, v, nx: int, ny: int) -> np.ndarray:
    ax = ula_from_u(u, nx)
    ay = ula_from_u(v, ny)
    if ax.ndim == 1:
        return np.kron(ay, ax)
    return (ay[:, None, :] * ax[None, :, :]).reshape(nx * ny, -1)


def steer_ula(theta, n: int) -> np.ndarray:
    """Unit-norm ULA response with half-wavelength spacing."""
    return ula_from_u(np.sin(theta), n)


def steer_upa(theta, phi, nx: int, ny: int) -> np.ndarray:
    """Unit-norm UPA response; ``theta`` azimuth, ``phi`` elevation."""
    return upa_from_uv(np.sin(theta) * np.cos(phi), np.sin(phi), nx, ny)


def virtual_grid(g: int) -> np.ndarray:
    """``g`` uniformly spaced sine-domain points starting at -1."""
    return -1.0 + 2.0 * np.arange(g) / g


def snap_index(u, g: int) -> np.ndarray:
    return np.mod(np.rint((np.asarray(u) + 1.0) * g / 2.0).astype(int), g)


# ---------------------------------------------------------------- paths

@dataclass
class PathSet:
    """Multipath parameters of one link.

    The IRS side is always present (arrival for UE-IRS, departure for
    IRS-BS).  ``bs_u`` is set only for the IRS-BS link.
    """

    gains: np.ndarray
    delays: np.ndarray
    irs_az: np.ndarray
    irs_el: np.ndarray
    irs_u: np.ndarray
    irs_v: np.ndarray
    bs_az: np.ndarray | None = None
    bs_u: np.ndarray | None = None
    grid_idx: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.gains)

    def irs_vectors(self, nx: int, ny: int) -> np.ndarray:
        return upa_from_uv(self.irs_u, self.irs_v, nx, ny)

    def to_bytes(self) -> bytes:
        parts = [self.gains, self.delays, self.irs_az, self.irs_el, self.irs_u, self.irs_v]
        if self.bs_u is not None:
            parts += [self.bs_az, self.bs_u]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


@dataclass
class ChannelPaths:
    ue_irs: list[PathSet]
    irs_bs: PathSet


def _draw_link(n_paths: int, tau_max: float, rng: np.random.Generator, with_bs: bool) -> PathSet:
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2.0)
    delays = rng.uniform(0.0, tau_max, n_paths)
    az = rng.uniform(0.0, np.pi, n_paths)
    el = rng.uniform(-np.pi / 2, np.pi / 2, n_paths)
    ps = PathSet(gains, delays, az, el, np.sin(az) * np.cos(el), np.sin(el))
    if with_bs:
        ps.bs_az = rng.uniform(0.0, np.pi, n_paths)
        ps.bs_u = np.sin(ps.bs_az)
    return ps


def _snap(ps: PathSet, cfg: SystemConfig) -> None:
    gx, gy = cfg.g_split
    ix, iy = snap_index(ps.irs_u, gx), snap_index(ps.irs_v, gy)
    ps.irs_u, ps.irs_v = virtual_grid(gx)[ix], virtual_grid(gy)[iy]
    ps.grid_idx["irs"] = iy * gx + ix
    if ps.bs_u is not None:
        ib = snap_index(ps.bs_u, cfg.g_b)
        ps.bs_u = virtual_grid(cfg.g_b)[ib]
        ps.grid_idx["bs"] = ib


def draw_paths(cfg: SystemConfig, rng: np.random.Generator) -> ChannelPaths:
    """Draw the UE-IRS path sets (one per UE) and the shared IRS-BS path set.

    With ``cfg.on_grid`` the virtual coordinates are snapped to the
    dictionary grids and the grid indices are kept in ``grid_idx``.
    """
    if cfg.l_pf <= 0 or cfg.l_pg <= 0:
        raise ConfigError("path counts must be positive")
    ue = [_draw_link(cfg.l_pf, cfg.tau_max, rng, with_bs=False) for _ in range(cfg.u)]
    bs = _draw_link(cfg.l_pg, cfg.tau_max, rng, with_bs=True)
    if cfg.on_grid:
        for ps in ue + [bs]:
            _snap(ps, cfg)
    return ChannelPaths(ue, bs)


# ---------------------------------------------------------------- pulse and taps

def raised_cosine(t, ts: float, rolloff: float) -> np.ndarray:
    """Raised-cosine pulse sampled at times ``t``; ``p(0) = 1``."""
    x = np.asarray(t, dtype=float) / ts
    if rolloff == 0.0:
        return np.sinc(x)
    den = 1.0 - (2.0 * rolloff * x) ** 2
    sing = np.abs(den) < 1e-10
    safe = np.where(sing, 1.0, den)
    val = np.sinc(x) * np.cos(np.pi * rolloff * x) / safe
    limit = np.pi / 4.0 * np.sinc(1.0 / (2.0 * rolloff))
    return np.where(sing, limit, val)


def tap_count(cfg: SystemConfig) -> int:
    return int(np.ceil(cfg.tau_max / cfg.ts - 1e-9)) + cfg.pulse_half


def _link_scale(ps: PathSet, cfg: SystemConfig) -> float:
    if ps.bs_u is None:
        return np.sqrt(cfg.n_i / ps.count)
    return np.sqrt(cfg.n_i * cfg.n_b / ps.count)


def delay_tap(ps: PathSet, d: int, ts: float, cfg: SystemConfig) -> np.ndarray:
    """Delay-domain tap ``d``: a vector for the UE-IRS link, a matrix for IRS-BS."""
    amp = _link_scale(ps, cfg) * ps.gains * raised_cosine(d * ts - ps.delays, ts, cfg.rolloff)
    a_i = ps.irs_vectors(cfg.n_ix, cfg.n_iy)
    if ps.bs_u is None:
        return a_i @ amp
    a_b = ula_from_u(ps.bs_u, cfg.n_b)
    return (a_b * amp) @ a_i.conj().T


def path_responses(ps: PathSet, cfg: SystemConfig) -> np.ndarray:
    """Per-path frequency responses ``[K, L]`` including gain and link scale."""
    d = np.arange(tap_count(cfg))
    pulse = raised_cosine(d[:, None] * cfg.ts - ps.delays[None, :], cfg.ts, cfg.rolloff)
    k = np.arange(cfg.k)
    dft = np.exp(-2j * np.pi * np.outer(k, d) / cfg.k)
    return _link_scale(ps, cfg) * (dft @ pulse) * ps.gains[None, :]


def freq_channel(ps: PathSet, cfg: SystemConfig) -> np.ndarray:
    """Frequency-domain channel of one link: ``[K, N_i]`` or ``[K, N_b, N_i]``."""
    resp = path_responses(ps, cfg)
    a_i = ps.irs_vectors(cfg.n_ix, cfg.n_iy)
    if ps.bs_u is None:
        return resp @ a_i.T
    a_b = ula_from_u(ps.bs_u, cfg.n_b)
    return np.einsum("kl,bl,il->kbi", resp, a_b, a_i.conj())


def cascaded(g: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``G diag(f)`` for one subcarrier or a stack of them."""
    return g * f[..., None, :]


@dataclass
class ChannelRealization:
    f: np.ndarray
    g: np.ndarray
    hc: np.ndarray
    paths: ChannelPaths
    cfg: SystemConfig


def realize(cfg: SystemConfig, rng: np.random.Generator) -> ChannelRealization:
    """Draw paths and evaluate ``f_u[k]`` ``[U,K,N_i]``, ``G[k]`` and ``H_c,u[k]``."""
    paths = draw_paths(cfg, rng)
    f = np.stack([freq_channel(ps, cfg) for ps in paths.ue_irs])
    g = freq_channel(paths.irs_bs, cfg)
    hc = cascaded(g[None], f)
    return ChannelRealization(f, g, hc, paths, cfg)
