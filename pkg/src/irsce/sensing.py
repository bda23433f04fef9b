"""Dictionaries, measurement matrices and synthetic pilots.

Vectorization is column-major throughout: ``vec(H_c)`` of an
``N_b x N_i`` cascaded channel has the BS index fastest, and the sparse
coefficient vector ``x = vec(Z)`` of a ``G_b x G_i`` matrix has the BS grid
index fastest.  With this convention ``Psi vec(Z) = vec(A_Rb Z D_g)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, path_responses, ula_from_u, upa_from_uv, virtual_grid
from .config import ConfigError, SystemConfig

MATCH_TOL = 1e-9

# stream tags for the per-pilot generators
_TAG_PHASE, _TAG_COMBINER, _TAG_SENSOR = 1, 2, 3


class GridError(ValueError):
    """The IRS grid does not close under differences, so ``D`` has too many distinct rows."""


@dataclass
class Grids:
    bs_u: np.ndarray
    irs_u: np.ndarray
    irs_v: np.ndarray
    g_ix: int
    g_iy: int


def build_grids(cfg: SystemConfig) -> Grids:
    """Sine-domain grids for the BS ULA and the IRS UPA (x index fastest)."""
    gx, gy = cfg.g_split
    ux, vy = virtual_grid(gx), virtual_grid(gy)
    return Grids(virtual_grid(cfg.g_b), np.tile(ux, gy), np.repeat(vy, gx), gx, gy)


def bs_dictionary(cfg: SystemConfig, grids: Grids | None = None) -> np.ndarray:
    grids = grids or build_grids(cfg)
    return ula_from_u(grids.bs_u, cfg.n_b)


def irs_dictionary(cfg: SystemConfig, grids: Grids | None = None) -> np.ndarray:
    grids = grids or build_grids(cfg)
    return upa_from_uv(grids.irs_u, grids.irs_v, cfg.n_ix, cfg.n_iy)


def khatri_rao_rows(a_r: np.ndarray, a_t: np.ndarray) -> np.ndarray:
    """``D`` with ``D[a*G + b, n] = a_r[n, a] * conj(a_t[n, b])``."""
    n, g = a_r.shape
    return (a_r.T[:, None, :] * a_t.conj().T[None, :, :]).reshape(g * g, n)


def build_Dg(a_r: np.ndarray, a_t: np.ndarray, tol: float = MATCH_TOL) -> tuple[np.ndarray, np.ndarray]:
    """First ``G_i`` rows of ``D`` and the class of every row of ``D``.

    Raises :class:`GridError` when some row of ``D`` matches none of the
    first ``G_i`` rows, i.e. ``D`` has more than ``G_i`` distinct rows.
    """
    if a_r.shape != a_t.shape:
        raise GridError(f"dictionaries differ in shape: {a_r.shape} vs {a_t.shape}")
    g = a_r.shape[1]
    d = khatri_rao_rows(a_r, a_t)
    dg = d[:g].copy()
    g_norm = np.sum(np.abs(dg) ** 2, axis=1)
    classes = np.empty(g * g, dtype=np.int64)
    chunk = max(1, 2 ** 20 // max(g, 1))
    for start in range(0, g * g, chunk):
        rows = d[start:start + chunk]
        dist = (np.sum(np.abs(rows) ** 2, axis=1)[:, None] + g_norm[None, :]
                - 2.0 * np.real(rows @ dg.conj().T))
        best = np.argmin(dist, axis=1)
        resid = np.max(np.abs(rows - dg[best]), axis=1)
        if np.any(resid > tol):
            raise GridError("grid is not closed under differences: D has more than G_i distinct rows")
        classes[start:start + chunk] = best
    return dg, classes


def merge_classes(classes: np.ndarray) -> list[np.ndarray]:
    """Index sets ``M_i``: rows of ``D`` belonging to class ``i``."""
    g = int(np.sqrt(len(classes)))
    return [np.flatnonzero(classes == i) for i in range(g)]


def build_Psi(dg: np.ndarray, a_rb: np.ndarray, a_tu: np.ndarray | None = None) -> np.ndarray:
    """Cascaded dictionary ``D_g^T kron (conj(a_T) kron A_Rb)``."""
    a_tu = np.ones((1, 1)) if a_tu is None else np.atleast_2d(a_tu)
    return np.kron(dg.T, np.kron(a_tu.conj(), a_rb))


def build_Psi_hybrid(a_ri: np.ndarray, a_tu: np.ndarray | None = None) -> np.ndarray:
    """UE-IRS dictionary ``conj(a_T) kron A_R,i``."""
    a_tu = np.ones((1, 1)) if a_tu is None else np.atleast_2d(a_tu)
    return np.kron(a_tu.conj(), a_ri)


# ---------------------------------------------------------------- training signals

def _stream(seed: int, tag: int, t: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, tag, t])


def draw_phases(cfg: SystemConfig, seed: int, t: int) -> np.ndarray:
    """IRS reflection vector ``r^(t)``: unit modulus, uniform phases."""
    psi = _stream(seed, _TAG_PHASE, t).uniform(0.0, 2 * np.pi, cfg.n_i)
    return np.exp(1j * psi)


def draw_combiner(cfg: SystemConfig, seed: int, t: int) -> np.ndarray:
    """Analog combiner ``W_b^(t)`` ``[N_b, N_s]`` with entries of modulus ``1/sqrt(N_b)``."""
    psi = _stream(seed, _TAG_COMBINER, t).uniform(0.0, 2 * np.pi, (cfg.n_b, cfg.n_s))
    return np.exp(1j * psi) / np.sqrt(cfg.n_b)


def draw_sensor_mask(cfg: SystemConfig, seed: int) -> np.ndarray:
    """0/1 vector over the IRS elements marking ``t_i`` active sensors."""
    rng = _stream(seed, _TAG_SENSOR)
    mask = np.zeros(cfg.n_i, dtype=np.int64)
    mask[rng.choice(cfg.n_i, size=cfg.t_i, replace=False)] = 1
    return mask


def measurement_matrix(cfg: SystemConfig, seed: int) -> np.ndarray:
    """Stacked ``Phi`` ``[T N_s, N_i N_b]`` with unit pilots."""
    if cfg.t * cfg.n_s < 1:
        raise ConfigError("T * N_s must be at least 1")
    rows = [np.kron(draw_phases(cfg, seed, t)[None, :], draw_combiner(cfg, seed, t).conj().T)
            for t in range(cfg.t)]
    return np.concatenate(rows, axis=0)


def hybrid_measurement_matrix(cfg: SystemConfig, seed: int) -> np.ndarray:
    mask = draw_sensor_mask(cfg, seed)
    return np.eye(cfg.n_i)[np.flatnonzero(mask)].astype(complex)


@dataclass
class SensingDesign:
    """Everything about the estimation problem that does not depend on the channel draw."""

    cfg: SystemConfig
    mode: str
    phi: np.ndarray
    psi: np.ndarray
    ups: np.ndarray
    a_rb: np.ndarray
    a_i: np.ndarray
    dg: np.ndarray | None
    classes: np.ndarray | None
    combiners: list | None = None

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def g(self) -> int:
        return self.psi.shape[1]

    @property
    def col_scale(self) -> np.ndarray:
        """Column norms of ``Ups``; the networks work on ``Ups / col_scale``."""
        norms = np.linalg.norm(self.ups, axis=0)
        return np.where(norms > 0, norms, 1.0)

    @property
    def ups_n(self) -> np.ndarray:
        return self.ups / self.col_scale

    @property
    def psi_n(self) -> np.ndarray:
        return self.psi / self.col_scale

    def channel_from_normalized(self, xn: np.ndarray) -> np.ndarray:
        """Map normalized coefficients ``[..., G, K]`` to channel columns."""
        x = xn / self.col_scale[:, None]
        if x.ndim == 2:
            return reconstruct(x, self)
        return np.stack([reconstruct(xi, self) for xi in x])

    @property
    def dims(self) -> dict:
        return {"mode": self.mode, "M": self.m, "G": self.g, "K": self.cfg.k,
                "label_rows": self.psi.shape[0], "g_i": self.cfg.g_i, "g_b": self.cfg.g_b}


def build_design(cfg: SystemConfig, mode: str | None = None) -> SensingDesign:
    mode = mode or cfg.mode
    grids = build_grids(cfg)
    a_rb = bs_dictionary(cfg, grids)
    a_i = irs_dictionary(cfg, grids)
    if mode == "passive":
        dg, classes = build_Dg(a_i, a_i)
        psi = build_Psi(dg, a_rb)
        phi = measurement_matrix(cfg, cfg.seed)
        combiners = [draw_combiner(cfg, cfg.seed, t) for t in range(cfg.t)]
        return SensingDesign(cfg, mode, phi, psi, phi @ psi, a_rb, a_i, dg, classes, combiners)
    if mode == "hybrid":
        psi = build_Psi_hybrid(a_i)
        phi = hybrid_measurement_matrix(cfg, cfg.seed)
        return SensingDesign(cfg, mode, phi, psi, phi @ psi, a_rb, a_i, None, None)
    raise ConfigError(f"unknown mode {mode!r}")


@dataclass
class SensingProblem:
    y: np.ndarray
    h: np.ndarray
    x: np.ndarray
    noise: np.ndarray
    sigma2: float
    design: SensingDesign

    @property
    def ups(self) -> np.ndarray:
        return self.design.ups


def sparse_truth(real: ChannelRealization, design: SensingDesign, ue: int = 0) -> np.ndarray:
    """Exact coefficient matrix ``X`` ``[G, K]`` of an on-grid realization."""
    cfg = real.cfg
    f_ps = real.paths.ue_irs[ue]
    resp_f = path_responses(f_ps, cfg)
    x = np.zeros((design.g, cfg.k), dtype=complex)
    if design.mode == "hybrid":
        for m, c in enumerate(f_ps.grid_idx["irs"]):
            x[c] += resp_f[:, m]
        return x
    g_ps = real.paths.irs_bs
    resp_g = path_responses(g_ps, cfg)
    g_i = cfg.g_i
    for l, (d, j) in enumerate(zip(g_ps.grid_idx["irs"], g_ps.grid_idx["bs"])):
        for m, c in enumerate(f_ps.grid_idx["irs"]):
            cls = design.classes[c * g_i + d]
            x[j + cfg.g_b * cls] += resp_g[:, l] * resp_f[:, m]
    return x


def label_of(real: ChannelRealization, design: SensingDesign, ue: int = 0) -> np.ndarray:
    """Regression target: ``vec(H_c[k])`` columns (passive) or ``f[k]`` columns (hybrid)."""
    if design.mode == "hybrid":
        return real.f[ue].T.copy()
    hc = real.hc[ue]
    return hc.transpose(0, 2, 1).reshape(hc.shape[0], -1).T.copy()


def noise_variance(signal: np.ndarray, snr_db: float) -> float:
    m, k = signal.shape
    return float(np.sum(np.abs(signal) ** 2) / (m * k * 10.0 ** (snr_db / 10.0)))


def assemble_problem(real: ChannelRealization, design: SensingDesign, rng: np.random.Generator,
                     snr_db: float | None = None, ue: int = 0) -> SensingProblem:
    """Noisy pilots ``Y = Phi vec(H) + n_c`` for one UE with noise set by the target SNR."""
    cfg = real.cfg
    snr_db = cfg.snr_db if snr_db is None else snr_db
    h = label_of(real, design, ue)
    if cfg.on_grid:
        x = sparse_truth(real, design, ue)
    else:
        x = np.linalg.lstsq(design.psi, h, rcond=None)[0]
    clean = design.phi @ h
    sigma2 = noise_variance(clean, snr_db) if np.isfinite(snr_db) else 0.0
    noise = _draw_noise(design, rng, sigma2)
    return SensingProblem(clean + noise, h, x, noise, sigma2, design)


def _draw_noise(design: SensingDesign, rng: np.random.Generator, sigma2: float) -> np.ndarray:
    cfg = design.cfg
    k = cfg.k
    if design.mode == "hybrid":
        return np.sqrt(sigma2 / 2) * (rng.standard_normal((design.m, k)) + 1j * rng.standard_normal((design.m, k)))
    out = []
    for w in design.combiners:
        n = np.sqrt(sigma2 / 2) * (rng.standard_normal((cfg.n_b, k)) + 1j * rng.standard_normal((cfg.n_b, k)))
        out.append(w.conj().T @ n)
    return np.concatenate(out, axis=0)


def reconstruct(x: np.ndarray, design: SensingDesign) -> np.ndarray:
    """``Psi x[k]`` for every column, using the Kronecker structure when available."""
    if design.mode == "hybrid":
        return design.psi @ x
    cfg = design.cfg
    k = x.shape[-1]
    z = x.reshape(cfg.g_i, cfg.g_b, k)
    # vec(A_Rb Z D_g) with Z[j, i] = x[j + G_b i]
    hm = np.einsum("bj,ijk,in->nbk", design.a_rb, z, design.dg)
    return hm.reshape(-1, k)
