"""Metrics, Monte-Carlo sweeps and result files.

NMSE is aggregated as the mean of per-trial error ratios followed by one
``10 log10``.  Sweeps use common random numbers: trial ``j`` draws its
channel from ``default_rng([seed, j])`` and its noise from
``default_rng([seed, j, 1])`` at every axis point and for every method.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .channel import realize
from .classical import amp_untrained, swomp
from .config import SystemConfig
from .sensing import SensingDesign, SensingProblem, assemble_problem, build_design, reconstruct

FLOOR_DB = -300.0
AXES = ("snr_db", "pilots", "iterations")
CSV_COLUMNS = ("method", "axis", "value", "mean_nmse_db", "std_db", "trials", "best_scale")


# ---------------------------------------------------------------- metrics

def _to_db(ratio: float) -> float:
    if ratio <= 0:
        return FLOOR_DB
    return max(FLOOR_DB, 10.0 * np.log10(ratio))


def nmse_ratios(h: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    """Per-sample ``||H - H_hat||^2 / ||H||^2``; samples with ``H = 0`` give NaN."""
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch: {h.shape} vs {h_hat.shape}")
    if h.ndim <= 2:
        h, h_hat = h[None], h_hat[None]
    axes = tuple(range(1, h.ndim))
    energy = np.sum(np.abs(h) ** 2, axis=axes)
    err = np.sum(np.abs(h - h_hat) ** 2, axis=axes)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(energy > 0, err / np.where(energy > 0, energy, 1.0), np.nan)


def nmse_db(h: np.ndarray, h_hat: np.ndarray) -> float:
    """NMSE in dB; a leading batch axis (3-D input) is averaged before the log.

    Samples with an all-zero ``H`` are excluded; if none remain the result
    is NaN.  Exact matches clamp to -300 dB.
    """
    r = nmse_ratios(h, h_hat)
    r = r[np.isfinite(r)]
    if r.size == 0:
        return float("nan")
    return _to_db(float(np.mean(r)))


def best_scale(h: np.ndarray, h_hat: np.ndarray) -> float:
    """Real ``a`` minimizing ``||H - a H_hat||``; 0 when ``H_hat = 0``."""
    h = np.asarray(h).ravel()
    h_hat = np.asarray(h_hat).ravel()
    den = float(np.vdot(h_hat, h_hat).real)
    return 0.0 if den == 0 else float(np.vdot(h_hat, h).real / den)


def spectral_efficiency(g: np.ndarray, f: np.ndarray, r: np.ndarray, w_b: np.ndarray,
                        sigma2: float) -> np.ndarray:
    """``log2 det(1 + |(G diag(f) r)^T W_b|^2 / sigma2)`` per subcarrier.

    ``g`` is ``[N_b, N_i]`` or ``[K, N_b, N_i]``, ``f`` is ``[N_i]`` or
    ``[K, N_i]``, ``r`` is ``[N_i]`` and ``w_b`` is ``[N_b]`` or
    ``[N_b, N_s]`` (optionally with a leading ``K`` axis).  Returns a scalar
    or a ``[K]`` array accordingly.
    """
    g = np.asarray(g)
    single = g.ndim == 2
    g = g[None] if single else g
    f = np.broadcast_to(np.asarray(f), (g.shape[0], g.shape[2]))
    w = np.asarray(w_b)
    if w.ndim == 1 or (w.ndim == 2 and single):
        w = np.broadcast_to(w.reshape(g.shape[1], -1), (g.shape[0], g.shape[1], w.reshape(g.shape[1], -1).shape[1]))
    eff = np.einsum("kbn,kn,n->kb", g, f, np.asarray(r))
    x = np.einsum("kb,kbs->ks", eff, w)
    se = np.log2(1.0 + np.sum(np.abs(x) ** 2, axis=1) / sigma2)
    return float(se[0]) if single else se


def se_proxy(hc_true: np.ndarray, hc_est: np.ndarray, sigma2: float,
             rng: np.random.Generator | None = None, precoder: str = "matched") -> np.ndarray:
    """Per-subcarrier SE with ``r`` and ``W_b`` designed from an estimate.

    ``hc_*`` are cascaded channels ``[K, N_b, N_i]``.  ``r`` takes the phases
    of the dominant right singular vector of the estimate stacked over
    subcarriers.  ``precoder="matched"`` uses ``W_b`` matched to the
    estimated effective channel; ``"random"`` draws a unit-norm vector.
    This stands in for a joint precoder optimizer and is labeled as such.
    """
    stacked = np.concatenate(list(hc_est), axis=0)
    _, _, vh = np.linalg.svd(stacked, full_matrices=False)
    r = np.exp(1j * np.angle(vh[0].conj()))
    k, n_b, n_i = hc_true.shape
    if precoder == "matched":
        eff = np.einsum("kbn,n->kb", hc_est, r)
        norms = np.linalg.norm(eff, axis=1, keepdims=True)
        w = eff.conj() / np.where(norms > 0, norms, 1.0)
    elif precoder == "random":
        rng = rng or np.random.default_rng(0)
        w = rng.standard_normal((k, n_b)) + 1j * rng.standard_normal((k, n_b))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown precoder {precoder!r}")
    ones = np.ones((k, n_i))
    return spectral_efficiency(hc_true, ones, r, w[:, :, None], sigma2)


# ---------------------------------------------------------------- estimators

Estimator = Callable[[SensingProblem, dict], np.ndarray]


def swomp_estimator(max_iter: int = 100, snr_db: float | None = None) -> Estimator:
    """SWOMP stopping at the noise energy.

    The noise energy is ``sigma2 M K`` from the problem, or, when only the
    nominal ``snr_db`` is known (stored datasets), ``||Y||^2 / (1 + snr)``.
    """
    snr = None if snr_db is None else 10.0 ** (snr_db / 10.0)

    def run(p: SensingProblem, point: dict) -> np.ndarray:
        its = int(point.get("iterations", max_iter))
        eps = p.sigma2 * p.y.size if snr is None else float(np.sum(np.abs(p.y) ** 2)) / (1.0 + snr)
        return reconstruct(swomp(p.y, p.design.ups, its, eps).x, p.design)
    return run


def amp_estimator(n_iter: int = 10) -> Estimator:
    def run(p: SensingProblem, point: dict) -> np.ndarray:
        its = int(point.get("iterations", n_iter))
        return reconstruct(amp_untrained(p.y, p.design.ups, its).x, p.design)
    return run


def network_estimator(net) -> Estimator:
    """Trained unrolled network; the ``iterations`` axis truncates the layers."""
    def run(p: SensingProblem, point: dict) -> np.ndarray:
        upto = min(int(point.get("iterations", net.layers)), net.layers)
        return p.design.channel_from_normalized(net.estimate(p.y, upto))
    return run


def zero_estimator() -> Estimator:
    return lambda p, point: np.zeros_like(p.h)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepRow:
    method: str
    value: float
    mean_nmse_db: float
    std_db: float
    trials: int
    best_scale: float


@dataclass
class SweepResult:
    axis: str
    values: list
    rows: list = field(default_factory=list)
    config_hash: str = ""

    def row(self, method: str, value) -> SweepRow:
        for r in self.rows:
            if r.method == method and r.value == value:
                return r
        raise KeyError((method, value))

    def curve(self, method: str) -> list[float]:
        return [self.row(method, v).mean_nmse_db for v in self.values]

    def methods(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen


def config_hash(cfg: SystemConfig, extra: dict | None = None) -> str:
    blob = json.dumps({"system": dataclasses.asdict(cfg), "extra": extra or {}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def summarize(method: str, value, ratios: np.ndarray, scales: list[float]) -> SweepRow:
    ratios = np.asarray(ratios, dtype=float)
    ok = ratios[np.isfinite(ratios)]
    per_db = np.array([_to_db(r) for r in ok])
    mean = _to_db(float(np.mean(ok))) if ok.size else float("nan")
    std = float(np.std(per_db)) if ok.size else float("nan")
    return SweepRow(method, value, mean, std, int(ok.size), float(np.mean(scales)) if scales else 0.0)


def sweep(cfg: SystemConfig, methods: dict[str, Estimator], axis: str, values, trials: int,
          seed: int = 0, designs: dict | None = None) -> SweepResult:
    """Monte-Carlo NMSE of every method at every axis value.

    ``axis`` is ``snr_db``, ``pilots`` (``T``, or ``T_i`` in hybrid mode) or
    ``iterations``.  Methods receive the problem and a dict ``{axis: value}``.
    ``designs`` may pre-supply sensing designs keyed by axis value.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    values = list(values)
    designs = dict(designs or {})
    res = SweepResult(axis, values, config_hash=config_hash(cfg, {"axis": axis, "values": values,
                                                                  "trials": trials, "seed": seed,
                                                                  "methods": list(methods)}))
    base = build_design(cfg) if axis != "pilots" else None
    for value in values:
        point = {axis: value}
        if axis == "pilots":
            key = "t_i" if cfg.mode == "hybrid" else "t"
            c = dataclasses.replace(cfg, **{key: int(value)})
            design = designs.get(value) or build_design(c)
        else:
            c = cfg
            design = designs.get(value) or base
        snr = float(value) if axis == "snr_db" else cfg.snr_db
        ratios = {name: [] for name in methods}
        scales = {name: [] for name in methods}
        for j in range(trials):
            real = realize(c, np.random.default_rng([seed, j]))
            prob = assemble_problem(real, design, np.random.default_rng([seed, j, 1]), snr)
            for name, est in methods.items():
                h_hat = est(prob, point)
                ratios[name].append(nmse_ratios(prob.h, h_hat)[0])
                scales[name].append(best_scale(prob.h, h_hat))
        for name in methods:
            res.rows.append(summarize(name, value, ratios[name], scales[name]))
    return res


def evaluate_dataset(estimator: Estimator, ds, design: SensingDesign) -> np.ndarray:
    """Per-sample NMSE ratios of an estimator over a stored dataset."""
    out = []
    for y, h in zip(ds.y, ds.h):
        prob = SensingProblem(y, h, None, None, 0.0, design)
        out.append(nmse_ratios(h, estimator(prob, {}))[0])
    return np.asarray(out)


# ---------------------------------------------------------------- emission

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def emit_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in result.rows:
            w.writerow([r.method, result.axis, _fmt(r.value), _fmt(r.mean_nmse_db), _fmt(r.std_db),
                        r.trials, _fmt(r.best_scale)])


def read_csv(path) -> SweepResult:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    axis = rows[0]["axis"] if rows else ""
    res = SweepResult(axis, [])
    for r in rows:
        value = float(r["value"])
        if value not in res.values:
            res.values.append(value)
        res.rows.append(SweepRow(r["method"], value, float(r["mean_nmse_db"]), float(r["std_db"]),
                                 int(r["trials"]), float(r["best_scale"])))
    return res


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_svg(result: SweepResult, path, width: int = 640, height: int = 420) -> None:
    """Line chart of mean NMSE versus the sweep axis, one polyline per method."""
    left, right, top, bottom = 70, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", version="1.1",
                     width=str(width), height=str(height))
    ET.SubElement(svg, "rect", x=str(left), y=str(top), width=str(pw), height=str(ph),
                  fill="none", stroke="black")
    xs = [float(v) for v in result.values]
    ys = [r.mean_nmse_db for r in result.rows if np.isfinite(r.mean_nmse_db)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (-1.0, 0.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        t = ET.SubElement(svg, "text", x=str(left - 6), y=f"{py(yv) + 4:.1f}", **{"text-anchor": "end",
                                                                            "font-size": "11"})
        t.text = f"{yv:.1f}"
    for xv in xs:
        t = ET.SubElement(svg, "text", x=f"{px(xv):.1f}", y=str(top + ph + 16),
                          **{"text-anchor": "middle", "font-size": "11"})
        t.text = f"{xv:g}"
    lx = ET.SubElement(svg, "text", x=f"{left + pw / 2:.1f}", y=str(height - 10),
                       **{"text-anchor": "middle", "font-size": "13"})
    lx.text = result.axis
    ly = ET.SubElement(svg, "text", x="16", y=f"{top + ph / 2:.1f}",
                       transform=f"rotate(-90 16 {top + ph / 2:.1f})",
                       **{"text-anchor": "middle", "font-size": "13"})
    ly.text = "NMSE (dB)"
    for i, method in enumerate(result.methods()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(px(float(r.value)), py(r.mean_nmse_db)) for r in result.rows
               if r.method == method and np.isfinite(r.mean_nmse_db)]
        ET.SubElement(svg, "polyline", points=" ".join(f"{a:.2f},{b:.2f}" for a, b in pts),
                      fill="none", stroke=color, **{"stroke-width": "2"})
        yl = top + 16 + 18 * i
        ET.SubElement(svg, "line", x1=str(left + pw + 10), y1=str(yl), x2=str(left + pw + 30), y2=str(yl),
                      stroke=color, **{"stroke-width": "2"})
        t = ET.SubElement(svg, "text", x=str(left + pw + 36), y=str(yl + 4), **{"font-size": "12"})
        t.text = method
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
