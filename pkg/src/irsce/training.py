"""Datasets, losses, the Adam optimizer and layer-by-layer training drivers."""

from __future__ import annotations

import dataclasses
import json
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensorlab as tl
from .channel import realize
from .config import RunConfig, SystemConfig
from .net_rlamp import DivergenceError, Prefix, RlampNet
from .sensing import SensingDesign, SensingProblem, assemble_problem, build_design
from .tensorlab import CTensor, NumericalError, Tensor

DATASET_MAGIC = b"IRSD"
DATASET_VERSION = 1


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    y: np.ndarray
    h: np.ndarray
    system: SystemConfig
    seed: int
    split: str = "train"
    mode: str = "passive"

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dims(self) -> dict:
        return {"M": int(self.y.shape[1]), "K": int(self.y.shape[2]), "L": int(self.h.shape[1]),
                "mode": self.mode}

    def subset(self, idx) -> "Dataset":
        return dataclasses.replace(self, y=self.y[idx], h=self.h[idx])


def _f32c(a: np.ndarray) -> np.ndarray:
    """Round a complex array to single precision and back."""
    return a.real.astype(np.float32).astype(np.float64) + 1j * a.imag.astype(np.float32).astype(np.float64)


def draw_sample(cfg: SystemConfig, design: SensingDesign, seed: int, j: int,
                snr_db: float | None = None) -> SensingProblem:
    """Sample ``j`` of the stream ``seed``; regenerable in isolation."""
    rng = np.random.default_rng([seed, j])
    return assemble_problem(realize(cfg, rng), design, rng, snr_db)


def gen_dataset(cfg: SystemConfig, count: int, seed: int, split: str = "train",
                design: SensingDesign | None = None, snr_db: float | None = None) -> Dataset:
    design = design or build_design(cfg)
    ys, hs = [], []
    for j in range(count):
        p = draw_sample(cfg, design, seed, j, snr_db)
        ys.append(_f32c(p.y))
        hs.append(_f32c(p.h))
    m, k = design.m, cfg.k
    y = np.stack(ys) if ys else np.zeros((0, m, k), complex)
    h = np.stack(hs) if hs else np.zeros((0, design.psi.shape[0], k), complex)
    sys_cfg = dataclasses.replace(cfg, snr_db=cfg.snr_db if snr_db is None else snr_db)
    return Dataset(y, h, sys_cfg, seed, split, design.mode)


def _interleave(a: np.ndarray) -> bytes:
    out = np.empty(a.shape + (2,), dtype="<f4")
    out[..., 0] = a.real
    out[..., 1] = a.imag
    return out.tobytes()


def save_dataset(ds: Dataset, path) -> None:
    header = {"config": dataclasses.asdict(ds.system), "seed": ds.seed, "count": len(ds),
              "dims": ds.dims, "split": ds.split}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, len(raw)))
        fh.write(raw)
        for j in range(len(ds)):
            fh.write(_interleave(ds.y[j]))
            fh.write(_interleave(ds.h[j]))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    dims = header["dims"]
    m, k, rows, count = dims["M"], dims["K"], dims["L"], header["count"]
    per = 2 * (m * k + rows * k)
    vals = np.frombuffer(blob, dtype="<f4", count=count * per, offset=10 + hlen).astype(np.float64)
    vals = vals.reshape(count, per)
    cplx = vals[:, 0::2] + 1j * vals[:, 1::2]
    y = cplx[:, :m * k].reshape(count, m, k)
    h = cplx[:, m * k:].reshape(count, rows, k)
    system = SystemConfig(**header["config"])
    return Dataset(y, h, system, header["seed"], header["split"], dims["mode"])


# ---------------------------------------------------------------- losses

def _ratio_loss(z: CTensor, psi: CTensor, h: np.ndarray) -> Tensor:
    """Batch mean of ``||Psi Z - H||^2 / ||H||^2`` over samples with nonzero ``H``."""
    h = np.asarray(h)
    if h.ndim == 2:
        h = h[None]
    energy = np.sum(np.abs(h) ** 2, axis=(1, 2))
    keep = energy > 0
    if not np.all(keep):
        warnings.warn(f"skipping {int(np.sum(~keep))} sample(s) with an all-zero label", RuntimeWarning)
    if not np.any(keep):
        raise ValueError("every sample in the batch has an all-zero label")
    est = tl.cmatmul(psi, z)
    err = (est - CTensor.from_numpy(h)).abs2()
    per = tl.tsum(err, axis=(1, 2))
    weights = np.where(keep, 1.0 / np.where(keep, energy, 1.0), 0.0) / np.sum(keep)
    return tl.tsum(tl.mul(per, weights))


def loss_linear(r: CTensor, psi, h) -> Tensor:
    """Linear-stage loss on ``R_n``."""
    return _ratio_loss(r, _as_ctensor(psi), h)


def loss_nonlinear(x: CTensor, psi, h) -> Tensor:
    """Nonlinear-stage loss on ``X_n``."""
    return _ratio_loss(x, _as_ctensor(psi), h)


def _as_ctensor(a) -> CTensor:
    return a if isinstance(a, CTensor) else CTensor.from_numpy(a)


# ---------------------------------------------------------------- optimizer

def adam_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step count."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, lr_overrides: dict | None = None):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.lr_overrides = lr_overrides or {}
        self.state: dict[str, tuple] = {}

    def step(self, params: dict[str, Tensor], keys) -> None:
        for key in keys:
            t = params[key]
            if t.grad is None:
                continue
            m, v, n = self.state.get(key, (np.zeros_like(t.data), np.zeros_like(t.data), 0))
            lr = self.lr_overrides.get(key.split(".")[0].rstrip("0123456789"), self.lr)
            new, m, v = adam_step(t.data, t.grad, m, v, n + 1, lr, self.betas, self.eps)
            self.state[key] = (m, v, n + 1)
            params[key] = Tensor(new, requires_grad=True)


# ---------------------------------------------------------------- training

@dataclass
class PhaseRecord:
    stage: int
    name: str
    loss: str
    keys: list
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    best_val: float = float("nan")
    seconds: float = 0.0
    aborted: bool = False


@dataclass
class TrainReport:
    kind: str
    phases: list = field(default_factory=list)
    stage_val_nmse_db: list = field(default_factory=list)
    stage_val_loss: list = field(default_factory=list)
    stage_seconds: list = field(default_factory=list)
    init_val_loss: float = float("nan")
    diverged: bool = False

    def to_dict(self, timings: bool = True) -> dict:
        """Plain dict; ``timings=False`` drops wall-clock fields so reruns compare equal."""
        out = dataclasses.asdict(self)
        if not timings:
            out.pop("stage_seconds")
            for ph in out["phases"]:
                ph.pop("seconds")
        return out


class Trainer:
    """Shared machinery: batching, loss evaluation, best-iterate phases."""

    def __init__(self, net: RlampNet, psi: np.ndarray, train: Dataset, val: Dataset,
                 run: RunConfig, seed: int = 0):
        self.net = net
        self.psi = CTensor.from_numpy(psi)
        self.train = train
        self.val = val
        self.tc = run.training
        self.rng = np.random.default_rng([seed, 77])
        self.report = TrainReport(net.kind)
        self._best_seed: tuple[float, dict] | None = None

    # -- losses

    def loss(self, y: np.ndarray, h: np.ndarray, kind: str, n: int, prefix: Prefix | None = None) -> Tensor:
        if kind == "L":
            tr = self.net.forward(y, n - 1, want_r_next=True, prefix=prefix)
            return loss_linear(tr.r[-1], self.psi, h)
        tr = self.net.forward(y, n, prefix=prefix)
        z = tr.x[-1] if n > 0 else tr.r[0]
        return loss_nonlinear(z, self.psi, h)

    def evaluate(self, kind: str, n: int, ds: Dataset | None = None, prefix: Prefix | None = None) -> float:
        ds = ds or self.val
        if len(ds) == 0:
            return float("nan")
        total = 0.0
        bs = 256
        for s in range(0, len(ds), bs):
            part_prefix = None if prefix is None else prefix.take(slice(s, s + bs))
            part = self.loss(ds.y[s:s + bs], ds.h[s:s + bs], kind, n, part_prefix).item()
            total += part * min(bs, len(ds) - s)
        return total / len(ds)

    def frozen_prefix(self, keys: list, kind: str, n: int) -> tuple[Prefix, Prefix] | None:
        """Cached outputs of the frozen layers when only layer ``n`` trains.

        Applies when the trainable set is ``lam_n`` alone (``R_n`` is fixed)
        or ``beta_n`` alone for ``n >= 2`` (``X_{n-1}``, ``V_{n-1}`` fixed).
        """
        net = self.net
        beta_n = {f"{net.beta_key(n)}.re", f"{net.beta_key(n)}.im"}
        if set(keys) == {f"lam{n}"} and kind == "NL":
            with_r = True
        elif set(keys) == beta_n and n >= 2 and not net.shared_beta:
            with_r = False
        else:
            return None
        return (net.prefix(self.train.y, n, with_r), net.prefix(self.val.y, n, with_r))

    # -- phases

    def run_phase(self, stage: int, name: str, keys: list, kind: str, n: int, epochs: int,
                  seed_candidate: tuple[float, dict] | None = None) -> PhaseRecord:
        net = self.net
        rec = PhaseRecord(stage, name, f"{kind}{n}", list(keys))
        t0 = time.perf_counter()
        try:
            cached = self.frozen_prefix(keys, kind, n) if epochs > 0 else None
        except NumericalError:
            cached = None
        train_prefix, val_prefix = cached if cached is not None else (None, None)
        best_val = self.evaluate(kind, n, prefix=val_prefix)
        best_state = net.state_dict()
        rec.val_curve.append(best_val)
        # a phase without epochs leaves the parameters untouched
        if epochs > 0 and seed_candidate is not None and seed_candidate[0] < best_val:
            best_val, best_state = seed_candidate[0], seed_candidate[1]
        opt = Adam(self.tc.lr, self.tc.betas, self.tc.eps, lr_overrides={"lam": self.tc.lr_lambda})
        for _ in range(epochs):
            order = self.rng.permutation(len(self.train))
            ep_loss, seen = 0.0, 0
            try:
                for s in range(0, len(order), self.tc.batch):
                    idx = np.sort(order[s:s + self.tc.batch])
                    for k in keys:
                        net.params[k].zero_grad()
                    pre = None if train_prefix is None else train_prefix.take(idx)
                    loss = self.loss(self.train.y[idx], self.train.h[idx], kind, n, pre)
                    tl.backward(loss)
                    opt.step(net.params, keys)
                    self._clip()
                    net.sync_block()
                    ep_loss += loss.item() * len(idx)
                    seen += len(idx)
                val = self.evaluate(kind, n, prefix=val_prefix)
            except NumericalError:
                rec.aborted = True
                self.report.diverged = True
                break
            rec.train_curve.append(ep_loss / max(seen, 1))
            rec.val_curve.append(val)
            if val < best_val:
                best_val, best_state = val, net.state_dict()
        net.replace_params(best_state)
        rec.best_val = best_val
        rec.seconds = time.perf_counter() - t0
        self.report.phases.append(rec)
        return rec

    def _clip(self) -> None:
        for key, t in self.net.params.items():
            if key.startswith("lam") and t.data[1] < 0:
                fixed = t.data.copy()
                fixed[1] = 0.0
                self.net.params[key] = Tensor(fixed, requires_grad=True)

    def identity_candidate(self, n: int, prev_state: dict) -> tuple[float, dict] | None:
        """Previous-stage parameters plus a new layer ``n`` with ``lam1 = 0``.

        In a residual network that layer passes ``X_{n-1}`` through unchanged,
        so the candidate reproduces the previous stage's result exactly.
        """
        if not self.net.residual or n < 2:
            return None
        saved = self.net.state_dict()
        ident = dict(prev_state)
        for key in (f"{self.net.beta_key(n)}.re", f"{self.net.beta_key(n)}.im"):
            ident[key] = saved[key]
        ident[f"lam{n}"] = saved[f"lam{n}"].copy()
        ident[f"lam{n}"][0] = 0.0
        self.net.replace_params(ident)
        cand = (self.evaluate("NL", n), self.net.state_dict())
        self.net.replace_params(saved)
        return cand

    def close_stage(self, n: int, t0: float, kind: str = "NL") -> None:
        val = self.evaluate(kind, n)
        self.report.stage_val_loss.append(val)
        self.report.stage_val_nmse_db.append(float(10 * np.log10(max(val, 1e-30))))
        self.report.stage_seconds.append(time.perf_counter() - t0)


def split_train_val(ds: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    n_val = int(round(len(ds) * fraction))
    if fraction > 0 and n_val == 0 and len(ds) > 1:
        n_val = 1
    cut = len(ds) - n_val
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, len(ds)))


def _check_dims(net: RlampNet, ds: Dataset, psi: np.ndarray) -> None:
    if ds.y.shape[1] != net.m or ds.h.shape[1] != psi.shape[0] or psi.shape[1] != net.g:
        raise tl.DimensionError(
            f"dataset (M={ds.y.shape[1]}, rows={ds.h.shape[1]}) does not match network "
            f"(M={net.m}, G={net.g}) and dictionary {psi.shape}")


def train_da_rlamp(net: RlampNet, psi: np.ndarray, dataset: Dataset, run: RunConfig,
                   layers: int | None = None, seed: int = 0) -> TrainReport:
    """Layer-by-layer training of a (DA-)RLAMP network.

    Stage 1 learns ``{beta_1, Theta}`` on the linear loss, then ``lam_1`` on
    the nonlinear loss, then refines all three.  Every later stage appends a
    layer initialized from the previous one, learns ``beta_n`` on the linear
    loss, refines everything on it, learns ``lam_n`` on the nonlinear loss and
    refines everything on that.  Each phase keeps its best validation iterate.
    """
    _check_dims(net, dataset, psi)
    layers = net.layers if layers is None else layers
    train, val = split_train_val(dataset, run.training.val_fraction)
    if len(val) == 0:
        val = train
    tc = run.training
    net.layers = 0
    tr = Trainer(net, psi, train, val, run, seed)
    tr.report.init_val_loss = tr.evaluate("NL", 0)
    block = net.block_keys()
    for n in range(1, layers + 1):
        t0 = time.perf_counter()
        prev_state = net.state_dict()
        if n > 1:
            net.add_layer()
        elif net.layers == 0:
            net.layers = 1
        beta_n = [f"{net.beta_key(n)}.re", f"{net.beta_key(n)}.im"]
        betas_all = sorted({f"{net.beta_key(l)}.{p}" for l in range(1, n + 1) for p in ("re", "im")})
        lams_prev = [f"lam{l}" for l in range(1, n)]
        if n == 1:
            # the initial parameters compete in the nonlinear phases, so
            # stage 1 never ends worse than where it started
            cand = (tr.evaluate("NL", 1), net.state_dict())
            tr.run_phase(1, "learn-beta-theta", beta_n + block, "L", 1, tc.epochs)
            tr.run_phase(1, "learn-lambda", ["lam1"], "NL", 1, tc.epochs, seed_candidate=cand)
            cand2 = cand if cand[0] < tr.report.phases[-1].best_val else None
            tr.run_phase(1, "refine", beta_n + block + ["lam1"], "NL", 1, tc.refine, seed_candidate=cand2)
        else:
            cand = tr.identity_candidate(n, prev_state)
            tr.run_phase(n, "learn-beta", beta_n, "L", n, tc.epochs)
            tr.run_phase(n, "refine-linear", block + betas_all + lams_prev, "L", n, tc.refine)
            tr.run_phase(n, "learn-lambda", [f"lam{n}"], "NL", n, tc.epochs, seed_candidate=cand)
            cand2 = cand if cand is not None and cand[0] < tr.report.phases[-1].best_val else None
            tr.run_phase(n, "refine", block + betas_all + lams_prev + [f"lam{n}"], "NL", n, tc.refine,
                         seed_candidate=cand2)
        tr.close_stage(n, t0)
    return tr.report


def train_mda_rlamp(net: RlampNet, psi: np.ndarray, dataset: Dataset, run: RunConfig,
                    layers: int | None = None, seed: int = 0) -> TrainReport:
    """Layer-by-layer training with one shared ``beta``.

    Stage 1 learns ``{beta, phi}``; every later stage copies the previous
    shrinkage parameters, learns the new ``lam_n`` alone, then re-learns all
    parameters.  All losses are taken on ``X_n``.
    """
    _check_dims(net, dataset, psi)
    layers = net.layers if layers is None else layers
    train, val = split_train_val(dataset, run.training.val_fraction)
    if len(val) == 0:
        val = train
    tc = run.training
    net.layers = 1
    tr = Trainer(net, psi, train, val, run, seed)
    tr.report.init_val_loss = tr.evaluate("NL", 1)
    block = net.block_keys()
    beta = ["beta0.re", "beta0.im"]
    t0 = time.perf_counter()
    tr.run_phase(1, "learn-beta-phi", beta + block, "NL", 1, tc.epochs)
    tr.close_stage(1, t0)
    for n in range(2, layers + 1):
        t0 = time.perf_counter()
        prev_state = net.state_dict()
        net.add_layer()
        cand = tr.identity_candidate(n, prev_state)
        tr.run_phase(n, "learn-lambda", [f"lam{n}"], "NL", n, tc.epochs, seed_candidate=cand)
        lams = [f"lam{l}" for l in range(1, n + 1)]
        cand2 = cand if cand is not None and cand[0] < tr.report.phases[-1].best_val else None
        tr.run_phase(n, "relearn", beta + block + lams, "NL", n, tc.refine, seed_candidate=cand2)
        tr.close_stage(n, t0)
    return tr.report


def train_network(net: RlampNet, psi: np.ndarray, dataset: Dataset, run: RunConfig,
                  seed: int = 0) -> TrainReport:
    if net.kind == "mda-rlamp":
        return train_mda_rlamp(net, psi, dataset, run, seed=seed)
    return train_da_rlamp(net, psi, dataset, run, seed=seed)


__all__ = [
    "Adam", "Dataset", "DivergenceError", "TrainReport", "adam_step", "gen_dataset", "load_dataset",
    "loss_linear", "loss_nonlinear", "save_dataset", "train_da_rlamp", "train_mda_rlamp", "train_network",
]
