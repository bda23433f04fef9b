"""Acceptance suite: one test per numbered criterion.

Each test prints a ``CRITERION n: PASS/FAIL`` line (also repeated in the
terminal summary) before asserting.  The training criteria (7 to 10) run at
the desk profile and take tens of minutes on one core.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from irsce import channel as ch
from irsce import sensing as sn
from irsce import tensorlab as tl
from irsce.classical import amp_untrained
from irsce.cli import main as cli_main
from irsce.config import SystemConfig, profile_config
from irsce.evaluate import (amp_estimator, evaluate_dataset, network_estimator, nmse_db, spectral_efficiency,
                            swomp_estimator)
from irsce.net_da import DaBlock, MdaBlock
from irsce.net_rlamp import build_network
from irsce.training import gen_dataset, train_da_rlamp, train_mda_rlamp

from oracles import conv2d_loops, depthwise_loops, directional_check, op_catalog

TRAIN_SEED, TEST_SEED = 11, 12
C9_SAMPLES, C9_EPOCHS, C9_SEEDS = 400, 2, (0, 1, 2)
C10_SAMPLES = 1000


def _db(ratios):
    return float(10 * np.log10(np.nanmean(ratios)))


# ---------------------------------------------------------------- 1 to 6


def test_c01_autodiff(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {}
    for name, inst in sorted(op_catalog().items()):
        errs = []
        for _ in range(100):
            arrays, build = inst(rng)
            errs.append(directional_check(build, arrays, rng))
        worst[name] = max(errs)
    secs = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    ok = not bad and secs < 60
    verdict(1, ok, f"{len(worst)} ops x 100 checks, worst rel err {max(worst.values()):.1e}, {secs:.1f} s")
    assert ok, bad


def test_c02_convolution_oracle(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    diff = 0.0
    for _ in range(100):
        c_in, c_out = rng.integers(1, 4, 2)
        h, w = rng.integers(1, 7, 2)
        k = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((c_in, h, w))
        wt, b = rng.standard_normal((c_out, c_in, k, k)), rng.standard_normal(c_out)
        got = tl.conv2d(tl.Tensor(x), tl.Tensor(wt), tl.Tensor(b)).data
        diff = max(diff, np.max(np.abs(got - conv2d_loops(x, wt, b))))
        wd, bd = rng.standard_normal((c_in, k, k)), rng.standard_normal(c_in)
        got = tl.depthwise_conv2d(tl.Tensor(x), tl.Tensor(wd), tl.Tensor(bd)).data
        diff = max(diff, np.max(np.abs(got - depthwise_loops(x, wd, bd))))
    secs = time.perf_counter() - t0
    ok = diff < 1e-12 and secs < 60
    verdict(2, ok, f"100 shapes each, max abs diff {diff:.1e}, {secs:.1f} s")
    assert ok


def test_c03_dictionary_rows(verdict):
    cfg = SystemConfig(n_ix=2, n_iy=2, g_i=8, t_i=4)
    a = sn.irs_dictionary(cfg)
    d = sn.khatri_rao_rows(a, a)
    reps = []
    for row in d:
        if not any(np.max(np.abs(row - r)) < 1e-9 for r in reps):
            reps.append(row)
    dg, classes = sn.build_Dg(a, a)
    match = max(np.max(np.abs(row - dg[classes[i]])) for i, row in enumerate(d))
    ok = d.shape[0] == 64 and len(reps) == cfg.g_i and match < 1e-9
    verdict(3, ok, f"{d.shape[0]} rows, {len(reps)} distinct (G_i={cfg.g_i}), max row mismatch {match:.1e}")
    assert ok


def test_c04_on_grid(verdict):
    cfg = profile_config("desk").system
    design = sn.build_design(cfg)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        real = ch.realize(cfg, rng)
        x = sn.sparse_truth(real, design)
        h = sn.label_of(real, design)
        worst = max(worst, np.linalg.norm(h - design.psi @ x) / np.linalg.norm(h))
    ok = worst < 1e-9
    verdict(4, ok, f"50 desk draws, worst relative residual {worst:.1e}")
    assert ok


def test_c05_noiseless_recovery(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    desk = dataclasses.replace(profile_config("desk").system, l_pf=1, l_pg=1)
    design = sn.build_design(desk)
    sw = [nmse_db(p.h, swomp_estimator()(p, {}))
          for p in (sn.assemble_problem(ch.realize(desk, rng), design, rng, np.inf) for _ in range(20))]
    # small on-grid system with M = 4G
    small = SystemConfig(n_b=2, n_ix=2, n_iy=2, k=2, t=32, g_b=2, g_i=4, l_pf=1, l_pg=1)
    sd = sn.build_design(small)
    amp = []
    for _ in range(20):
        p = sn.assemble_problem(ch.realize(small, rng), sd, rng, np.inf)
        amp.append(nmse_db(p.x, amp_untrained(p.y, sd.ups, 10).x))
    secs = time.perf_counter() - t0
    ok = max(sw) < -100 and max(amp) < -40 and sd.m >= sd.g and secs < 60
    verdict(5, ok, f"SWOMP worst {max(sw):.1f} dB; AMP (M={sd.m}, G={sd.g}) worst {max(amp):.1f} dB; {secs:.1f} s")
    assert ok


def test_c06_da_identity(verdict):
    run = profile_config("desk")
    design = sn.build_design(run.system)
    rng = np.random.default_rng(6)
    da = build_network("da-rlamp", design, run.network, rng=rng)
    lamp = build_network("lamp", design, run.network)
    for n in range(1, run.network.layers + 1):
        beta = rng.standard_normal((design.g, design.m)) + 1j * rng.standard_normal((design.g, design.m))
        lam = tuple(rng.uniform(0.3, 1.5, 3))
        for net in (da, lamp):
            net.set_beta(n, design.ups_n.conj().T + 0.05 * beta)
            net.set_lam(n, lam)
    for key in da.block_keys():
        da.params[key] = tl.Tensor(np.zeros_like(da.params[key].data), requires_grad=True)
    da.sync_block()
    same = 0
    for _ in range(20):
        y = rng.standard_normal((design.m, run.system.k)) + 1j * rng.standard_normal((design.m, run.system.k))
        same += int(np.array_equal(da.estimate(y), lamp.estimate(y)))
    ok = same == 20
    verdict(6, ok, f"{same}/20 inputs bit-identical")
    assert ok


# ---------------------------------------------------------------- 7 and 8


@pytest.fixture(scope="module")
def desk_model():
    run = profile_config("desk")
    cfg = run.system
    design = sn.build_design(cfg)
    t0 = time.perf_counter()
    train = gen_dataset(cfg, run.training.train_count, TRAIN_SEED, design=design)
    test = gen_dataset(cfg, run.training.test_count, TEST_SEED, split="test", design=design)
    net = build_network("da-rlamp", design, run.network, rng=np.random.default_rng([run.seed, 5]))
    train_da_rlamp(net, design.psi_n, train, run, seed=run.seed)
    da = _db(evaluate_dataset(network_estimator(net), test, design))
    secs_train = time.perf_counter() - t0
    amp = _db(evaluate_dataset(amp_estimator(), test, design))
    swomp = _db(evaluate_dataset(swomp_estimator(snr_db=cfg.snr_db), test, design))
    secs = time.perf_counter() - t0
    return dict(run=run, net=net, da=da, amp=amp, swomp=swomp, seconds=secs, train_seconds=secs_train)


@pytest.mark.slow
def test_c07_training_efficacy(desk_model, verdict):
    m = desk_model
    ok = m["da"] <= m["amp"] - 3 and m["da"] <= m["swomp"] - 1 and m["seconds"] < 1800
    verdict(7, ok, f"DA-RLAMP {m['da']:.2f} dB, AMP {m['amp']:.2f} dB, SWOMP {m['swomp']:.2f} dB, "
                   f"{m['seconds']:.0f} s ({m['run'].training.train_count} train / {m['run'].training.test_count} test)")
    assert ok


@pytest.mark.slow
def test_c08_pilot_overhead(desk_model, verdict):
    run = desk_model["run"]
    cfg20 = dataclasses.replace(run.system, t=20)
    d20 = sn.build_design(cfg20)
    test20 = gen_dataset(cfg20, run.training.test_count, TEST_SEED, split="test", design=d20)
    amp20 = _db(evaluate_dataset(amp_estimator(), test20, d20))
    ok = desk_model["da"] <= amp20 + 0.5
    verdict(8, ok, f"DA-RLAMP at T=8 {desk_model['da']:.2f} dB vs AMP at T=20 {amp20:.2f} dB (tol 0.5 dB)")
    assert ok


# ---------------------------------------------------------------- 9 and 10


@pytest.mark.slow
def test_c09_residual_learning(verdict):
    base = profile_config("desk")
    cfg = base.system
    design = sn.build_design(cfg)
    run = dataclasses.replace(base, network=dataclasses.replace(base.network, layers=6),
                              training=dataclasses.replace(base.training, epochs=C9_EPOCHS))
    curves = {True: [], False: []}
    for seed in C9_SEEDS:
        ds = gen_dataset(cfg, C9_SAMPLES, 100 + seed, design=design)
        for residual in (True, False):
            net_cfg = dataclasses.replace(run.network, residual=residual)
            net = build_network("da-rlamp", design, net_cfg, rng=np.random.default_rng([seed, 5]))
            rep = train_da_rlamp(net, design.psi_n, ds, dataclasses.replace(run, network=net_cfg), seed=seed)
            curves[residual].append(rep.stage_val_nmse_db)
    res, non = np.array(curves[True]), np.array(curves[False])
    increase = any(np.any(np.diff(c[2:6]) > 0) for c in non)
    if increase:
        ok = bool(np.all(res[:, 3:] <= non[:, 3:]))
        rule = "residual <= non-residual at stages 4-6 in every seed"
    else:
        ok = bool(res[:, -1].mean() <= non[:, -1].mean())
        rule = "fallback: residual final <= non-residual final"
    verdict(9, ok, f"{rule}; final residual {res[:, -1].mean():.2f} dB, non-residual {non[:, -1].mean():.2f} dB, "
                   f"non-residual increase seen: {increase}")
    assert ok


@pytest.mark.slow
def test_c10_hybrid(verdict):
    run = profile_config("desk")
    cfg = dataclasses.replace(run.system, mode="hybrid", t_i=8)
    run = dataclasses.replace(run, system=cfg)
    design = sn.build_design(cfg)
    train = gen_dataset(cfg, C10_SAMPLES, TRAIN_SEED, design=design)
    test = gen_dataset(cfg, run.training.test_count, TEST_SEED, split="test", design=design)
    net = build_network("mda-rlamp", design, run.network, rng=np.random.default_rng([run.seed, 5]))
    train_mda_rlamp(net, design.psi_n, train, run, seed=run.seed)
    mda = _db(evaluate_dataset(network_estimator(net), test, design))
    amp = _db(evaluate_dataset(amp_estimator(), test, design))
    k, depth = cfg.k, run.network.l_di
    mda_p = MdaBlock(k, cfg.g_i, depth).n_params()
    da_conv = DaBlock(k, cfg.g_i, cfg.g_b, depth).n_params(conv_only=True)
    ok = mda <= amp - 3 and mda_p < 0.5 * da_conv
    verdict(10, ok, f"MDA-RLAMP {mda:.2f} dB vs AMP {amp:.2f} dB; params {mda_p} vs DA conv {da_conv} "
                    f"({100 * mda_p / da_conv:.0f}%)")
    assert ok


# ---------------------------------------------------------------- 11 and 12


def test_c11_metric_identities(verdict):
    rng = np.random.default_rng(11)
    h = rng.standard_normal((64, 4)) + 1j * rng.standard_normal((64, 4))
    g = np.zeros((2, 2), dtype=complex)
    g[0, 0] = 1.0
    vals = (float(nmse_db(h, np.zeros_like(h))), float(nmse_db(h, 2 * h)),
            float(spectral_efficiency(g, np.ones(2), np.ones(2), np.array([1.0, 0.0]), 1.0)))
    ok = vals == (0.0, 0.0, 1.0)
    verdict(11, ok, f"nmse(H,0)={vals[0]!r}, nmse(H,2H)={vals[1]!r}, SE={vals[2]!r}")
    assert ok


def test_c12_reproducibility(tmp_path, verdict):
    cfg = {"seed": 5, "system": {"n_b": 4, "n_ix": 2, "n_iy": 2, "k": 2, "t": 4, "g_b": 8, "g_i": 16},
           "network": {"layers": 2}, "training": {"epochs": 2, "batch": 16}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    c = str(tmp_path / "c.json")
    digests = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        steps = [["gen", "--count", "48", "--out", f"{d}/train.irsd"],
                 ["gen", "--count", "12", "--seed", "9", "--split", "test", "--out", f"{d}/test.irsd"],
                 ["train", "--data", f"{d}/train.irsd", "--out", f"{d}/net.irsw"],
                 ["eval", "--model", f"{d}/net.irsw", "--data", f"{d}/test.irsd", "--out", f"{d}/eval.csv"],
                 ["sweep", "--model", f"{d}/net.irsw", "--values", "0,10", "--count", "4", "--out", f"{d}/sw.csv"]]
        for argv in steps:
            assert cli_main(argv[:1] + ["--config", c, "--threads", "1"] + argv[1:]) == 0
        digests.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    names = sorted(digests[0])
    same = [n for n in names if digests[0][n] == digests[1].get(n)]
    ok = len(names) == 7 and same == names
    verdict(12, ok, f"{len(same)}/{len(names)} artifacts byte-identical ({', '.join(names)})")
    assert ok
