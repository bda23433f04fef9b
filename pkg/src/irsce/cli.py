"""Command-line entry point: ``irsce {gen,train,eval,sweep,baseline}``.

Settings come from a JSON config file (``--config``) layered over a named
profile; individual flags override both.  Exit codes: 2 for an invalid
configuration, 3 for a model/dataset dimension mismatch, 4 for numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_CONFIG, EXIT_DIMENSION, EXIT_DIVERGENCE = 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(flag: int | None) -> None:
    """Pin BLAS threads; must run before numpy is first imported to take effect."""
    value = flag if flag is not None else os.environ.get("IRSCE_THREADS")
    if value is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(int(value))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--profile", choices=("desk", "paper"), help="base profile (default: config's, else desk)")
    p.add_argument("--seed", type=int, help="seed for this command (default: config seed)")
    p.add_argument("--snr", type=float, help="SNR in dB")
    p.add_argument("--pilots", type=int, help="pilot count T (T_i in hybrid mode)")
    p.add_argument("--threads", type=int, help="BLAS worker threads (env IRSCE_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irsce", description="IRS cascaded-channel estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset file")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train an unrolled network")
    _common(p)
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--net", default="da-rlamp", choices=("da-rlamp", "mda-rlamp", "lamp"))
    p.add_argument("--layers", type=int, help="number of unrolled layers")
    p.add_argument("--epochs", type=int, help="epochs per phase")
    p.add_argument("--out", required=True, help="model snapshot path")
    p.add_argument("--report", help="TrainReport JSON path (default: <out>.json)")

    p = sub.add_parser("eval", help="NMSE of a model and the baselines on a dataset")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("sweep", help="Monte-Carlo NMSE sweep")
    _common(p)
    p.add_argument("--axis", default="snr_db", choices=("snr_db", "pilots", "iterations"))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--count", type=int, default=50, help="trials per axis value")
    p.add_argument("--model", help="trained model to include")
    p.add_argument("--net", default="da-rlamp", help="label for the model column")
    p.add_argument("--out", required=True, help="CSV path; the SVG goes next to it")

    p = sub.add_parser("baseline", help="compare SWOMP and untrained AMP")
    _common(p)
    p.add_argument("--data", help="dataset (default: generate --count samples)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def resolve_config(args):
    """Profile, then config file, then flags."""
    from .config import config_from_dict, profile_config

    if args.config:
        path = args.config
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            from .config import ConfigError
            raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            from .config import ConfigError
            raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno, path) from None
        if args.profile and isinstance(data, dict):
            data["profile"] = args.profile
        run = config_from_dict(data, text, path)
    else:
        run = profile_config(args.profile or "desk")
    if args.snr is not None:
        run.system.snr_db = float(args.snr)
    if args.pilots is not None:
        if run.system.mode == "hybrid":
            run.system.t_i = args.pilots
        else:
            run.system.t = args.pilots
    if getattr(args, "layers", None) is not None:
        run.network.layers = args.layers
    if getattr(args, "epochs", None) is not None:
        run.training.epochs = args.epochs
    return run.validate()


def _seed(args, run) -> int:
    return run.seed if args.seed is None else args.seed


def cmd_gen(args, run) -> int:
    from .training import gen_dataset, save_dataset

    ds = gen_dataset(run.system, args.count, _seed(args, run), split=args.split)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _check_data(run, ds) -> None:
    from .tensorlab import DimensionError

    s = run.system
    if ds.mode != s.mode or ds.system.k != s.k or ds.y.shape[1] != (s.t_i if s.mode == "hybrid" else s.m):
        raise DimensionError(f"dataset (mode={ds.mode}, M={ds.y.shape[1]}, K={ds.system.k}) does not match "
                             f"the configuration (mode={s.mode}, K={s.k})")


def cmd_train(args, run) -> int:
    import numpy as np

    from .net_rlamp import build_network, save_network
    from .sensing import build_design
    from .training import load_dataset, train_network

    ds = load_dataset(args.data)
    _check_data(run, ds)
    design = build_design(run.system)
    seed = _seed(args, run)
    net = build_network(args.net, design, run.network, rng=np.random.default_rng([seed, 5]))
    report = train_network(net, design.psi_n, ds, run, seed=seed)
    save_network(net, args.out)
    rpath = args.report or f"{args.out}.json"
    Path(rpath).write_text(json.dumps(report.to_dict(timings=False), indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    final = report.stage_val_nmse_db[-1] if report.stage_val_nmse_db else float("nan")
    print(f"trained {net.kind} with {net.layers} layers; validation NMSE {final:.2f} dB")
    return EXIT_DIVERGENCE if report.diverged and not report.stage_val_nmse_db else 0


def _dataset_result(estimators: dict, ds, design):
    from .evaluate import SweepResult, best_scale, config_hash, nmse_ratios, summarize
    from .sensing import SensingProblem

    value = float(ds.system.snr_db)
    res = SweepResult("snr_db", [value], config_hash=config_hash(ds.system, {"methods": list(estimators)}))
    for name, est in estimators.items():
        ratios, scales = [], []
        for y, h in zip(ds.y, ds.h):
            h_hat = est(SensingProblem(y, h, None, None, 0.0, design), {})
            ratios.append(nmse_ratios(h, h_hat)[0])
            scales.append(best_scale(h, h_hat))
        res.rows.append(summarize(name, value, ratios, scales))
    return res


def cmd_eval(args, run) -> int:
    from .evaluate import amp_estimator, emit_csv, network_estimator, swomp_estimator
    from .net_rlamp import load_network
    from .sensing import build_design
    from .training import load_dataset

    ds = load_dataset(args.data)
    _check_data(run, ds)
    design = build_design(run.system)
    net = load_network(args.model, design.ups_n)
    if net.dims.get("K") not in (None, ds.system.k):
        from .tensorlab import DimensionError
        raise DimensionError(f"model was trained with K={net.dims['K']}, dataset has K={ds.system.k}")
    ests = {net.kind: network_estimator(net), "swomp": swomp_estimator(snr_db=ds.system.snr_db), "amp": amp_estimator(10)}
    res = _dataset_result(ests, ds, design)
    emit_csv(res, args.out)
    for r in res.rows:
        print(f"{r.method:10s} {r.mean_nmse_db:8.2f} dB  (std {r.std_db:.2f}, n={r.trials})")
    return 0


def cmd_sweep(args, run) -> int:
    from .evaluate import amp_estimator, emit_csv, emit_svg, network_estimator, swomp_estimator, sweep
    from .net_rlamp import load_network
    from .sensing import build_design

    values = [float(v) for v in args.values.split(",") if v.strip()]
    if args.axis in ("pilots", "iterations"):
        values = [int(v) for v in values]
    ests = {"swomp": swomp_estimator(), "amp": amp_estimator()}
    if args.model:
        if args.axis == "pilots":
            from .config import ConfigError
            raise ConfigError("a trained model has a fixed pilot count; sweep pilots without --model")
        net = load_network(args.model, build_design(run.system).ups_n)
        ests = {args.net: network_estimator(net), **ests}
    res = sweep(run.system, ests, args.axis, values, args.count, seed=_seed(args, run))
    emit_csv(res, args.out)
    svg = str(Path(args.out).with_suffix(".svg"))
    emit_svg(res, svg)
    print(f"wrote {args.out} and {svg}")
    return 0


def cmd_baseline(args, run) -> int:
    from .evaluate import amp_estimator, emit_csv, swomp_estimator, sweep
    from .sensing import build_design
    from .training import load_dataset

    if args.data:
        ds = load_dataset(args.data)
        _check_data(run, ds)
        design = build_design(run.system)
        res = _dataset_result({"swomp": swomp_estimator(snr_db=ds.system.snr_db), "amp": amp_estimator()}, ds, design)
    else:
        res = sweep(run.system, {"swomp": swomp_estimator(), "amp": amp_estimator()}, "snr_db",
                    [run.system.snr_db], args.count, seed=_seed(args, run))
    emit_csv(res, args.out)
    for r in res.rows:
        print(f"{r.method:10s} {r.mean_nmse_db:8.2f} dB  (std {r.std_db:.2f}, n={r.trials})")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "baseline": cmd_baseline}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .config import ConfigError
    from .tensorlab import DimensionError, NumericalError

    try:
        run = resolve_config(args)
        return COMMANDS[args.command](args, run)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
