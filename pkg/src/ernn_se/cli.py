"""Command-line entry point: ``ernn-se {train,enhance,params,gradcheck,bench}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dsp
from .audio import WavError, load_wav, save_wav
from .checkpoint import CheckpointError, load_checkpoint
from .model import MaskModel, ModelConfig, count_parameters, format_count
from .numerics import grad_check
from .training import DatasetError, TrainConfig, load_dataset, mae_time_loss, train

log = logging.getLogger("ernn_se")

DEFAULTS = {
    "arch": "ernn",
    "n_state": 256,
    "n_hidden": 128,
    "iterations": 1,
    "epochs": 200,
    "batch_size": 16,
    "lr": 1e-4,
    "seed": 0,
    "precision": "float32",
    "checkpoint_every": 10,
    "data": None,
    "out_dir": "runs/ernn",
    "threads": 1,
}


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get("ERNN_SEED")
    if raw is None:
        return DEFAULTS["seed"]
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"ERNN_SEED must be an integer, got {raw!r}") from None


def resolve_config(config_path=None, overrides: dict | None = None) -> dict:
    """Built-in defaults < ERNN_SEED < JSON config file < explicit flags."""
    cfg = dict(DEFAULTS)
    cfg["seed"] = default_seed()
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from None
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    if cfg["arch"] == "lstm2":
        return ModelConfig("lstm2", cfg["n_state"], None, None, seed=cfg["seed"])
    return ModelConfig(cfg["arch"], cfg["n_state"], cfg["n_hidden"], cfg["iterations"], seed=cfg["seed"])


@contextlib.contextmanager
def _thread_limit(n: int | None):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _add_arch_flags(p: argparse.ArgumentParser, defaults: bool = False) -> None:
    d = DEFAULTS if defaults else {}
    p.add_argument("--arch", choices=("ernn", "lstm2"), default=d.get("arch"))
    p.add_argument("--n-state", "--ns", dest="n_state", type=int, default=d.get("n_state"))
    p.add_argument("--n-hidden", "--nh", dest="n_hidden", type=int, default=d.get("n_hidden"))
    p.add_argument("--iterations", "--k", dest="iterations", type=int, default=d.get("iterations"))


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in DEFAULTS if hasattr(args, k)}
    cfg = resolve_config(args.config, overrides)
    if not cfg["data"]:
        print("error: no dataset given (--data or 'data' in config)", file=sys.stderr)
        return 2
    if not Path(cfg["data"]).exists():
        print(f"error: dataset path does not exist: {cfg['data']}", file=sys.stderr)
        return 2
    try:
        dataset = load_dataset(cfg["data"])
        tcfg = TrainConfig(
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            lr=cfg["lr"],
            seed=cfg["seed"],
            precision=cfg["precision"],
            checkpoint_every=cfg["checkpoint_every"],
        )
        model = MaskModel(_model_config(cfg))
    except (DatasetError, WavError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = Path(cfg["out_dir"])
    with _thread_limit(cfg["threads"]):
        report = train(dataset, model, tcfg, out_dir=out, on_epoch=lambda e: print(json.dumps(e), flush=True))
    summary = {
        "checkpoint": str(out / "final.ckpt"),
        "epochs": len(report.epochs),
        "steps": report.steps,
        "final_loss": report.losses[-1],
        "config": cfg,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_enhance(args) -> int:
    from .streaming import enhance, enhance_streaming

    try:
        model = load_checkpoint(args.checkpoint)
        x = load_wav(args.input)
    except (CheckpointError, WavError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if model.cfg.n_in != dsp.DEFAULT_CONFIG.n_bins:
        print(f"error: checkpoint expects {model.cfg.n_in} features, STFT gives {dsp.DEFAULT_CONFIG.n_bins}", file=sys.stderr)
        return 2
    with _thread_limit(args.threads):
        t0 = time.perf_counter()
        y = enhance_streaming(model, x, chunk=args.chunk) if args.stream else enhance(model, x)
        elapsed = time.perf_counter() - t0
    clipped = save_wav(args.output, y)
    seconds = len(x) / dsp.DEFAULT_CONFIG.sample_rate
    _emit(
        {
            "input": str(args.input),
            "output": str(args.output),
            "samples": int(len(y)),
            "mode": "stream" if args.stream else "offline",
            "rtf": elapsed / seconds if seconds else 0.0,
            "clipped_samples": clipped,
        },
        args.out,
    )
    return 0


def cmd_params(args) -> int:
    try:
        cfg = _model_config(
            {
                "arch": args.arch,
                "n_state": args.n_state,
                "n_hidden": args.n_hidden,
                "iterations": args.iterations,
                "seed": 0,
            }
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    n = count_parameters(cfg)
    _emit({"config": cfg.to_dict(), "parameters": n, "rounded": format_count(n)}, args.out)
    return 0


def gradcheck_report(n_state=8, n_hidden=4, iterations=2, seconds=0.05, probes=200, seed=0) -> dict:
    """End-to-end finite-difference check of the MAE objective for ERNN and LSTM2."""
    from .synthetic import harmonic_surrogate

    rng = np.random.default_rng(seed)
    n = int(seconds * dsp.DEFAULT_CONFIG.sample_rate)
    clean = harmonic_surrogate(rng, n)
    noisy = clean + 0.05 * rng.standard_normal(n)
    results = {}
    for cfg in (
        ModelConfig("ernn", n_state, n_hidden, iterations, seed=seed),
        ModelConfig("lstm2", n_state, None, None, seed=seed),
    ):
        model = MaskModel(cfg, np.float64)
        include = ["ernn.eta"] if cfg.arch == "ernn" else []
        err = grad_check(lambda: mae_time_loss(clean, noisy, model), model.store, probes=probes, seed=seed, include=include)
        results[cfg.arch] = err
    return {"max_rel_err": max(results.values()), "per_model": results, "probes": probes, "tolerance": 1e-4}


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(args.n_state, args.n_hidden, args.iterations, args.seconds, args.probes, args.seed)
    _emit(report, args.out)
    return 0 if report["max_rel_err"] < 1e-4 else 1


def cmd_bench(args) -> int:
    from .evaluation import gradient_norm_traces, rtf_benchmark

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _thread_limit(1):
        rtf = {}
        for k in args.k:
            cfg = ModelConfig("ernn", args.n_state, args.n_hidden, k, seed=args.seed)
            rtf[f"ernn_ns{args.n_state}_nh{args.n_hidden}_k{k}"] = rtf_benchmark(MaskModel(cfg), args.seconds, args.repetitions, args.seed)
        traces = gradient_norm_traces(args.length, n_state=args.trace_state, seed=args.seed)
    csv_path = out_dir / "gradient_norms.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance", *traces])
        for d in range(args.length + 1):
            w.writerow([d, *(f"{traces[c][d]:.9e}" for c in traces)])
    report = {
        "rtf": rtf,
        "gradient_norms_csv": str(csv_path),
        "gradient_norms": {c: {"distance_1": t[1], "distance_20": t[min(20, len(t) - 1)], "last": t[-1]} for c, t in traces.items()},
    }
    _emit(report, args.out or str(out_dir / "bench.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ernn-se", description="Causal ERNN mask-based speech enhancement.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a mask estimator")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="dataset directory or TAB manifest")
    p.add_argument("--out-dir", dest="out_dir")
    _add_arch_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="write the summary JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a 16 kHz mono WAV file")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--stream", action="store_true", help="use the streaming engine")
    p.add_argument("--chunk", type=int, default=256, help="streaming push size in samples")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("params", help="print exact and rounded parameter counts")
    _add_arch_flags(p, defaults=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    p.add_argument("--n-state", "--ns", dest="n_state", type=int, default=8)
    p.add_argument("--n-hidden", "--nh", dest="n_hidden", type=int, default=4)
    p.add_argument("--iterations", "--k", dest="iterations", type=int, default=2)
    p.add_argument("--seconds", type=float, default=0.05)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="real-time factor and state-gradient norm traces")
    p.add_argument("--n-state", "--ns", dest="n_state", type=int, default=256)
    p.add_argument("--n-hidden", "--nh", dest="n_hidden", type=int, default=128)
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--length", type=int, default=100, help="frames in the gradient-norm traces")
    p.add_argument("--trace-state", dest="trace_state", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", dest="out_dir", default="bench")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is None and args.command in ("gradcheck", "bench"):
        try:
            args.seed = default_seed()
        except ConfigError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
