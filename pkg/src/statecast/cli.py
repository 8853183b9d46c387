"""Command-line surface binding all modules into reproducible experiments.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric. Every failure
prints a single line ``error: <module>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .autodiff import ContractError, GraphError, NumericError
from .config import ConfigError, TrainConfig, parse_config_text
from .data import (DataError, SynthConfig, load_jsonl, save_jsonl, split_811,
                   synth_generate)
from .evalharness import (LGSSMParams, OracleError, kalman_filter_oracle,
                          latent_trajectory, pca_latents, rolling_origin_eval)
from .forecast import filter_history, forecast_text, rollout
from .model import Forecaster
from .training import Checkpoint, CheckpointFormatError, fit
from .data import normalize


class UsageError(ValueError):
    """Invalid command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="statecast", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic multimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=int, default=50)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--slope", type=float, default=0.0)
    p.add_argument("--event-rate", type=float, default=0.0)
    p.add_argument("--event-shift", type=float, default=1.0)
    p.add_argument("--event-lead", type=int, default=3)
    p.add_argument("--noise-lo", type=float, default=0.1)
    p.add_argument("--noise-hi", type=float, default=0.5)

    p = sub.add_parser("train", help="train on a JSONL dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--unimodal", action="store_true",
                   help="ignore text: zero its loss weight, null summaries")

    p = sub.add_parser("forecast", help="roll out forecasts from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--with-text", action="store_true")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--max-text-len", type=int, default=120)

    p = sub.add_parser("eval", help="rolling-origin evaluation on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", default="1..7",
                   help='e.g. "1..7" or "1,3,7"')
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True, help="report path prefix")

    p = sub.add_parser("export-latents", help="filtered latent PCA projections")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=3)

    p = sub.add_parser("oracle", help="exact Kalman filter on a linear-Gaussian model")
    p.add_argument("--params", required=True, help="LGSSM parameter JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def parse_horizons(spec: str) -> list[int]:
    spec = spec.strip()
    try:
        if ".." in spec:
            lo, hi = spec.split("..", 1)
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"cannot parse horizons {spec!r}") from None
    if not out or min(out) < 1:
        raise UsageError(f"horizons must be >= 1, got {spec!r}")
    return out


def _cmd_synth(args) -> int:
    if args.steps <= 0:
        raise UsageError(f"--steps must be positive, got {args.steps}")
    cfg = SynthConfig(
        length=args.steps, period=args.period, amplitude=args.amplitude,
        slope=args.slope, noise_lo=args.noise_lo, noise_hi=args.noise_hi,
        event_rate=args.event_rate, event_shift=args.event_shift,
        event_lead=args.event_lead, seed=args.seed,
    )
    observations, labels = synth_generate(cfg)
    save_jsonl(args.out, observations)
    labels_path = _labels_path(args.out)
    labels.write_csv(labels_path)
    n_events = sum(labels.event_fired)
    n_hi = sum(labels.regime_hi)
    print(f"steps\t{cfg.length}")
    print(f"events\t{n_events}")
    print(f"high_noise_steps\t{n_hi}")
    print(f"dataset\t{args.out}")
    print(f"labels\t{labels_path}")
    return 0


def _labels_path(out: str) -> str:
    base = out[:-6] if out.endswith(".jsonl") else out
    return base + ".labels.csv"


def _effective_config(args) -> TrainConfig:
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = parse_config_text(fh.read())
    if args.unimodal:
        overrides["unimodal"] = True
    cfg = TrainConfig.from_dict(overrides)
    return cfg


def _cmd_train(args) -> int:
    observations = load_jsonl(args.data)
    cfg = _effective_config(args)
    for key, value in sorted(cfg.to_dict().items()):
        print(f"config {key}={value}", file=sys.stderr)
    train, val, _test = split_811(observations)

    def on_epoch(epoch, train_loss, val_loss):
        print(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}")
        sys.stdout.flush()

    ckpt = fit(train, val, cfg, on_epoch=on_epoch)
    ckpt.save(args.out)
    print(f"checkpoint\t{args.out}", file=sys.stderr)
    return 0


def _cmd_forecast(args) -> int:
    if args.horizon < 1:
        raise UsageError(f"--horizon must be >= 1, got {args.horizon}")
    if args.samples < 1:
        raise UsageError(f"--samples must be >= 1, got {args.samples}")
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model()
    stats = ckpt.stats()
    observations = load_jsonl(args.data)
    state = filter_history(model, normalize(observations, stats))
    result = rollout(model, state, args.horizon, args.samples, args.seed, stats)
    if args.with_text:
        import datetime
        last_date = observations[-1].date if observations else "2000-01-01"
        base = datetime.date.fromisoformat(last_date)
        texts = {}
        for h in result.horizons:
            date = (base + datetime.timedelta(days=h)).isoformat()
            texts[h] = forecast_text(
                model, result.sample0_latents[h - 1], date,
                args.max_text_len, args.temperature, args.seed + h,
            )
        result.texts = texts
        with open(args.out + ".text.jsonl", "w", encoding="utf-8") as fh:
            for h in result.horizons:
                fh.write(json.dumps({"horizon": h, "text": texts[h]}) + "\n")
    if args.emit == "csv":
        result.write_csv(args.out + ".csv")
    else:
        result.write_json(args.out + ".json")
    return 0


def _cmd_eval(args) -> int:
    horizons = parse_horizons(args.horizons)
    if args.samples < 1:
        raise UsageError(f"--samples must be >= 1, got {args.samples}")
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model()
    stats = ckpt.stats()
    observations = load_jsonl(args.data)
    train, val, test = split_811(observations)
    test_start = len(train) + len(val)
    report = rolling_origin_eval(
        model, observations, stats, test_start, horizons, args.samples, args.seed
    )
    report.write_csv(args.report + ".csv")
    report.write_json(args.report + ".json")
    for h, rmse in zip(report.horizons, report.rmse):
        print(f"rmse\t{h}\t{rmse:.6f}")
    print(f"coverage80\t{report.coverage80:.4f}")
    print(f"coverage95\t{report.coverage95:.4f}")
    return 0


def _cmd_export_latents(args) -> int:
    if args.components < 1:
        raise UsageError(f"--components must be >= 1, got {args.components}")
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.build_model()
    stats = ckpt.stats()
    observations = load_jsonl(args.data)
    traj = latent_trajectory(model, observations, stats)
    pca = pca_latents(traj, args.components)
    with open(args.out, "w", encoding="utf-8") as fh:
        header = "t," + ",".join(f"c{i + 1}" for i in range(args.components))
        fh.write(header + "\n")
        for i, obs in enumerate(observations):
            row = ",".join(repr(float(v)) for v in pca.projections[i])
            fh.write(f"{obs.t},{row}\n")
    print(f"explained\t" + "\t".join(repr(float(v)) for v in pca.explained))
    return 0


def _cmd_oracle(args) -> int:
    params = LGSSMParams.from_json(args.params)
    observations = load_jsonl(args.data)
    ys = np.asarray([o.value for o in observations]).reshape(-1, params.m)
    result = kalman_filter_oracle(params, ys)
    with open(args.out, "w", encoding="utf-8") as fh:
        mean_cols = ",".join(f"mean_{i}" for i in range(params.n))
        var_cols = ",".join(f"var_{i}" for i in range(params.n))
        fh.write(f"t,{mean_cols},{var_cols}\n")
        for i, obs in enumerate(observations):
            means = ",".join(repr(float(v)) for v in result.means[i])
            variances = ",".join(repr(float(v)) for v in np.diag(result.covs[i]))
            fh.write(f"{obs.t},{means},{variances}\n")
    print(f"log_likelihood\t{result.loglik!r}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "eval": _cmd_eval,
    "export-latents": _cmd_export_latents,
    "oracle": _cmd_oracle,
}

_ERROR_EXITS = [
    ((UsageError, ConfigError), "cli", 1),
    ((DataError,), "data", 2),
    ((CheckpointFormatError,), "training", 2),
    ((ContractError, GraphError), "core", 2),
    ((FileNotFoundError, IsADirectoryError, PermissionError), "io", 2),
    ((json.JSONDecodeError, KeyError), "data", 2),
    ((NumericError, OracleError), "numeric", 3),
]


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # mapped to the documented exit codes
        for types, module, code in _ERROR_EXITS:
            if isinstance(exc, types):
                print(f"error: {module}: {exc}", file=sys.stderr)
                return code
        print(f"error: internal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
