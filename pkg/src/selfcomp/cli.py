"""Command-line entry point.

Subcommands: train, sweep, evaluate, size-report, prune, report. Exit
codes: 0 success, 1 configuration error, 2 data/checkpoint error,
3 divergence or a failed output-preservation check.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import network as ng
from . import pruner, sizemodel, trainer
from .errors import (CheckpointError, ConfigError, DataFormatError,
                     DivergenceError, NonFiniteError)

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


def _load_config(path, seed=None):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    config = trainer.TrainConfig.from_dict(raw)
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _config_hash(config):
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _utcnow():
    return datetime.now(timezone.utc).isoformat()


def _write_run_manifest(out_dir, config, started, finished):
    manifest = {
        "config": config.to_dict(),
        "config_hash": _config_hash(config),
        "seed": config.seed,
        "started_at": started,
        "finished_at": finished,
        "outputs": {
            "metrics_csv": "metrics.csv",
            "metrics_jsonl": "metrics.jsonl",
            "size_report": "size_report.json",
            "checkpoint_dir": "checkpoint",
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _run_training(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    started = _utcnow()
    net = trainer.build_net(config)
    datasets = trainer.make_datasets(config)
    result = trainer.train(net, datasets, config)
    trainer.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.rows)
    trainer.write_metrics_jsonl(os.path.join(out_dir, "metrics.jsonl"), result.rows)
    with open(os.path.join(out_dir, "size_report.json"), "w") as fh:
        fh.write(result.final_size.to_json())
    ckpt.save_checkpoint(os.path.join(out_dir, "checkpoint"), result.net,
                         result.opt.state)
    _write_run_manifest(out_dir, config, started, _utcnow())
    return result


def cmd_train(args):
    config = _load_config(args.config, args.seed)
    result = _run_training(config, args.out)
    print(f"trained {result.steps_run} steps; "
          f"eval accuracy {result.final_eval_acc:.4f}; "
          f"Q {result.final_size.Q:.4f}; outputs in {args.out}")
    return 0


def _parse_gammas(spec):
    if spec.startswith("log:"):
        parts = spec.split(":")
        if len(parts) != 4:
            raise ConfigError(f"bad gamma spec {spec!r}; want log:lo:hi:n")
        lo, hi, n = float(parts[1]), float(parts[2]), int(parts[3])
        if lo <= 0 or hi <= 0 or n < 1:
            raise ConfigError("log gamma spec needs positive bounds and n >= 1")
        if n == 1:
            return [lo]
        return list(np.power(10.0, np.linspace(np.log10(lo), np.log10(hi), n)))
    try:
        return [float(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad gamma list {spec!r}")


def cmd_sweep(args):
    config = _load_config(args.config, args.seed)
    gammas = _parse_gammas(args.gammas)
    if not gammas:
        raise ConfigError("gamma spec produced no values")
    os.makedirs(args.out, exist_ok=True)

    locus_rows = []
    any_ok = False
    for index, gamma in enumerate(gammas):
        run_cfg = trainer.sweep_run_config(config, gamma, index)
        run_dir = os.path.join(args.out, f"gamma_{gamma:.6g}")
        try:
            result = _run_training(run_cfg, run_dir)
        except (DivergenceError, NonFiniteError, ConfigError, DataFormatError) as exc:
            print(f"gamma={gamma:g} failed: {exc}", file=sys.stderr)
            locus_rows.append((gamma, None, None, None))
            continue
        any_ok = True
        bits_initial = sizemodel.size_report(
            trainer.build_net(run_cfg), "simple").total_bits
        bits_final = sizemodel.size_report(result.net, "simple").total_bits
        locus_rows.append((
            gamma,
            bits_final / bits_initial,
            ng.count_weight_elements(result.net) / result.net.starting_weight_count,
            result.final_eval_acc,
        ))

    def fmt(x):
        return "" if x is None else repr(float(x))

    with open(os.path.join(args.out, "locus.csv"), "w") as fh:
        fh.write("gamma,bits_fraction,weights_fraction,accuracy\n")
        for row in locus_rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    print(f"sweep wrote {len(locus_rows)} locus rows to {args.out}/locus.csv")
    return 0 if any_ok else EXIT_DIVERGED


def _load_eval_data(spec, seed):
    if spec and spec.startswith("synthetic:"):
        parts = spec.split(":")
        kind = parts[1]
        opts = dict(p.split("=", 1) for p in parts[2:])
        return datamod.synthetic_dataset(
            kind, int(opts.get("n", 2000)), seed=int(opts.get("seed", seed or 0)),
            separation=float(opts.get("separation", 6.0)))
    path = spec or os.environ.get("SELFCOMP_DATA")
    if not path:
        raise DataFormatError("no dataset path: pass --data or set SELFCOMP_DATA")
    _, test = datamod.load_cifar10(path)
    return test


def cmd_evaluate(args):
    net, _ = ckpt.load_checkpoint(args.checkpoint)
    dataset = _load_eval_data(args.data, args.seed)
    accuracy = trainer.evaluate(net, dataset)
    print(f"top-1 accuracy: {accuracy:.4f} ({len(dataset)} examples)")
    return 0


def cmd_size_report(args):
    net, _ = ckpt.load_checkpoint(args.checkpoint)
    report = sizemodel.size_report(net, args.mode)
    print(f"{'layer':<10} {'z_bits':>16} {'live_channels':>14}")
    for row in report.layers:
        print(f"{row.name:<10} {row.z_bits:>16.1f} {row.live_channels:>14}")
    print(f"total_bits {report.total_bits:.1f}  Q {report.Q:.6f}  "
          f"flops {report.flops}  starting_weights {report.starting_weights}")
    out_path = os.path.join(args.checkpoint, "size_report.json")
    with open(out_path, "w") as fh:
        fh.write(report.to_json())
    print(f"wrote {out_path}")
    return 0


def cmd_prune(args):
    net, opt_state = ckpt.load_checkpoint(args.input)
    rng = np.random.default_rng(args.seed or 0)
    probes = rng.normal(0.0, 1.0, size=(32,) + net.input_shape).astype(np.float32)
    before = ng.forward_network(net, probes)

    candidates = pruner.find_removable(net, args.bias_tol)
    net, opt_state, report = pruner.prune(net, opt_state, candidates)

    after = ng.forward_network(net, probes)
    deviation = float(np.abs(before - after).max())
    if deviation >= 1e-5:
        print(f"output preservation failed: max deviation {deviation:g}",
              file=sys.stderr)
        return EXIT_DIVERGED

    ckpt.save_checkpoint(args.out, net, opt_state)
    with open(os.path.join(args.out, "prune_report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print(f"removed {report.channels_removed} channels "
          f"({report.weights_removed} weights); max logit deviation {deviation:g}; "
          f"wrote {args.out}")
    return 0


def cmd_report(args):
    from . import plots

    written = []
    if os.path.exists(os.path.join(args.run, "metrics.csv")):
        written += plots.render_training_figures(args.run, args.out)
    if os.path.exists(os.path.join(args.run, "locus.csv")):
        written += plots.render_locus_figure(args.run, args.out)
    if not written:
        raise DataFormatError(f"{args.run} has neither metrics.csv nor locus.csv")
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="selfcomp",
        description="Train networks that learn their own per-channel bit "
                    "depths and shed zero-bit channels while training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per compression factor")
    p.add_argument("--config", required=True)
    p.add_argument("--gammas", required=True,
                   help="log:lo:hi:n or a comma-separated list")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="CIFAR-10 dir or synthetic:<kind>[:n=..][:seed=..]")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("size-report", help="per-layer size accounting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("simple", "coupled"), default="coupled")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_size_report)

    p = sub.add_parser("prune", help="offline removal of drained channels")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bias-tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="render figures from run artifacts")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
