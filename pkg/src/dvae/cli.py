"""Command-line entry point: ``dvae {synth,train,sweep,eval,rank}``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .data import DataFormatError, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .lda import evaluate_accuracy, fit_lda, load_functional_table, rank_features, standardize
from .pipeline import (EVAL_KEYS, TRAIN_KEYS, envelope, evaluate_and_save, run_sweep,
                       train_and_save, write_json)
from .vae import OBJECTIVES, TrainingError, VaeModel

log = logging.getLogger("dvae")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=out_help)
    p.add_argument("--config", help="JSON config (or a report embedding one); its values "
                                    "override flags")


def _add_train_flags(p: argparse.ArgumentParser, grid: bool):
    num = _floats if grid else float
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--objective", choices=OBJECTIVES, default="beta_vae")
    p.add_argument("--alpha", type=num, default=[0.0] if grid else 0.0)
    p.add_argument("--beta", type=num, default=[0.0] if grid else 0.0)
    p.add_argument("--gamma", type=num, default=[0.0] if grid else 0.0)
    p.add_argument("--beta-s", dest="beta_s", type=num, default=[1.0] if grid else 1.0)
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--hidden", type=_ints, default=[256, 256, 256, 256],
                   help="comma-separated hidden widths")
    p.add_argument("--activation", choices=("tanh", "relu", "identity"), default="tanh")
    p.add_argument("--eval-every", type=int, default=100)


def _add_eval_flags(p: argparse.ArgumentParser):
    p.add_argument("--trials-per-class", type=int, default=20)
    p.add_argument("--mi-points", type=int, default=2048)
    p.add_argument("--mc-samples", type=int, default=8)
    p.add_argument("--regressor", choices=("forest", "lasso"), default="forest")
    p.add_argument("--n-estimators", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dvae {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    _add_common(p, "output CSV path")
    p.add_argument("--n-speakers", type=int, default=50)
    p.add_argument("--utterances", type=int, default=20)
    p.add_argument("--factors", type=int, default=8)
    p.add_argument("--x-dim", type=int, default=64)
    p.add_argument("--correlation", help="JSON file holding a KxK correlation matrix")
    p.add_argument("--mixing", choices=("linear", "tanh"), default="linear")
    p.add_argument("--noise", type=float, default=0.05, help="session noise std")

    p = sub.add_parser("train", help="train one VAE")
    _add_common(p, "output directory")
    _add_train_flags(p, grid=False)

    p = sub.add_parser("sweep", help="train and evaluate a grid of loss weights")
    _add_common(p, "output directory")
    _add_train_flags(p, grid=True)
    _add_eval_flags(p)
    p.add_argument("--tied", action="store_true",
                   help="tcvae with alpha = gamma = beta (the beta-VAE special case)")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells (outputs unchanged)")

    p = sub.add_parser("eval", help="compute EER, WSEPIN, KLD and DCI for a checkpoint")
    _add_common(p, "output directory")
    p.add_argument("--data", help="dataset CSV")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="model checkpoint (.dvae)")
    g.add_argument("--raw", action="store_true", help="score the observations themselves")
    _add_eval_flags(p)

    p = sub.add_parser("rank", help="rank functionals by LDA discriminative weight")
    _add_common(p, "output directory")
    p.add_argument("--data", help="functional table CSV (id,label,...)")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--train-fraction", type=float, default=0.8)
    return parser


# parameters echoed into reports; output location and scheduling are excluded
ECHO_KEYS = {
    "synth": ("seed", "n_speakers", "utterances", "factors", "x_dim", "correlation",
              "mixing", "noise"),
    "train": TRAIN_KEYS + ("data",),
    "sweep": tuple(dict.fromkeys(TRAIN_KEYS + EVAL_KEYS + ("data", "tied"))),
    "eval": EVAL_KEYS + ("data", "checkpoint", "raw"),
    "rank": ("seed", "data", "top_k", "ridge", "train_fraction"),
}


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    if not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    with open(args.config, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
    if isinstance(cfg, dict) and isinstance(cfg.get("config"), dict):
        if cfg.get("command") not in (None, args.command):
            raise UsageError(f"config was written by '{cfg['command']}', not '{args.command}'")
        cfg = cfg["config"]
    allowed = set(ECHO_KEYS[args.command])
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    for key, value in cfg.items():
        setattr(args, key, value)


def _echo(args: argparse.Namespace) -> dict:
    cfg = {k: getattr(args, k) for k in ECHO_KEYS[args.command]}
    for k in ("alpha", "beta", "gamma", "beta_s", "lr", "ridge", "noise", "train_fraction"):
        if k in cfg:
            v = cfg[k]
            cfg[k] = [float(x) for x in v] if isinstance(v, list) else float(v)
    if "hidden" in cfg:
        cfg["hidden"] = [int(h) for h in cfg["hidden"]]
    return cfg


def _check_required(args) -> None:
    """Required flags are checked after the config file had its say."""
    missing = [f"--{k}" for k in ("out", "data") if k in vars(args) and not getattr(args, k)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    if args.command == "eval" and bool(args.checkpoint) == bool(args.raw):
        raise UsageError("exactly one of --checkpoint or --raw is required")


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _prepare_out(path, is_dir=True):
    target = path if is_dir else (os.path.dirname(os.path.abspath(path)) or ".")
    try:
        os.makedirs(target, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output location {target}: {exc}") from None


def cmd_synth(args) -> int:
    corr = None
    if args.correlation:
        _require_file(args.correlation, "correlation file")
        with open(args.correlation, encoding="utf-8") as fh:
            try:
                corr = np.array(json.load(fh), dtype=np.float64)
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                raise UsageError(f"correlation file is not a JSON matrix: {exc}") from None
    _prepare_out(args.out, is_dir=False)
    cfg = SyntheticConfig(n_speakers=args.n_speakers, utterances_per_speaker=args.utterances,
                          n_factors=args.factors, x_dim=args.x_dim, factor_correlation=corr,
                          mixing=args.mixing, session_noise_std=args.noise, seed=args.seed)
    save_dataset(args.out, generate_synthetic(cfg))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require_file(args.data, "dataset")
    _prepare_out(args.out)
    cfg = _echo(args)
    ds = load_dataset(args.data)
    _, summary = train_and_save(ds, cfg, args.out)
    final = summary["final"]
    print(f"iteration {final['iteration']}: total {final['total']:.6g} "
          f"rec {final['rec']:.6g} kl {final['kl_analytic']:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(args.data, "dataset")
    if not args.raw:
        _require_file(args.checkpoint, "checkpoint")
    _prepare_out(args.out)
    cfg = _echo(args)
    ds = load_dataset(args.data)
    model = None if args.raw else VaeModel.load(args.checkpoint)
    report = evaluate_and_save(model, ds, cfg, args.out)
    for note in report["notices"]:
        print(note)
    print(f"wrote {os.path.join(args.out, 'report.json')}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    _require_file(args.data, "dataset")
    _prepare_out(args.out)
    cfg = _echo(args)
    for key in ("alpha", "beta", "gamma", "beta_s"):
        if not cfg[key]:
            raise UsageError(f"weight grid --{key.replace('_', '-')} is empty")

    def progress(res):
        log.info("cell %d: %s", res["index"], res["status"])

    summary = run_sweep(cfg, args.out, jobs=args.jobs, progress=progress)
    failed = [c for c in summary["cells"] if c["status"] != "ok"]
    print(f"{len(summary['cells']) - len(failed)}/{len(summary['cells'])} cells ok; "
          f"wrote {os.path.join(args.out, 'sweep.csv')}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_rank(args) -> int:
    _require_file(args.data, "functional table")
    _prepare_out(args.out)
    cfg = _echo(args)
    table = load_functional_table(args.data)
    train_t, test_t = table.split(args.train_fraction, args.seed)
    train_s, stats = standardize(train_t)
    result = fit_lda(train_s, ridge=args.ridge)
    ranking = rank_features(result, args.top_k)
    accuracy = evaluate_accuracy(result, stats.apply(test_t))
    with open(os.path.join(args.out, "ranking.csv"), "w", encoding="utf-8") as fh:
        fh.write("rank,name,score\n")
        for r, (name, score) in enumerate(ranking, start=1):
            fh.write(f"{r},{name},{score!r}\n")
    write_json(os.path.join(args.out, "rank_report.json"),
               envelope("rank", cfg, accuracy=accuracy,
                        ranking=[{"rank": r, "name": n, "score": s}
                                 for r, (n, s) in enumerate(ranking, start=1)],
                        n_classes=int(len(result.classes))))
    for r, (name, score) in enumerate(ranking, start=1):
        print(f"{r:3d}  {name:<30s} {score:.4f}")
    print(f"accuracy: {accuracy:.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sweep": cmd_sweep,
            "eval": cmd_eval, "rank": cmd_rank}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _apply_config(args)
        _check_required(args)
        return COMMANDS[args.command](args)
    except (UsageError, DataFormatError) as exc:
        print(f"dvae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"dvae {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"dvae {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"dvae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
