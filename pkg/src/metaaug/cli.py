"""``metaaug`` command line: train, transfer, gradcheck, export-dist, convert, synth."""
from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from metaaug import checkpoint, trainer, verify
from metaaug.config import ConfigError, load_config, parse_config
from metaaug.data import DatasetError, atomic_write, convert_pnm_tree, make_rng, save_dataset, synth_digits
from metaaug.sampler import distribution_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    for name in ("log", "checkpoint", "dist"):
        val = getattr(args, name, None)
        if val:
            out[f"{name}_path"] = val
    return out


def _load(args):
    """Config file, then ``--set`` lines (later keys win), then the dedicated flags."""
    cfg = load_config(args.config)
    extra = getattr(args, "set", None) or []
    if extra:
        cfg = parse_config(cfg.to_text() + "\n".join(extra) + "\n")
    over = _overrides(args)
    return cfg.replace(**over) if over else cfg


def cmd_train(args):
    cfg = _load(args)
    result = trainer.run(cfg)
    if cfg.log_path:
        atomic_write(cfg.log_path, result.log_csv())
    if cfg.checkpoint_path:
        checkpoint.save_checkpoint(result.checkpoint(), cfg.checkpoint_path)
    if cfg.dist_path:
        atomic_write(cfg.dist_path, distribution_csv(result.sampler.p))
    print(f"iterations={len(result.rows)} val_loss {result.val_loss_initial:.4f} -> "
          f"{result.val_loss_final:.4f} test_accuracy={result.test_accuracy:.4f} "
          f"alpha={np.exp(result.log_alpha):.4g}")
    return EXIT_OK


def cmd_transfer(args):
    cfg = _load(args)
    ckpt = checkpoint.load_checkpoint(args.policy, trainer.catalog_for(cfg).hash())
    ds = trainer.prepare_dataset(cfg)
    net, _ = trainer.init_models(cfg, ds)
    result = trainer.transfer_train(net, ckpt, ds, cfg)
    if cfg.log_path:
        atomic_write(cfg.log_path, trainer.rows_to_csv(result.rows))
    print(f"iterations={len(result.rows)} test_accuracy={result.test_accuracy:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    rng = make_rng(args.seed, "gradcheck")
    start = time.perf_counter()
    worst = 0.0
    print(f"{'trial':>5}  {'max rel err':>12}  verdict")
    for trial in range(args.trials):
        err = verify.hypergrad_error(verify.random_instance(rng), args.eps)
        worst = max(worst, err)
        print(f"{trial:>5}  {err:12.3e}  {'pass' if err <= args.tol else 'FAIL'}")
    ok = worst <= args.tol
    print(f"worst {worst:.3e} (tolerance {args.tol:g}) in {time.perf_counter() - start:.1f}s: "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_export_dist(args):
    ckpt = checkpoint.load_checkpoint(args.checkpoint)
    text = distribution_csv(ckpt.p)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_convert(args):
    ds = convert_pnm_tree(args.source)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} samples, {ds.num_classes} classes ({', '.join(ds.class_names)}) to {args.output}")
    return EXIT_OK


def cmd_synth(args):
    ds = synth_digits(args.n, args.seed, args.noise, args.shift)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} synthetic glyphs to {args.output}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="metaaug", description="Sample-aware augmentation policy learning.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_args(p):
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--log", help="per-iteration CSV log path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="joint task/policy training")
    run_args(p)
    p.add_argument("--checkpoint", help="policy checkpoint path")
    p.add_argument("--dist", help="transformation distribution CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="train a fresh network with a frozen policy")
    p.add_argument("--policy", required=True, help="checkpoint written by train")
    run_args(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference hypergradients")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-dist", help="write a checkpoint's 14x14 distribution as CSV")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--out", help="output path (default stdout)")
    p.set_defaults(func=cmd_export_dist)

    p = sub.add_parser("convert", help="directory of class folders with PGM/PPM files -> MAUG container")
    p.add_argument("source")
    p.add_argument("output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="write the synthetic glyph dataset as a MAUG container")
    p.add_argument("output")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--shift", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"metaaug: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, checkpoint.CheckpointError, ValueError, OSError) as e:
        print(f"metaaug: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
