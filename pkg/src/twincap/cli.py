"""Command-line entry point: ``twincap <subcommand> ...``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from twincap.captioner import Vocab
from twincap.config import ABLATION_MODES, ConfigError, load_config
from twincap.synthdata import DatasetFormatError, LatentSpec, generate_dataset, load_dataset
from twincap.twin import NonFiniteLoss

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("twincap")


def cmd_gen_data(args) -> int:
    spec = LatentSpec(
        latent_dim=args.latent, T=args.t, D=args.d, num_symbols=args.num_symbols,
        seed=args.seed, sigma=args.sigma, vocab_size=args.vocab,
    )
    path = generate_dataset(spec, args.count, args.out)
    print(f"wrote {args.count} samples to {path}")
    return EXIT_OK


def _load_cfg(args):
    cfg = load_config(args.config)
    if getattr(args, "ablation", None):
        cfg = cfg.replace(ablation_mode=args.ablation)
    if getattr(args, "data", None):
        cfg = cfg.replace(data=args.data)
    if not cfg.data:
        raise ConfigError("no dataset: set `data` in the config or pass --data")
    return cfg


def cmd_train(args) -> int:
    from twincap.trainer import Trainer

    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.ablation_mode}_seed{cfg.seed}"
    tr = Trainer(cfg, run_dir=out)
    summary = tr.fit(max_steps=args.max_steps)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"run directory: {out}")
    return EXIT_OK


def _split(tr, name):
    if name == "val":
        return tr.val_ds
    if name == "train":
        return tr.train_ds
    return tr.dataset


def cmd_eval(args) -> int:
    from twincap.trainer import Trainer

    ds = load_dataset(args.data)
    tr = Trainer.load(args.ckpt, dataset=ds)
    scores = tr.evaluate(_split(tr, args.split))
    width = max(len(k) for k in scores)
    for k, v in scores.items():
        print(f"{k:<{width}}  {v:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from twincap.trainer import Trainer

    ds = load_dataset(args.data) if args.data else None
    tr = Trainer.load(args.ckpt, dataset=ds)
    if not 0 <= args.sample < len(tr.dataset):
        print(f"sample {args.sample} out of range [0, {len(tr.dataset)})", file=sys.stderr)
        return EXIT_FAIL
    one = tr.dataset.subset(np.array([args.sample]))
    pred = tr.captions(one, num_beams=args.beams)[0]
    vocab = Vocab.synthetic(tr.cfg.vocab_size)
    print("predicted:", " ".join(vocab.decode(pred)))
    print("reference:", " ".join(vocab.decode(one.captions[0][1:])))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from twincap.gradchecks import run_gradchecks

    reports = run_gradchecks(args.module, seed=args.seed)
    for r in reports:
        print(r.summary())
    failed = [r.op_name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from twincap.trainer import ablate, format_ablation

    cfg = _load_cfg(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = ablate(cfg, load_dataset(cfg.data), seeds, args.out, args.max_steps)
    print(format_ablation(result), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twincap", description="Twin-translator audio captioning at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=320)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--latent", type=int, default=16)
    p.add_argument("--num-symbols", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--vocab", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=ABLATION_MODES)
    p.add_argument("--data", help="override the config's dataset path")
    p.add_argument("--out", help="run directory (default runs/<mode>_seed<seed>)")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="caption one sample with beam search")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--beams", type=int, default=4)
    p.add_argument("--data", help="dataset (default: the one recorded in the checkpoint)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=("blocks", "networks", "losses"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train all four ablation modes and compare")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
