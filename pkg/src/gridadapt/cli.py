"""Command-line surface: synth, pretrain, adapt, extract-prior, eval, export-embeddings.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evalcli, trainer
from .cityforge import SceneDataset, UnlabeledView, emit_dataset, write_pgm
from .prior import MatchConfig, dense_match, extract_static_prior, superpixels, write_matches

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _global_flags():
    # SUPPRESS defaults: the flag may sit before or after the subcommand and
    # whichever occurrence is given wins without clobbering the other.
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="override the config seed")
    g.add_argument("--config", default=argparse.SUPPRESS, help="training config file")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker processes for prior extraction")
    g.add_argument("--test-mode", action="store_true", default=argparse.SUPPRESS,
                   help="force single-threaded deterministic execution")
    return g


def _build_parser():
    gflags = _global_flags()
    parser = _Parser(prog="gridadapt", parents=[gflags],
                     description="Cross-city segmenter adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic city dataset",
                       parents=[gflags])
    p.add_argument("--style", choices=("source", "target"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", action="store_true", help="emit time-shifted partners")
    p.add_argument("--eval-count", type=int, default=0)
    p.add_argument("--size", type=int, default=128, help="square image side")
    p.add_argument("--jitter", type=int, default=10)

    p = sub.add_parser("pretrain", parents=[gflags], help="train a segmenter on labeled source data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("adapt", parents=[gflags], help="adapt a pre-trained segmenter to a target city")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--init", required=True, help="pre-trained segmenter checkpoint")
    p.add_argument("--priors", default=None, help="directory of static-prior masks")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("extract-prior", parents=[gflags], help="mine static-object priors from pairs")
    p.add_argument("--pairs", required=True, help="dataset root with partnered train split")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--superpixels", type=int, default=256)
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--dump-matches", action="store_true")

    p = sub.add_parser("eval", parents=[gflags], help="evaluate a checkpoint on a labeled split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", default=None, help="write report.txt here")

    p = sub.add_parser("export-embeddings", parents=[gflags], help="dump per-class mean features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pseudo", action="store_true",
                   help="pool by predicted classes instead of labels")
    return parser


def _load_config(args):
    cfg_path = getattr(args, "config", None)
    config = trainer.parse_config(cfg_path) if cfg_path else trainer.TrainConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        from dataclasses import replace
        config = replace(config, seed=seed)
    return config


def _cmd_synth(args):
    emit_dataset(args.count, args.style, args.out, with_pairs=args.pairs,
                 eval_count=args.eval_count, seed=getattr(args, "seed", 0) or 0,
                 height=args.size, width=args.size, jitter=args.jitter)
    print(f"wrote {args.count} train + {args.eval_count} eval samples to {args.out}")
    return 0


def _cmd_pretrain(args):
    config = _load_config(args)
    dataset = SceneDataset(args.data, "train")
    log = []
    trainer.pretrain_source(dataset, config, steps=args.steps, out_dir=args.out, log=log)
    _write_log(args.out, log)
    print(f"checkpoint written to {args.out}")
    return 0


def _load_priors(priors_dir, target):
    from .cityforge import read_pgm
    masks = []
    for sid in target.ids:
        path = os.path.join(priors_dir, f"{sid}.pgm")
        masks.append(read_pgm(path) > 127 if os.path.isfile(path) else None)
    return masks


def _cmd_adapt(args):
    config = _load_config(args)
    source = SceneDataset(args.source, "train")
    target = UnlabeledView(SceneDataset(args.target, "train"))
    seg = trainer.build_segmenter(source.classes, config)
    seg.load_state(args.init)
    priors = _load_priors(args.priors, target) if args.priors else None
    log = []
    trainer.adapt(source, target, seg, config, priors=priors, steps=args.steps,
                  out_dir=args.out, log=log)
    _write_log(args.out, log)
    print(f"adapted checkpoint written to {args.out}")
    return 0


def _prior_worker(task):
    root, sid, k, n_superpixels, tau, stride, out_dir, dump = task
    ds = SceneDataset(root, "train", cache=False)
    index = ds.ids.index(sid)
    image = ds.image(index)
    partner = ds.partner(index)
    if partner is None:
        raise ValueError(f"sample {sid} has no partner image")
    cfg = MatchConfig(tau=tau, stride=stride)
    matches = dense_match(image, partner, cfg)
    spx = superpixels(image, n_superpixels)
    pm = extract_static_prior(matches, spx, k=k)
    write_pgm(os.path.join(out_dir, f"{sid}.pgm"), pm.mask.astype(np.uint8) * 255)
    if dump:
        write_matches(os.path.join(out_dir, f"{sid}.matches.txt"), matches)
    return sid, len(matches), float(pm.mask.mean())


def _cmd_extract_prior(args):
    ds = SceneDataset(args.pairs, "train")
    if not ds.has_partners():
        raise ValueError(f"{args.pairs}: train split has no partner images")
    os.makedirs(args.out, exist_ok=True)
    tasks = [(args.pairs, sid, args.k, args.superpixels, args.tau, args.stride,
              args.out, args.dump_matches) for sid in ds.ids]
    test_mode = getattr(args, "test_mode", False)
    threads = 1 if test_mode else max(getattr(args, "threads", 1), 1)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_prior_worker, tasks))
    else:
        results = [_prior_worker(t) for t in tasks]
    covered = float(np.mean([r[2] for r in results])) if results else 0.0
    print(f"wrote {len(results)} masks to {args.out} (mean coverage {covered:.3f})")
    return 0


def _cmd_eval(args):
    config = _load_config(args)
    dataset = SceneDataset(args.data, args.split)
    seg = trainer.build_segmenter(dataset.classes, config)
    seg.load_state(args.ckpt)
    report = evalcli.evaluate_segmenter(seg, dataset)
    print(evalcli.format_report(report, dataset.classes))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        evalcli.write_report(report, dataset.classes, os.path.join(args.out, "report.txt"))
    return 0


def _cmd_export(args):
    config = _load_config(args)
    dataset = SceneDataset(args.data, args.split)
    seg = trainer.build_segmenter(dataset.classes, config)
    seg.load_state(args.ckpt)
    n = evalcli.export_embeddings(seg, dataset, args.out, args.domain,
                                  use_labels=not args.pseudo)
    print(f"wrote {n} records to {args.out}")
    return 0


def _write_log(out_dir, lines):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "training.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "adapt": _cmd_adapt,
    "extract-prior": _cmd_extract_prior,
    "eval": _cmd_eval,
    "export-embeddings": _cmd_export,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
