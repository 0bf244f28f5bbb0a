"""Command-line entry point: ``byolsl <command> [flags]``.

Exit codes:
    0  success
    1  gradient check failed
    2  configuration error (bad flags, unknown config keys, bad values)
    3  data error (missing or malformed dataset, image, or checkpoint file)
    4  training aborted on representation collapse (strict mode)
    5  numeric error (non-finite values)

Relative output directories are resolved under ``$BYOLSL_OUTPUT_ROOT``
when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from .data import DataError, SyntheticSpec, make_synthetic, write_stl10
from .model import CheckpointError, config_digest, load_checkpoint, parameter_table
from .tensor import ContractError, DimensionError, NumericError

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COLLAPSE = 4
EXIT_NUMERIC = 5

logger = logging.getLogger("byolsl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_path(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(C.ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    from .train import train_run

    cfg = C.load_run_config(args.config, args.profile)
    if args.deterministic:
        cfg = cfg.replace(train=replace(cfg.train, deterministic=True))
    if args.output:
        cfg = cfg.replace(train=replace(cfg.train, output_dir=args.output))
    out = output_path(cfg.train.output_dir or "runs/latest")
    result = train_run(cfg, out, resume=args.resume)
    last = result.metrics[-1] if result.metrics else None
    summary = {"output": str(out), "steps": result.steps, "collapsed": result.collapsed}
    if last is not None:
        summary.update(loss=last.loss, collapse=last.collapse)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import eval_datasets, linear_eval
    from .config import RunConfig

    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_text(ckpt.config_text)
    probe = cfg.probe
    if args.probe_config:
        probe = C.load_sections({"probe": probe}, C.read_file(args.probe_config), args.probe_config)["probe"]
    if args.data is not None and not Path(args.data).is_dir():
        raise DataError(f"dataset directory not found: {args.data}")
    train_set, test_set = eval_datasets(cfg, args.data)
    report = linear_eval(ckpt, train_set, test_set, probe)
    text = report.to_json()
    if args.output:
        out = output_path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_similarity(args) -> int:
    from .evaluate import read_image_list, similarity_report

    ckpt = load_checkpoint(args.checkpoint)
    cfg = C.RunConfig.from_text(ckpt.config_text)
    images, names = read_image_list(args.images, cfg.augment.size)
    if len(images) < 2:
        raise C.ConfigError(f"similarity needs at least 2 images, {args.images} lists {len(images)}")
    out = output_path(args.output)
    sim = similarity_report(ckpt, images, args.theta_p, args.theta_n, out, names)
    print(json.dumps({"output": str(out), "images": sim.n,
                      "positives": int(sim.positive.sum()), "negatives": int(sim.negative.sum())}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, run_suite

    names = args.ops.split(",") if args.ops else None
    if names:
        unknown = sorted(set(names) - set(CASES))
        if unknown:
            raise C.ConfigError(f"unknown ops: {', '.join(unknown)}; known: {', '.join(CASES)}")
    results = run_suite(names, trials=args.trials, seed=args.seed, step=args.step, tolerance=args.tol)
    ok = True
    for r in results:
        ok &= r.passed
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<22} trials={r.trials} max_rel_err={r.max_error:.2e} excluded={r.excluded}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_synth_data(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        spec = C.load_sections({"synthetic": spec}, C.read_file(args.spec), args.spec)["synthetic"]
    out = output_path(args.out)
    for split, offset in (("train", 0), ("test", 1), ("unlabeled", 0)):
        ds = make_synthetic(replace(spec, seed=spec.seed + offset), split=split)
        if split == "unlabeled":
            ds = replace(ds, labels=None)
        write_stl10(ds, out, split)
    print(json.dumps({"output": str(out), "classes": spec.classes, "per_class": spec.per_class,
                      "image_size": spec.image_size}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .config import RunConfig
    from .model import ModelPair, restore_pair

    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_text(ckpt.config_text)
    pair = ModelPair(cfg.model)
    restore_pair(pair, ckpt.sections)
    print(f"version: {ckpt.version}")
    print(f"config digest: {config_digest(ckpt.config_text)}")
    print(f"step: {ckpt.step}")
    total = 0
    print("parameters (online):")
    for name, shape, count in parameter_table(pair.online):
        total += count
        print(f"  {name:<40} {'x'.join(map(str, shape)):<16} {count}")
    print(f"total parameters: {total}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="byolsl", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train an online/target pair")
    t.add_argument("--config", help="key-value run config layered over the profile")
    t.add_argument("--profile", choices=C.PROFILES, default="desk", help="base settings (default: desk)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible")
    t.add_argument("--output", help="output directory (overrides train.output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear evaluation of a checkpoint's frozen encoder")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", help="directory with train_X/train_y/test_X/test_y binaries "
                                  "(default: the run's synthetic data)")
    e.add_argument("--probe-config", help="key-value file with probe.* overrides")
    e.add_argument("--output", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("similarity", help="similarity matrix heatmap for a list of images")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--images", required=True, help="text file with one image path per line")
    s.add_argument("--theta-p", type=float, default=None, help="positive threshold (default: run config)")
    s.add_argument("--theta-n", type=float, default=None, help="negative threshold (default: run config)")
    s.add_argument("--output", default="similarity", help="output directory (default: similarity)")
    s.set_defaults(func=cmd_similarity)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    g.add_argument("--tol", type=float, default=1e-3, help="relative error tolerance (default: 1e-3)")
    g.add_argument("--step", type=float, default=1e-5, help="central-difference step (default: 1e-5)")
    g.add_argument("--trials", type=int, default=20, help="random shapes per op (default: 20)")
    g.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")
    g.add_argument("--ops", help="comma-separated subset of ops")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("synth-data", help="write the synthetic shapes dataset as binaries")
    d.add_argument("--spec", help="key-value file with synthetic.* settings")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_synth_data)

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint header and parameter table")
    i.add_argument("checkpoint", help="checkpoint file")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .train import CollapseError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"byolsl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, ContractError, UsageError) as exc:
        print(f"byolsl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"byolsl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CollapseError as exc:
        print(f"byolsl: collapse: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except (NumericError, DimensionError) as exc:
        print(f"byolsl: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
