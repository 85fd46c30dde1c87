"""Command line entry point: ``donet <command> ...``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or a failed gradient check).
"""

import argparse
import logging
import os
import sys

from . import checks, plotting
from .config import format_config, load_config
from .data import SyntheticSpec, load_image, load_split, save_split, synthetic_sample
from .errors import ConfigError, DataError, DonetError, NumericError, ShapeError
from .train import (Trainer, ablate, ablation_tsv, best_model, load_model, predict,
                    prepare_data, write_metrics)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")


def _positive(text):
    try:
        value = int(text)
    except ValueError:
        value = 0
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _count(text):
    return 0 if text.strip() == "0" else _positive(text)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.out_dir
    data = prepare_data(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fp:
        fp.write(format_config(cfg))
    if args.resume:
        trainer = Trainer.resume(args.resume, data, out_dir)
    else:
        trainer = Trainer(cfg, data, out_dir)
    history = trainer.fit()
    last = history[-1] if history else {}
    print(f"trained {trainer.state.step} steps; best val dsc {trainer.state.best_dsc:.4f} "
          f"at epoch {trainer.state.best_epoch}; last total {last.get('total', float('nan')):.4f}")
    if data.test:
        _, written = write_metrics(best_model(trainer), data.test,
                                   os.path.join(out_dir, "test_metrics.csv"),
                                   heads=("joint", "y1", "y2"))
        print(f"test metrics: {written['joint']}")
    return EXIT_OK


def cmd_eval(args):
    model, _ = load_model(args.ckpt)
    samples = load_split(args.data, args.split)
    heads = tuple(h for h in args.heads.split(",") if h)
    for h in heads:
        if h not in ("joint", "y1", "y2"):
            raise ConfigError(f"unknown head {h!r}")
    if "joint" not in heads:
        heads = ("joint",) + heads
    results, written = write_metrics(model, samples, args.out, heads=heads)
    rows = results["joint"]
    mean = sum(m.dsc for _, m in rows) / len(rows)
    print(f"{len(rows)} images; mean joint dsc {mean:.4f}; wrote {', '.join(written.values())}")
    return EXIT_OK


def cmd_predict(args):
    model, _ = load_model(args.ckpt)
    image = load_image(args.image, model.dtype)
    _, written = predict(model, image, args.out)
    for key, path in written.items():
        print(f"{key}\t{path}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    work = os.path.splitext(args.out)[0] + "_runs"
    rows = ablate(cfg, args.seeds, out_dir=work)
    text = ablation_tsv(rows)
    with open(args.out, "w") as fp:
        fp.write(text)
    plotting.ablation_chart(rows, os.path.splitext(args.out)[0] + ".png")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args):
    if args.scale == "unit":
        results = checks.unit_suite(seed=args.seed)
    else:
        results = [checks.model_check(seed=args.seed)]
    failed = 0
    for r in results:
        print(f"{r.name}\t{r.report.summary()}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_synth(args):
    size = (args.size, args.size)
    counts = {"train": args.count, "val": args.val_count, "test": args.test_count}
    spec = SyntheticSpec(count=sum(counts.values()), size=size, seed=args.seed).validate()
    start = 0
    for split, n in counts.items():
        if n:
            save_split([synthetic_sample(spec, start + i) for i in range(n)], args.out, split)
            print(f"{split}: {n} samples in {os.path.join(args.out, split)}")
        start += n
    return EXIT_OK


def build_parser():
    p = _Parser(prog="donet", description="Dual-decoder lesion segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="write a per-image metrics CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", required=True)
    e.add_argument("--heads", default="joint", help="comma list of joint,y1,y2")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and compare the four component variants")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=_seeds, default=[1, 2, 3])
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scale", choices=("unit", "model"), default="unit")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic lesion dataset")
    s.add_argument("--count", type=_positive, required=True)
    s.add_argument("--size", type=_positive, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-count", type=_count, default=0)
    s.add_argument("--test-count", type=_count, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DonetError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
