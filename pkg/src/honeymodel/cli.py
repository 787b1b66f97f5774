"""``honeymodel`` command line.

Precedence for every setting: command-line flag > ``--config`` file > default.
Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 internal
invariant violation.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import attacks as atk
from . import pipeline
from .errors import HoneyModelError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text):
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    p = _Parser(prog="honeymodel", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--seed", type=int, help="root seed for every random stream")
    p.add_argument("--jobs", type=int, help="worker processes for attacks and scans")
    p.add_argument("--out", help="output directory (default $HONEYMODEL_OUT or ./runs)")
    p.add_argument("--data-dir", help="directory holding the four uncompressed MNIST IDX files")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    k = sub.add_parser("keygen", help="generate a secret watermark key")
    k.add_argument("--dim", type=int, default=784)
    k.add_argument("--size", type=float, help="fraction of features in the watermark")
    k.add_argument("--amplitude", type=float)
    k.add_argument("--key-out", default=None, help="key path (default <out>/key.json)")

    t = sub.add_parser("train", help="train honeymodel and baseline")
    t.add_argument("--key", help="reuse an existing key instead of deriving one")
    t.add_argument("--size", type=float)
    t.add_argument("--amplitude", type=float)
    t.add_argument("--poison", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-baseline", action="store_true")

    a = sub.add_parser("attack", help="attack a model and score watermark reconstruction")
    a.add_argument("--model", required=True)
    a.add_argument("--key", required=True)
    a.add_argument("--attacks", type=_csv_list, default=list(atk.ATTACKS))
    a.add_argument("--count", type=int, help="records per attack (default 500)")
    a.add_argument("--prefix", default="", help="prefix for the output file names")
    a.add_argument("--include-failed", action="store_true")

    d = sub.add_parser("detect", help="train and evaluate the adversarial-input detector")
    d.add_argument("--model", required=True)
    d.add_argument("--key", required=True)
    d.add_argument("--records", required=True, help="records blob written by `attack`")
    d.add_argument("--eval-fraction", type=float)
    d.add_argument("--include-failed", action="store_true")

    m = sub.add_parser("mmd", help="bootstrap MMD between honeymodel and baseline records")
    m.add_argument("--honey", required=True)
    m.add_argument("--baseline", required=True)
    m.add_argument("--attacks", type=_csv_list, default=list(atk.ATTACKS))
    m.add_argument("--subsample", type=int)
    m.add_argument("--repetitions", type=int)
    m.add_argument("--space", choices=["input", "delta"])
    m.add_argument("--include-failed", action="store_true")

    s = sub.add_parser("scan", help="parameter scan over poison or watermark size")
    s.add_argument("--axis", choices=sorted(pipeline.SCAN_AXES), required=True)
    s.add_argument("--grid", type=_floats, required=True)
    s.add_argument("--count", type=int, default=200, help="records per attack per point")
    return p


def _config(args):
    cfg = pipeline.load_config(args.config) if args.config else pipeline.ExperimentConfig()
    if args.data_dir:
        cfg.with_data_dir(args.data_dir)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    for flag, attr in (("size", "size_fraction"), ("amplitude", "amplitude"),
                       ("poison", "poison_fraction")):
        if getattr(args, flag, None) is not None:
            setattr(cfg, attr, getattr(args, flag))
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "count", None) is not None and args.command == "attack":
        cfg.records_per_attack = args.count
    if getattr(args, "include_failed", False):
        cfg.include_failed = True
    if getattr(args, "eval_fraction", None) is not None:
        cfg.detector.eval_fraction = args.eval_fraction
    if getattr(args, "subsample", None) is not None:
        cfg.mmd.subsample_size = args.subsample
    if getattr(args, "repetitions", None) is not None:
        cfg.mmd.repetitions = args.repetitions
    if getattr(args, "space", None) is not None:
        cfg.mmd.space = args.space
    return cfg.validate()


def run(args):
    cfg = _config(args)
    out = Path(args.out or pipeline.default_out_dir())
    if args.command == "keygen":
        out.mkdir(parents=True, exist_ok=True)
        key_path = args.key_out or out / "key.json"
        key = pipeline.cmd_keygen(key_path, args.dim, cfg.size_fraction, cfg.amplitude,
                                  seed=args.seed)
        print(f"{key_path}: {key.size} features, fingerprint {key.fingerprint}")
    elif args.command == "train":
        summary = pipeline.cmd_train(cfg, out, key_path=args.key, baseline=not args.no_baseline)
        for name, acc in summary["accuracy"].items():
            print(f"{name}: test accuracy {acc:.4f}")
    elif args.command == "attack":
        bad = [a for a in args.attacks if a not in atk.ATTACKS]
        if bad:
            raise pipeline.ConfigError(f"unknown attacks {bad}")
        _, scores = pipeline.cmd_attack(cfg, args.model, args.key, out, names=args.attacks,
                                        prefix=args.prefix)
        for name, s in scores.items():
            print(f"{name}: mean cosine reconstruction {s.mean:.4f} over {s.count} records")
    elif args.command == "detect":
        _, metrics = pipeline.cmd_detect(cfg, args.model, args.key, args.records, out)
        for scope, m in metrics.items():
            print(f"{scope}: ACC {m.accuracy:.3f} FPR {m.false_positive_rate:.3f} "
                  f"TPR {m.true_positive_rate:.3f}")
    elif args.command == "mmd":
        reports = pipeline.cmd_mmd(cfg, args.honey, args.baseline, out, names=args.attacks)
        for name, report in reports.items():
            print(f"{name}: separability {report.separability:.3f}")
    elif args.command == "scan":
        for res in pipeline.cmd_scan(cfg, args.axis, args.grid, out, count=args.count):
            print(res)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except HoneyModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
