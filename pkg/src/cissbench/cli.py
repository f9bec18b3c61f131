"""Command-line front end: ``cissbench generate|train|diagnose|report|matrix``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Failures
print a JSON object on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import EXPERIMENT_METHODS, PRESETS, PROBES, ConfigError, ExperimentConfig
from .taskstream import REGIMES
from .trainer import LOSS_KINDS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _csv(valid, name):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in valid]
        if bad:
            raise ConfigError(f"unknown {name} {bad}", valid)
        return items

    return parse


def _common(p):
    p.add_argument("--config", type=Path, help="experiment JSON file (default: the preset)")
    p.add_argument("--preset", default="voc15-5-mini", help="preset used when --config is absent")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="dotted override, e.g. train.lam=10 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="recompute even if artifacts exist")
    p.add_argument("--paper-protocol", action="store_true", help="use the full-scale training protocol")


def build_parser():
    ap = argparse.ArgumentParser(prog="cissbench", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic dataset to disk")
    _common(p)
    p = sub.add_parser("train", help="train one run")
    _common(p)
    p = sub.add_parser("diagnose", help="run forgetting probes on trained runs")
    _common(p)
    p.add_argument("run_dirs", nargs="*", type=Path, help="run directories (default: the configured run)")
    p.add_argument("--probes", help=f"comma list from {','.join(PROBES)}")
    p = sub.add_parser("report", help="plots and summary tables from run directories")
    _common(p)
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="report directory (default: <root>/reports/latest)")
    p = sub.add_parser("matrix", help="train a method x regime x loss grid and summarise it")
    _common(p)
    p.add_argument("--methods", default="finetune,ewc,mas,lwf,replay")
    p.add_argument("--regimes", default=",".join(REGIMES))
    p.add_argument("--losses", default="ce")
    p.add_argument("--heads", default="standard")
    p.add_argument("--probes", default="", help="diagnose every run with these probes")
    p.add_argument("--out", type=Path, help="report directory")
    return ap


def load_config(args):
    if args.config:
        return ExperimentConfig.load(args.config, args.overrides, args.seed, args.paper_protocol)
    return ExperimentConfig.preset(args.preset, args.overrides, args.seed, args.paper_protocol)


def _emit(obj):
    print(json.dumps(obj, default=str))


def run(args):
    from . import experiment as ex

    cfg = load_config(args)
    if args.command == "generate":
        path, skipped = ex.cmd_generate(cfg, force=args.force)
        _emit({"dataset": str(path), "skipped": skipped})
    elif args.command == "train":
        path, skipped = ex.cmd_train(cfg, force=args.force)
        if skipped:
            print(f"skip: {path} already trained (use --force to retrain)", file=sys.stderr)
        _emit({"run_dir": str(path), "skipped": skipped})
    elif args.command == "diagnose":
        probes = _csv(PROBES, "probes")(args.probes) if args.probes else None
        dirs = args.run_dirs or [ex.run_dir(cfg)]
        for d in dirs:
            written = ex.cmd_diagnose(d, probes, force=args.force)
            if not written:
                print(f"skip: {d} already diagnosed (use --force to redo)", file=sys.stderr)
            _emit({"run_dir": str(d), "written": written})
    elif args.command == "report":
        out = args.out or ex.output_root(cfg) / "reports" / "latest"
        written = ex.cmd_report(args.run_dirs, out)
        _emit({"report_dir": str(out), "files": [str(w) for w in written]})
    elif args.command == "matrix":
        methods = _csv(EXPERIMENT_METHODS, "methods")(args.methods)
        regimes = _csv(REGIMES, "regimes")(args.regimes)
        losses = _csv(LOSS_KINDS, "losses")(args.losses)
        heads = _csv(("standard", "weight_normalized"), "heads")(args.heads)
        probes = _csv(PROBES, "probes")(args.probes) if args.probes else None
        dirs, rep = ex.cmd_matrix(cfg, methods, regimes, losses, heads, force=args.force, probes=probes,
                                  report_dir=args.out)
        _emit({"runs": [str(d) for d in dirs], "report_dir": str(rep)})
    return EXIT_OK


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        err = {"error": "config", "message": str(e)}
        if e.valid is not None:
            err["valid"] = e.valid
        if "preset" in str(e):
            err.setdefault("valid", sorted(PRESETS))
        print(json.dumps(err), file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001  (reported as JSON, exit code 3)
        print(json.dumps({"error": "runtime", "type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
