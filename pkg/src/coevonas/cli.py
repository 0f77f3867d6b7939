"""Command line: run, resume, final-train, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import orchestrator as orch
from .plots import history_figure
from .tables import shipped_config_text

log = logging.getLogger("coevonas")


def _config(args) -> orch.RunConfig:
    if args.config in ("desk", "experiment"):
        config = orch.config_from_text(shipped_config_text(args.config))
    else:
        config = orch.load_config(args.config)
    return config.with_overrides(seed=args.seed, workers=args.workers, out=args.out)


def _checkpoint(out) -> Path:
    path = Path(out) / orch.CHECKPOINT_NAME
    if not path.exists():
        raise SystemExit(f"no checkpoint at {path}")
    return path


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.config:
        return Path(_config(args).out)
    raise SystemExit("--out (or --config) is required")


def cmd_run(args) -> int:
    config = _config(args)
    out = Path(config.out)
    data = orch.load_data(config) if config.evaluator == "trainer" else None
    report = orch.run_evolution(config, checkpoint=out / orch.CHECKPOINT_NAME, data=data)
    for path in orch.export_best(report, out):
        log.info("wrote %s", path)
    print(f"best individual {report.best.uid}: accuracy {report.best.score.accuracy:.4f} "
          f"loss {report.best.score.loss:.4f}")
    return 0


def cmd_resume(args) -> int:
    out = _out_dir(args)
    header = orch.read_checkpoint_header(_checkpoint(out))
    log.info("resuming at generation %d of %d", header["generation"], header["generations"])
    report = orch.resume(_checkpoint(out), workers=args.workers)
    orch.export_best(report, out)
    print(f"best individual {report.best.uid}: accuracy {report.best.score.accuracy:.4f}")
    return 0


def cmd_final_train(args) -> int:
    out = _out_dir(args)
    state = orch.load_checkpoint(_checkpoint(out))
    if state.best is None:
        raise SystemExit("checkpoint holds no evaluated individual yet")
    data = orch.load_data(state.config)
    history, test = orch.final_train(state.best, data, args.epochs, seed=state.config.seed)
    orch.write_history(history, out / "final_history.csv")
    history_figure(history, out / "final_history.png")
    (out / "final_test.json").write_text(json.dumps({"accuracy": test.accuracy, "loss": test.loss,
                                                     "epochs": args.epochs}, indent=2))
    print(f"test accuracy {test.accuracy:.4f} loss {test.loss:.4f} after {args.epochs} epochs")
    return 0


def cmd_export(args) -> int:
    out = _out_dir(args)
    state = orch.load_checkpoint(_checkpoint(out))
    if state.best is None:
        raise SystemExit("checkpoint holds no evaluated individual yet")
    for path in orch.export_best(orch.make_report(state), out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevonas", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="config file, or 'desk' / 'experiment' for a shipped one")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, help="evaluation processes (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")

    p = sub.add_parser("run", help="start a new evolution run")
    common(p, config_required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue from the checkpoint in the output directory")
    common(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("final-train", help="train the best network on the full training data")
    common(p)
    p.add_argument("--epochs", type=int, default=30)
    p.set_defaults(func=cmd_final_train)

    p = sub.add_parser("export", help="write network, DOT, CSV and figure exports")
    common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
