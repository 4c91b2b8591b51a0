"""
Command-line entry point.

    python cli.py generate --out data --n-train 200 --n-test 50
    python cli.py train --config experiment.env --variant full --out runs/full
    python cli.py eval --checkpoint runs/full/model.ckpt --split test --out preds
    python cli.py ablate --grid components --seeds 0,1,2
    python cli.py gradcheck --suite all
    python cli.py flops
    python cli.py serve

Exit codes: 0 success, 1 invalid input or configuration, 2 failed numerical check.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from config import load_experiment_config, settings
from errors import SegmentationError

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CHECK_FAILED = 2


def _experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value experiment file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--variant", choices=["spatial_only", "temporal_only", "both_concat", "both_lgfs", "full"])
    parser.add_argument("--fusion", choices=["add", "max", "lgfs", "none"])
    parser.add_argument("--cmam-stages", help="comma-separated stage list, e.g. 3,4,5")
    parser.add_argument("--data", help="dataset directory")


def _overrides(args: argparse.Namespace, **extra: Any) -> Dict[str, Any]:
    values = {
        "seed": args.seed,
        "variant": args.variant,
        "fusion": args.fusion,
        "cmam_stages": args.cmam_stages,
        "data_dir": args.data,
    }
    values.update(extra)
    return {k: v for k, v in values.items() if v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actor-seg", description="Language-queried actor segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic moving-shapes dataset")
    gen.add_argument("--out", default=settings.DATA_DIR)
    gen.add_argument("--n-train", type=int, default=200)
    gen.add_argument("--n-test", type=int, default=50)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--difficulty", choices=["easy", "ambiguous"], default="easy")
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--frames", type=int, default=8)

    train = sub.add_parser("train", help="train a model variant")
    _experiment_flags(train)
    train.add_argument("--out", help="run directory")
    train.add_argument("--joint", action="store_true", help="single-stage joint training")
    train.add_argument("--train-cmam", action="store_true", help="keep updating CMAM in stage 2 instead of freezing it")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _experiment_flags(ev)
    ev.add_argument("--checkpoint")
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", help="directory for <id>.pgm masks and <id>.f64 logits")

    ab = sub.add_parser("ablate", help="run an ablation grid over several seeds")
    _experiment_flags(ab)
    ab.add_argument("--grid", default="components",
                    help="components | fusion | cmam, or space-separated cells like 'spatial_only full@4,5'")
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--split", default="test")
    ab.add_argument("--out", help="base run directory")
    ab.add_argument("--train-cmam", action="store_true", help="keep updating CMAM in stage 2 instead of freezing it")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--suite", default="all")
    gc.add_argument("--seed", type=int, default=0)

    fl = sub.add_parser("flops", help="multiply-accumulate count per forward pass")
    _experiment_flags(fl)
    fl.add_argument("--words", type=int, default=5)
    fl.add_argument("--no-verify", action="store_true")

    sv = sub.add_parser("serve", help="start the HTTP inference service")
    sv.add_argument("--host", default="0.0.0.0")
    sv.add_argument("--port", type=int, default=8000)
    return parser


def _generate(args) -> int:
    from dataset_store import write_dataset

    manifest = write_dataset(args.out, args.n_train, args.n_test, seed=args.seed, difficulty=args.difficulty,
                             height=args.height, width=args.width, frames=args.frames)
    print(f"Wrote {len(manifest.entries)} samples to {args.out}")
    return EXIT_OK


def _train(args) -> int:
    from metrics import render_table
    from training_service import TrainingService

    extra = {"run_dir": args.out, "two_stage": False if args.joint else None,
             "freeze_cmam": False if args.train_cmam else None}
    config = load_experiment_config(args.config, _overrides(args, **extra))
    log = TrainingService(config).train()
    print(f"Final loss: {log.final_loss:.6f}")
    for split, report in log.reports.items():
        print(render_table(report, title=f"[{config.variant.value}] {split}"))
    print(f"Checkpoint: {log.checkpoint}")
    return EXIT_OK


def _eval(args) -> int:
    from metrics import render_key_values, render_table
    from training_service import evaluate

    config = load_experiment_config(args.config, _overrides(args))
    report = evaluate(config, checkpoint=args.checkpoint, split=args.split, out_dir=args.out)
    print(render_table(report, title=f"[{config.variant.value}] {args.split}"))
    print(render_key_values(report))
    return EXIT_OK


def _ablate(args) -> int:
    from ablation_service import ablate, describe_ordering, render_ablation

    overrides = _overrides(args, run_dir=args.out, freeze_cmam=False if args.train_cmam else None)
    config = load_experiment_config(args.config, overrides)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    result = ablate(config, args.grid, seeds=seeds, split=args.split)
    print(render_ablation(result.table, title=f"median over seeds {seeds} ({args.split})"))
    if result.ordering is not None:
        verdict = "holds" if result.ordering_holds else "violated"
        print(f"Ordering {describe_ordering(result.ordering)}: {verdict}")
    return EXIT_OK


def _gradcheck(args) -> int:
    from gradcheck import render_report, run_gradcheck

    report = run_gradcheck(args.suite, args.seed)
    print(render_report(report))
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _flops(args) -> int:
    from flops import flops, render_flops

    config = load_experiment_config(args.config, _overrides(args))
    report = flops(config, n_words=args.words, verify=not args.no_verify)
    print(render_flops(report))
    return EXIT_CHECK_FAILED if report.verified is False else EXIT_OK


def _serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
    return EXIT_OK


COMMANDS = {
    "generate": _generate,
    "train": _train,
    "eval": _eval,
    "ablate": _ablate,
    "gradcheck": _gradcheck,
    "flops": _flops,
    "serve": _serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SegmentationError, ValueError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
