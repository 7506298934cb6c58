"""``flowssc`` command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data or checkpoint error,
4 numerical failure (divergence or a failed verification check).
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..codec.train import TrainingDiverged
from ..experiments import codec_comparison, refiner_ablation, steps_ablation, write_table
from ..synth import DatasetFormatError, write_dataset
from ..tensor import NonFiniteError
from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("flowssc")


def _print_rows(rows: list[dict]) -> None:
    for r in rows:
        print(f"  {r['experiment']:8s} {r['variant']:8s} iou {r['iou']:.4f} miou {r['miou']:.4f}"
              f" wall_ms {r['wall_ms']:.1f}")


def cmd_gen_data(cfg, args) -> int:
    info = pipeline.cmd_gen_data(cfg)
    print(f"wrote {info['count']} scene pairs to {info['path']} ({info['bytes']} bytes)")
    print("class census: " + ", ".join(f"{k}:{v:.4f}" for k, v in enumerate(info["census"])))
    return EXIT_OK


def cmd_train_codec(cfg, args) -> int:
    info = pipeline.cmd_train_codec(cfg, resume=args.resume, kind=args.kind)
    print(" ".join(f"{k}={v}" for k, v in info.items()))
    return EXIT_OK


def cmd_train_flow(cfg, args) -> int:
    info = pipeline.cmd_train_flow(cfg, resume=args.resume)
    print(" ".join(f"{k}={v}" for k, v in info.items()))
    return EXIT_OK


def cmd_refine(cfg, args) -> int:
    steps = args.steps or cfg.eval.n_steps
    cfg.flow_train_config().schedule.check_steps(steps)
    codec, _ = pipeline.load_codec(cfg)
    net, _ = pipeline.load_net(cfg)
    gts, coarse = pipeline.eval_subset(cfg, pipeline.load_splits(cfg))
    out = pipeline.refine(codec, net, coarse, steps, cfg.seed, cfg.flow_train_config().schedule)
    write_dataset(cfg.path(f"refined_{steps}step.voxd"), list(zip(out.predictions, coarse)), cfg.data.num_classes)
    rows = refiner_ablation(gts, coarse, out.predictions, cfg.data.num_classes, 1000 * out.sample_seconds / len(gts))
    write_table(cfg.path("refiner_ablation.csv"), rows, cfg.data.num_classes)
    print(f"refined {len(gts)} scenes with {steps} step(s); {out.net_evaluations} network evaluations")
    _print_rows(rows)
    return EXIT_OK


def cmd_ablate_steps(cfg, args) -> int:
    steps = tuple(args.steps) if args.steps else cfg.eval.steps
    schedule = cfg.flow_train_config().schedule
    for s in steps:
        schedule.check_steps(s)
    codec, _ = pipeline.load_codec(cfg)
    net, _ = pipeline.load_net(cfg)
    gts, coarse = pipeline.eval_subset(cfg, pipeline.load_splits(cfg))
    cond = pipeline.encode_grids(codec, coarse)

    def run(n):
        r = pipeline.refine(codec, net, coarse, n, cfg.seed, schedule, cond_latents=cond)
        return r.predictions, r.sample_seconds

    rows = steps_ablation(run, gts, steps, cfg.data.num_classes)
    write_table(cfg.path("steps_ablation.csv"), rows, cfg.data.num_classes)
    _print_rows(rows)
    return EXIT_OK


def cmd_compare_codecs(cfg, args) -> int:
    gts, _ = pipeline.eval_subset(cfg, pipeline.load_splits(cfg))
    recs = {}
    for kind in ("xattn", "conv"):
        codec, _ = pipeline.load_codec(cfg, kind)
        recs[kind] = pipeline.decode_latents(codec, pipeline.encode_grids(codec, gts))
    rows = codec_comparison(recs, gts, cfg.data.num_classes)
    write_table(cfg.path("codec_comparison.csv"), rows, cfg.data.num_classes)
    _print_rows(rows)
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    from .verify import run_verification

    checks = run_verification(cfg, quick=args.quick)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERIC


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic (ground truth, coarse) dataset"),
    "train-codec": (cmd_train_codec, "train the voxel/triplane codec"),
    "train-flow": (cmd_train_flow, "train the shortcut velocity network on frozen-codec latents"),
    "refine": (cmd_refine, "refine coarse grids and score them against ground truth"),
    "ablate-steps": (cmd_ablate_steps, "score refinement for several sampling step counts"),
    "compare-codecs": (cmd_compare_codecs, "score the cross-attention and convolutional codecs"),
    "verify": (cmd_verify, "run gradient and flow oracle checks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowssc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. codec.iterations=10")
        if name in ("train-codec", "train-flow"):
            p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        if name == "train-codec":
            p.add_argument("--kind", choices=("xattn", "conv"), help="encoder architecture")
        if name == "refine":
            p.add_argument("--steps", type=int, help="sampling steps (default eval.n_steps)")
        if name == "ablate-steps":
            p.add_argument("--steps", type=int, nargs="+", help="step counts (default eval.steps)")
        if name == "verify":
            p.add_argument("--quick", action="store_true", help="smaller budgets")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.set)
        return handler(cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
