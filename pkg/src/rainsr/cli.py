"""Command-line surface.

Subcommands: synth-data, train {translator,dsn,srn}, infer, evaluate,
grad-check, bake-pairs.  Exit codes: 0 success, 1 usage error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import TrainConfig, default_config, load_config
from .datasets import ingest_folder
from .errors import RainSRError
from .imaging import crop_to_multiple
from .nets import MIN_SPECS, NetworkSpec, grad_check
from .png_io import read_png, write_png

GRAD_CHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="rainsr", description=__doc__)
    p.add_argument("--config", help="path to a key = value config file")
    sub = p.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("synth-data", help="generate the procedural micro-dataset")
    sp.add_argument("--out", help="output root (defaults to the config data root)")

    tp = sub.add_parser("train", help="run one training stage")
    tp.add_argument("stage", choices=("translator", "dsn", "srn"))
    tp.add_argument("--resume", help="checkpoint to continue from")

    ip = sub.add_parser("infer", help="4x super-resolve (and derain) one PNG")
    ip.add_argument("--input", required=True)
    ip.add_argument("--output", required=True)
    ip.add_argument("--checkpoint", help="srn checkpoint (default: run dir)")

    ep = sub.add_parser("evaluate", help="score the trained model on the eval split")
    ep.add_argument("--out", help="report directory (default: <run_dir>/report)")

    gp = sub.add_parser("grad-check", help="finite-difference gradient audit")
    gp.add_argument("--eps", type=float, default=1e-3)
    gp.add_argument("--seed", type=int, default=0)

    bp = sub.add_parser("bake-pairs", help="write pseudo-pairs to disk (debug)")
    bp.add_argument("--count", type=int, required=True)
    bp.add_argument("--out", required=True)
    bp.add_argument("--seed", type=int, default=0)
    return p


def _load(args) -> TrainConfig:
    if args.config:
        return load_config(args.config)
    cfg = default_config("desk")
    from .config import _finalise  # reuse env-root resolution

    return _finalise(cfg)


def _cmd_synth_data(cfg: TrainConfig, args) -> int:
    from .run import synth_dataset

    root = args.out or cfg.data.root
    man = synth_dataset(cfg, out_root=root)
    total = sum(man.counts.values())
    print(f"wrote {total} scenes under {root} "
          f"({man.counts['eval']} paired eval triplets)")
    return 0


def _cmd_train(cfg: TrainConfig, args) -> int:
    from .run import run_stage

    ckpt, log = run_stage(cfg, args.stage, resume=args.resume)
    print(f"stage {args.stage} done: checkpoint {ckpt}, losses {log}")
    return 0


def _cmd_infer(cfg: TrainConfig, args) -> int:
    from .run import load_srn_state, stage_paths
    from .srn import super_resolve

    ckpt = args.checkpoint or stage_paths(cfg, "srn")[0]
    state = load_srn_state(cfg, ckpt)
    img = read_png(args.input)
    img = crop_to_multiple(img, 4)
    out = super_resolve(state, img)
    write_png(args.output, out)
    print(f"{args.input} {img.shape[1]}x{img.shape[0]} -> "
          f"{args.output} {out.shape[1]}x{out.shape[0]}")
    return 0


def _cmd_evaluate(cfg: TrainConfig, args) -> int:
    from .run import evaluate_run

    report = evaluate_run(cfg, out_dir=args.out)
    agg = report.aggregates["median"]
    print(f"report written to {report.report_dir}")
    print(f"median psnr: sr {agg['psnr_sr']:.3f} dB vs bicubic "
          f"{agg['psnr_bicubic']:.3f} dB")
    print(f"median ssim: sr {agg['ssim_sr']:.4f} vs bicubic "
          f"{agg['ssim_bicubic']:.4f}")
    return 0


def _cmd_grad_check(args) -> int:
    worst_overall = 0.0
    for family, (bc, rb) in MIN_SPECS.items():
        spec = NetworkSpec.for_family(family, bc, rb)
        err = grad_check(spec, seed=args.seed, eps=args.eps)
        worst_overall = max(worst_overall, err)
        status = "ok" if err <= GRAD_CHECK_TOLERANCE else "FAIL"
        print(f"{family:15s} max_rel_err {err:.3e}  {status}")
    if worst_overall > GRAD_CHECK_TOLERANCE:
        raise RainSRError(
            f"gradient check failed: {worst_overall:.3e} > {GRAD_CHECK_TOLERANCE}"
        )
    return 0


def _cmd_bake_pairs(cfg: TrainConfig, args) -> int:
    from .run import load_dsn_state, load_translator_state, stage_paths
    from .srn import make_pseudo_pairs
    from . import dsn as dsn_mod
    from . import translator as tr_mod

    t_state = load_translator_state(cfg, stage_paths(cfg, "translator")[0])
    d_state = load_dsn_state(cfg, stage_paths(cfg, "dsn")[0])
    sunny = ingest_folder(os.path.join(cfg.data.root, "sunny_hr"), "sunny_hr")
    pairs = make_pseudo_pairs(
        lambda img: tr_mod.translate_sunny_to_rainy(t_state, img),
        lambda img: dsn_mod.degrade(d_state, img),
        sunny, args.count, args.seed, patch_size=cfg.srn.patch_size,
    )
    os.makedirs(args.out, exist_ok=True)
    for i, pair in enumerate(pairs):
        write_png(os.path.join(args.out, f"pair{i:04d}_lr.png"), pair.lr_rainy)
        write_png(os.path.join(args.out, f"pair{i:04d}_hr.png"), pair.hr_clean)
    print(f"wrote {len(pairs)} pseudo-pairs to {args.out}")
    return 0


def cli(argv: list[str] | None = None) -> int:
    """Entry point; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"rainsr: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        cfg = _load(args)
        if args.command == "synth-data":
            return _cmd_synth_data(cfg, args)
        if args.command == "train":
            return _cmd_train(cfg, args)
        if args.command == "infer":
            return _cmd_infer(cfg, args)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, args)
        if args.command == "bake-pairs":
            return _cmd_bake_pairs(cfg, args)
        raise AssertionError(args.command)
    except RainSRError as exc:
        print(f"rainsr: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rainsr: i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
