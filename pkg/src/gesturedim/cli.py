"""Command-line entry point.

Typical pipeline::

    gesturedim gen-data --seed 7 --out run/
    gesturedim train-generator --data run/dataset.gdb --seed 7 --dims 3 --out run/
    gesturedim train-generator --data run/dataset.gdb --seed 7 --dims 2 --out run/
    gesturedim train-lifter --data run/dataset.gdb --seed 7 --out run/
    gesturedim train-encoder --data run/dataset.gdb --seed 7 --dims 3 --out run/
    gesturedim evaluate --config cfg.json --data run/dataset.gdb --checkpoints run/ --out run/
    gesturedim report --out run/

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import diffusion as D
from . import harness as H
from . import lifter as L
from .metrics import train_encoder
from .synth_data import load_dataset, save_dataset

log = logging.getLogger("gesturedim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset by the subparser
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dims", type=int, choices=(2, 3), help="pose dimensionality")
    p.add_argument("--uncond", action="store_true", help="train with p_uncond = 1")
    p.add_argument("--fgd-variant", choices=("standard", "paper-literal"))
    p.add_argument("--data", help="dataset file written by gen-data")
    p.add_argument("--parallel", action="store_true", help="evaluate settings concurrently")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="gesturedim", parents=[common], description="Co-speech gesture 2D/3D experiments")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("train-generator", parents=[common], help="train a diffusion generator")
    sub.add_parser("train-lifter", parents=[common], help="train the 2D to 3D lifter")
    sub.add_parser("train-encoder", parents=[common], help="train a metric encoder")
    p = sub.add_parser("lift", parents=[common], help="lift a 2D (or projected 3D) dataset to 3D")
    p.add_argument("--checkpoint", help="lifter checkpoint (default: <out>/lifter.ckpt)")
    p = sub.add_parser("evaluate", parents=[common], help="run the experiment and write reports")
    p.add_argument("--checkpoints", help="directory with trained checkpoints to reuse")
    sub.add_parser("report", parents=[common], help="render report.md from report.csv in --out")
    return parser


def _config(args) -> H.ExperimentConfig:
    cfg = H.load_config(args.config) if getattr(args, "config", None) else H.ExperimentConfig()
    update = {}
    if getattr(args, "seed", None) is not None:
        update["seed"] = args.seed
    if getattr(args, "fgd_variant", None):
        update["fgd_variant"] = args.fgd_variant
    if getattr(args, "parallel", False):
        update["parallel"] = True
    if getattr(args, "data", None):
        update["data_path"] = args.data
    if getattr(args, "checkpoints", None):
        update["checkpoint_dir"] = args.checkpoints
    return H.ExperimentConfig.model_validate({**cfg.model_dump(), **update}) if update else cfg


def _out(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_split(cfg: H.ExperimentConfig):
    return H.split_corpus(cfg, H.load_corpus(cfg))[0]


def cmd_gen_data(args, cfg):
    from .synth_data import generate

    ds = generate(cfg.corpus, seed=H.corpus_seed(cfg.seed))
    path = save_dataset(_out(args) / "dataset.gdb", ds)
    print(f"wrote {len(ds)} sequences to {path}")


def cmd_train_generator(args, cfg):
    dims = getattr(args, "dims", 3)
    key = ("uncond_" if getattr(args, "uncond", False) else "") + f"gen{dims}d"
    train = H.in_space(_train_split(cfg), dims)
    gen = D.train(train, H.generator_config(cfg, key))
    path = _out(args) / H.CHECKPOINT_NAMES[key]
    sha = gen.save(path)
    print(f"wrote {path} sha256={sha}")
    print(f"held-out denoising loss {gen.log['initial_holdout_loss']:.4f} -> {gen.log['final_holdout_loss']:.4f}")


def cmd_train_lifter(args, cfg):
    lf = L.train_lifter(_train_split(cfg), H.lifter_config(cfg))
    path = _out(args) / H.CHECKPOINT_NAMES["lifter"]
    sha = lf.save(path)
    print(f"wrote {path} sha256={sha}")
    print(f"validation MPJPE {lf.validation_mpjpe:.4f}")


def cmd_train_encoder(args, cfg):
    dims = getattr(args, "dims", 3)
    enc = train_encoder(H.in_space(_train_split(cfg), dims), seed=H.encoder_seed(cfg.seed, dims), config=cfg.encoder)
    path = _out(args) / H.CHECKPOINT_NAMES[f"encoder{dims}d"]
    sha = enc.save(path)
    print(f"wrote {path} sha256={sha}")


def cmd_lift(args, cfg):
    if not getattr(args, "data", None):
        raise UsageError("lift needs --data")
    out = _out(args)
    lf = L.TrainedLifter.load(getattr(args, "checkpoint", None) or out / H.CHECKPOINT_NAMES["lifter"])
    ds = load_dataset(args.data)
    ds2 = ds if ds.dims == 2 else ds.projected()
    lifted = ds2.with_poses(L.lift_batch(lf, ds2.sequences()))
    path = save_dataset(out / "lifted.gdb", lifted)
    print(f"wrote {len(lifted)} lifted sequences to {path}")


def cmd_evaluate(args, cfg):
    if not getattr(args, "config", None):
        raise UsageError("evaluate needs --config")
    report = H.run_experiment(cfg)
    paths = report.write(_out(args))
    sys.stdout.write(report.to_markdown())
    print(f"wrote {paths['csv']}, {paths['markdown']}, {paths['metadata']}")


def cmd_report(args, cfg):
    out = Path(getattr(args, "out", None) or ".")
    csv_path = out / "report.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"{csv_path} not found; run evaluate first")
    meta_path = out / "metadata.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    report = H.MetricReport.from_csv(csv_path.read_text(), meta)
    md = report.to_markdown()
    (out / "report.md").write_text(md)
    sys.stdout.write(md)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-generator": cmd_train_generator,
    "train-lifter": cmd_train_lifter,
    "train-encoder": cmd_train_encoder,
    "lift": cmd_lift,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        if getattr(args, "print_config", False):
            print(cfg.model_dump_json(indent=2))
            return 0
        if args.command is None:
            raise UsageError("a command is required")
        COMMANDS[args.command](args, cfg)
        return 0
    except UsageError as exc:
        sub = parser if args.command is None else _subparser(parser, args.command)
        sub.print_help(sys.stderr)
        print(f"{sub.prog}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any runtime failure maps to exit code 2
        log.debug("failure", exc_info=True)
        print(f"gesturedim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    return parser


if __name__ == "__main__":
    sys.exit(main())
