"""Command-line entry point: ``ffl train|eval|export|gradcheck|inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import gradcheck
from .config import VANILLA, Config, dumps, load_config
from .data import load_dataset
from .errors import ConfigError, FFLError
from .fusion import FusionModule
from .nn import count_parameters
from .trainer import build_model, evaluate, export_branch, export_fused, restore_model, train

OK, FAILURE, USAGE = 0, 1, 2
RESOLVED_CONFIG = "resolved-config"


class UsageError(Exception):
    pass


def _print_record(record, out=print):
    for k, err in enumerate(record.branch_err):
        out(f"branch{k}_err   {err:6.2f}")
    out(f"ensemble_err  {record.ensemble_err:6.2f}")
    if record.fused_err is not None:
        out(f"fused_err     {record.fused_err:6.2f}")


def run_train(args):
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    resume = ckpt_io.load_checkpoint(args.resume, cfg.digest()) if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(dumps(cfg))
    result = train(cfg, out_dir=out, resume=resume)
    if result.final is not None:
        _print_record(result.final)
    print(f"wrote {out / 'metrics.csv'} and {out / 'final.ckpt'}")
    return OK


def _checkpoint_config(ckpt, overrides):
    cfg = Config.from_dict(ckpt.config)
    return cfg.override(overrides) if overrides else cfg


def run_eval(args):
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args.set)
    model, _ = restore_model(ckpt, cfg)
    dataset = load_dataset(cfg.dataset_spec(args.split))
    _print_record(evaluate(model, dataset))
    return OK


def run_export(args):
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    cfg = Config.from_dict(ckpt.config)
    if args.fused:
        exported = export_fused(ckpt)
    else:
        n = 1 if cfg.model.mode == VANILLA else cfg.model.n
        if not 0 <= args.branch < n:
            raise UsageError(f"--branch {args.branch} out of range: checkpoint has {n} sub-network(s)")
        exported = export_branch(ckpt, args.branch)
    ckpt_io.save_checkpoint(exported, args.out)
    model, _ = restore_model(exported)
    print(f"wrote {args.out} ({count_parameters(model)} parameters)")
    return OK


def run_gradcheck(args):
    unknown = [op for op in args.op if op not in gradcheck.ALL_CHECKS]
    if unknown:
        raise UsageError(f"unknown --op {', '.join(unknown)}; choose from {', '.join(gradcheck.ALL_CHECKS)}")
    report = gradcheck.run_gradcheck(args.op or None, seed=args.seed, instances=args.instances, log=print)
    failing = [name for name, (err, _) in report.items() if not err < gradcheck.TOLERANCE]
    total = sum(seconds for _, seconds in report.values())
    print(f"{len(report)} checks in {total:.1f}s, tolerance {gradcheck.TOLERANCE:g}")
    if failing:
        print("failing: " + ", ".join(failing))
        return FAILURE
    return OK


def run_inspect(args):
    if args.checkpoint:
        ckpt = ckpt_io.load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(ckpt, args.set)
        model, _ = restore_model(ckpt, cfg)
        print(f"checkpoint epoch {ckpt.epoch} step {ckpt.step} digest {ckpt.digest.hex()[:16]}")
    else:
        cfg = load_config(args.config, args.set)
        model = build_model(cfg)
    print(dumps(cfg))
    print(f"parameters    {count_parameters(model)}")
    if cfg.model.mode != VANILLA:
        print(f"ensemble      {count_parameters(model.ensemble)}")
        print(f"fusion head   {count_parameters(model.head)} ({100 * model.fusion_overhead():.2f}% of ensemble)")
        if isinstance(model.head, FusionModule):
            print(f"fusion M={model.head.cfg.M} N={model.head.cfg.N}")
    return OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ffl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="verb", required=True)

    def overrides(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, applied after the config file (repeatable)")

    p = sub.add_parser("train", help="train a model described by a config file")
    p.add_argument("--config", help="TOML config file (defaults apply when omitted)")
    overrides(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    overrides(p)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("export", help="extract one sub-network or the fused path")
    p.add_argument("--checkpoint", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--branch", type=int, help="sub-network index")
    which.add_argument("--fused", action="store_true", help="keep trunk, branches and fusion head")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=run_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--op", action="append", default=[], help="restrict to this check (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20, help="random instances per op")
    p.set_defaults(func=run_gradcheck)

    p = sub.add_parser("inspect", help="print resolved config and parameter counts")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    overrides(p)
    p.set_defaults(func=run_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE
    except (FFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
