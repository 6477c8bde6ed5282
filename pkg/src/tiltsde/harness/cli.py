"""``tiltsde`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, TiltError
from ..problem import CATALOG
from .config import SWEEP_AXES, ExperimentConfig, default_config
from .pipeline import cmd_finetune, cmd_sample_pretrained, cmd_sweep, cmd_validate

log = logging.getLogger("tiltsde")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="JSON experiment config")
    src.add_argument("--instance", choices=sorted(CATALOG), help="start from a built-in toy instance")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--divergence", choices=["kl", "forward-kl", "gamma"])
    p.add_argument("--epsilon", type=float, help="score perturbation size")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--paths", type=_positive_int, help="number of simulated paths")
    p.add_argument("--steps", type=_positive_int, help="number of time steps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiltsde", description="Reward fine-tuning of toy diffusion samplers.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    sub.add_parser("sample-pretrained", parents=[common], help="simulate the pretrained sampler")
    sub.add_parser("finetune", parents=[common], help="solve and simulate the fine-tuned sampler")
    sub.add_parser("validate", parents=[common], help="run the check suite; nonzero exit on failure")
    sw = sub.add_parser("sweep", parents=[common], help="one fine-tuning run per axis value")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", help="comma separated values (default: the config's sweep list)")
    cfg = sub.add_parser("config", help="config utilities")
    cfg_sub = cfg.add_subparsers(dest="config_command", required=True)
    d = cfg_sub.add_parser("default", help="print the default config with every field explicit")
    d.add_argument("--instance", choices=sorted(CATALOG))
    d.add_argument("--out", metavar="PATH", help="write to a file instead of stdout")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    elif getattr(args, "instance", None):
        cfg = ExperimentConfig.from_instance(args.instance)
    else:
        cfg = default_config()
    if args.seed is not None:
        cfg.simulation.seed = args.seed
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.divergence is not None:
        cfg.divergence.name = args.divergence
    if args.gamma is not None:
        cfg.divergence.gamma = args.gamma
    if args.epsilon is not None:
        cfg.epsilon = args.epsilon
    if args.out is not None:
        cfg.outputs = args.out
    if args.paths is not None:
        cfg.simulation.n_paths = args.paths
    if args.steps is not None:
        cfg.simulation.n_steps = args.steps
    cfg.validate()
    return cfg


def _parse_values(axis: str, text):
    if text is None:
        return None
    items = [s.strip() for s in text.split(",") if s.strip()]
    return items if axis == "divergence" else [float(s) for s in items]


def _summary(metrics: dict, keys) -> str:
    return "\n".join(f"{k:>16s}  {metrics[k]:.6g}" for k in keys if isinstance(metrics.get(k), (int, float)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config":
            cfg = ExperimentConfig.from_instance(args.instance) if args.instance else default_config()
            if args.out:
                cfg.save(args.out)
            else:
                sys.stdout.write(cfg.dumps())
            return 0
        cfg = resolve_config(args)
        if args.command == "sample-pretrained":
            res = cmd_sample_pretrained(cfg)
            print(_summary(res.metrics, ["n_paths", "tv_to_data", "mean_reward", "reward_std"]))
        elif args.command == "finetune":
            res = cmd_finetune(cfg)
            print(_summary(res.metrics, ["n_paths", "mean_reward", "reward_std", "kl_to_pre", "tv_to_target",
                                         "log_C"]))
            for name, rep in res.bounds.items():
                if isinstance(rep, dict) and "holds" in rep:
                    print(f"{'bound ' + name:>16s}  {'holds' if rep['holds'] else 'VIOLATED'}"
                          f"  lhs={rep['lhs']:.4g} rhs={rep['rhs']:.4g}")
        elif args.command == "validate":
            res = cmd_validate(cfg)
            for c in res.checks:
                tag = "PASS" if c["passed"] else ("INFO" if c["informational"] else "FAIL")
                print(f"{tag}  {c['name']}")
            print(f"{res.metrics['n_failed']} of {res.metrics['n_checks']} checks failed")
            return 0 if res.passed else 1
        elif args.command == "sweep":
            res = cmd_sweep(cfg, args.axis, _parse_values(args.axis, args.values))
            sys.stdout.write(res.files["csv_text"])
        for name, path in sorted(res.files.items()):
            if name != "csv_text":
                log.info("wrote %s", path)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TiltError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
