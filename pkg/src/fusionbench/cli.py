"""Command-line entry point.

Exit status: 0 on success, 1 for usage or configuration errors, 2 for data
or parse errors (including missing upstream artifacts).
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

from . import pipeline as P
from .config import ExperimentConfig
from .errors import ConfigError, FusionBenchError

COMMANDS = ("gen-data", "pretrain", "train", "attack", "curve", "analyze", "reproduce", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="key=value config file")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=d, help="override one config key")
    parser.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="single-threaded numerics for bitwise reproducibility")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="recompute outputs even when up to date")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusionbench", description="Foreground/background late-fusion robustness experiments.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "generate (or ingest) the dataset",
        "pretrain": "pretrain the foreground and background extractors",
        "train": "train heads, the alpha sweep and the retrained baseline",
        "attack": "craft FGSM on the source model and score every model",
        "curve": "accuracy curves over the sigma and epsilon grids",
        "analyze": "feature-shift, PCA and head-weight reports",
        "reproduce": "run every stage a figure needs",
        "report": "collect headline numbers from all modes",
    }
    subs = {}
    for name in COMMANDS:
        subs[name] = sub.add_parser(name, help=helps[name], description=helps[name])
        _common(subs[name], suppress=True)
    subs["train"].add_argument("--only", choices=("base", "alpha", "adv"), action="append",
                               help="restrict to one model group (repeatable)")
    subs["curve"].add_argument("--kind", choices=("sigma", "epsilon"), action="append",
                               help="restrict to one curve axis (repeatable)")
    subs["reproduce"].add_argument("figure", choices=sorted(P.FIGURES))
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value)
    if os.environ.get("FUSIONBENCH_OUT"):
        cfg.set("output.dir", os.environ["FUSIONBENCH_OUT"])
    return cfg.validate()


def _single_threaded():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _report(cfg, root: Path, force=False):
    modes = [m for m in ("dissimilar", "similar", "uniform") if (root / m).is_dir()]
    if not modes:
        raise FileNotFoundError(f"no experiment outputs under {root}")
    summary = P.summarize(root, modes)
    lines = []
    for k, v in summary.items():
        lines.append(f"{k}={','.join(f'{x:g}' for x in v)}" if isinstance(v, list) else f"{k}={v:.6f}")
    hdr = f"# config_hash={cfg.hash('report')}\n# stage=report\n# modes={','.join(modes)}\n"
    root.mkdir(parents=True, exist_ok=True)
    (root / "report.txt").write_text(hdr + "\n".join(lines) + "\n")
    return f"{len(lines)} entries from {', '.join(modes)} -> {root / 'report.txt'}"


def execute(args, cfg: ExperimentConfig) -> str:
    root = Path(cfg["output.dir"])
    cmd = args.command
    if cmd == "report":
        return _report(cfg, root)
    if cmd == "reproduce":
        spaces, summary = P.reproduce(cfg, args.figure, root, force=args.force)
        body = "".join(f"{k}={','.join(f'{x:g}' for x in v) if isinstance(v, list) else f'{v:.6f}'}\n"
                       for k, v in summary.items())
        hdr = f"# config_hash={cfg.hash('report')}\n# stage=reproduce\n# figure={args.figure}\n"
        (root / f"{args.figure}.txt").write_text(hdr + body)
        return f"{args.figure}: {len(spaces)} mode(s) -> {root / (args.figure + '.txt')}"
    ws = P.Workspace(cfg, root, force=args.force)
    if cmd == "gen-data":
        return P.stage_data(ws)
    if cmd == "pretrain":
        return P.stage_pretrain(ws)
    if cmd == "train":
        return P.stage_train(ws, tuple(args.only or ("base", "alpha", "adv")))
    if cmd == "attack":
        return P.stage_attack(ws)
    if cmd == "curve":
        return P.stage_curve(ws, tuple(args.kind or ("sigma", "epsilon")))
    if cmd == "analyze":
        return P.stage_analyze(ws)
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args)
        guard = _single_threaded() if args.deterministic else contextlib.nullcontext()
        with guard:
            msg = execute(args, cfg)
    except ConfigError as exc:
        print(f"fusionbench {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except (FusionBenchError, FileNotFoundError, ValueError) as exc:
        print(f"fusionbench {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    print(f"fusionbench {args.command} [{cfg.mode} {cfg.hash(args.command)}]: {msg}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
