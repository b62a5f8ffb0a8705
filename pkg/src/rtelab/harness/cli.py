"""``rtelab`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import COMMANDS, ConfigError, load_config
from .runner import run

__all__ = ["main", "build_parser"]

_HELP = {
    "solve": "scalar flux and current for each epsilon and boundary mode",
    "matrix": "assemble the truncated Gamma matrix for each epsilon",
    "decay": "entry-decay fits across the epsilon list",
    "diffuse": "transport vs diffusion-limit interior error",
    "entropy": "truncation orders, net cardinalities and packing counts",
    "omega": "solve the modulus equation on a (t, epsilon) grid",
    "probe": "instability probe for a bump pair across epsilon",
    "sweep": "run the commands listed under 'sweep' in the config",
    "kernelcheck": "closed-form vs quadrature kernel transform",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtelab", description="Radiative-transport inverse-problem lab on the unit disk.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for c in COMMANDS:
        sp = sub.add_parser(c, help=_HELP[c])
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--workers", type=int, help="concurrent cases (overrides the config)")
        sp.add_argument("--seed", type=int, help="random seed, unsigned 64-bit (overrides the config)")
    return p


def _error(kind: str, message: str) -> int:
    print("error: " + json.dumps({"type": kind, "message": message}), file=sys.stderr)
    return 2


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(out=args.out, workers=args.workers, seed=args.seed)
    except ConfigError as exc:
        return _error("ConfigError", str(exc))
    status, summary = run(args.command, cfg)
    print(json.dumps({"command": args.command, "status": summary["status"], "out": cfg.out,
                      "config_hash": summary["config_hash"], "failures": len(summary["failures"])}))
    return status


if __name__ == "__main__":
    sys.exit(main())
