"""Batch figure rendering from run logs and sweep summaries."""

from __future__ import annotations

import argparse
import sys

from .render import FIGURE_KINDS, render
from .schemas import EmptyLog, SchemaMismatch


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sageplots",
        description="Render figures from exploration run logs.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure")
    p.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    p.add_argument("--in", dest="inputs", required=True, nargs="+",
                   help="run logs (or one summary CSV for termination_box)")
    p.add_argument("--out", required=True)
    p.add_argument("--env", dest="env_path",
                   help="environment file for env_overlay")
    p.add_argument("--snapshot-index", type=int, default=-1)
    args = parser.parse_args(argv)
    try:
        render(args.kind, args.inputs, args.out, env_path=args.env_path,
               snapshot_index=args.snapshot_index)
    except (SchemaMismatch, EmptyLog, FileNotFoundError) as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return 1
    print(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
