"""Command-line transport: ``pivot-harness <program> <bundle_dir> <timeout>``.

Prints exactly one reply document on stdout. Exit code 0 means the transport
worked (the reply may still report an error or timeout); nonzero exit is
reserved for failures of the harness itself.
"""
from __future__ import annotations

import argparse
import sys

from .runner import HarnessRequest, run_pivot


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pivot-harness")
    parser.add_argument("program_path")
    parser.add_argument("bundle_dir")
    parser.add_argument("timeout_seconds", type=float)
    parser.add_argument("--workdir", default=None, help="scratch directory")
    args = parser.parse_args(argv)
    try:
        req = HarnessRequest(program_path=args.program_path,
                             bundle_dir=args.bundle_dir,
                             timeout=args.timeout_seconds,
                             workdir=args.workdir)
        reply = run_pivot(req)
    except (FileNotFoundError, ValueError) as exc:
        print(f"pivot-harness: {exc}", file=sys.stderr)
        return 2
    print(reply.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
