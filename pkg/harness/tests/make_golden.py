"""Regenerate the golden replies for the conformance corpus.

Run from the harness directory after any intentional behavior change:

    python tests/make_golden.py

Error-text fields embed interpreter tracebacks, so goldens are tied to the
Python minor version they were generated with.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from pivot_harness.runner import HarnessRequest, run_pivot  # noqa: E402

TESTS = Path(__file__).parent
TIMEOUTS = {"infinite_loop.py": 2.0}
DEFAULT_TIMEOUT = 10.0


def main() -> None:
    golden_dir = TESTS / "golden"
    golden_dir.mkdir(exist_ok=True)
    for program in sorted((TESTS / "corpus").glob("*.py")):
        timeout = TIMEOUTS.get(program.name, DEFAULT_TIMEOUT)
        reply = run_pivot(HarnessRequest(
            program_path=program,
            bundle_dir=TESTS / "bundle",
            timeout=timeout,
        ))
        doc = {
            "program": program.name,
            "timeout": timeout,
            "status": reply.status,
            "columns": reply.columns,
            "rows": reply.rows,
            "error_text": reply.error_text,
            "elapsed_ms": reply.elapsed_ms,
        }
        out = golden_dir / (program.stem + ".json")
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        print(f"{program.name}: {reply.status}")


if __name__ == "__main__":
    main()
