#!/usr/bin/env python3
"""Run the criterion-7 pipeline once and freeze its exact metrics/checksums
into tests/data/acceptance7_expected.json. Run from the repository root after
any change that legitimately alters pipeline outputs."""

import json
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "tests"))

from acceptance_pipeline import run_planted_pipeline  # noqa: E402


def main() -> None:
    out = REPO / "tests" / "data" / "acceptance7_expected.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        result = run_planted_pipeline(Path(tmp))
    out.write_text(json.dumps(result["oracle_values"], indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    print(json.dumps(result["oracle_values"], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
