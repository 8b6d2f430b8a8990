#!/usr/bin/env python3
"""End-to-end planted experiment: generate, label, train, evaluate, render.

Everything goes through the CLI so each stage leaves a run manifest, and the
whole run is reproducible from those manifests.

    python scripts/run_pipeline.py --out runs/demo --n-samples 128 --epochs 10
"""

import argparse
import json
import sys
from pathlib import Path

from evocomp.cli import main as evocomp_main


def run(args: list[str]) -> None:
    print("+ evocomp " + " ".join(args))
    code = evocomp_main(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--n-samples", type=int, default=128)
    parser.add_argument("--tokens", type=int, default=24)
    parser.add_argument("--groups", type=int, default=6)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    out = Path(args.out)
    data = out / "data"
    run([
        "gen", "--family", "planted", "--n-samples", str(args.n_samples),
        "--tokens", str(args.tokens), "--groups", str(args.groups),
        "--dim", str(args.dim), "--seed", str(args.seed), "--out", str(data),
    ])
    run([
        "label", "--data", str(data / "samples.evc"), "--anchors", str(data / "anchors.evc"),
        "--scorer", "planted", "--scorer-seed", str(args.seed), "--seed", str(args.seed),
        "--workers", str(args.workers), "--out", str(out / "labels.jsonl"),
        "--trace", str(out / "trace.jsonl"),
    ])
    run([
        "train", "--data", str(data / "samples.evc"), "--labels", str(out / "labels.jsonl"),
        "--out", str(out / "params.evp"), "--history", str(out / "history.csv"),
        "--epochs", str(args.epochs), "--seed", str(args.seed),
    ])
    run([
        "eval", "--data", str(data / "samples.evc"), "--params", str(out / "params.evp"),
        "--labels", str(out / "labels.jsonl"), "--truth", str(data / "truth.jsonl"),
        "--out", str(out / "metrics.json"),
    ])
    run([
        "compress", "--data", str(data / "samples.evc"), "--params", str(out / "params.evp"),
        "--ratio", str(args.groups / args.tokens), "--out", str(out / "masks.jsonl"),
    ])
    run([
        "render", "--masks", str(out / "masks.jsonl"), "--sample-id", "s00000",
        "--width", str(min(args.tokens, 8)), "--out", str(out / "grid.txt"),
    ])
    aggregate = json.loads((out / "metrics.json").read_text())["aggregate"]
    print("\nfirst predicted mask:\n" + (out / "grid.txt").read_text())
    print(json.dumps(aggregate, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
