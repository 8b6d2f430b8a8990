import argparse
import sys

from evocomp_bridge.adapters import make_adapter
from evocomp_bridge.server import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="evocomp-bridge", description=__doc__)
    parser.add_argument("--adapter", choices=["echo", "pooled"], default="echo")
    parser.add_argument("--seed", type=int, default=0, help="pooled adapter seed")
    args = parser.parse_args(argv)
    adapter = make_adapter(args.adapter, args.seed)
    return serve(adapter, sys.stdin, sys.stdout)


if __name__ == "__main__":
    sys.exit(main())
