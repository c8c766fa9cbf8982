#!/usr/bin/env python3
"""Generate a directory of procedural toy RGBD sources for the synth command."""

import argparse
from pathlib import Path

from octdehaze.toydata import write_toy_sources


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--count", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_toy_sources(args.out, args.count, size=args.size, seed=args.seed)
    print(f"wrote {args.count} toy RGBD sources ({args.size}x{args.size}) to {args.out}")


if __name__ == "__main__":
    main()
