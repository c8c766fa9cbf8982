#!/usr/bin/env python3
"""End-to-end desk-scale ablation: toy sources -> synthetic haze dataset ->
proxy depth fit -> ablation grid -> combined results table.

Everything runs through the CLI so the artifacts match what the commands
produce individually. With --dry-run only parameter/FLOP counts are reported.
"""

import argparse
import sys
from pathlib import Path

from octdehaze import cli
from octdehaze.toydata import write_toy_sources


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sources", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--max-steps", type=int, default=None)
    ap.add_argument("--rows", default=None, help="comma-separated GEN/DISC/LOSS subset")
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    if args.dry_run:
        argv = ["ablate", "--dry-run", "--out", str(args.out / "ablation"),
                "--paper-scale", "--seed", str(args.seed)]
        if args.rows:
            argv += ["--rows", args.rows]
        return cli.main(argv)

    src_dir = args.out / "sources"
    write_toy_sources(src_dir, args.sources, size=args.size, seed=args.seed)

    data_dir = args.out / "dataset"
    rc = cli.main(["synth", "--sources", str(src_dir), "--out", str(data_dir),
                   "--per-image", "2", "--seed", str(args.seed)])
    if rc:
        return rc

    proxy_path = args.out / "proxy.ckpt"
    rc = cli.main(["fit-depth-proxy", "--sources", str(src_dir),
                   "--out", str(proxy_path), "--seed", str(args.seed)])
    if rc:
        return rc

    argv = ["ablate", "--data", str(data_dir), "--out", str(args.out / "ablation"),
            "--epochs", str(args.epochs), "--seed", str(args.seed),
            "--image-size", str(args.size),
            "--depth-backend", "proxy", "--proxy-ckpt", str(proxy_path)]
    if args.max_steps is not None:
        argv += ["--max-steps", str(args.max_steps)]
    if args.rows:
        argv += ["--rows", args.rows]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
