"""Command-line entry points: synth, fit-depth-proxy, train, eval, ablate.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
Every command writes its fully resolved configuration next to its outputs.
A JSON config file (``--config``) supplies defaults; explicit flags override.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import depth_proxy, haze_synth, metrics, networks, trainer
from .archive import load_archive, save_archive
from .errors import (
    CheckpointMismatchError,
    ConfigurationError,
    DepthBackendError,
    ValidationError,
)
from .losses import LOSS_FLAG_VOCAB, make_extractor

CONFIG_SCHEMA_VERSION = 1

DEFAULT_ABLATION_GRID = [
    ("9B", "3L", "base"),
    ("6B-SA", "3L-SA", "base"),
    ("6B-Oct", "3L", "base"),
    ("6B-Oct", "3L", "CPD"),
    ("6B-Oct", "3L", "SSIM"),
    ("6B-Oct", "3L-Oct", "CPD"),
    ("6B-Oct", "3L-Oct", "SSIM"),
    ("6B-Oct", "3L-OctN", "CPD"),
    ("6B-Oct", "3L-OctN", "SSIM"),
]


def _add_shared(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="JSON config file with defaults")
    p.add_argument("--out", type=Path, required=True)


def _add_scale(p):
    p.add_argument("--paper-scale", action="store_true",
                   help="width-64 networks at 256x256 (default is desk scale: width 32)")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--dry-run", action="store_true",
                   help="print parameter/FLOP counts and exit without training")


def _add_model(p):
    p.add_argument("--gen", default="6B-Oct", help="generator name (9B, 6B, 6B-SA, 6B-Oct)")
    p.add_argument("--disc", default="3L-OctN", help="discriminator name (3L, 3L-SA, 3L-Oct, 3L-OctN)")
    p.add_argument("--loss", default="base", help=f"loss flag, one of {list(LOSS_FLAG_VOCAB)}")
    p.add_argument("--depth-backend", default="stub",
                   choices=list(depth_proxy.BACKENDS))
    p.add_argument("--depth-weights", type=Path, help="pretrained depth weights path")
    p.add_argument("--proxy-ckpt", type=Path, help="fitted proxy checkpoint")


def _apply_config_file(args, parser):
    if args.config is None:
        return
    doc = json.loads(Path(args.config).read_text())
    version = doc.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported config schema_version {version}")
    defaults = {a.dest: a.default for a in parser._actions}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigurationError(f"unknown config key '{key}'")
        # flags given explicitly (i.e. differing from the parser default) win
        if getattr(args, dest) == defaults.get(dest):
            setattr(args, dest, value)


def _write_resolved_config(args, out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": CONFIG_SCHEMA_VERSION, "command": command}
    for key, value in sorted(vars(args).items()):
        if key in ("config", "func", "parser"):
            continue
        doc[key] = str(value) if isinstance(value, Path) else value
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


def _scale_params(args):
    if args.paper_scale:
        width = 64
        image_size = args.image_size or 256
    else:
        width = 32
        image_size = args.image_size or 64
    return width, image_size


def _make_depth_estimator(args):
    if args.depth_backend == "proxy" and args.proxy_ckpt is not None:
        return load_proxy(args.proxy_ckpt)
    return depth_proxy.get_backend(args.depth_backend, weights_path=args.depth_weights)


def save_proxy(model: depth_proxy.ProxyDepth, path):
    tensors = {f"proxy.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_archive(path, tensors, {"backend": "proxy"})


def load_proxy(path) -> depth_proxy.ProxyDepth:
    tensors, meta = load_archive(path)
    if meta.get("backend") != "proxy":
        raise CheckpointMismatchError(f"'{path}' is not a proxy depth checkpoint")
    sd = {k[len("proxy."):]: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    width = sd["net.2.weight"].shape[0]
    model = depth_proxy.ProxyDepth(width=width)
    model.load_state_dict(sd)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    sources = haze_synth.load_rgbd_dir(args.sources)
    pairs, manifest = haze_synth.synthesize_dataset(
        sources,
        samples_per_image=args.per_image,
        a_range=tuple(args.a_range),
        beta_range=tuple(args.beta_range),
        seed=args.seed,
    )
    path = haze_synth.write_dataset(pairs, manifest, args.out)
    _write_resolved_config(args, Path(args.out), "synth")
    print(f"wrote {len(pairs)} pairs to {args.out} (manifest: {path})")
    return 0


def cmd_fit_depth_proxy(args):
    sources = haze_synth.load_rgbd_dir(args.sources)
    model, history = depth_proxy.fit_proxy(sources, epochs=args.epochs, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_proxy(model, args.out)
    print(f"fitted proxy on {len(sources)} samples; "
          f"loss {history[0]:.5f} -> {history[-1]:.5f}; saved to {args.out}")
    return 0


def _load_domains(data_dir):
    pairs, _ = haze_synth.load_dataset(data_dir)
    hazy = [p.hazy for p in pairs]
    clear = [p.clear for p in pairs]
    return hazy, clear, pairs


def _dry_run_report(gen_name, disc_name, width, image_size):
    g = networks.build_generator(networks.generator_spec(gen_name, width))
    d = networks.build_discriminator(networks.discriminator_spec(disc_name, width))
    total = 2 * g.param_count + 2 * d.param_count
    g_flops = g.flops((3, image_size, image_size))
    d_flops = d.flops((3, image_size, image_size))
    return {
        "gen": gen_name,
        "disc": disc_name,
        "base_width": width,
        "image_size": image_size,
        "gen_params": g.param_count,
        "disc_params": d.param_count,
        "total_params": total,
        "gen_flops": g_flops,
        "disc_flops": d_flops,
    }


def cmd_train(args):
    width, image_size = _scale_params(args)
    if args.dry_run:
        report = _dry_run_report(args.gen, args.disc, width, image_size)
        print(json.dumps(report, indent=1, sort_keys=True))
        return 0
    hazy, clear, _ = _load_domains(args.data)
    estimator = _make_depth_estimator(args) if args.loss == "CPD" else None
    config = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        gen_name=args.gen,
        disc_name=args.disc,
        loss_flag=args.loss,
        base_width=width,
        image_size=image_size,
        decay_schedule=(args.epochs // 2, args.epochs - args.epochs // 2),
        max_steps=args.max_steps,
    )
    _write_resolved_config(args, args.out, "train")
    result = trainer.train(
        config, hazy, clear,
        run_dir=args.out,
        depth_estimator=estimator,
        extractor=make_extractor("stub", seed=args.seed),
    )
    print(f"trained {result.state.step} steps; log: {result.log_path}; "
          f"checkpoints: {[str(p) for p in result.checkpoint_paths]}")
    return 0


def _build_generator_from_checkpoint(ckpt_path):
    tensors, meta = load_archive(ckpt_path)
    cfg = meta.get("config")
    if cfg is None:
        raise CheckpointMismatchError(f"'{ckpt_path}' carries no training config")
    spec = networks.generator_spec(cfg["gen_name"], cfg["base_width"])
    module = networks.build_generator(spec).module
    prefix = "model.g."
    sd = {k[len(prefix):]: torch.from_numpy(v.copy())
          for k, v in tensors.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(sd)
    except RuntimeError as exc:
        raise CheckpointMismatchError(
            f"checkpoint '{ckpt_path}' does not match generator "
            f"'{cfg['gen_name']}' (width {cfg['base_width']}): {exc}"
        ) from exc
    module.eval()
    return module, cfg


def cmd_eval(args):
    pairs, _ = haze_synth.load_dataset(args.data)
    if args.oracle:
        report = metrics.evaluate(
            metrics.oracle_dehazer(t_min=args.t_min), pairs, pair_aware=True,
            config={"gen": "oracle", "disc": "-", "loss": "-", "seed": args.seed},
        )
    elif args.checkpoint is not None:
        module, cfg = _build_generator_from_checkpoint(args.checkpoint)
        dehazer = metrics.generator_dehazer(module)
        report = metrics.evaluate(
            dehazer, pairs,
            config={"gen": cfg["gen_name"], "disc": cfg["disc_name"],
                    "loss": cfg["loss_flag"], "seed": cfg["seed"]},
        )
        report.param_count = metrics.count_params(module)
    else:
        report = metrics.evaluate(
            metrics.identity_dehazer, pairs,
            config={"gen": "identity", "disc": "-", "loss": "-", "seed": args.seed},
        )
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json())
    table = metrics.format_table([report.table_row()])
    (args.out / "report.txt").write_text(table + "\n")
    _write_resolved_config(args, args.out, "eval")
    print(table)
    return 0


def _parse_grid(rows_arg):
    if not rows_arg:
        return DEFAULT_ABLATION_GRID
    grid = []
    for row in rows_arg.split(","):
        parts = row.strip().split("/")
        if len(parts) != 3:
            raise ValidationError(f"grid row '{row}' is not GEN/DISC/LOSS")
        grid.append(tuple(parts))
    return grid


def cmd_ablate(args):
    width, image_size = _scale_params(args)
    grid = _parse_grid(args.rows)
    args.out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for gen_name, disc_name, loss_flag in grid:
        row_name = f"{gen_name}_{disc_name}_{loss_flag}".replace("/", "-")
        row_dir = args.out / row_name
        try:
            if args.dry_run:
                report = _dry_run_report(gen_name, disc_name, width, image_size)
                report["Loss"] = loss_flag
                row_dir.mkdir(parents=True, exist_ok=True)
                (row_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
                rows.append({
                    "G": gen_name, "D": disc_name, "Loss": loss_flag,
                    "PSNR": "-", "SSIM": "-",
                    "#param": f"{report['total_params'] / 1e6:.2f}M",
                })
                continue
            sub = argparse.Namespace(**vars(args))
            sub.gen, sub.disc, sub.loss = gen_name, disc_name, loss_flag
            sub.out = row_dir
            cmd_train(sub)
            ev = argparse.Namespace(**vars(args))
            ev.checkpoint = row_dir / "ckpt" / "final.ckpt"
            ev.oracle = False
            ev.t_min = 0.05
            ev.out = row_dir / "eval"
            cmd_eval(ev)
            report = json.loads((row_dir / "eval" / "report.json").read_text())
            rows.append({
                "G": gen_name, "D": disc_name, "Loss": loss_flag,
                "PSNR": f"{report['psnr_mean']:.2f}",
                "SSIM": f"{report['ssim_mean']:.3f}",
                "#param": f"{report['param_count'] / 1e6:.2f}M",
            })
        except Exception as exc:  # keep the grid running; report at the end
            failures.append((row_name, exc))
            rows.append({"G": gen_name, "D": disc_name, "Loss": loss_flag,
                         "PSNR": "FAIL", "SSIM": "FAIL", "#param": "-"})
    table = metrics.format_table(rows)
    (args.out / "combined.txt").write_text(table + "\n")
    _write_resolved_config(args, args.out, "ablate")
    print(table)
    for name, exc in failures:
        print(f"row {name} failed: {exc}", file=sys.stderr)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="octdehaze")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a hazy/clear dataset from RGBD sources")
    p.add_argument("--sources", type=Path, required=True)
    p.add_argument("--per-image", type=int, default=4)
    p.add_argument("--a-range", type=float, nargs=2,
                   default=list(haze_synth.DEFAULT_A_RANGE))
    p.add_argument("--beta-range", type=float, nargs=2,
                   default=list(haze_synth.DEFAULT_BETA_RANGE))
    _add_shared(p)
    p.set_defaults(func=cmd_synth, parser=p)

    p = sub.add_parser("fit-depth-proxy", help="fit the proxy depth estimator on RGBD sources")
    p.add_argument("--sources", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=40)
    _add_shared(p)
    p.set_defaults(func=cmd_fit_depth_proxy, parser=p)

    p = sub.add_parser("train", help="train a dehazing model on a synthesized dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=None)
    _add_model(p)
    _add_scale(p)
    _add_shared(p)
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the analytic oracle) on a test set")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--oracle", action="store_true",
                   help="use the analytic scattering inversion instead of a model")
    p.add_argument("--t-min", type=float, default=0.05)
    _add_shared(p)
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("ablate", help="run (a subset of) the ablation grid")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--rows", default=None,
                   help="comma-separated GEN/DISC/LOSS rows; default is the full grid")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=None)
    _add_model(p)
    _add_scale(p)
    _add_shared(p)
    p.set_defaults(func=cmd_ablate, parser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, args.parser)
        return args.func(args)
    except (ValidationError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DepthBackendError, CheckpointMismatchError, Exception) as exc:
        if isinstance(exc, SystemExit):
            raise
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
