"""Command-line entry point: ``crfgan <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import CrfGanError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crfgan", description="CRF-guided memory-efficient 3D GAN toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a synthetic phantom dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("train", help="train on a directory of volumes")
    s.add_argument("--config", help="JSON file with TrainConfig keys")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)

    s = sub.add_parser("generate", help="sample full volumes from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--stitched", action="store_true",
                   help="also generate slab-by-slab and write a consistency report")

    s = sub.add_parser("reconstruct", help="encode a volume with E and decode it with G2")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="FID / MMD between two volume directories")
    s.add_argument("--real-dir", required=True)
    s.add_argument("--fake-dir", required=True)
    s.add_argument("--metric", choices=("fid", "mmd", "both"), default="both")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("bench", help="parameter / memory / speed tables")
    s.add_argument("--config")
    s.add_argument("--what", choices=("params", "memory", "speed"), required=True)
    s.add_argument("--csv", help="also write the table as CSV")
    s.add_argument("--steps", type=int, default=10)
    return p


def _load_dir(directory):
    from .volume import list_volumes, load_volume

    paths = list_volumes(directory)
    if not paths:
        raise CrfGanError(f"no volumes found in {directory}")
    return [load_volume(p) for p in paths]


def cmd_phantom(args) -> int:
    from .volume import write_phantom_dataset

    paths = write_phantom_dataset(args.out_dir, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} phantoms to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    overrides = {"iterations": args.iterations, "seed": args.seed, "batch_size": args.batch_size}
    if args.config:
        cfg = TrainConfig.load(args.config, **overrides)
    else:
        cfg = TrainConfig.from_dict({}, **overrides)
    volumes = _load_dir(args.data_dir)
    result = train(cfg, volumes, out_dir=args.out_dir, resume=args.resume)
    print(f"finished at iteration {result.state.iteration}; checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .inference import generate_full, generate_stitched, g2_radius, consistency_report
    from .trainer import load_state
    from .volume import save_volume

    state = load_state(args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    z = torch.randn(args.count, state.config.latent_dim, generator=gen)
    reports = []
    for i in range(args.count):
        full = generate_full(state, z[i])
        save_volume(full, out / f"gen_{i:05d}.raw")
        if args.stitched:
            stitched = generate_stitched(state, z[i])
            save_volume(stitched, out / f"gen_{i:05d}_stitched.raw")
            geom = state.geometry
            rep = consistency_report(full, stitched, g2_radius(state), geom.extent * geom.scale)
            reports.append({"index": i, **rep.to_dict()})
    print(f"wrote {args.count} volumes to {out}")
    if args.stitched:
        path = out / "consistency.json"
        path.write_text(json.dumps(reports, indent=2))
        print(f"consistency report: {path}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .netspec import g2_forward
    from .trainer import encode_full, load_state
    from .volume import Volume3D, load_volume, save_volume

    state = load_state(args.checkpoint)
    vol = load_volume(args.input)
    x = torch.from_numpy(vol.voxels)[None, None].to(state.config.dtype)
    with torch.no_grad():
        x_hat = g2_forward(state.g2, encode_full(state.enc, x, state.geometry))
    save_volume(Volume3D(x_hat[0, 0].float().numpy()), args.out)
    print(f"l1 {float((x - x_hat).abs().mean()):.6f}; wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import FeatureExtractor, extract_features, fid, mmd

    ex = FeatureExtractor(args.seed)
    real = extract_features(_load_dir(args.real_dir), ex)
    fake = extract_features(_load_dir(args.fake_dir), ex)
    report = []
    if args.metric in ("fid", "both"):
        report.append({"metric": "fid", "value": fid(real, fake)})
    if args.metric in ("mmd", "both"):
        report.append({"metric": "mmd", "value": mmd(real, fake)})
    for r in report:
        r.update(n_real=len(real), n_fake=len(fake), extractor_fingerprint=ex.fingerprint)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import bench
    from .trainer import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.what == "params":
        rows = bench.param_table(cfg)
    elif args.what == "memory":
        rows = bench.memory_table(cfg)
    else:
        res = bench.measure_speed(cfg, args.steps)
        rows = [{"resolution": cfg.resolution, "batch": cfg.batch_size,
                 "iters_per_sec": res.iters_per_sec, "median_step_s": res.median_step_seconds}]
        print(json.dumps(res.environment))
    print(bench.format_table(rows))
    if args.csv:
        bench.write_csv(rows, args.csv)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, stream=sys.stdout, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CrfGanError, OSError, ValueError) as exc:
        print(f"crfgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
