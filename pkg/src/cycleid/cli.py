"""Command-line entry point: gen-data, train, eval, generate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .config import RunConfig, load_config
from .dataset import FRONTAL, PROFILE, DatasetFile, build_dataset, preprocess, split
from .evaluation import (MetricsReport, cycle_metrics, cycle_reconstruct,
                         encode_samples, export_report, pair_mosaic,
                         pixel_probe, pose_leakage_probe, tsne_project,
                         verification, write_pgm)
from .networks import decode, encode
from .tensor import Tensor, no_grad
from .training import (TrainAbort, checkpoint_load, pose_onehot, train)


class UsageError(Exception):
    pass


def cmd_gen_data(args) -> int:
    if args.ids < 1 or args.frontal < 1 or args.profile < 1:
        raise UsageError("--ids, --frontal and --profile must all be >= 1")
    if args.side < 16:
        raise UsageError("--side must be >= 16")
    ds = build_dataset(args.ids, args.frontal, args.profile, args.side,
                       args.seed)
    ds.save(args.out)
    print(f"identities={ds.num_identities} samples={ds.num_samples} "
          f"file={args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dataset:
        cfg.dataset = args.dataset
    if not cfg.dataset:
        raise UsageError("no dataset: set `dataset = <path>` or pass --dataset")
    if not os.path.exists(cfg.dataset):
        print(f"dataset not found: {cfg.dataset}", file=sys.stderr)
        return 1
    run_dir = args.out or f"run_{int(time.time())}_{cfg.seed}"
    state = checkpoint_load(args.resume) if args.resume else None
    try:
        train(cfg, run_dir, state=state)
    except TrainAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    print(f"run_dir={run_dir}")
    return 0


def _load_eval_inputs(args):
    state = checkpoint_load(args.checkpoint)
    cfg = state.cfg
    ds = DatasetFile.load(args.dataset)
    if ds.side < cfg.crop_side:
        print(f"checkpoint expects crop {cfg.crop_side}, dataset side is "
              f"{ds.side}", file=sys.stderr)
        sys.exit(1)
    _train_ids, test_ids = split(ds, cfg.train_fraction, cfg.split_seed)
    return state, cfg, ds, ds.indices_for(test_ids)


def cmd_eval(args) -> int:
    state, cfg, ds, idx = _load_eval_inputs(args)
    protocols = ["ff", "fp"] if args.protocol == "both" else [args.protocol]
    if "fp" in protocols and not np.any(ds.pose_labels[idx] == PROFILE):
        print("protocol fp requires profile samples in the test split",
              file=sys.stderr)
        return 1
    probe = pose_leakage_probe(state.gen, ds, idx, cfg.crop_side,
                               cfg.probe_steps, seed=cfg.eval_seed)
    pix = pixel_probe(ds, idx, cfg.crop_side, cfg.probe_steps,
                      seed=cfg.eval_seed)
    mse, psnr = cycle_metrics(state.gen, ds, idx, cfg.crop_side, cfg.d_z,
                              cfg.eval_seed)
    results = {"ff": (0.0, 0), "fp": (0.0, 0)}
    for proto in protocols:
        acc, _thr, n_pairs = verification(state.gen, ds, idx, cfg.crop_side,
                                          proto)
        results[proto] = (acc, n_pairs)
    report = MetricsReport(
        pose_probe_accuracy=probe, pixel_probe_accuracy=pix,
        cycle_mse=mse, cycle_psnr=psnr,
        verification_ff=results["ff"][0], verification_fp=results["fp"][0],
        n_probe=len(idx), n_cycle=len(idx),
        n_pairs_ff=results["ff"][1], n_pairs_fp=results["fp"][1],
    )
    codes = encode_samples(state.gen, ds, idx, cfg.crop_side)
    projection = None
    if len(idx) >= 3 * cfg.tsne_perplexity:
        projection = tsne_project(
            codes, cfg.tsne_perplexity, cfg.tsne_iterations, cfg.eval_seed,
            identity_labels=ds.identity_labels[idx],
            pose_labels=ds.pose_labels[idx])
    rng = np.random.default_rng(cfg.eval_seed)
    X = Tensor(np.stack([preprocess(ds.images[i], cfg.crop_side).data
                         for i in idx]))
    yp = ds.pose_labels[idx].astype(np.int64)
    xtilde = cycle_reconstruct(state.gen, X, yp, cfg.d_z, rng)
    mosaic = pair_mosaic(list(X.data), list(xtilde.data))
    export_report(report, projection, args.out, mosaic)
    for name, v in (("pose_probe_accuracy", probe),
                    ("pixel_probe_accuracy", pix), ("cycle_mse", mse),
                    ("cycle_psnr", psnr),
                    ("verification_ff", report.verification_ff),
                    ("verification_fp", report.verification_fp)):
        print(f"{name}={v:.6g}")
    return 0


def cmd_generate(args) -> int:
    state, cfg, ds, idx = _load_eval_inputs(args)
    count = args.count
    if count > len(idx):
        print(f"warning: --count {count} clamped to test size {len(idx)}",
              file=sys.stderr)
        count = len(idx)
    idx = idx[:count]
    pose = FRONTAL if args.pose == "frontal" else PROFILE
    rng = np.random.default_rng(cfg.eval_seed)
    X = Tensor(np.stack([preprocess(ds.images[i], cfg.crop_side).data
                         for i in idx]))
    with no_grad():
        idc, _ = encode(state.gen, X, training=False)
        z = Tensor(rng.standard_normal((len(idx), cfg.d_z)).astype(np.float32))
        out = decode(state.gen, idc,
                     pose_onehot(np.full(len(idx), pose, dtype=np.int64)), z,
                     training=False)
    mosaic = pair_mosaic(list(X.data), list(out.data))
    write_pgm(args.out, mosaic)
    print(f"pairs={len(idx)} file={args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cycleid",
        description="Cyclic weight-shared GAN for pose-invariant identity "
                    "latents on procedural glyphs.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a glyph dataset file")
    g.add_argument("--ids", type=int, required=True)
    g.add_argument("--frontal", type=int, required=True)
    g.add_argument("--profile", type=int, required=True)
    g.add_argument("--side", type=int, default=40)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="glyphs.pigd")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config", help="run configuration (`key = value` lines)")
    t.add_argument("--dataset", help="override the dataset path")
    t.add_argument("--out", help="run directory (default run_<time>_<seed>)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--protocol", choices=["ff", "fp", "both"], default="both")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(fn=cmd_eval)

    ge = sub.add_parser("generate", help="synthesize at a chosen pose")
    ge.add_argument("checkpoint")
    ge.add_argument("dataset")
    ge.add_argument("--pose", choices=["frontal", "profile"],
                    default="frontal")
    ge.add_argument("--count", type=int, default=8)
    ge.add_argument("--out", default="generated.pgm")
    ge.set_defaults(fn=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
