"""Command-line interface: ``flatmae <command> ...``.

Every command writes its resolved configuration as JSON next to its outputs
and exits non-zero on any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import ClipLoader, Shard, read_shard, read_shard_header, write_shard
from .errors import ConfigurationError, FlatMAEError
from .flatgeo import GRID_MAGIC, MESH_MAGIC, build_grid, load_grid, load_mesh, save_grid, save_mesh
from .prep import SurfaceRun, preprocess_run

log = logging.getLogger("flatmae")


# ---------------------------------------------------------------- helpers


def _echo_config(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}.config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True, default=str) + "\n"
    )


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _shard_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.fmshrd")))
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"no such shard or directory: {item}")
    if not paths:
        raise ConfigurationError("no shard files found")
    return paths


def _set_threads():
    import os

    import torch

    cap = os.environ.get("FLATMAE_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


# ---------------------------------------------------------------- commands


def cmd_build_grid(args) -> int:
    mesh = load_mesh(args.mesh)
    grid = build_grid(mesh, args.height, args.width, args.pixel_mm)
    out = Path(args.out)
    save_grid(grid, out)
    _echo_config(
        out.parent,
        "build-grid",
        {"mesh": args.mesh, "height": args.height, "width": args.width, "pixel_mm": args.pixel_mm,
         "valid_pixels": grid.n_valid, "grid_hash": grid.digest().hex()},
    )
    print(f"grid {grid.height}x{grid.width} @ {grid.pixel_mm} mm: {grid.n_valid} valid pixels "
          f"({1 - grid.n_valid / (grid.height * grid.width):.1%} background)")
    return 0


def cmd_make_synth(args) -> int:
    from .synth import SynthSpec, make_mesh, make_parcels, make_run, task_clip_starts

    out = Path(args.out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "shards").mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        n_vertices=args.n_vertices,
        n_classes=args.classes,
        n_components=args.components,
        snr=args.snr,
        n_frames=args.frames,
        tr=args.tr,
        cut_frac=args.cut_frac,
        seed=args.seed,
    )
    mesh = make_mesh(spec)
    save_mesh(mesh, out / "mesh.fmesh")
    grid = build_grid(load_mesh(out / "mesh.fmesh"), args.height, args.width, args.pixel_mm)
    save_grid(grid, out / "grid.fgrid")
    np.save(out / "parcels.npy", make_parcels(grid, args.parcels, seed=args.seed))
    ghash = grid.digest()
    rows = []
    for c in range(spec.n_classes):
        for r in range(args.runs_per_class):
            run, latent = make_run(spec, c, mesh, r)
            name = f"c{c}_r{r:03d}"
            np.savez(out / "runs" / f"{name}.npz", values=run.values, tr=run.tr,
                     subject_id=run.subject_id, run_id=run.run_id, class_id=c)
            frames = preprocess_run(run, grid)
            write_shard(out / "shards" / f"{name}.fmshrd",
                        Shard(frames.astype(np.float32), 1.0, run.subject_id, run.run_id, ghash))
            split = "test" if r == args.runs_per_class - 1 else "val" if r == args.runs_per_class - 2 else "train"
            starts = task_clip_starts(latent, tr=spec.tr)
            rng = np.random.default_rng([args.seed, c, r])
            for s in sorted(rng.choice(starts, size=min(args.clips_per_run, len(starts)), replace=False)):
                rows.append({"shard": f"shards/{name}.fmshrd", "start": int(s), "label": c, "split": split})
    with open(out / "labels.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["shard", "start", "label", "split"])
        w.writeheader()
        w.writerows(rows)
    _echo_config(out, "make-synth", {**vars(args), "grid_hash": ghash.hex(), "std": "population"})
    print(f"wrote {spec.n_classes * args.runs_per_class} runs, {len(rows)} labeled clips to {out}")
    return 0


def cmd_resample(args) -> int:
    grid = load_grid(args.grid)
    with np.load(args.run) as z:
        values = z["values"]
        tr = float(z["tr"]) if "tr" in z else args.tr
        subject = args.subject or (str(z["subject_id"]) if "subject_id" in z else "")
        run_id = args.run_id or (str(z["run_id"]) if "run_id" in z else "")
    if args.tr is not None:
        tr = args.tr
    if tr is None:
        raise ConfigurationError("run file has no 'tr'; pass --tr")
    run = SurfaceRun(values, tr, subject, run_id)
    frames = preprocess_run(run, grid, tr_out=args.tr_out)
    out = Path(args.out)
    write_shard(out, Shard(frames.astype(np.float32), args.tr_out, run.subject_id, run.run_id, grid.digest()))
    _echo_config(out.parent, "resample", {"grid": args.grid, "run": args.run, "tr": tr, "tr_out": args.tr_out,
                                          "out": args.out, "std": "population"})
    print(f"{args.out}: {frames.shape[0]} frames of {frames.shape[1]}x{frames.shape[2]}")
    return 0


MODEL_KEYS = ("enc_dim", "enc_depth", "enc_heads", "dec_dim", "dec_depth", "dec_heads", "p_t", "p", "mlp_ratio")
TRAIN_KEYS = ("batch_size", "base_lr", "warmup_steps", "total_steps", "weight_decay", "mask_ratio", "num_visible", "seed")


def resolve_pretrain_config(args) -> tuple[dict, dict]:
    """Merge JSON config and flag overrides; returns (train config, loader config)."""
    from .mae import MaeConfig, PretrainConfig

    cfg = _load_json(args.config)
    model = dict(cfg.get("model", {}))
    for k in MODEL_KEYS:
        v = getattr(args, k)
        if v is not None:
            model[k] = v
    train = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    for k in TRAIN_KEYS:
        v = getattr(args, k)
        if v is not None:
            train[k] = v
    steps = args.steps if args.steps is not None else cfg.get("steps")
    if steps is None:
        raise ConfigurationError("--steps is required")
    train.setdefault("total_steps", steps)
    train.setdefault("warmup_steps", int(round(steps * 31 / 625)))
    if train["warmup_steps"] >= train["total_steps"]:
        raise ConfigurationError("warmup_steps must be smaller than total_steps")
    if args.mask_ratio is not None and args.num_visible is not None:
        raise ConfigurationError("--mask-ratio and --num-visible are mutually exclusive")
    config = PretrainConfig(model=MaeConfig(**model), **train)
    loader = {
        "buffer": args.buffer if args.buffer is not None else cfg.get("buffer", 2048),
        "workers": args.workers if args.workers is not None else cfg.get("workers", 1),
        "steps": steps,
    }
    return config.to_dict(), loader


def cmd_pretrain(args) -> int:
    from .mae import PretrainConfig, pretrain, save_model

    _set_threads()
    train_cfg, loader_cfg = resolve_pretrain_config(args)
    config = PretrainConfig.from_dict(train_cfg)
    grid = load_grid(args.grid)
    ghash = grid.digest()
    shards = _shard_paths(args.shards)
    out = Path(args.out_dir)
    _echo_config(out, "pretrain", {"train": train_cfg, "loader": loader_cfg, "grid": args.grid,
                                   "grid_hash": ghash.hex(), "shards": [str(s) for s in shards],
                                   "resume": args.resume})
    loader = ClipLoader(shards, batch_size=config.batch_size, capacity=loader_cfg["buffer"],
                        workers=loader_cfg["workers"], seed=config.seed, clip_len=config.clip_len,
                        grid_hash=ghash)
    trace_path = out / "loss_trace.csv"
    mode = "a" if args.resume else "w"
    with open(trace_path, mode, newline="") as f:
        w = csv.writer(f)
        if not args.resume:
            w.writerow(["step", "loss", "lr"])

        def on_step(step, loss, lr):
            w.writerow([step, repr(loss), repr(lr)])
            if args.log_every and step % args.log_every == 0:
                log.info("step %d loss %.6f lr %.3g", step, loss, lr)

        result = pretrain(config, loader, grid.valid_pixel, steps=loader_cfg["steps"],
                          resume=args.resume, on_step=on_step, grid_hash=ghash.hex())
    save_model(out / "checkpoint.fmckpt", result.model, result.state, {"grid_hash": ghash.hex()})
    print(f"trained {result.state.step} steps; final loss {result.losses[-1] if result.losses else float('nan'):.6f}")
    return 0


def _read_labels(path):
    base = Path(path).parent
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append((base / row["shard"], int(row.get("start") or 0), row["label"], row["split"]))
    return rows


def cmd_probe(args) -> int:
    from .evalprobe import (ConnectomeTransformer, ParcelMap, ProbeClassifier, ProbeConfig,
                            encoder_features, run_sweep, write_results_csv)

    _set_threads()
    rows = _read_labels(args.labels)
    cache: dict = {}
    X, y, split = [], [], []
    for shard_path, start, label, sp in rows:
        if shard_path not in cache:
            cache[shard_path] = read_shard(shard_path).frames
        frames = cache[shard_path]
        X.append(frames[start : start + args.clip_len])
        y.append(label)
        split.append(sp)
    X, y, split = np.asarray(X, dtype=np.float32), np.asarray(y), np.asarray(split)

    config = ProbeConfig(
        epochs=args.epochs, batch_size=args.batch_size, heads=args.heads, seed=args.seed,
        lr_scales=tuple(args.lr_scales), weight_decays=tuple(args.weight_decays),
    )
    if args.features == "mae":
        from .mae import load_model

        if not args.checkpoint:
            raise ConfigurationError("--features mae needs --checkpoint")
        model, _, _ = load_model(args.checkpoint)
        feats = encoder_features(model, X)
        est = ProbeClassifier(kind="attentive")
    elif args.features == "connectome":
        if not args.parcels:
            raise ConfigurationError("--features connectome needs --parcels")
        feats = ConnectomeTransformer(ParcelMap.from_labels(np.load(args.parcels))).fit(X).transform(X)
        est = ProbeClassifier(kind="linear")
    else:
        from .token import build_layout

        valid = load_grid(args.grid).valid_pixel if args.grid else X.any(axis=(0, 1))
        layout = build_layout(valid, args.p_t, args.p, args.clip_len)
        feats = X
        est = ProbeClassifier(kind="patch_embed", layout=layout, embed_dim=args.embed_dim)
    splits = {s: (feats[split == s], y[split == s]) for s in ("train", "val", "test")}
    result = run_sweep(est, splits, config, n_jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(result, out)
    _echo_config(out.parent, "probe", {**vars(args), "best": result.best_params,
                                       "val_accuracy": result.best_val_accuracy,
                                       "test_accuracy": result.test_accuracy})
    print(f"best {result.best_params} val {result.best_val_accuracy:.4f} test {result.test_accuracy:.4f} "
          f"({len(result.rows)} configs)")
    return 0


def cmd_fit_scaling(args) -> int:
    from .scalefit import fit_power_law, read_runs_csv, relative_residuals, select_points

    points = select_points(read_runs_csv(args.runs))
    fit = fit_power_law(points, use_first_k=args.first_k)
    held = sorted(points, key=lambda p: p.n)[fit.n_points:]
    record = {"a": fit.a, "b": fit.b, "r2": fit.r2, "n_points": fit.n_points,
              "points": [{"n": p.n, "loss": p.loss, "epoch": p.epoch} for p in points]}
    if held:
        record["held_out_relative_residual"] = [
            {"n": p.n, "residual": float(r)} for p, r in zip(held, relative_residuals(fit, held))
        ]
    text = json.dumps(record, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        _echo_config(Path(args.out).parent, "fit-scaling", vars(args))
    print(text)
    return 0


def cmd_render(args) -> int:
    from .render import render

    _set_threads()
    img = render(args.checkpoint, args.shard, args.sample, args.out, seed=args.seed,
                 mask_ratio=args.mask_ratio, num_visible=args.num_visible)
    _echo_config(Path(args.out).parent, "render", vars(args))
    print(f"{args.out}: {img.width}x{img.height}")
    return 0


def cmd_info(args) -> int:
    from .mae.checkpoint import MAGIC as CKPT_MAGIC
    from .mae.checkpoint import read_checkpoint
    from .data import MAGIC as SHARD_MAGIC

    with open(args.path, "rb") as f:
        head = f.read(8)
    if head.startswith(SHARD_MAGIC):
        h = read_shard_header(args.path)
        print(f"shard: T={h['T']} H={h['H']} W={h['W']} TR={h['tr']} "
              f"subject={h['subject_id']} run={h['run_id']} grid={h['grid_hash'].hex()[:16]}")
    elif head.startswith(MESH_MAGIC):
        m = load_mesh(args.path)
        print(f"mesh: {m.n_vertices} vertices ({m.n_valid} valid), {m.n_triangles} triangles")
    elif head.startswith(GRID_MAGIC):
        g = load_grid(args.path)
        print(f"grid: {g.height}x{g.width} @ {g.pixel_mm} mm, {g.n_valid} valid pixels, "
              f"{g.n_vertices} vertices, hash={g.digest().hex()[:16]}")
    elif head.startswith(CKPT_MAGIC):
        meta, tensors = read_checkpoint(args.path)
        n = sum(v.size for k, v in tensors.items() if k.startswith("param."))
        print(f"checkpoint: step={meta['step']} params={n} model={json.dumps(meta['model'])}")
    else:
        raise FlatMAEError(f"{args.path}: unrecognized file type")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatmae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-grid", help="rasterize a flat mesh into a resampling grid")
    s.add_argument("--mesh", required=True)
    s.add_argument("--height", type=int, default=224)
    s.add_argument("--width", type=int, default=560)
    s.add_argument("--pixel-mm", type=float, default=1.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_grid)

    s = sub.add_parser("make-synth", help="write a synthetic mesh, grid, runs, shards and labels")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-vertices", type=int, default=600)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--components", type=int, default=4)
    s.add_argument("--runs-per-class", type=int, default=6)
    s.add_argument("--clips-per-run", type=int, default=4)
    s.add_argument("--snr", type=float, default=1.0)
    s.add_argument("--frames", type=int, default=120)
    s.add_argument("--tr", type=float, default=1.0)
    s.add_argument("--cut-frac", type=float, default=0.05)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=48)
    s.add_argument("--pixel-mm", type=float, default=1.2)
    s.add_argument("--parcels", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("resample", help="preprocess a surface run (.npz) into a shard")
    s.add_argument("--grid", required=True)
    s.add_argument("--run", required=True, help=".npz with 'values' (V, T) and optional 'tr'")
    s.add_argument("--tr", type=float, default=None)
    s.add_argument("--tr-out", type=float, default=1.0)
    s.add_argument("--subject", default=None)
    s.add_argument("--run-id", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("pretrain", help="train the masked autoencoder on shards")
    s.add_argument("--grid", required=True)
    s.add_argument("--shards", nargs="+", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config", default=None, help="JSON config; flags override it")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--resume", default=None)
    s.add_argument("--buffer", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--log-every", type=int, default=0)
    for k in MODEL_KEYS:
        s.add_argument("--" + k.replace("_", "-"), type=float if k == "mlp_ratio" else int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--base-lr", type=float, default=None)
    s.add_argument("--warmup-steps", type=int, default=None)
    s.add_argument("--total-steps", type=int, default=None)
    s.add_argument("--weight-decay", type=float, default=None)
    s.add_argument("--mask-ratio", type=float, default=None)
    s.add_argument("--num-visible", type=int, default=None)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="probe sweep on labeled clips")
    s.add_argument("--labels", required=True, help="CSV with shard,start,label,split")
    s.add_argument("--features", choices=["mae", "connectome", "patch_embed"], default="mae")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--parcels", default=None, help=".npy (H, W) parcel labels, 0 = background")
    s.add_argument("--grid", default=None)
    s.add_argument("--clip-len", type=int, default=16)
    s.add_argument("--p-t", type=int, default=16)
    s.add_argument("--p", type=int, default=16)
    s.add_argument("--embed-dim", type=int, default=32)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--heads", type=int, default=1)
    s.add_argument("--lr-scales", type=float, nargs="+", default=[0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0])
    s.add_argument("--weight-decays", type=float, nargs="+", default=[3e-4, 0.001, 0.01, 0.03, 0.1, 0.3, 1.0])
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("fit-scaling", help="power-law fit of best test loss vs dataset size")
    s.add_argument("runs", help="CSV with size,epoch,test_loss")
    s.add_argument("--first-k", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_fit_scaling)

    s = sub.add_parser("render", help="PNG of masked input / prediction / target")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--shard", required=True)
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mask-ratio", type=float, default=None)
    s.add_argument("--num-visible", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("info", help="describe a shard, mesh, grid or checkpoint file")
    s.add_argument("path")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FlatMAEError, OSError, ValueError, KeyError) as exc:
        print(f"flatmae {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
