"""Command-line entry point: ``jointflow <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import ablate, io, metrics, world
from .config import ConfigError, build_configs, parse_pairs
from .flow import TimestepPair
from .model import BaseDiT, JointModel
from .rng import substream, torch_generator
from .tasks import Task, TaskMode, extract_features, minmax_channels, run_task, tiled_sample
from .train import PairData, TrainingError, load_checkpoint, pretrain_base, save_checkpoint, train_joint

log = logging.getLogger("jointflow")

MODES = {"joint": Task.Joint, "depth": Task.DepthEstimation, "rgb": Task.DepthConditioned}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointflow", description="Joint RGB/disparity flow matching on DiskWorld.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--force", action="store_true", help="allow writing into a nonempty --out")
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-data", help="render a DiskWorld dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)

    for name in ("pretrain", "train-joint"):
        sp = sub.add_parser(name, help=f"{name.replace('-', ' ')} phase")
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--n", type=int, help="training scenes when no --gt dataset is given")
        sp.add_argument("--gt", help="dataset directory written by gen-data")
        if name == "train-joint":
            sp.add_argument("--base-ckpt", required=True)
        common(sp)

    sp = sub.add_parser("sample", help="run a task with a trained joint model")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", choices=sorted(MODES), required=True)
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--guidance", type=float, default=2.0)
    sp.add_argument("--rgb")
    sp.add_argument("--depth")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)

    sp = sub.add_parser("eval-depth", help="AbsRel / delta1 of predicted disparities")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out")
    common(sp, out=False)

    sp = sub.add_parser("eval-joint", help="joint consistency (and MMD) of generated pairs")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt")
    sp.add_argument("--out")
    common(sp, out=False)

    sp = sub.add_parser("panorama", help="tiled sampling on a larger canvas")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", choices=sorted(MODES), default="joint")
    sp.add_argument("--canvas", default="32x96", help="HxW, used when no input image fixes it")
    sp.add_argument("--tile", type=int, default=32)
    sp.add_argument("--overlap", type=int, default=16)
    sp.add_argument("--early-whole", type=float, default=0.3)
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--guidance", type=float, default=2.0)
    sp.add_argument("--rgb")
    sp.add_argument("--depth")
    sp.add_argument("--seed", type=int, default=0)
    common(sp)

    sp = sub.add_parser("features", help="PCA maps of per-branch block activations")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--rgb", required=True)
    sp.add_argument("--depth", required=True)
    sp.add_argument("--block", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)

    sp = sub.add_parser("ablate", help="adaptive-weights x unbalanced-sampling grid")
    sp.add_argument("--base-ckpt", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0, help="first of three consecutive seeds")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--gt")
    common(sp)
    return p


# ---------------------------------------------------------------------------
# helpers


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_log(out: Path, command: str, resolved: dict, sources: Optional[dict] = None):
    """Echo the resolved settings to stdout and to ``run.json`` in ``out``."""
    payload = {"command": command, "config": resolved}
    if sources:
        payload["sources"] = sources
    for k, v in resolved.items():
        src = f" ({sources[k]})" if sources and k in sources else ""
        print(f"{k} = {v}{src}")
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve_config(args, phase: str):
    """flag > file > default, with the winning source recorded per key."""
    file_vals = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        file_vals = parse_pairs(text)
        print(f"# config file {args.config}:\n{text.rstrip()}")
    flag_vals = {"phase": phase}
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("n", "n_train")):
        v = getattr(args, flag, None)
        if v is not None:
            flag_vals[key] = v
    merged = {**file_vals, **flag_vals}
    mcfg, tcfg = build_configs(merged)
    resolved = {**{f"model.{k}": v for k, v in mcfg.as_dict().items()},
                **{f"train.{k}": v for k, v in vars(tcfg).items()}}
    sources = {}
    for k in resolved:
        key = k.split(".", 1)[1]
        sources[k] = "flag" if key in flag_vals else "file" if key in file_vals else "default"
    return mcfg, tcfg, resolved, sources


def load_training_data(args, tcfg):
    if args.gt:
        rgb, disp, cls = world.load_dataset(args.gt)
    else:
        rgb, disp, cls = world.generate_scenes(tcfg.n_train, tcfg.seed, "train")
    val = world.generate_scenes(tcfg.n_val, tcfg.seed, "heldout")
    return PairData.from_arrays(rgb, disp, cls), PairData.from_arrays(*val)


def _load(path, want_joint: bool):
    model = load_checkpoint(path)
    if want_joint and not isinstance(model, JointModel):
        raise UsageError(f"{path} holds a base checkpoint; a joint checkpoint is required")
    if not want_joint and not isinstance(model, BaseDiT):
        raise UsageError(f"{path} holds a joint checkpoint; a base checkpoint is required")
    model.eval()
    return model


def _image_files(path, suffix):
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob(f"*{suffix}"))
        if not files:
            raise UsageError(f"no {suffix} files in {p}")
        return files
    return [p]


def read_rgb_batch(path):
    files = _image_files(path, ".ppm")
    arrs = [io.from_u8(io.read_ppm(f)) for f in files]
    return files, torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy()).float()


def read_depth_batch(path):
    files = _image_files(path, ".pgm")
    arrs = [io.from_u16(io.read_pgm16(f)) for f in files]
    return files, torch.from_numpy(np.stack(arrs)).float()


def write_pair(out: Path, stem: str, rgb: torch.Tensor, disparity: torch.Tensor):
    io.write_ppm(out / f"{stem}.ppm", io.to_u8(rgb.permute(1, 2, 0).double().numpy()))
    io.write_pgm16(out / f"{stem}.pgm", io.to_u16(disparity.double().numpy()))


def _canvas(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--canvas expects HxW, got {text!r}") from None
    return h, w


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = prepare_out(args.out, args.force)
    write_run_log(out, "gen-data", {"n": args.n, "seed": args.seed})
    m = world.generate_dataset(args.n, args.seed, out)
    print(f"wrote {len(m)} scenes to {out}")


def cmd_pretrain(args):
    mcfg, tcfg, resolved, sources = resolve_config(args, "base")
    out = prepare_out(args.out, args.force)
    write_run_log(out, "pretrain", resolved, sources)
    data, val = load_training_data(args, tcfg)
    base, hist = pretrain_base(tcfg, mcfg, data, val)
    save_checkpoint(base, out / "base.bin")
    _write_history(out / "history.csv", hist.records)
    print(f"wrote {out / 'base.bin'}")


def cmd_train_joint(args):
    mcfg, tcfg, resolved, sources = resolve_config(args, "joint")
    out = prepare_out(args.out, args.force)
    write_run_log(out, "train-joint", resolved, sources)
    base = _load(args.base_ckpt, want_joint=False)
    data, val = load_training_data(args, tcfg)
    model, hist = train_joint(tcfg, base, data, val)
    save_checkpoint(model, out / "joint.bin")
    _write_history(out / "history.csv", hist.records)
    print(f"wrote {out / 'joint.bin'}")


def _write_history(path, records):
    keys = ["phase", "step", "loss", "val_loss"]
    lines = [",".join(keys)] + [",".join(str(r.get(k, "")) for k in keys) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_sample(args):
    model = _load(args.ckpt, want_joint=True)
    mode = TaskMode(MODES[args.mode], args.steps, args.guidance)
    out = prepare_out(args.out, args.force)
    write_run_log(out, "sample", {"ckpt": args.ckpt, "mode": args.mode, "steps": args.steps,
                                  "guidance": args.guidance, "seed": args.seed, "n": args.n})
    gen = torch_generator(args.seed, "sample")
    if mode.tag is Task.DepthEstimation:
        if not args.rgb:
            raise UsageError("--mode depth needs --rgb")
        files, rgb = read_rgb_batch(args.rgb)
        res = run_task(model, mode, rgb=rgb, generator=gen)
        for f, d in zip(files, res.disparity):
            io.write_pgm16(out / f"{f.stem}.pgm", io.to_u16(d.double().numpy()))
    elif mode.tag is Task.DepthConditioned:
        if not args.depth:
            raise UsageError("--mode rgb needs --depth")
        files, disp = read_depth_batch(args.depth)
        res = run_task(model, mode, disparity=disp, generator=gen)
        for f, r in zip(files, res.rgb):
            io.write_ppm(out / f"{f.stem}.ppm", io.to_u8(r.permute(1, 2, 0).double().numpy()))
    else:
        cls = torch.from_numpy(substream(args.seed, "sample-class").integers(1, world.MAX_DISKS + 1, args.n))
        res = run_task(model, mode, class_id=cls, generator=gen)
        for i in range(args.n):
            write_pair(out, f"{i:06d}", res.rgb[i], res.disparity[i])
    print(f"wrote samples to {out}")


def _gt_depth_dir(path: Path) -> Path:
    return path / "depth" if (path / "depth").is_dir() else path


def cmd_eval_depth(args):
    pred_files = _image_files(args.pred, ".pgm")
    gt_dir = _gt_depth_dir(Path(args.gt))
    preds, gts = [], []
    for f in pred_files:
        g = gt_dir / f.name
        if not g.exists():
            raise UsageError(f"no ground truth {g} for prediction {f}")
        preds.append(io.from_u16(io.read_pgm16(f)))
        gts.append(io.from_u16(io.read_pgm16(g)))
    rep = metrics.evaluate_depth(preds, gts)
    rows = [("absrel", rep.absrel, rep.n_pixels, f"images={len(preds)} affine-aligned foreground"),
            ("delta1", rep.delta1, rep.n_pixels, "threshold 1.25"),
            ("background_rate", rep.background_rate, "", "reported, not gated")]
    _emit(rows, args.out)


def cmd_eval_joint(args):
    rgb_files = _image_files(args.pred, ".ppm")
    rgbs, disps, cons = [], [], []
    for f in rgb_files:
        d = f.with_suffix(".pgm")
        if not d.exists():
            raise UsageError(f"generated pair {f} has no matching {d.name}")
        r = io.from_u8(io.read_ppm(f))
        dd = io.from_u16(io.read_pgm16(d))
        rgbs.append(r)
        disps.append(dd)
        cons.append(metrics.joint_consistency(r, dd))
    defined = [c for c in cons if c is not None]
    rows = [("joint_consistency", float(np.mean(defined)) if defined else float("nan"), len(defined),
             f"undefined={len(cons) - len(defined)}")]
    if args.gt:
        rgb, disp, _ = world.load_dataset(args.gt)
        real = [np.concatenate([r, d[..., None]], -1) for r, d in zip(rgb, disp)]
        fake = [np.concatenate([r, d[..., None]], -1) for r, d in zip(rgbs, disps)]
        bw = metrics.median_bandwidth(metrics.flatten_pooled(real))
        rows.append(("mmd2", metrics.mmd_rbf(fake, real, bw), len(fake), f"bandwidth={bw:.6g}"))
    _emit(rows, args.out)


def _emit(rows, out):
    if out:
        metrics.write_report(out, rows)
    _print_rows(rows)


def _print_rows(rows):
    print(",".join(metrics.REPORT_HEADER))
    for metric, value, n, notes in rows:
        print(f"{metric},{value:.6g},{n},{notes}" if isinstance(value, float) else f"{metric},{value},{n},{notes}")


def cmd_panorama(args):
    model = _load(args.ckpt, want_joint=True)
    mode = TaskMode(MODES[args.mode], args.steps, args.guidance)
    out = prepare_out(args.out, args.force)
    write_run_log(out, "panorama", {k: v for k, v in vars(args).items() if k not in ("force",)})
    gen = torch_generator(args.seed, "panorama")
    rgb = disp = None
    if mode.tag is Task.DepthEstimation:
        if not args.rgb:
            raise UsageError("--mode depth needs --rgb")
        _, rgb = read_rgb_batch(args.rgb)
        canvas = tuple(rgb.shape[-2:])
    elif mode.tag is Task.DepthConditioned:
        if not args.depth:
            raise UsageError("--mode rgb needs --depth")
        _, disp = read_depth_batch(args.depth)
        canvas = tuple(disp.shape[-2:])
    else:
        canvas = _canvas(args.canvas)
    try:
        res = tiled_sample(model, mode, canvas, args.tile, args.overlap, args.early_whole,
                           generator=gen, rgb=rgb, disparity=disp, n=1)
    except ValueError as e:
        raise UsageError(str(e)) from None
    for i in range(res.rgb.shape[0]):
        write_pair(out, f"pano_{i:03d}", res.rgb[i], res.disparity[i])
    print(f"wrote panorama ({canvas[0]}x{canvas[1]}) to {out}")


def cmd_features(args):
    model = _load(args.ckpt, want_joint=True)
    out = prepare_out(args.out, args.force)
    write_run_log(out, "features", {"ckpt": args.ckpt, "rgb": args.rgb, "depth": args.depth,
                                    "block": args.block, "seed": args.seed})
    files, rgb = read_rgb_batch(args.rgb)
    _, disp = read_depth_batch(args.depth)
    if not 0 <= args.block < len(model.base.blocks):
        raise UsageError(f"--block must lie in [0, {len(model.base.blocks)})")
    fm = extract_features(model, rgb, disp, TimestepPair(0.48, 0.48), args.block,
                          generator=torch_generator(args.seed, "features"))
    for tag, maps in (("rgb", fm.maps_x), ("depth", fm.maps_y)):
        norm = minmax_channels(maps)
        for f, m in zip(files, norm):
            io.write_ppm(out / f"{f.stem}_{tag}_features.ppm", io.to_u8(m))
    print(f"wrote feature maps ({fm.layout[0]}x{fm.layout[1]}) to {out}")


def cmd_ablate(args):
    mcfg, tcfg, resolved, sources = resolve_config(args, "joint")
    out = prepare_out(args.out, args.force)
    seeds = [tcfg.seed, tcfg.seed + 1, tcfg.seed + 2]
    write_run_log(out, "ablate", {**resolved, "seeds": seeds}, sources)
    base = _load(args.base_ckpt, want_joint=False)
    data, val = load_training_data(args, tcfg)
    rows = ablate.run_ablation_grid(base, data, val, seeds, tcfg)
    ablate.write_csv(out / "ablation.csv", rows)
    ablate.write_summary(out / "summary.csv", rows)
    if not ablate.direction_holds(rows):
        log.warning("FLAGGED REGRESSION: both-on mean AbsRel exceeds both-off mean AbsRel")
    print(f"wrote {out / 'ablation.csv'}")


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-joint": cmd_train_joint,
    "sample": cmd_sample, "eval-depth": cmd_eval_depth, "eval-joint": cmd_eval_joint,
    "panorama": cmd_panorama, "features": cmd_features, "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stdout)
    torch.set_num_threads(max(1, args.threads))
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"jointflow {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, TrainingError, RuntimeError) as e:
        print(f"jointflow {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
