"""Command-line entry point: ``python -m animlab <command> [options]``.

Every command writes into its own run directory (``$ANIMLAB_RUN_DIR`` or
``./runs``, one timestamped subdirectory per invocation, or ``--run-dir``)
holding the resolved configuration and all outputs.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from animlab.config import RunConfig, parse_config
from animlab.errors import CheckpointError, ConfigError
from animlab.evalmetrics import MetricReport, evaluate_clip, write_report
from animlab.fusion import animate_long, plan_segments
from animlab.synthdata import (
    VideoClip,
    build_corpus,
    load_clip,
    overfit_set,
    read_frames,
    save_clip,
    write_frames,
    write_manifest,
)
from animlab.training import (
    ToyDataset,
    TrainLog,
    apply_params,
    flatten_config,
    load_checkpoint,
    model_params,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("animlab")

COMMANDS = ("gen-data", "train-stage1", "train-stage2", "animate", "plan-segments", "eval")


def run_root() -> Path:
    return Path(os.environ.get("ANIMLAB_RUN_DIR", "runs"))


def make_run_dir(command: str, explicit: str | None = None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = run_root() / f"{stamp}-{command}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def checkpoint_id(ckpt: Path) -> str:
    return hashlib.sha256((Path(ckpt) / "manifest.txt").read_bytes()).hexdigest()[:16]


def _load_dataset(cfg: RunConfig, data_dir: str | None) -> ToyDataset:
    if data_dir is None:
        return cfg.dataset()
    root = Path(data_dir)
    if (root / "data").is_dir():
        root = root / "data"

    def clips(sub: str) -> list[VideoClip]:
        d = root / sub
        return [load_clip(p) for p in sorted(d.iterdir()) if p.is_dir()] if d.is_dir() else []

    train = clips("train")
    if not train:
        raise ConfigError(f"no training clips under {root / 'train'}")
    stills = clips("stills") if cfg["data.use_stills"] else []
    return ToyDataset(train, stills, cfg["training.reference_frame"])


def _load_model(cfg: RunConfig, ckpt: str | None, allow_mismatch: bool = False):
    if ckpt is None:
        raise CheckpointError("checkpoint not found: no --checkpoint given")
    params, manifest = load_checkpoint(Path(ckpt), cfg.model_hash, allow_mismatch)
    model = cfg.build_model()
    apply_params(model, params)
    model.eval()
    return model, manifest


def _save(model, cfg: RunConfig, out: Path, stage: int, steps: int, extra: dict) -> Path:
    manifest = {"config_hash": cfg.model_hash, "run_config_hash": cfg.hash, "stage": stage, "step": steps,
                "seed": cfg["training.seed"], **extra}
    return save_checkpoint(model_params(model), manifest, out)


# -- commands ------------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig, run: Path) -> int:
    out = run / "data"
    if cfg["data.overfit_clips"] > 0:
        d = cfg.section("data")
        corpus = {"train": overfit_set(d["overfit_clips"], d["frames"], d["size"], d["seed"])}
    else:
        corpus = build_corpus(cfg.corpus())
    for split, clips in corpus.items():
        for i, clip in enumerate(clips):
            save_clip(clip, out / split / f"clip_{i:03d}")
    counts = {split: len(c) for split, c in corpus.items()}
    write_manifest(out / "manifest.txt", {**{f"clips.{k}": v for k, v in counts.items()},
                                          "config_hash": cfg.hash})
    print(f"wrote {sum(counts.values())} clips to {out} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    return 0


def cmd_train_stage1(args, cfg: RunConfig, run: Path) -> int:
    data = _load_dataset(cfg, args.data)
    model = cfg.build_model()
    tcfg = cfg.training()
    trace = train_stage1(model, data, tcfg)
    trace.write_csv(run / "loss_trace.csv")
    ckpt = _save(model, cfg, run / "checkpoint", 1, tcfg.stage1_steps, flatten_config("stage1", tcfg))
    print(f"stage 1: {tcfg.stage1_steps} steps, final loss {_final(trace)}; checkpoint {ckpt}")
    return 0


def cmd_train_stage2(args, cfg: RunConfig, run: Path) -> int:
    model, prev = _load_model(cfg, args.checkpoint, args.allow_mismatch)
    data = _load_dataset(cfg, args.data)
    tcfg = cfg.training()
    trace = train_stage2(model, data, tcfg)
    trace.write_csv(run / "loss_trace.csv")
    carried = {k: v for k, v in prev.items() if k.startswith("stage1.")}
    carried["stage1.checkpoint_id"] = checkpoint_id(Path(args.checkpoint))
    ckpt = _save(model, cfg, run / "checkpoint", 2, tcfg.stage2_steps,
                 {**carried, **flatten_config("stage2", tcfg)})
    print(f"stage 2: {tcfg.stage2_steps} steps, final loss {_final(trace)}; checkpoint {ckpt}")
    return 0


def _final(trace: TrainLog) -> str:
    losses = trace.losses()
    return f"{np.mean(losses[-10:]):.5f}" if losses else "n/a"


def _animation_clip(cfg: RunConfig, clip_dir: str | None) -> VideoClip:
    if clip_dir is not None:
        return load_clip(Path(clip_dir))
    return cfg.dataset().clips[0]


def cmd_animate(args, cfg: RunConfig, run: Path) -> int:
    model, _ = _load_model(cfg, args.checkpoint, args.allow_mismatch)
    clip = _animation_clip(cfg, args.clip)
    ref_index = min(cfg["eval.reference_frame"], len(clip) - 1)
    fcfg = cfg.fusion()
    K, s = cfg["fusion.K"], cfg["fusion.s"]
    ref = torch.from_numpy(clip.frames[ref_index]).to(model.dtype)
    poses = torch.from_numpy(clip.poses).to(model.dtype)
    video = animate_long(model, ref, poses, fcfg, K=K, s=s)[0].transpose(0, 1).numpy()
    out = run / "video"
    write_frames(video, out)
    write_manifest(out / "manifest.txt", {
        "N": video.shape[0], "K": K, "s": s, "seed": fcfg.seed,
        "checkpoint_id": checkpoint_id(Path(args.checkpoint)), "checkpoint": Path(args.checkpoint).resolve(),
        "sampler": fcfg.sampler, "steps": fcfg.steps, "clip_x0": fcfg.clip_x0, "noise_mode": fcfg.noise_mode,
        "use_temporal": fcfg.use_temporal, "reference_frame": ref_index,
        "source_clip": Path(args.clip).resolve() if args.clip else "generated",
    })
    print(f"wrote {video.shape[0]} frames to {out}")
    return 0


def cmd_plan_segments(args, cfg: RunConfig, run: Path) -> int:
    K = args.K if args.K is not None else cfg["fusion.K"]
    s = args.s if args.s is not None else cfg["fusion.s"]
    plan = plan_segments(args.N, K, s)
    lines = [
        f"N={plan.N} K={plan.K} s={plan.s}",
        f"starts [{','.join(str(v) for v in plan.starts)}]",
        f"n={plan.n}",
        f"pad {plan.pad_len}",
    ]
    lines += [f"window {i}: {w}" for i, w in enumerate(plan.windows)]
    text = "\n".join(lines)
    (run / "plan.txt").write_text(text + "\n")
    print(text)
    return 0


def _video_dir(path: Path) -> Path:
    for cand in (path / "video", path / "frames", path):
        if any(cand.glob("frame_*.png")):
            return cand
    raise FileNotFoundError(f"no frame_*.png files under {path}")


def cmd_eval(args, cfg: RunConfig, run: Path) -> int:
    if len(args.pred) != len(args.gt):
        raise ConfigError("--pred and --gt must be given the same number of times")
    report = MetricReport()
    for pred_dir, gt_dir in zip(args.pred, args.gt):
        pred = read_frames(_video_dir(Path(pred_dir)))
        gt = load_clip(Path(gt_dir))
        if pred.shape != gt.frames.shape:
            raise ConfigError(f"{pred_dir}: shape {pred.shape} does not match ground truth {gt.frames.shape}")
        report.add(Path(gt_dir).name, evaluate_clip(pred, gt.frames, gt.poses))
    write_report(report, run / "report.csv")
    print(report.table())
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "animate": cmd_animate,
    "plan-segments": cmd_plan_segments,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="section.key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--run-dir", help="write into this directory instead of a new timestamped one")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="animlab", description="Pose-driven toy animation pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="export the synthetic corpus")
    for name in ("train-stage1", "train-stage2"):
        p = sub.add_parser(name, parents=[common], help=f"run {name.replace('train-', 'training ')}")
        p.add_argument("--data", help="gen-data run directory (default: generate in memory)")
        if name == "train-stage2":
            p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint directory")
            p.add_argument("--allow-mismatch", action="store_true")
    p = sub.add_parser("animate", parents=[common], help="generate a video with sliding-window fusion")
    p.add_argument("--checkpoint", help="trained checkpoint directory")
    p.add_argument("--clip", help="clip directory supplying the reference frame and poses")
    p.add_argument("--allow-mismatch", action="store_true")
    p = sub.add_parser("plan-segments", parents=[common], help="print the window plan for N frames")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--s", type=int)
    p = sub.add_parser("eval", parents=[common], help="score generated videos against ground truth")
    p.add_argument("--pred", action="append", required=True, help="generated video directory (repeatable)")
    p.add_argument("--gt", action="append", required=True, help="ground-truth clip directory (repeatable)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config, args.overrides)
        torch.set_num_threads(cfg["training.threads"])
        run = make_run_dir(args.command, args.run_dir)
        (run / "config.txt").write_text(cfg.canonical())
        return HANDLERS[args.command](args, cfg, run)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"animlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
