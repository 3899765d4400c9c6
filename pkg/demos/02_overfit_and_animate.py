"""Memorize two toy dance clips, then re-animate them from their pose maps.

Trains the default model on two clips (appearance encoder, pose
conditioner and 2D backbone first, then the temporal layers alone), then
runs sliding-window inference with the clips' own reference frame and pose
sequence and compares the result to the ground truth. With the default
step counts this takes roughly ten minutes on one CPU core; ``--quick``
cuts training to a smoke test (the video will be noise).

    python3 demos/02_overfit_and_animate.py [--quick] [--out demo_out]

Writes ``<out>/model.pt``, which ``03_ablations.py`` reuses, and one PNG strip
per clip (ground truth on top, generated below).
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from animlab.config import parse_config
from animlab.evalmetrics import psnr, ssim
from animlab.fusion import animate_long
from animlab.synthdata import to_uint8
from animlab.training import train_stage1, train_stage2


def strip(top, bottom, scale=3):
    rows = [np.concatenate(list(to_uint8(v)), axis=1) for v in (top, bottom)]
    img = Image.fromarray(np.concatenate(rows, axis=0))
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    overrides = ["data.overfit_clips=2"]
    if args.quick:
        overrides += ["training.stage1_steps=10", "training.stage2_steps=10"]
    cfg = parse_config(overrides=overrides)
    torch.set_num_threads(cfg["training.threads"])
    model, data, tcfg = cfg.build_model(), cfg.dataset(), cfg.training()

    t0 = time.time()
    s1 = train_stage1(model, data, tcfg)
    print(f"stage 1: {tcfg.stage1_steps} steps in {time.time() - t0:.0f}s, "
          f"loss {np.mean(s1.losses()[:10]):.3f} -> {np.mean(s1.losses()[-10:]):.3f}")
    t0 = time.time()
    s2 = train_stage2(model, data, tcfg)
    print(f"stage 2: {tcfg.stage2_steps} steps in {time.time() - t0:.0f}s, "
          f"loss {np.mean(s2.losses()[:10]):.3f} -> {np.mean(s2.losses()[-10:]):.3f}")
    torch.save(model.state_dict(), out / "model.pt")

    for i, clip in enumerate(data.clips):
        ref, poses = torch.from_numpy(clip.frames[0]), torch.from_numpy(clip.poses)
        video = animate_long(model, ref, poses, cfg.fusion(), K=cfg["fusion.K"], s=cfg["fusion.s"])
        video = video[0].transpose(0, 1).numpy()
        print(f"clip {i}: PSNR {psnr(video, clip.frames):.2f} dB, SSIM {ssim(video, clip.frames):.3f}")
        strip(clip.frames, video).save(out / f"clip_{i}.png")
    print(f"strips written to {out}/")


if __name__ == "__main__":
    main()
