"""Three inference-time ablations on the memorized clips, over three seeds.

* temporal layers on vs. off (frame-to-frame flicker),
* overlapping windows with averaging vs. independent disjoint segments
  (jump size at each method's own window edges),
* one noise tensor shared by every window vs. one long tensor sliced into
  windows (jump size at the window edges).

Each row is a seed; values are averaged over the two clips. Lower is
smoother. Run ``02_overfit_and_animate.py`` first.

    python3 demos/03_ablations.py [--out demo_out]
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from animlab.config import parse_config
from animlab.evalmetrics import boundary_discontinuity, flicker
from animlab.fusion import animate_independent, animate_long, plan_segments


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    cfg = parse_config(overrides=["data.overfit_clips=2"])
    torch.set_num_threads(1)
    model = cfg.build_model()
    model.load_state_dict(torch.load(Path(args.out) / "model.pt"))
    model.eval()
    clips = cfg.dataset().clips
    K, s = cfg["fusion.K"], cfg["fusion.s"]
    edges = plan_segments(len(clips[0]), K, s).boundary_pairs()
    seams = list(range(K - 1, len(clips[0]) - 1, K))

    print(f"{'seed':>4} {'flicker on':>11} {'off':>7} {'edge fused':>11} {'indep.':>7} {'partitioned':>12}")
    for seed in range(3):
        base = replace(cfg.fusion(), seed=seed)
        cols = []
        for clip in clips:
            ref, poses = torch.from_numpy(clip.frames[0]), torch.from_numpy(clip.poses)

            def video(fn=animate_long, **kw):
                kwargs = {"K": K} if fn is animate_independent else {"K": K, "s": s}
                return fn(model, ref, poses, replace(base, **kw), **kwargs)[0].transpose(0, 1).numpy()

            fused = video()
            cols.append([
                flicker(fused), flicker(video(use_temporal=False)),
                boundary_discontinuity(fused, edges), boundary_discontinuity(video(animate_independent), seams),
                boundary_discontinuity(video(noise_mode="partitioned"), edges),
            ])
        m = np.mean(cols, axis=0)
        print(f"{seed:>4} {m[0]:>11.4f} {m[1]:>7.4f} {m[2]:>11.4f} {m[3]:>7.4f} {m[4]:>12.4f}")


if __name__ == "__main__":
    main()
