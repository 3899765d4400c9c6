"""How a long pose sequence is split into overlapping windows and fused.

No model is needed: the "network" here returns a constant per window, which
makes the per-frame averaging visible.

    python3 demos/01_segment_planning.py
"""

import torch

from animlab.fusion import fuse_predictions, plan_segments


def show(N, K, s):
    plan = plan_segments(N, K, s)
    print(f"N={N} K={K} s={s}: n={plan.n}, starts={list(plan.starts)}, pad_len={plan.pad_len}")
    for i, frames in enumerate(plan.windows):
        row = ["   . "] * N
        for slot, j in enumerate(frames):
            # pad slots wrap around to the first frames; mark them with '+'
            row[j] = f"{i:>4}+" if plan.starts[i] + slot >= N else f"{i:>4} "
        print(f"   {'window ' + str(i):<9}", "".join(row))
    print(f"   {'coverage':<9}", "".join(f"{c:>4} " for c in plan.coverage()))

    # each window "predicts" its own index; the fused value is the per-frame mean
    preds = [torch.full((1, 1, K, 1, 1), float(i)) for i in range(len(plan.starts))]
    fused = fuse_predictions(preds, plan)[0, 0, :, 0, 0]
    print(f"   {'fused':<9}", "".join(f"{v:>5.2f}" for v in fused.tolist()))
    print("   window edges between frames", [(j, j + 1) for j in plan.boundary_pairs()])
    print()


if __name__ == "__main__":
    show(16, 8, 4)
    show(10, 8, 4)
    show(24, 8, 2)
