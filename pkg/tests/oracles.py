"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over plain floats or
numpy arrays so it shares no code path with the package.
"""

import math

import numpy as np


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def matvec(w, x):
    """``w`` [out, in] times vector ``x``."""
    return [sum(w[o][i] * x[i] for i in range(len(x))) for o in range(len(w))]


def naive_temporal_attention(f, wq, wk, wv, wo, bo, pe):
    """Loop reference for temporal attention on ``f`` of shape [N, C, K, H, W]."""
    f = np.asarray(f, dtype=np.float64)
    n, c, k, h, w = f.shape
    out = f.copy()
    wq, wk, wv, wo = (np.asarray(m).tolist() for m in (wq, wk, wv, wo))
    bo = np.asarray(bo).tolist()
    pe = np.asarray(pe).tolist()
    for b in range(n):
        for y in range(h):
            for x in range(w):
                seq = [[f[b, ch, j, y, x] + pe[j][ch] for ch in range(c)] for j in range(k)]
                qs = [matvec(wq, v) for v in seq]
                ks = [matvec(wk, v) for v in seq]
                vs = [matvec(wv, v) for v in seq]
                for i in range(k):
                    scores = [sum(qs[i][d] * ks[j][d] for d in range(c)) / math.sqrt(c) for j in range(k)]
                    a = softmax(scores)
                    mixed = [sum(a[j] * vs[j][d] for j in range(k)) for d in range(c)]
                    o = matvec(wo, mixed)
                    for ch in range(c):
                        out[b, ch, i, y, x] += o[ch] + bo[ch]
    return out


def group_norm(f, groups, weight, bias, eps=1e-5):
    """GroupNorm of a single [C, H, W] map with per-channel affine."""
    f = np.asarray(f, dtype=np.float64)
    c = f.shape[0]
    per = c // groups
    out = np.empty_like(f)
    for g in range(groups):
        chunk = f[g * per:(g + 1) * per]
        mean = chunk.mean()
        var = ((chunk - mean) ** 2).mean()
        out[g * per:(g + 1) * per] = (chunk - mean) / math.sqrt(var + eps)
    return out * np.asarray(weight)[:, None, None] + np.asarray(bias)[:, None, None]


def naive_hybrid_attention(f, gn_groups, gn_w, gn_b, wq, wk, wv, wo, bo, ref):
    """Loop reference for spatial attention on one [C, H, W] map plus [M, C] reference tokens."""
    f = np.asarray(f, dtype=np.float64)
    c, h, w = f.shape
    normed = group_norm(f, gn_groups, gn_w, gn_b)
    own = [[normed[ch, y, x] for ch in range(c)] for y in range(h) for x in range(w)]
    ctx = own + [list(map(float, r)) for r in np.asarray(ref)]
    wq, wk, wv, wo = (np.asarray(m).tolist() for m in (wq, wk, wv, wo))
    ks = [matvec(wk, v) for v in ctx]
    vs = [matvec(wv, v) for v in ctx]
    out = f.copy()
    for p, tok in enumerate(own):
        q = matvec(wq, tok)
        a = softmax([sum(q[d] * kv[d] for d in range(c)) / math.sqrt(c) for kv in ks])
        mixed = [sum(a[j] * vs[j][d] for j in range(len(ctx))) for d in range(c)]
        o = matvec(wo, mixed)
        y, x = divmod(p, w)
        for ch in range(c):
            out[ch, y, x] += o[ch] + float(bo[ch])
    return out


def brute_windows(N, K, s):
    """Walk windows forward by ``K - s`` until the sequence is covered.

    Returns the source frame of every slot; slots past the end wrap to
    frames ``0, 1, ...``.
    """
    if N == K:
        return [list(range(K))]
    starts = [0]
    while starts[-1] + K < N:
        starts.append(starts[-1] + (K - s))
    windows = []
    for st in starts:
        slots, pad = [], 0
        for j in range(K):
            if st + j < N:
                slots.append(st + j)
            else:
                slots.append(pad)
                pad += 1
        windows.append(slots)
    return windows


def brute_fuse(preds, windows, N):
    """Per-frame mean of every slot value that maps to that frame.

    ``preds`` is a list of per-window lists of per-slot values (any type
    supporting ``+`` and ``/``).
    """
    buckets = [[] for _ in range(N)]
    for wp, slots in zip(preds, windows):
        for slot, j in enumerate(slots):
            buckets[j].append(wp[slot])
    out = []
    for vals in buckets:
        total = vals[0]
        for v in vals[1:]:
            total = total + v
        out.append(total / len(vals))
    return out


def central_difference(f, x, index, h=1e-5):
    """``d f / d x[index]`` by central differences; ``x`` is modified in place and restored."""
    orig = x[index].item()
    x[index] = orig + h
    fp = f()
    x[index] = orig - h
    fm = f()
    x[index] = orig
    return (fp - fm) / (2 * h)
