"""Procedural stick-figure dancers with paired part-index pose maps.

Every clip is a deterministic function of two seeds: ``identity_seed`` fixes
the figure's colours, ``motion_seed`` fixes its proportions and joint
trajectories, so two identities driven by one motion share their pose maps. Pose maps are rendered from the exact same figure state as the
RGB frames, without anti-aliasing, so the body pixels of a frame are exactly
the union of its pose channels.

On disk a clip is a directory::

    frames/frame_0000.png   8-bit RGB
    poses/pose_0000.png     8-bit single channel, 0 = background, 1..6 = part
    manifest.txt            key = value lines (seeds, N, H, W)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

PART_NAMES = ("head", "torso", "left_arm", "right_arm", "left_leg", "right_leg")
NUM_PARTS = len(PART_NAMES)
# drawn last wins: legs, arms, torso, head
_DRAW_ORDER = (5, 4, 3, 2, 1, 0)


@dataclass(frozen=True)
class Identity:
    body_color: tuple[float, float, float]
    background_color: tuple[float, float, float]
    torso_length: float
    head_radius: float
    arm_length: float
    leg_length: float
    thickness: float


@dataclass(frozen=True)
class FigureState:
    """Joint angles are ``(torso, head, left_arm, right_arm, left_leg, right_leg)``.

    Torso and head angles are measured from straight up, limb angles from
    straight down; lengths are fractions of the image height and the root
    (hip) position is in normalized ``(x, y)`` image coordinates.
    """

    angles: tuple[float, ...]
    root: tuple[float, float]
    identity: Identity


@dataclass
class VideoClip:
    frames: np.ndarray  # [N, 3, H, W] float32 in [-1, 1]
    poses: np.ndarray  # [N, P, H, W] float32 one-hot
    identity_seed: int
    motion_seed: int

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def pose_indices(self) -> np.ndarray:
        return pose_to_index(self.poses)


def _color8(rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 256, size=3)


def make_identity(identity_seed: int, body_seed: int | None = None) -> Identity:
    """Colours come from ``identity_seed``, proportions from ``body_seed``.

    Clips pass their motion seed as ``body_seed`` so that the pose maps
    depend on the motion alone and any identity can be driven by any motion.
    """
    rng = np.random.default_rng([identity_seed, 0xA11CE])
    body8 = _color8(rng)
    bg8 = _color8(rng)
    while np.abs(body8.astype(int) - bg8.astype(int)).sum() < 200:
        bg8 = _color8(rng)
    shape = np.random.default_rng([identity_seed if body_seed is None else body_seed, 0xB0D1])
    return Identity(
        body_color=tuple(float(c) / 127.5 - 1.0 for c in body8),
        background_color=tuple(float(c) / 127.5 - 1.0 for c in bg8),
        torso_length=float(shape.uniform(0.22, 0.30)),
        head_radius=float(shape.uniform(0.07, 0.10)),
        arm_length=float(shape.uniform(0.18, 0.26)),
        leg_length=float(shape.uniform(0.22, 0.30)),
        thickness=float(shape.uniform(0.035, 0.05)),
    )


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def motion_trajectory(motion_seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Joint angles ``[n, 6]`` and root positions ``[n, 2]`` for a motion seed."""
    rng = np.random.default_rng([motion_seed, 0xDA9CE])
    base = np.array([0.0, 0.0, 0.5, -0.5, 0.25, -0.25]) + rng.uniform(-0.2, 0.2, 6)
    amp = np.array([0.25, 0.3, 1.3, 1.3, 0.5, 0.5]) * rng.uniform(0.6, 1.0, 6)
    freq = rng.uniform(0.04, 0.12, 6)
    phase = rng.uniform(0, 2 * math.pi, 6)
    k = np.arange(n)[:, None]
    angles = base + amp * np.sin(2 * math.pi * freq * k + phase)
    angles = np.vectorize(_wrap)(angles)
    root_x = 0.5 + 0.08 * np.sin(2 * math.pi * rng.uniform(0.02, 0.06) * np.arange(n) + rng.uniform(0, 2 * math.pi))
    root_y = np.full(n, 0.58)
    return angles, np.stack([root_x, root_y], axis=1)


def _segment_mask(p0, p1, radius, xs, ys) -> np.ndarray:
    d = np.asarray(p1, float) - np.asarray(p0, float)
    px, py = xs - p0[0], ys - p0[1]
    denom = float(d @ d)
    u = np.zeros_like(px) if denom == 0 else np.clip((px * d[0] + py * d[1]) / denom, 0.0, 1.0)
    dx, dy = px - u * d[0], py - u * d[1]
    return dx * dx + dy * dy <= radius * radius


def skeleton(state: FigureState, h: int, w: int) -> dict[str, tuple]:
    """Part name -> (start point, end point, radius) in pixel coordinates."""
    ident = state.identity
    torso, head, la, ra, ll, rl = state.angles
    scale = float(h)
    hip = np.array([state.root[0] * w, state.root[1] * h])
    up = np.array([math.sin(torso), -math.cos(torso)])
    neck = hip + ident.torso_length * scale * up
    head_dir = np.array([math.sin(torso + head), -math.cos(torso + head)])
    head_r = ident.head_radius * scale
    head_c = neck + 1.1 * head_r * head_dir
    shoulder = neck - 0.15 * ident.torso_length * scale * up
    r = ident.thickness * scale

    def limb(origin, angle, length):
        return origin, origin + length * scale * np.array([math.sin(angle), math.cos(angle)]), r

    return {
        "head": (head_c, head_c, head_r),
        "torso": (hip, neck, r * 1.4),
        "left_arm": limb(shoulder, la, ident.arm_length),
        "right_arm": limb(shoulder, ra, ident.arm_length),
        "left_leg": limb(hip, ll, ident.leg_length),
        "right_leg": limb(hip, rl, ident.leg_length),
    }


def render_pose_map(state: FigureState, h: int, w: int) -> np.ndarray:
    """One-hot ``[P, H, W]`` part map; overlaps go to the higher-priority part."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    index = np.zeros((h, w), dtype=np.int64)
    parts = skeleton(state, h, w)
    for p in _DRAW_ORDER:
        p0, p1, radius = parts[PART_NAMES[p]]
        index[_segment_mask(p0, p1, radius, xs, ys)] = p + 1
    return index_to_pose(index)


def render_frame(state: FigureState, pose: np.ndarray) -> np.ndarray:
    """RGB ``[3, H, W]`` frame: body colour wherever any part is active."""
    ident = state.identity
    body = pose.any(axis=0)
    bg = np.asarray(ident.background_color, np.float32)[:, None, None]
    fg = np.asarray(ident.body_color, np.float32)[:, None, None]
    return np.where(body[None], fg, bg).astype(np.float32)


def pose_to_index(pose: np.ndarray) -> np.ndarray:
    """One-hot ``[..., P, H, W]`` -> part index ``[..., H, W]`` (0 = background)."""
    return np.where(pose.any(axis=-3), pose.argmax(axis=-3) + 1, 0).astype(np.uint8)


def index_to_pose(index: np.ndarray, num_parts: int = NUM_PARTS) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape[:-2] + (num_parts,) + index.shape[-2:], dtype=np.float32)
    for p in range(num_parts):
        out[..., p, :, :] = index == p + 1
    return out


def generate_clip(identity_seed: int, motion_seed: int, n: int, h: int = 32, w: int = 32) -> VideoClip:
    if n < 1 or h < 16 or w < 16:
        raise ValueError(f"need N >= 1 and H, W >= 16, got N={n}, H={h}, W={w}")
    ident = make_identity(identity_seed, motion_seed)
    angles, roots = motion_trajectory(motion_seed, n)
    frames = np.empty((n, 3, h, w), np.float32)
    poses = np.empty((n, NUM_PARTS, h, w), np.float32)
    for i in range(n):
        state = FigureState(tuple(float(a) for a in angles[i]), (float(roots[i, 0]), float(roots[i, 1])), ident)
        poses[i] = render_pose_map(state, h, w)
        frames[i] = render_frame(state, poses[i])
    return VideoClip(frames, poses, identity_seed, motion_seed)


def default_state(identity_seed: int = 0) -> FigureState:
    return FigureState((0.0, 0.0, 0.5, -0.5, 0.25, -0.25), (0.5, 0.58), make_identity(identity_seed))


def rotate_joint(state: FigureState, joint: int, delta: float) -> FigureState:
    angles = list(state.angles)
    angles[joint] = _wrap(angles[joint] + delta)
    return replace(state, angles=tuple(angles))


@dataclass(frozen=True)
class CorpusSpec:
    train_identities: int = 8
    train_motions: int = 4
    heldout_identities: int = 2
    heldout_motions: int = 2
    frames: int = 16
    size: int = 32
    seed: int = 0


def build_corpus(spec: CorpusSpec = CorpusSpec()) -> dict[str, list[VideoClip]]:
    """Training clips, held-out clips, and held-out single-frame stills."""
    ids = [spec.seed * 1000 + i for i in range(spec.train_identities + spec.heldout_identities)]
    motions = [spec.seed * 1000 + 500 + m for m in range(spec.train_motions + spec.heldout_motions)]
    train_ids, held_ids = ids[: spec.train_identities], ids[spec.train_identities:]
    train_m, held_m = motions[: spec.train_motions], motions[spec.train_motions:]
    n, s = spec.frames, spec.size
    return {
        "train": [generate_clip(i, m, n, s, s) for i in train_ids for m in train_m],
        "heldout": [generate_clip(i, m, n, s, s) for i in held_ids for m in held_m],
        "stills": [
            _still(i, m, k, s) for i in held_ids for m in held_m for k in range(0, n, 4)
        ],
    }


def overfit_set(count: int, frames: int = 16, size: int = 32, seed: int = 0) -> list[VideoClip]:
    """``count`` clips, each with its own identity and motion, for memorization runs."""
    base = seed * 1000
    return [generate_clip(base + 1 + i, base + 11 + i, frames, size, size) for i in range(count)]


def _still(identity_seed: int, motion_seed: int, frame: int, size: int) -> VideoClip:
    clip = generate_clip(identity_seed, motion_seed, frame + 1, size, size)
    return VideoClip(clip.frames[-1:], clip.poses[-1:], identity_seed, motion_seed)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """``[-1, 1]`` floats -> 8-bit, channels last."""
    x = np.clip(np.round((np.asarray(frames, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.moveaxis(x, -3, -1)


def from_uint8(img: np.ndarray) -> np.ndarray:
    # same float64 arithmetic as the generator, so a saved clip reloads bit-exactly
    return (np.moveaxis(np.asarray(img, np.float64), -1, -3) / 127.5 - 1.0).astype(np.float32)


def write_frames(frames: np.ndarray, directory: Path, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(to_uint8(frames)):
        p = directory / f"{prefix}_{i:04d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths


def read_frames(directory: Path, prefix: str = "frame") -> np.ndarray:
    paths = sorted(Path(directory).glob(f"{prefix}_*.png"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.png files in {directory}")
    return np.stack([from_uint8(np.asarray(Image.open(p).convert("RGB"))) for p in paths])


def write_manifest(path: Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_clip(clip: VideoClip, directory: Path) -> Path:
    directory = Path(directory)
    write_frames(clip.frames, directory / "frames")
    (directory / "poses").mkdir(parents=True, exist_ok=True)
    for i, idx in enumerate(clip.pose_indices):
        Image.fromarray(idx).save(directory / "poses" / f"pose_{i:04d}.png")
    n, _, h, w = clip.frames.shape
    write_manifest(directory / "manifest.txt", {
        "identity_seed": clip.identity_seed, "motion_seed": clip.motion_seed, "N": n, "H": h, "W": w,
        "parts": NUM_PARTS,
    })
    return directory


def load_clip(directory: Path) -> VideoClip:
    directory = Path(directory)
    meta = read_manifest(directory / "manifest.txt")
    frames = read_frames(directory / "frames")
    pose_paths = sorted((directory / "poses").glob("pose_*.png"))
    idx = np.stack([np.asarray(Image.open(p)) for p in pose_paths])
    return VideoClip(frames, index_to_pose(idx), int(meta.get("identity_seed", -1)), int(meta.get("motion_seed", -1)))
