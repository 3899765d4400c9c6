"""Two-stage training, the joint image/video case sampler, and checkpoints.

Stage 1 trains the appearance encoder and pose conditioner on single frames
with the temporal layers skipped. Stage 2 freezes everything except the
temporal attention layers and trains on a mix of single frames and
``K``-frame clips chosen by :func:`select_training_case`.

Checkpoint layout (a directory)::

    manifest.txt           key = value lines
    params/<name>.bin      one blob per tensor

Each blob is ``b"ALB1"``, a dtype code (uint8), the rank (uint32 LE), the
shape (uint64 LE each) and the raw little-endian data.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import Tensor

from animlab.diffusion import AnimationModel, stage1_loss, stage2_loss
from animlab.errors import (
    CheckpointMismatchError,
    CheckpointNotFoundError,
    ConfigError,
    CorruptCheckpointError,
)
from animlab.synthdata import VideoClip, read_manifest, write_manifest

log = logging.getLogger(__name__)


class TrainingCase(enum.Enum):
    IMAGE_RECON = "IMAGE_RECON"
    IMAGE_POSE = "IMAGE_POSE"
    VIDEO = "VIDEO"


@dataclass(frozen=True)
class JointTrainingConfig:
    tau0: float = 0.3
    tau1: float = 0.1
    tau2: float = 0.3
    K: int = 8
    stage1_steps: int = 200
    stage2_steps: int = 300
    stage1_batch: int = 32
    stage2_batch: int = 4
    lr: float = 2e-3
    grad_clip: float = 1.0
    seed: int = 7
    stage1_train_backbone: bool = True
    reference_frame: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau0 <= 1.0:
            raise ConfigError(f"tau0 must be in [0, 1], got {self.tau0}")
        if not 0.0 <= self.tau1 <= self.tau2 <= 1.0:
            raise ConfigError(f"need 0 <= tau1 <= tau2 <= 1, got tau1={self.tau1}, tau2={self.tau2}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be >= 0")


def select_training_case(r: float, cfg: JointTrainingConfig, stage: int) -> TrainingCase:
    """Map a uniform draw ``r`` to a training case; ties go to the lower branch."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must be in [0, 1], got {r}")
    if stage == 1:
        return TrainingCase.IMAGE_RECON if r <= cfg.tau0 else TrainingCase.IMAGE_POSE
    if stage != 2:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if r <= cfg.tau1:
        return TrainingCase.IMAGE_RECON
    if r <= cfg.tau2:
        return TrainingCase.IMAGE_POSE
    return TrainingCase.VIDEO


@dataclass
class ToyDataset:
    """Training clips plus optional single-frame stills used for reconstruction cases."""

    clips: list[VideoClip]
    stills: list[VideoClip] = field(default_factory=list)
    reference_frame: int = 0

    def __post_init__(self):
        if not self.clips:
            raise ConfigError("training dataset is empty")

    def _ref_index(self, clip: VideoClip, rng: np.random.Generator) -> int:
        if self.reference_frame < 0:
            return int(rng.integers(len(clip)))
        return min(self.reference_frame, len(clip) - 1)

    def image_batch(self, case: TrainingCase, batch: int, rng: np.random.Generator):
        refs, targets, poses = [], [], []
        for _ in range(batch):
            if case is TrainingCase.IMAGE_RECON and self.stills:
                still = self.stills[int(rng.integers(len(self.stills)))]
                refs.append(still.frames[0]); targets.append(still.frames[0]); poses.append(still.poses[0])
                continue
            clip = self.clips[int(rng.integers(len(self.clips)))]
            ri = self._ref_index(clip, rng)
            if case is TrainingCase.IMAGE_RECON:
                ti = ri
            else:
                ti = int(rng.integers(len(clip)))
            refs.append(clip.frames[ri]); targets.append(clip.frames[ti]); poses.append(clip.poses[ti])
        return tuple(torch.from_numpy(np.stack(x)) for x in (refs, targets, poses))

    def video_batch(self, batch: int, K: int, rng: np.random.Generator):
        refs, clips, poses = [], [], []
        for _ in range(batch):
            clip = self.clips[int(rng.integers(len(self.clips)))]
            if len(clip) < K:
                raise ConfigError(f"clip has {len(clip)} frames, need at least K={K}")
            start = int(rng.integers(len(clip) - K + 1))
            refs.append(clip.frames[self._ref_index(clip, rng)])
            clips.append(np.moveaxis(clip.frames[start:start + K], 0, 1))
            poses.append(clip.poses[start:start + K])
        return tuple(torch.from_numpy(np.stack(x)) for x in (refs, clips, poses))


def trainable_names(model: AnimationModel, stage: int, cfg: JointTrainingConfig) -> set[str]:
    groups = model.param_groups()
    if stage == 1:
        names = set(groups["appearance"]) | set(groups["pose"])
        if cfg.stage1_train_backbone:
            names |= set(groups["spatial"])
        return names
    if stage == 2:
        return set(groups["temporal"])
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def _freeze_for(model: AnimationModel, stage: int, cfg: JointTrainingConfig) -> list[Tensor]:
    names = trainable_names(model, stage, cfg)
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in names)
        if name in names:
            params.append(p)
    return params


@dataclass
class TrainLog:
    rows: list[tuple[int, int, str, float]] = field(default_factory=list)

    def add(self, step: int, stage: int, case: TrainingCase, loss: float) -> None:
        self.rows.append((step, stage, case.value, loss))

    def losses(self, stage: int | None = None) -> list[float]:
        return [r[3] for r in self.rows if stage is None or r[1] == stage]

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "stage", "case", "loss"))
            for step, stage, case, loss in self.rows:
                w.writerow((step, stage, case, repr(loss)))


def _noise_inputs(shape, ref_shape, T: int, g: torch.Generator, dtype):
    b = shape[0]
    t = torch.randint(0, T, (b,), generator=g)
    eps = torch.randn(shape, generator=g, dtype=dtype)
    ref_noise = torch.randn(ref_shape, generator=g, dtype=dtype)
    return t, eps, ref_noise


def _step(model, opt, params, loss, cfg: JointTrainingConfig) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    opt.step()


def stage1_batch_loss(model: AnimationModel, data: ToyDataset, cfg: JointTrainingConfig,
                      rng: np.random.Generator, g: torch.Generator) -> tuple[Tensor, TrainingCase]:
    case = select_training_case(float(rng.random()), cfg, 1)
    refs, targets, poses = data.image_batch(case, cfg.stage1_batch, rng)
    t, eps, ref_noise = _noise_inputs(targets.shape, refs.shape, model.schedule.T, g, model.dtype)
    loss = stage1_loss(model, refs.to(model.dtype), targets.to(model.dtype), poses.to(model.dtype), t, eps, ref_noise)
    return loss, case


def stage2_batch_loss(model: AnimationModel, data: ToyDataset, cfg: JointTrainingConfig,
                      rng: np.random.Generator, g: torch.Generator) -> tuple[Tensor, TrainingCase]:
    case = select_training_case(float(rng.random()), cfg, 2)
    if case is TrainingCase.VIDEO:
        refs, clips, poses = data.video_batch(cfg.stage2_batch, cfg.K, rng)
        frames = cfg.K
    else:
        refs, targets, p = data.image_batch(case, cfg.stage2_batch * cfg.K, rng)
        clips, poses, frames = targets.unsqueeze(2), p.unsqueeze(1), 1
    t, eps, ref_noise = _noise_inputs(clips.shape, refs.shape, model.schedule.T, g, model.dtype)
    loss = stage2_loss(model, refs.to(model.dtype), clips.to(model.dtype), poses.to(model.dtype), t, eps,
                       frames, ref_noise)
    return loss, case


def train_stage1(model: AnimationModel, data: ToyDataset, cfg: JointTrainingConfig,
                 log_to: TrainLog | None = None) -> TrainLog:
    """Optimize appearance encoder and pose conditioner (plus 2D backbone if enabled)."""
    trace = log_to if log_to is not None else TrainLog()
    params = _freeze_for(model, 1, cfg)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    g = torch.Generator().manual_seed(cfg.seed * 2 + 1)
    model.train()
    for step in range(cfg.stage1_steps):
        loss, case = stage1_batch_loss(model, data, cfg, rng, g)
        _step(model, opt, params, loss, cfg)
        trace.add(step, 1, case, float(loss.item()))
        if step % 50 == 0:
            log.info("stage1 step %d case %s loss %.5f", step, case.value, loss.item())
    model.eval()
    return trace


def train_stage2(model: AnimationModel, data: ToyDataset, cfg: JointTrainingConfig,
                 log_to: TrainLog | None = None) -> TrainLog:
    """Optimize only the temporal attention layers on joint image/video batches."""
    trace = log_to if log_to is not None else TrainLog()
    params = _freeze_for(model, 2, cfg)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    g = torch.Generator().manual_seed(cfg.seed * 2 + 2)
    model.train()
    for step in range(cfg.stage2_steps):
        loss, case = stage2_batch_loss(model, data, cfg, rng, g)
        _step(model, opt, params, loss, cfg)
        trace.add(step, 2, case, float(loss.item()))
        if step % 50 == 0:
            log.info("stage2 step %d case %s loss %.5f", step, case.value, loss.item())
    model.eval()
    return trace


@torch.no_grad()
def evaluation_loss(model: AnimationModel, data: ToyDataset, K: int, batches: int = 4, batch: int = 4,
                    seed: int = 1234, use_temporal: bool = True) -> float:
    """Mean noise-regression loss on a fixed, seed-determined set of clip windows."""
    rng = np.random.default_rng([seed, 3])
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(batches):
        refs, clips, poses = data.video_batch(batch, K, rng)
        t, eps, ref_noise = _noise_inputs(clips.shape, refs.shape, model.schedule.T, g, model.dtype)
        if use_temporal:
            loss = stage2_loss(model, refs.to(model.dtype), clips.to(model.dtype), poses.to(model.dtype), t,
                               eps, K, ref_noise)
        else:
            from animlab.schedule import forward_noise
            z = forward_noise(model.schedule, clips.to(model.dtype), t, eps)
            pred = model.predict_noise(z, t, refs.to(model.dtype), poses.to(model.dtype), ref_noise=ref_noise,
                                       use_temporal=False)
            loss = torch.mean((pred - eps) ** 2)
        total += float(loss)
    return total / batches


# -- checkpoints ---------------------------------------------------------------------------

_MAGIC = b"ALB1"
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def _blob(t: Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {t.dtype}")
    code, np_dt = _DTYPES[t.dtype]
    head = _MAGIC + struct.pack("<BI", code, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.numpy().astype(np_dt, copy=False).tobytes()


def _unblob(data: bytes, name: str) -> Tensor:
    try:
        if data[:4] != _MAGIC:
            raise CorruptCheckpointError(f"{name}: bad magic")
        code, ndim = struct.unpack_from("<BI", data, 4)
        shape = struct.unpack_from(f"<{ndim}Q", data, 9)
        off = 9 + 8 * ndim
        dtype, np_dt = _CODES[code]
        count = int(np.prod(shape)) if ndim else 1
        expected = off + count * np.dtype(np_dt).itemsize
        if len(data) != expected:
            raise CorruptCheckpointError(f"{name}: expected {expected} bytes, found {len(data)}")
        arr = np.frombuffer(data, dtype=np_dt, count=count, offset=off).reshape(shape)
        return torch.from_numpy(arr.copy())
    except (struct.error, KeyError) as exc:
        raise CorruptCheckpointError(f"{name}: malformed blob ({exc})") from exc


def config_hash(entries: dict) -> str:
    canon = "\n".join(f"{k}={entries[k]}" for k in sorted(entries))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(params: dict[str, Tensor], manifest: dict, path: Path) -> Path:
    """Write ``params`` and ``manifest`` (must carry config_hash, stage, step, seed)."""
    missing = [k for k in ("config_hash", "stage", "step", "seed") if k not in manifest]
    if missing:
        raise ConfigError(f"checkpoint manifest missing keys: {missing}")
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = dict(manifest)
    names = sorted(params)
    for name in names:
        data = _blob(params[name])
        (path / "params" / f"{name}.bin").write_bytes(data)
        entries[f"tensor.{name}"] = hashlib.sha256(data).hexdigest()
    entries["tensors"] = len(names)
    write_manifest(path / "manifest.txt", entries)
    return path


def load_checkpoint(path: Path, expected_hash: str | None = None,
                    allow_mismatch: bool = False) -> tuple[dict[str, Tensor], dict[str, str]]:
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    try:
        manifest = read_manifest(path / "manifest.txt")
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpointError(f"unreadable manifest in {path}") from exc
    if expected_hash is not None and manifest.get("config_hash") != expected_hash and not allow_mismatch:
        raise CheckpointMismatchError(
            f"checkpoint config hash {manifest.get('config_hash')} != expected {expected_hash}"
        )
    params = {}
    for key, digest in manifest.items():
        if not key.startswith("tensor."):
            continue
        name = key[len("tensor."):]
        blob_path = path / "params" / f"{name}.bin"
        if not blob_path.is_file():
            raise CorruptCheckpointError(f"missing tensor file {blob_path.name}")
        data = blob_path.read_bytes()
        tensor = _unblob(data, name)
        if hashlib.sha256(data).hexdigest() != digest:
            raise CorruptCheckpointError(f"{name}: checksum mismatch")
        params[name] = tensor
    if "tensors" in manifest and int(manifest["tensors"]) != len(params):
        raise CorruptCheckpointError(f"manifest lists {manifest['tensors']} tensors, found {len(params)}")
    return params, manifest


def apply_params(model: torch.nn.Module, params: dict[str, Tensor]) -> None:
    """Copy checkpoint tensors into ``model``; shape or key mismatches raise ConfigError."""
    state = model.state_dict()
    bad = sorted(
        f"{k} {tuple(params[k].shape)} vs {tuple(v.shape)}"
        for k, v in state.items() if k in params and params[k].shape != v.shape
    )
    missing = sorted(set(state) - set(params))
    unexpected = sorted(set(params) - set(state))
    if bad or missing or unexpected:
        raise ConfigError(
            f"incompatible checkpoint: shape mismatches {bad}, missing {missing}, unexpected {unexpected}"
        )
    model.load_state_dict({k: v.to(state[k].dtype) for k, v in params.items()})


def model_params(model: torch.nn.Module) -> dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def flatten_config(prefix: str, obj) -> dict[str, str]:
    data = asdict(obj) if hasattr(obj, "__dataclass_fields__") else dict(obj)
    return {f"{prefix}.{k}": str(v) for k, v in data.items() if k != "extra"}


def param_deltas(before: dict[str, Tensor], after: dict[str, Tensor], names: Iterable[str]) -> dict[str, float]:
    """Max absolute change per named tensor."""
    return {n: float((after[n] - before[n]).abs().max()) for n in names}
