"""Plain-text run configuration.

A config file holds one ``section.key = value`` assignment per line; blank
lines and ``#`` comments are ignored. Every key has a default, so an empty
file is a complete configuration. Unknown keys and values that do not parse
as the key's type are rejected. Lists are comma separated, booleans are
``true``/``false``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import torch

from animlab.backbone import BackboneConfig
from animlab.diffusion import AnimationModel
from animlab.errors import ConfigError
from animlab.fusion import FusionConfig
from animlab.schedule import make_noise_schedule
from animlab.synthdata import CorpusSpec, build_corpus, overfit_set
from animlab.training import JointTrainingConfig, ToyDataset

DEFAULTS: dict[str, Any] = {
    "model.base_channels": 32,
    "model.channel_multipliers": (1, 2),
    "model.num_res_blocks": 1,
    "model.attention_resolutions": (16,),
    "model.temporal_pe_max_len": 32,
    "model.image_size": 32,
    "model.pose_channels": 6,
    "model.clean_reference": True,
    "model.input_skip": True,
    "model.seed": 0,
    "diffusion.T": 100,
    "diffusion.beta_start": 1e-3,
    "diffusion.beta_end": 0.2,
    "diffusion.sampler": "ddim",
    "diffusion.steps": 25,
    "diffusion.clip_x0": True,
    "training.tau0": 0.3,
    "training.tau1": 0.1,
    "training.tau2": 0.3,
    "training.K": 8,
    "training.stage1_steps": 200,
    "training.stage2_steps": 300,
    "training.stage1_batch": 32,
    "training.stage2_batch": 4,
    "training.lr": 2e-3,
    "training.grad_clip": 1.0,
    "training.seed": 7,
    "training.stage1_train_backbone": True,
    "training.reference_frame": 0,
    "training.threads": 1,
    "fusion.K": 8,
    "fusion.s": 4,
    "fusion.noise_mode": "shared",
    "fusion.seed": 0,
    "fusion.average_pad_slots": True,
    "fusion.use_temporal": True,
    "data.train_identities": 8,
    "data.train_motions": 4,
    "data.heldout_identities": 2,
    "data.heldout_motions": 2,
    "data.frames": 16,
    "data.size": 32,
    "data.seed": 0,
    "data.overfit_clips": 0,
    "data.use_stills": True,
    "eval.reference_frame": 0,
}

SECTIONS = ("model", "diffusion", "training", "fusion", "data", "eval")
MODEL_SECTIONS = ("model", "diffusion")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def hash(self) -> str:
        return _hash(self.values)

    @property
    def model_hash(self) -> str:
        """Hash over the keys that determine parameter shapes and the schedule."""
        return _hash({k: v for k, v in self.values.items() if k.split(".")[0] in MODEL_SECTIONS})

    def section(self, name: str) -> dict[str, Any]:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def canonical(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def backbone(self) -> BackboneConfig:
        m = self.section("model")
        return BackboneConfig(
            base_channels=m["base_channels"], channel_multipliers=m["channel_multipliers"],
            num_res_blocks_per_level=m["num_res_blocks"], attention_resolutions=m["attention_resolutions"],
            temporal_pe_max_len=m["temporal_pe_max_len"], image_size=m["image_size"],
            pose_channels=m["pose_channels"],
        )

    def schedule(self):
        d = self.section("diffusion")
        return make_noise_schedule(d["T"], d["beta_start"], d["beta_end"])

    def training(self) -> JointTrainingConfig:
        t = self.section("training")
        t.pop("threads")
        return JointTrainingConfig(**t)

    def fusion(self) -> FusionConfig:
        f = self.section("fusion")
        d = self.section("diffusion")
        return FusionConfig(noise_mode=f["noise_mode"], steps=d["steps"], sampler=d["sampler"], seed=f["seed"],
                            clip_x0=d["clip_x0"], average_pad_slots=f["average_pad_slots"],
                            use_temporal=f["use_temporal"])

    def build_model(self) -> AnimationModel:
        """Freshly initialized model; initialization is seeded by ``model.seed``."""
        torch.manual_seed(self["model.seed"])
        return AnimationModel(self.backbone(), self.schedule(), clean_reference=self["model.clean_reference"],
                              input_skip=self["model.input_skip"])

    def dataset(self) -> ToyDataset:
        """Training data generated in memory from the ``data`` section."""
        d = self.section("data")
        if d["overfit_clips"] > 0:
            clips = overfit_set(d["overfit_clips"], d["frames"], d["size"], d["seed"])
            return ToyDataset(clips, [], self["training.reference_frame"])
        corpus = build_corpus(self.corpus())
        stills = corpus["stills"] if d["use_stills"] else []
        return ToyDataset(corpus["train"], stills, self["training.reference_frame"])

    def corpus(self) -> CorpusSpec:
        d = self.section("data")
        return CorpusSpec(d["train_identities"], d["train_motions"], d["heldout_identities"],
                          d["heldout_motions"], d["frames"], d["size"], d["seed"])


def _hash(values: dict[str, Any]) -> str:
    canon = "".join(f"{k}={_format(values[k])}\n" for k in sorted(values))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _parse_lines(lines: Iterable[str], origin: str) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def validate(values: dict[str, Any]) -> None:
    missing = sorted(set(DEFAULTS) - set(values))
    if missing:
        raise ConfigError(f"missing required keys: {missing}")
    K, s = values["fusion.K"], values["fusion.s"]
    if not 0 < s < K:
        raise ConfigError(f"fusion.s: s must be < K and > 0 (s={s}, K={K})")
    if values["fusion.noise_mode"] not in ("shared", "partitioned"):
        raise ConfigError("fusion.noise_mode must be 'shared' or 'partitioned'")
    if values["diffusion.sampler"] not in ("ddim", "ddpm"):
        raise ConfigError("diffusion.sampler must be 'ddim' or 'ddpm'")
    if max(K, values["training.K"]) > values["model.temporal_pe_max_len"]:
        raise ConfigError("model.temporal_pe_max_len must be >= the segment length K")
    if values["data.frames"] < K:
        raise ConfigError(f"data.frames must be >= fusion.K ({values['data.frames']} < {K})")
    if not 1 <= values["diffusion.steps"] <= values["diffusion.T"]:
        raise ConfigError("diffusion.steps must be in [1, T]")


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(_parse_lines(path.read_text().splitlines(), str(path)))
    values.update(_parse_lines(list(overrides), "override"))
    validate(values)
    cfg = RunConfig(values)
    # construct once so dataclass invariants surface as config errors now
    cfg.backbone(), cfg.training(), cfg.fusion(), cfg.corpus()
    try:
        cfg.schedule()
    except ValueError as exc:
        raise ConfigError(f"diffusion: {exc}") from None
    return cfg
