"""Model/training configuration, presets, and the ``key=value`` text format.

The same text format is used for ``--config`` files, the checkpoint config
blob, and the ``resolved.cfg`` echoed into run directories.  Keys are
namespaced (``backbone.stages``, ``spf.code_dim``, ``train.lr``, ...), lists
are comma separated, and ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class BackboneConfig:
    input_size: tuple[int, int] = (64, 64)
    stage_channels: tuple[int, ...] = (8, 16, 32)
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    block_depth: int = 2
    dropout_p: float = 0.1
    pyramid_levels: int = 2

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def output_shape(self) -> tuple[int, int, int]:
        down = 2 ** (self.num_stages - 1)
        return self.stage_channels[-1], self.input_size[0] // down, self.input_size[1] // down

    def validate(self) -> None:
        s = self.num_stages
        if s < 1 or len(self.dilation_rates) != s:
            raise ConfigError("stage_channels and dilation_rates must have the same non-zero length")
        if any(c < 1 for c in self.stage_channels) or any(d < 1 for d in self.dilation_rates):
            raise ConfigError("stage channels and dilation rates must be positive")
        if self.block_depth < 1:
            raise ConfigError("block_depth must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        down = 2 ** (s - 1)
        h, w = self.input_size
        if h % down or w % down:
            raise ConfigError(f"input size {h}x{w} not divisible by 2^(stages-1) = {down}")
        _, fh, fw = self.output_shape()
        coarse = 2 ** (self.pyramid_levels - 1)
        if s > 1 and (fh % coarse or fw % coarse):
            raise ConfigError(f"final map {fh}x{fw} cannot host {self.pyramid_levels} pyramid levels")


@dataclass
class SpfConfig:
    code_dim: int = 16
    shared_weights: bool = True
    recon_weight: float = 1.0
    encoder_depth: int | None = None  # None: log2(map side) - 2
    ae_channels: int = 8

    def depth_for(self, map_size: int) -> int:
        if self.encoder_depth is not None:
            return self.encoder_depth
        return max(int(math.log2(map_size)) - 2, 0)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    spf: SpfConfig = field(default_factory=SpfConfig)
    flatten: str = "spf"
    num_labels: int = 16
    preset: str = "desk"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 4
    seed: int = 0
    split_seed: int = 0

    @property
    def flat_width(self) -> int:
        return self.backbone.stage_channels[-1] * self.spf.code_dim

    def validate(self) -> "ModelConfig":
        self.backbone.validate()
        if self.flatten not in ("spf", "baseline"):
            raise ConfigError(f"flatten strategy must be 'spf' or 'baseline', got {self.flatten!r}")
        if self.num_labels < 1:
            raise ConfigError("num_labels must be >= 1")
        d = self.spf.code_dim
        if d < 1:
            raise ConfigError("code_dim must be >= 1")
        if self.spf.recon_weight < 0:
            raise ConfigError("recon_weight must be >= 0")
        _, h, w = self.backbone.output_shape()
        if self.flatten == "baseline":
            g = math.isqrt(d)
            if g * g != d:
                raise ConfigError(f"baseline flatten needs a square code_dim, sqrt({d}) is not an integer")
            if h % g or w % g:
                raise ConfigError(f"baseline grid {g}x{g} does not divide feature map {h}x{w}")
        else:
            depth = self.spf.depth_for(h)
            if any(not _is_pow2(n) for n in (h, w)) or h % 2**depth or w % 2**depth:
                raise ConfigError(f"feature map {h}x{w} incompatible with encoder depth {depth}")
            if self.spf.ae_channels < 1:
                raise ConfigError("ae_channels must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.seed < 2**64 or not 0 <= self.split_seed < 2**64:
            raise ConfigError("seeds must be unsigned 64-bit integers")
        return self


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def desk_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def paper_config(**overrides) -> ModelConfig:
    """512x512 input, last stage 128 maps of 64x64, 128-dim codes, lr 2e-6, batch 12, 30 epochs.

    Documents the published scale; not meant to run on a desk machine.
    """
    cfg = ModelConfig(
        backbone=BackboneConfig(input_size=(512, 512), stage_channels=(16, 32, 64, 128),
                                dilation_rates=(1, 2, 4, 2), block_depth=2, dropout_p=0.1, pyramid_levels=2),
        spf=SpfConfig(code_dim=128, ae_channels=8),
        num_labels=57, preset="paper", lr=2e-6, batch_size=12, epochs=30,
    )
    return dataclasses.replace(cfg, **overrides)


def tiny_config(**overrides) -> ModelConfig:
    """16x16 input, 4 final maps of 8x8, 4-dim codes, 3 labels; for tests and gradient checks."""
    cfg = ModelConfig(
        backbone=BackboneConfig(input_size=(16, 16), stage_channels=(2, 4), dilation_rates=(1, 2),
                                block_depth=2, dropout_p=0.1, pyramid_levels=2),
        spf=SpfConfig(code_dim=4, ae_channels=2),
        num_labels=3, preset="tiny", batch_size=8, epochs=1,
    )
    return dataclasses.replace(cfg, **overrides)


PRESETS = {"desk": desk_config, "paper": paper_config, "tiny": tiny_config}


# key=value text ------------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


# key -> (object path, attribute, parser, formatter)
_FIELDS = {
    "model.preset": ("", "preset", str, str),
    "model.flatten": ("", "flatten", str, str),
    "model.num_labels": ("", "num_labels", int, str),
    "backbone.input_size": ("backbone", "input_size", _ints, lambda v: f"{v[0]}x{v[1]}"),
    "backbone.stages": ("backbone", "stage_channels", _ints, lambda v: ",".join(map(str, v))),
    "backbone.dilations": ("backbone", "dilation_rates", _ints, lambda v: ",".join(map(str, v))),
    "backbone.block_depth": ("backbone", "block_depth", int, str),
    "backbone.dropout": ("backbone", "dropout_p", float, repr),
    "backbone.pyramid_levels": ("backbone", "pyramid_levels", int, str),
    "spf.code_dim": ("spf", "code_dim", int, str),
    "spf.shared_weights": ("spf", "shared_weights", _bool, lambda v: "true" if v else "false"),
    "spf.recon_weight": ("spf", "recon_weight", float, repr),
    "spf.encoder_depth": ("spf", "encoder_depth", _optional_int, lambda v: "auto" if v is None else str(v)),
    "spf.ae_channels": ("spf", "ae_channels", int, str),
    "train.lr": ("", "lr", float, repr),
    "train.beta1": ("", "beta1", float, repr),
    "train.beta2": ("", "beta2", float, repr),
    "train.eps": ("", "eps", float, repr),
    "train.batch_size": ("", "batch_size", int, str),
    "train.epochs": ("", "epochs", int, str),
    "train.seed": ("", "seed", int, str),
    "data.split_seed": ("", "split_seed", int, str),
}

MODEL_KEYS = frozenset(_FIELDS)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` comments and blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def apply_overrides(cfg: ModelConfig, pairs: dict[str, str], strict: bool = True) -> ModelConfig:
    """Return a copy of ``cfg`` with the model keys in ``pairs`` applied."""
    cfg = dataclasses.replace(cfg, backbone=dataclasses.replace(cfg.backbone), spf=dataclasses.replace(cfg.spf))
    for key, value in pairs.items():
        if key not in _FIELDS:
            if strict and not key.startswith(("meta.", "data.", "run.")):
                raise ConfigError(f"unknown config key {key!r}")
            continue
        obj_name, attr, parse, _ = _FIELDS[key]
        target = getattr(cfg, obj_name) if obj_name else cfg
        try:
            setattr(target, attr, parse(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return cfg


def config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    out = {}
    for key, (obj_name, attr, _, fmt) in _FIELDS.items():
        target = getattr(cfg, obj_name) if obj_name else cfg
        out[key] = fmt(getattr(target, attr))
    return out


def config_from_kv(pairs: dict[str, str]) -> ModelConfig:
    """Rebuild a config: start from the named preset, then apply every key."""
    preset = pairs.get("model.preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    return apply_overrides(PRESETS[preset](), pairs, strict=False)


def parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]

