"""Training configuration: the text format, the two profiles, and the
config fingerprint.

Config files are plain ``key = value`` lines with ``[translator]``,
``[dsn]``, ``[srn]`` and ``[data]`` section headers; ``#`` starts a
comment.  Keys outside any section apply to the run as a whole.  Unknown
keys are rejected (naming the key and line), and the upscale factor is
fixed at 4 - it is part of the artifact, not a knob.

The ``desk`` profile is sized so the full three-stage run finishes in
minutes on a CPU; the ``paper`` profile materialises the published regime
(3750 translator epochs over 306 rainy / 344 sunny images) without any
expectation that it is executed here.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields

from .errors import ConfigError

ENV_DATA_ROOT = "RAINSR_DATA_ROOT"
SCALE = 4


@dataclass
class DataConfig:
    root: str = ""
    scene_size: int = 64
    sunny: int = 40
    rainy: int = 40
    real_lr: int = 40
    eval: int = 8
    rain_streaks: int = 14
    rain_length: float = 14.0
    rain_width: float = 1.6
    rain_angle_deg: float = 15.0
    rain_opacity: float = 0.35
    rain_contrast_dim: float = 0.25
    expected_sunny: int = 0
    expected_rainy: int = 0


@dataclass
class TranslatorConfig:
    iters: int = 300
    epochs: int = 0
    batch_size: int = 4
    patch_size: int = 64
    base_channels: int = 16
    residual_blocks: int = 3
    disc_channels: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    buffer_capacity: int = 50
    lr_schedule: str = "constant"


@dataclass
class DsnConfig:
    iters: int = 200
    batch_size: int = 4
    patch_size: int = 64
    base_channels: int = 16
    disc_channels: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_content: float = 1.0
    lambda_adv: float = 0.05


@dataclass
class SrnConfig:
    iters: int = 300
    batch_size: int = 4
    patch_size: int = 64
    base_channels: int = 32
    residual_blocks: int = 4
    disc_channels: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_pix: float = 1.0
    lambda_adv: float = 0.05
    use_domain_weights: bool = False


# per-profile overrides applied before user keys
_PAPER_OVERRIDES = {
    ("translator", "iters"): 0,
    ("translator", "epochs"): 3750,
    ("translator", "batch_size"): 1,
    ("translator", "patch_size"): 256,
    ("translator", "base_channels"): 64,
    ("translator", "residual_blocks"): 9,
    ("translator", "disc_channels"): 64,
    ("translator", "lr_schedule"): "linear_decay",
    ("dsn", "iters"): 20_000,
    ("dsn", "patch_size"): 256,
    ("dsn", "base_channels"): 64,
    ("dsn", "disc_channels"): 64,
    ("srn", "iters"): 20_000,
    ("srn", "patch_size"): 256,
    ("srn", "base_channels"): 64,
    ("srn", "residual_blocks"): 16,
    ("srn", "disc_channels"): 64,
    ("srn", "use_domain_weights"): True,
    ("data", "expected_sunny"): 344,
    ("data", "expected_rainy"): 306,
}


@dataclass
class TrainConfig:
    profile: str = "desk"
    seed: int = 0
    scale: int = SCALE
    run_dir: str = ""
    data: DataConfig = None
    translator: TranslatorConfig = None
    dsn: DsnConfig = None
    srn: SrnConfig = None

    def canonical_text(self) -> str:
        """Every effective setting that influences computation, one per line.

        Filesystem placement (data root, run dir) is excluded on purpose:
        two runs over the same data must fingerprint identically wherever
        they live.
        """
        lines = [
            f"profile = {self.profile}",
            f"scale = {self.scale}",
            f"seed = {self.seed}",
        ]
        for section, obj in (("data", self.data), ("translator", self.translator),
                             ("dsn", self.dsn), ("srn", self.srn)):
            for f in fields(obj):
                if (section, f.name) == ("data", "root"):
                    continue
                lines.append(f"{section}.{f.name} = {getattr(obj, f.name)!r}")
        return "\n".join(sorted(lines)) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def translator_iters(self, smaller_folder: int) -> int:
        """Total translator iterations; epochs count passes over the smaller
        training folder when set (paper profile)."""
        t = self.translator
        if t.epochs > 0:
            per_epoch = -(-smaller_folder // t.batch_size)  # ceil
            return t.epochs * per_epoch
        return t.iters


_SECTIONS = {"data": DataConfig, "translator": TranslatorConfig,
             "dsn": DsnConfig, "srn": SrnConfig}
_TOP_KEYS = {"profile": str, "seed": int, "scale": int, "run_dir": str}


def _parse_value(raw: str, target_type: type, key: str, line_no: int):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"line {line_no}: key {key!r} expects {target_type.__name__}, "
            f"got {raw!r}"
        ) from None


def default_config(profile: str = "desk") -> TrainConfig:
    cfg = TrainConfig(profile=profile, data=DataConfig(),
                      translator=TranslatorConfig(), dsn=DsnConfig(),
                      srn=SrnConfig())
    if profile == "paper":
        for (section, key), value in _PAPER_OVERRIDES.items():
            setattr(getattr(cfg, section), key, value)
    elif profile != "desk":
        raise ConfigError(f"unknown profile {profile!r}")
    return cfg


def _scan(text: str) -> list[tuple[int, str, str, str]]:
    """Yield (line_no, section, key, raw_value) for every assignment."""
    out = []
    section = ""
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {line_no}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        out.append((line_no, section, key.strip(), value))
    return out


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    entries = _scan(text)
    profile = "desk"
    for line_no, section, key, value in entries:
        if section == "" and key == "profile":
            profile = _parse_value(value, str, key, line_no)
    cfg = default_config(profile)

    for line_no, section, key, value in entries:
        if section == "":
            if key not in _TOP_KEYS:
                raise ConfigError(f"{source} line {line_no}: unknown key {key!r}")
            parsed = _parse_value(value, _TOP_KEYS[key], key, line_no)
            if key == "scale" and parsed != SCALE:
                raise ConfigError(
                    f"{source} line {line_no}: scale is fixed at {SCALE}"
                )
            setattr(cfg, key, parsed)
        else:
            target = getattr(cfg, section)
            hit = next((f for f in fields(target) if f.name == key), None)
            if hit is None:
                raise ConfigError(
                    f"{source} line {line_no}: unknown key {key!r} in [{section}]"
                )
            kind = type(getattr(target, key))
            setattr(target, key, _parse_value(value, kind, key, line_no))
    return _finalise(cfg)


def _finalise(cfg: TrainConfig) -> TrainConfig:
    if not cfg.data.root:
        env = os.environ.get(ENV_DATA_ROOT, "")
        if not env:
            raise ConfigError(
                f"missing dataset root: set [data] root or ${ENV_DATA_ROOT}"
            )
        cfg.data.root = env
    if not cfg.run_dir:
        cfg.run_dir = os.path.join(cfg.data.root, "run")
    return cfg


def load_config(path: str) -> TrainConfig:
    """Parse a config file; unknown keys and bad types raise ConfigError."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=path)
