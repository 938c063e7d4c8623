"""Run configuration: ``key = value`` files, defaults and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .spr import TrainConfig

BASELINES = ("FBR", "LBR", "LBR-SPR")
MODES = ("partial", "merge")
PARADIGMS = ("REC", "PRD", "RR", "SF")


@dataclass
class RunConfig:
    dataset: str = ""
    train_dataset: str = ""  # original training split, merged in merge mode
    out: str = "runs/default"
    mode: str = "partial"
    paradigm: str = "REC"
    baseline: str = "LBR-SPR"
    motion_enhanced: bool = False
    seed: int = 0
    # training
    n: int = 256
    T: int = 30
    T_prime: int = 5
    r: float = 0.005
    pace_start_coeff: float = 4.0
    lr: float = 1e-3
    weight_decay: float = 0.0
    widths: tuple[int, int, int] = (32, 64, 128)
    # cubes
    D: int = 5
    cube_size: int = 32
    diff_threshold: float = 0.05
    min_box: int = 16
    flow_block: int = 8
    flow_radius: int = 4
    # scoring
    omega_a: float = 0.5
    omega_m: float = 1.0
    smoothing: int = 0
    eval_every_epoch: bool = True

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.paradigm not in PARADIGMS:
            raise ConfigurationError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.baseline not in BASELINES:
            raise ConfigurationError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.mode == "merge" and not self.train_dataset:
            raise ConfigurationError("merge mode needs train_dataset (the original training split)")
        if self.D < 1 or self.cube_size != 32:
            raise ConfigurationError("cubes must have D >= 1 slices at 32x32")
        if self.paradigm == "PRD" and self.D < 2:
            raise ConfigurationError("PRD needs D >= 2")
        self.train_config().validate()
        return self

    def effective_warmup(self) -> int:
        """LBR and FBR never refine: their warm-up covers every epoch."""
        return self.T if self.baseline in ("LBR", "FBR") else self.T_prime

    def train_config(self) -> TrainConfig:
        return TrainConfig(n=self.n, T=self.T, T_prime=self.effective_warmup(), r=self.r,
                           seed=self.seed, paradigm=self.paradigm, mode=self.mode,
                           pace_start_coeff=self.pace_start_coeff)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


VALID_KEYS = tuple(f.name for f in fields(RunConfig))


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean for {name}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = tuple(int(p) for p in raw.replace(" ", "").split(","))
        if len(parts) != len(default):
            raise ValueError(f"{name} takes {len(default)} comma-separated integers")
        return parts
    return raw


def apply_overrides(config: RunConfig, pairs: dict[str, str], where=None) -> RunConfig:
    """Set string-valued keys on a config.  ``where`` maps keys to line
    numbers for error messages."""
    for key, raw in pairs.items():
        if key not in VALID_KEYS:
            loc = f"line {where[key]}: " if where and key in where else ""
            raise ConfigurationError(f"{loc}unknown key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
        try:
            value = _coerce(key, raw, getattr(RunConfig(), key))
        except ValueError as exc:
            loc = f"line {where[key]}: " if where and key in where else ""
            raise ConfigurationError(f"{loc}bad value {raw!r} for {key}: {exc}") from None
        setattr(config, key, value)
    return config


def parse_config_text(text: str) -> RunConfig:
    pairs: dict[str, str] = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        pairs[key] = value.strip()
        where[key] = lineno
    config = apply_overrides(RunConfig(), pairs, where)
    for choice_key, allowed in (("mode", MODES), ("paradigm", PARADIGMS), ("baseline", BASELINES)):
        if getattr(config, choice_key) not in allowed:
            raise ConfigurationError(
                f"line {where[choice_key]}: {choice_key} must be one of {allowed}, "
                f"got {getattr(config, choice_key)!r}")
    return config


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())
