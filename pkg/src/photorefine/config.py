"""Pipeline configuration: one JSON or TOML file holding every stage's settings.

Sections are ``synth``, ``match``, ``lighting``, ``em`` and ``integration``,
plus top-level ``seed`` and ``threads``. Every key is optional and the
defaults are the published constants where they exist. Unknown sections or
keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .integrate import IntegrationConfig
from .lighting import LightingConfig
from .match import MatchConfig
from .recover import EMConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    n_frames: int = 20
    motion: str = "wobble"  # wobble | orbit
    yaw_deg: float = 25.0
    pitch_deg: float = 25.0
    step_deg: float = 3.0
    surface: str = "bumpy"  # bumpy | sphere
    amplitude: float = 0.01
    frequency: float = 8.0
    albedo: str = "patches_checker"
    smooth_sigma: float = 0.0
    smooth_iters: int = 1
    smooth_order: int = 2
    corrupt_frames: int = 0
    sp_density: float = 0.5
    perturb_px: float = 0.0  # mean image displacement caused by translation noise
    perturb_r_deg: float = 0.0

    def __post_init__(self):
        if self.motion not in ("wobble", "orbit"):
            raise ValidationError(f"unknown motion {self.motion!r}")
        if self.surface not in ("bumpy", "sphere"):
            raise ValidationError(f"unknown surface {self.surface!r}")
        if self.size < 16 or self.n_frames < 1:
            raise ValidationError("size must be >= 16 and n_frames >= 1")
        if not 0 <= self.corrupt_frames < max(self.n_frames, 1):
            raise ValidationError("corrupt_frames must leave the reference frame intact")
        if not 0 <= self.sp_density <= 1:
            raise ValidationError("sp_density must be in [0, 1]")
        if self.smooth_sigma < 0 or self.perturb_px < 0 or self.perturb_r_deg < 0:
            raise ValidationError("degradation strengths must be non-negative")


_SECTIONS = {
    "synth": SynthConfig,
    "match": MatchConfig,
    "lighting": LightingConfig,
    "em": EMConfig,
    "integration": IntegrationConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    lighting: LightingConfig = field(default_factory=LightingConfig)
    em: EMConfig = field(default_factory=EMConfig)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ValidationError("configuration must be a table/object")
        unknown = set(data) - set(_SECTIONS) - {"seed", "threads"}
        if unknown:
            raise ValidationError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ValidationError(f"section [{name}] must be a table")
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ValidationError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                kwargs[name] = typ(**section)
            except TypeError as exc:
                raise ValidationError(f"[{name}]: {exc}") from exc
        for key in ("seed", "threads"):
            if key in data:
                if not isinstance(data[key], int) or isinstance(data[key], bool):
                    raise ValidationError(f"{key} must be an integer")
                kwargs[key] = data[key]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["seed"] = self.seed
        out["threads"] = self.threads
        return out

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> PipelineConfig:
    """Read a ``.json`` or ``.toml`` configuration file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"configuration file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"{path}: cannot parse configuration ({exc})") from exc
    return PipelineConfig.from_dict(data)
