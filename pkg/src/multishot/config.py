"""Run configuration: every tunable default lives here.

Precedence when resolving a value: command-line flag > environment variable
> config file > built-in default. Config files are plain JSON whose keys
mirror the dataclass fields below (nested sections for each subsystem).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

# Environment overrides honored by the service/CLI layer.
ENV_VARS = {
    "FW_PORT": ("service", "port", int),
    "FW_DATA_DIR": ("service", "data_dir", str),
    "FW_CHECKPOINT_DIR": ("service", "checkpoint_dir", str),
}


@dataclass
class WorldConfig:
    frame_size: int = 16
    fps: int = 8
    chunk_latents: int = 6
    # sprite radii in world pixels (wide framing)
    radius_small: float = 1.8
    radius_large: float = 2.6
    speed_slow: float = 0.2
    speed_fast: float = 0.5
    close_zoom: float = 2.0
    # per-frame additive pixel noise amplitude (0 = clean renders)
    noise_amp: float = 0.0


@dataclass
class SceneSamplerConfig:
    shots_min: int = 3
    shots_max: int = 6
    chunks_min: int = 2
    chunks_max: int = 3
    max_characters: int = 3
    # multi-shot scenes stick to high-contrast patterns so hard cuts stay
    # detectable by frame differencing; single-shot scenes may use any.
    multi_shot_patterns: tuple[str, ...] = ("stripes", "checker")
    single_shot_patterns: tuple[str, ...] = ("solid", "stripes", "checker", "gradient")
    alternate_framing: bool = True


@dataclass
class EmbedConfig:
    dim: int = 32
    seed: int = 1234
    theta_fg: float = 0.35
    min_component: int = 4
    # block weights, calibrated once on the toy renderer and frozen
    w_char: float = 1.0
    w_bg: float = 0.8
    w_action: float = 0.3
    w_framing: float = 0.2
    w_bias: float = 0.05


@dataclass
class CacheConfig:
    k: int = 3
    tier_table: tuple[tuple[int, int], ...] = ((1, 1), (2, 4), (16, 32))

    @property
    def window_capacity(self) -> int:
        return sum(count for count, _ in self.tier_table)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_blocks: int = 2
    d_mlp: int = 128
    patch: int = 4
    frame_size: int = 16
    chunk_latents: int = 6
    text_dim: int = 32
    k: int = 3
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    init_seed: int = 0
    # the prompt embedding is unit norm while patch tokens carry ~sqrt(48);
    # scaling the text token to a comparable magnitude keeps it audible
    text_scale: float = 7.0

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def tokens_per_latent(self) -> int:
        return (self.frame_size // self.patch) ** 2


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 2000
    p_neg: float = 0.25
    shot_aug: tuple[int, int] = (100, 400)
    temporal_aug: tuple[int, int] = (0, 100)
    # probability of hiding an attribute from the conditioning prompt;
    # teaches the model to pull unspecified appearance from the caches
    p_attr_drop: float = 0.3
    # optional fraction of timestep draws forced into the high-noise band
    # (conditional structure must come from text/caches there); 0 keeps the
    # objective's plain uniform draw
    t_skew: float = 0.0
    t_high_band: tuple[float, float] = (0.6, 1.0)
    scenario_mix: dict[str, float] = field(
        default_factory=lambda: {"mode1": 0.25, "mode2": 0.25, "mode3": 0.25, "mode4": 0.25}
    )
    noise_aug: bool = True
    checkpoint_every: int = 1000
    seed: int = 0


@dataclass
class SamplerConfig:
    steps: int = 50
    clamp_x0: bool = True


@dataclass
class CurateConfig:
    theta_cut: float = 0.6
    tau: float = 0.75
    window: int = 2
    min_shot_frames: int | None = None  # defaults to fps
    max_cluster_characters: int = 3
    remote_url: str = ""
    remote_retries: int = 3
    remote_backoff: float = 0.5


@dataclass
class ServiceConfig:
    port: int = 8000
    host: str = "127.0.0.1"
    data_dir: str = "data/sessions"
    checkpoint_dir: str = "data/checkpoints"


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sampler_scene: SceneSamplerConfig = field(default_factory=SceneSamplerConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_default(obj: Any) -> Any:
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


_SECTION_TYPES = {
    "world": WorldConfig,
    "sampler_scene": SceneSamplerConfig,
    "embed": EmbedConfig,
    "cache": CacheConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "curate": CurateConfig,
    "service": ServiceConfig,
}


class ConfigError(ValueError):
    pass


def _coerce(cls: type, key: str, value: Any) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown config field {cls.__name__}.{key}")
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _apply_section(section: Any, values: dict[str, Any]) -> None:
    for key, value in values.items():
        setattr(section, key, _coerce(type(section), key, value))


def load_config(path: str | None = None, env: dict[str, str] | None = None,
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, file, environment, and flag overrides.

    `overrides` maps dotted paths ("service.port") to values and wins over
    everything; environment wins over the file; the file wins over defaults.
    """
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        for section, values in data.items():
            if section not in _SECTION_TYPES:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _apply_section(getattr(cfg, section), values)

    env = os.environ if env is None else env
    for var, (section, key, cast) in ENV_VARS.items():
        if var in env:
            try:
                setattr(getattr(cfg, section), key, cast(env[var]))
            except ValueError as exc:
                raise ConfigError(f"bad value for {var}: {env[var]!r}") from exc

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in _SECTION_TYPES or not key:
            raise ConfigError(f"unknown override {dotted!r}")
        setattr(getattr(cfg, section), key, _coerce(_SECTION_TYPES[section], key, value))
    return cfg
