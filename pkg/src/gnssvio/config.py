"""Run configuration: one flat key=value file, every tunable with a default.

The parser is strict — unknown keys and malformed values are errors, not
warnings — so a config file documents exactly the run it produced.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .gnss import ELEVATION_MASK

TIERS = ("vio", "vio+dopp", "vio+dopp+psr", "vio+dopp+dpsr", "vio+dopp+ddcp",
         "vio+gnssvel")
BASE_TIERS = ("vio+dopp+dpsr", "vio+dopp+ddcp")


class ConfigError(ValueError):
    """Bad key, bad value, or a tier the scenario cannot support."""


@dataclass
class RunConfig:
    # measurement tier and window geometry
    tier: str = "vio+dopp+ddcp"
    window: int = 10
    max_slam_features: int = 30
    promote_min_track: int = 5
    msckf_min_clones: int = 3
    # gating and triangulation
    vision_gate_quantile: float = 0.95
    gnss_gate_quantile: float = 0.95
    triangulation_cond_limit: float = 1e6
    elevation_mask: float = ELEVATION_MASK
    # calibration handling
    estimate_lever: bool = True
    lever_error0: float = 0.0
    lever_gyro_min: float = 0.2
    # epoch bridging (ablation switch) and preintegration
    bridging: bool = True
    preint_scheme: str = "euler"
    imu_retention: float = 2.0
    # numeric mode and determinism
    precision: str = "float64"
    seed: int = 0
    # atmosphere handling on the prediction side
    iono_mode: str = "zero"
    psr_iono_sigma: float = 3.0
    # frame alignment
    frame_sigma_yaw_deg: float = 1.0
    # clock bootstrap
    clock_ransac_iterations: int = 100
    clock_psr_threshold: float = 10.0
    clock_dopp_threshold: float = 5.0
    clock_min_inliers: int = 4
    clock_batch_len: int = 3
    clock_bias_walk: float = 1e-9
    clock_drift_walk: float = 1e-11
    clock_init_sigma_bias: float = 5.0
    clock_init_sigma_drift: float = 0.5
    # initial priors (truth-referenced start)
    sigma_init_rot: float = 1e-3
    sigma_init_pos: float = 1e-3
    sigma_init_vel: float = 1e-2
    sigma_init_ba: float = 0.05
    sigma_init_bg: float = 0.01
    sigma_init_cam_rot: float = 0.01
    sigma_init_cam_pos: float = 0.02
    sigma_init_lever: float = 0.1
    # harness behaviour
    divergence_factor: float = 100.0
    queue_capacity: int = 1024
    figures: bool = True

    def validate(self) -> "RunConfig":
        if self.tier not in TIERS:
            raise ConfigError(f"unknown tier {self.tier!r}; expected one of {TIERS}")
        if self.window < 2:
            raise ConfigError("window must be at least 2")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.iono_mode not in ("zero", "truth"):
            raise ConfigError(f"unknown iono_mode {self.iono_mode!r}")
        if self.preint_scheme not in ("euler", "midpoint"):
            raise ConfigError(f"unknown preint_scheme {self.preint_scheme!r}")
        if not 0.0 <= self.vision_gate_quantile < 1.0:
            raise ConfigError("vision_gate_quantile must be in [0, 1)")
        if not 0.0 <= self.gnss_gate_quantile < 1.0:
            raise ConfigError("gnss_gate_quantile must be in [0, 1)")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be positive")
        for name in ("psr_iono_sigma",
                     "clock_init_sigma_bias", "clock_init_sigma_drift",
                     "sigma_init_rot", "sigma_init_pos",
                     "sigma_init_vel", "sigma_init_ba", "sigma_init_bg",
                     "sigma_init_cam_rot", "sigma_init_cam_pos",
                     "sigma_init_lever", "divergence_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        return self

    @property
    def dtype(self):
        import numpy as np
        return np.float32 if self.precision == "float32" else np.float64


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"{field.name}: {err}") from err
    return raw.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse key=value lines ('#' comments allowed) over the defaults."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        values[key] = _coerce(fields[key], raw)
    return RunConfig(**values).validate()


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        config = parse_config(fh.read())
    for item in overrides or []:
        config = parse_config(item, base=config)
    return config


def config_text(config: RunConfig | None = None) -> str:
    """Render a config (defaults when omitted) as a parseable file."""
    config = config or RunConfig()
    lines = [f"{f.name} = {getattr(config, f.name)}"
             for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"
