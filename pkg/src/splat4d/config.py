"""Run configuration: plain-text `section.key = value` files.

Unknown keys and out-of-range values are hard errors carrying the line
number; a silent threshold typo would quietly destroy tracking accuracy.
An empty file gives the documented defaults. `dump_config` writes the
effective configuration as a reference file that parses back to identical
values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrackingSection:
    gamma_v: float = 0.9
    gamma_d: float = 0.9
    gamma_u: float = 0.8
    gamma_track: int = 3
    lambda_pho: float = 0.9
    patch_radius: int = 3
    max_iterations: int = 100
    min_anchor_count: int = 32


@dataclass
class AnchorSection:
    grid_rows: int = 0  # 0 = derive from image width (12 per 640 px, min 8)
    grid_cols: int = 0
    pool: int = 4


@dataclass
class ProviderSection:
    kind: str = "oracle"  # oracle | file
    track_file: str = ""
    window_length: int = 8
    pixel_sigma: float = 0.0
    label_flip: float = 0.0


@dataclass
class KeyframingSection:
    tau_cov: float = 0.90
    tau_trans: float = 0.08
    max_size: int = 8
    tau_overlap: float = 0.99


@dataclass
class MappingSection:
    lambda_iso_dynamic: float = 10.0
    lambda_iso_static: float = 10.0
    dynamic_gaussian_threshold: float = 0.5
    iterations_per_keyframe: int = 15
    prune_opacity: float = 0.05
    prune_observation_min: int = 3
    sigma_t_dynamic_init: float = 0.25
    insertion_stride: int = 4
    depth_noise_scale: float = 0.01
    dynamic_mask_radius: int = 14
    checkpoint_every: int = 10


@dataclass
class DatasetSection:
    depth_scale: float = 5000.0
    association_tolerance: float = 0.02


@dataclass
class SceneSection:
    """Parameters for the built-in synthetic scene generator."""

    width: int = 160
    height: int = 120
    frame_count: int = 100
    frame_rate: float = 10.0
    seed: int = 7
    dynamic: bool = True
    depth_sigma: float = 0.0
    track_sigma: float = 0.0
    label_flip: float = 0.0


@dataclass
class RunConfig:
    tracking: TrackingSection = field(default_factory=TrackingSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    provider: ProviderSection = field(default_factory=ProviderSection)
    keyframing: KeyframingSection = field(default_factory=KeyframingSection)
    mapping: MappingSection = field(default_factory=MappingSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    scene: SceneSection = field(default_factory=SceneSection)

    def anchor_grid(self, width):
        """Grid side scales with image width (12 per 640 px), floor of 8."""
        rows = self.anchors.grid_rows or max(8, round(12 * width / 640))
        cols = self.anchors.grid_cols or max(8, round(12 * width / 640))
        return int(rows), int(cols)


_UNIT = ("unit interval", lambda v: 0.0 <= v <= 1.0)
_POS = ("> 0", lambda v: v > 0)
_NONNEG = (">= 0", lambda v: v >= 0)
_POS_INT = (">= 1", lambda v: v >= 1)
_ANY = (None, lambda v: True)

# dotted key -> (python type, range description, validator)
_SCHEMA = {
    "tracking.gamma_v": (float, _UNIT),
    "tracking.gamma_d": (float, _UNIT),
    "tracking.gamma_u": (float, _UNIT),
    "tracking.gamma_track": (int, _POS_INT),
    "tracking.lambda_pho": (float, _UNIT),
    "tracking.patch_radius": (int, _NONNEG),
    "tracking.max_iterations": (int, _POS_INT),
    "tracking.min_anchor_count": (int, _NONNEG),
    "anchors.grid_rows": (int, _NONNEG),
    "anchors.grid_cols": (int, _NONNEG),
    "anchors.pool": (int, _POS_INT),
    "provider.kind": (str, ("one of: oracle, file", lambda v: v in ("oracle", "file"))),
    "provider.track_file": (str, _ANY),
    "provider.window_length": (int, _POS_INT),
    "provider.pixel_sigma": (float, _NONNEG),
    "provider.label_flip": (float, _UNIT),
    "keyframing.tau_cov": (float, _UNIT),
    "keyframing.tau_trans": (float, _NONNEG),
    "keyframing.max_size": (int, _POS_INT),
    "keyframing.tau_overlap": (float, _UNIT),
    "mapping.lambda_iso_dynamic": (float, _NONNEG),
    "mapping.lambda_iso_static": (float, _NONNEG),
    "mapping.dynamic_gaussian_threshold": (float, _UNIT),
    "mapping.iterations_per_keyframe": (int, _POS_INT),
    "mapping.prune_opacity": (float, _UNIT),
    "mapping.prune_observation_min": (int, _POS_INT),
    "mapping.sigma_t_dynamic_init": (float, _POS),
    "mapping.insertion_stride": (int, _POS_INT),
    "mapping.depth_noise_scale": (float, _POS),
    "mapping.dynamic_mask_radius": (int, _NONNEG),
    "mapping.checkpoint_every": (int, _POS_INT),
    "dataset.depth_scale": (float, _POS),
    "dataset.association_tolerance": (float, _POS),
    "scene.width": (int, ("at least 32", lambda v: v >= 32)),
    "scene.height": (int, ("at least 32", lambda v: v >= 32)),
    "scene.frame_count": (int, _POS_INT),
    "scene.frame_rate": (float, _POS),
    "scene.seed": (int, _ANY),
    "scene.dynamic": (bool, _ANY),
    "scene.depth_sigma": (float, _NONNEG),
    "scene.track_sigma": (float, _NONNEG),
    "scene.label_flip": (float, _UNIT),
}


def _parse_value(raw, typ, key, lineno, path):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: value {raw!r} for {key} is not a valid {typ.__name__}")


def load_config(path) -> RunConfig:
    """Parse a config file; missing file is an error, empty file is defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    cfg = RunConfig()
    apply_config_text(cfg, path.read_text(), str(path))
    return cfg


def apply_config_text(cfg: RunConfig, text: str, origin: str = "<config>"):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        typ, (desc, check) = _SCHEMA[key]
        val = _parse_value(value, typ, key, lineno, origin)
        if not check(val):
            raise ConfigError(f"{origin}:{lineno}: {key} = {val!r} out of range ({desc})")
        section, attr = key.split(".", 1)
        setattr(getattr(cfg, section), attr, val)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Effective configuration as parseable text, every key present."""
    lines = ["# effective configuration (all keys shown; '=' defaults unless overridden)"]
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        lines.append("")
        for f in fields(section):
            val = getattr(section, f.name)
            if isinstance(val, bool):
                sval = "true" if val else "false"
            elif isinstance(val, float):
                sval = format(val, ".17g")
            else:
                sval = str(val)
            lines.append(f"{section_field.name}.{f.name} = {sval}")
    return "\n".join(lines) + "\n"


def scene_spec_from_config(cfg: RunConfig):
    from .simulator import NoiseSpec, default_scene_spec

    s = cfg.scene
    return default_scene_spec(
        seed=s.seed, frame_count=s.frame_count, width=s.width, height=s.height,
        dynamic=s.dynamic,
        noise=NoiseSpec(depth_sigma=s.depth_sigma, track_sigma=s.track_sigma,
                        label_flip=s.label_flip),
    )
