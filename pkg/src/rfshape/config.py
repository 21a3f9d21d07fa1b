"""Plain-text run configuration shared by the CLI subcommands.

Config files are line-oriented ``key=value`` pairs.  Dotted prefixes route
keys into module sections ("cfar.p_fa=1e-4", "model.n_coarse=512"); keys
without a prefix are run-level ("seed=7").  Precedence is CLI flags over
file keys over built-in defaults, implemented by merging the string
mappings in that order before any typing happens, so every layer uses the
same parser and the same validation.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

import numpy as np

from .augment import NORM_BBOX, NORM_CENTROID, RECIPES
from .detection import CfarConfig
from .fusion import FusionConfig
from .net.model import ModelConfig
from .net.train import TrainConfig
from .radar import HORIZONTAL, VERTICAL, RigConfig, VirtualArrayConfig


class ConfigError(ValueError):
    def __init__(self, message, path=None, line_no=None):
        if path is not None and line_no is not None:
            message = f"{path}:{line_no}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.line_no = line_no


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse key=value lines into a string mapping.

    Blank lines and '#' comment lines are skipped.  A later duplicate of a
    key wins, which is what makes layered overrides work.
    """
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", source, line_no)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError("empty key", source, line_no)
        out[key] = value.strip()
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path))
    return parse_config_text(text, source=str(path))


# Array-level radar keys are applied to both physical arrays; rig-level
# keys live on the rig itself.  A bare "mount_height" sets the radar and
# fusion copies together since they must agree for heights to line up.
_RADAR_ARRAY_KEYS = {
    "n_elements": int,
    "spacing_wavelengths": float,
    "wavelength": float,
    "range_resolution": float,
    "n_range_bins": int,
    "n_angle_bins": int,
    "fov_limit": float,
    "pattern_half_angle": "opt_float",
}
_RADAR_RIG_KEYS = {
    "mount_height": float,
    "visibility_gate": float,
    "noise_sigma": float,
}


@dataclass
class RunConfig:
    """Everything a pipeline run needs besides its input/output paths."""

    seed: int = 0
    norm_mode: str = NORM_CENTROID
    rig: RigConfig = field(default_factory=RigConfig.default)
    cfar: CfarConfig = field(default_factory=CfarConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    nms_radius: int = 3
    max_frames: typing.Optional[int] = None
    max_path_length: float = 3.0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    per_object: int = 8
    n_partial: int = 2048
    n_complete: int = 16384
    recipes: tuple = RECIPES
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.norm_mode not in (NORM_CENTROID, NORM_BBOX):
            raise ConfigError(f"norm_mode must be '{NORM_CENTROID}' or "
                              f"'{NORM_BBOX}', got {self.norm_mode!r}")
        if self.nms_radius < 0:
            raise ConfigError("fusion.nms_radius must be >= 0")
        if self.max_frames is not None and self.max_frames < 1:
            raise ConfigError("temporal.max_frames must be >= 1")
        if self.max_path_length <= 0:
            raise ConfigError("temporal.max_path_length must be > 0")
        for name in ("per_object", "n_partial", "n_complete"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")
        for recipe in self.recipes:
            if recipe not in RECIPES:
                raise ConfigError(f"unknown recipe {recipe!r}; "
                                  f"available: {', '.join(RECIPES)}")
        for key, p in self.paths.items():
            if not os.path.exists(p):
                raise ConfigError(f"paths.{key}={p} does not exist")


def _coerce(key: str, text: str, typ):
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if typ == "opt_int":
            return None if text.lower() in ("", "none") else int(text)
        if typ == "opt_float":
            return None if text.lower() in ("", "none") else float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ}")
    raise ConfigError(f"{key}: unsupported value type {typ!r}")


def _section_overrides(cls, section: str, keys: dict, allowed=None) -> dict:
    """Coerce section keys against a dataclass's own field types."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    if allowed is not None:
        fields &= allowed
    out = {}
    for name, text in keys.items():
        if name not in fields:
            raise ConfigError(f"unknown key {section}.{name}")
        typ = hints[name]
        if typ is tuple:
            try:
                out[name] = tuple(int(v) for v in text.split(",") if v)
            except ValueError:
                raise ConfigError(f"{section}.{name}: expected "
                                  f"comma-separated ints, got {text!r}")
        else:
            out[name] = _coerce(f"{section}.{name}", text, typ)
    return out


def _replace_cfg(base, section: str, overrides: dict):
    """dataclasses.replace with the section's own validation rewrapped."""
    try:
        return dataclasses.replace(base, **overrides)
    except ValueError as exc:
        raise ConfigError(f"{section} section: {exc}")


def _build_rig(keys: dict) -> RigConfig:
    array_kwargs, rig_kwargs = {}, {}
    for name, text in keys.items():
        if name in _RADAR_ARRAY_KEYS:
            array_kwargs[name] = _coerce(f"radar.{name}", text,
                                         _RADAR_ARRAY_KEYS[name])
        elif name in _RADAR_RIG_KEYS:
            rig_kwargs[name] = _coerce(f"radar.{name}", text,
                                       _RADAR_RIG_KEYS[name])
        else:
            raise ConfigError(f"unknown key radar.{name}")
    try:
        return RigConfig(
            VirtualArrayConfig.uniform(HORIZONTAL, **array_kwargs),
            VirtualArrayConfig.uniform(VERTICAL, **array_kwargs),
            **rig_kwargs)
    except ValueError as exc:
        raise ConfigError(f"radar section: {exc}")


def build_run_config(*mappings: dict) -> RunConfig:
    """Merge string mappings (later wins) and build the typed RunConfig."""
    merged = {}
    for m in mappings:
        merged.update(m)

    sections = {}
    for key, text in merged.items():
        section, _, name = key.partition(".")
        if not name:
            section, name = "", key
        sections.setdefault(section, {})[name] = text

    top = sections.pop("", {})
    mount = top.pop("mount_height", None)
    if mount is not None:
        sections.setdefault("radar", {}).setdefault("mount_height", mount)
        sections.setdefault("fusion", {}).setdefault("mount_height", mount)

    kwargs = {}
    for name, text in top.items():
        if name == "seed":
            kwargs["seed"] = _coerce("seed", text, int)
        elif name == "norm_mode":
            kwargs["norm_mode"] = text
        else:
            raise ConfigError(f"unknown key {name}")

    radar = sections.pop("radar", {})
    if radar:
        kwargs["rig"] = _build_rig(radar)

    cfar = sections.pop("cfar", {})
    if cfar:
        kwargs["cfar"] = _replace_cfg(
            CfarConfig(), "cfar",
            _section_overrides(CfarConfig, "cfar", cfar))

    fusion = sections.pop("fusion", {})
    nms = fusion.pop("nms_radius", None)
    if nms is not None:
        kwargs["nms_radius"] = _coerce("fusion.nms_radius", nms, int)
    if fusion:
        kwargs["fusion"] = _replace_cfg(
            FusionConfig(), "fusion",
            _section_overrides(FusionConfig, "fusion", fusion,
                               allowed={"power_match_db", "fov_limit",
                                        "min_height", "max_height",
                                        "mount_height"}))

    temporal = sections.pop("temporal", {})
    for name, text in temporal.items():
        if name == "max_frames":
            kwargs["max_frames"] = _coerce("temporal.max_frames", text,
                                           "opt_int")
        elif name == "max_path_length":
            kwargs["max_path_length"] = _coerce("temporal.max_path_length",
                                                text, float)
        else:
            raise ConfigError(f"unknown key temporal.{name}")

    model = sections.pop("model", {})
    if model:
        kwargs["model"] = _replace_cfg(
            ModelConfig(), "model",
            _section_overrides(ModelConfig, "model", model))

    train = sections.pop("train", {})
    if train:
        kwargs["train"] = _replace_cfg(
            TrainConfig(), "train",
            _section_overrides(TrainConfig, "train", train))

    dataset = sections.pop("dataset", {})
    for name, text in dataset.items():
        if name in ("per_object", "n_partial", "n_complete"):
            kwargs[name] = _coerce(f"dataset.{name}", text, int)
        elif name == "recipes":
            kwargs["recipes"] = tuple(r for r in text.split(",") if r)
        else:
            raise ConfigError(f"unknown key dataset.{name}")

    paths = sections.pop("paths", {})
    if paths:
        kwargs["paths"] = dict(paths)

    if sections:
        raise ConfigError(f"unknown section {sorted(sections)[0]!r}")

    cfg = RunConfig(**kwargs)
    # The run-level seed and norm_mode drive training unless the train
    # section pins its own, so one root seed covers the whole pipeline.
    train_patch = {}
    if "seed" not in train:
        train_patch["seed"] = cfg.seed
    if "norm_mode" not in train:
        train_patch["norm_mode"] = cfg.norm_mode
    if train_patch:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, **train_patch))
    return cfg


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def run_config_text(cfg: RunConfig) -> str:
    """Effective configuration as key=value lines that re-parse to cfg.

    Per-element gain tables (fusion.h_gain_db/v_gain_db) have no text
    form and are omitted; paths are run inputs, not configuration.
    """
    h = cfg.rig.horizontal
    lines = {
        "seed": cfg.seed,
        "norm_mode": cfg.norm_mode,
        "radar.n_elements": h.n_elements,
        "radar.spacing_wavelengths":
            h.element_positions[1] - h.element_positions[0],
        "radar.wavelength": h.wavelength,
        "radar.range_resolution": h.range_resolution,
        "radar.n_range_bins": h.n_range_bins,
        "radar.n_angle_bins": h.n_angle_bins,
        "radar.fov_limit": h.fov_limit,
        "radar.pattern_half_angle": h.pattern_half_angle,
        "radar.mount_height": cfg.rig.mount_height,
        "radar.visibility_gate": cfg.rig.visibility_gate,
        "radar.noise_sigma": cfg.rig.noise_sigma,
        "fusion.nms_radius": cfg.nms_radius,
        "temporal.max_frames": cfg.max_frames,
        "temporal.max_path_length": cfg.max_path_length,
        "dataset.per_object": cfg.per_object,
        "dataset.n_partial": cfg.n_partial,
        "dataset.n_complete": cfg.n_complete,
        "dataset.recipes": tuple(cfg.recipes),
    }
    for name in ("variant", "guard_cells", "training_cells", "p_fa",
                 "os_rank"):
        lines[f"cfar.{name}"] = getattr(cfg.cfar, name)
    for name in ("power_match_db", "fov_limit", "min_height", "max_height",
                 "mount_height"):
        lines[f"fusion.{name}"] = getattr(cfg.fusion, name)
    for name, value in ModelConfig.to_dict(cfg.model).items():
        lines[f"model.{name}"] = value
    for f in dataclasses.fields(TrainConfig):
        lines[f"train.{f.name}"] = getattr(cfg.train, f.name)
    return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(lines.items()))
