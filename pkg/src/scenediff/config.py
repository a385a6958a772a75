"""Run configuration: flat key=value text with section prefixes.

Precedence: command-line --set overrides > environment (SCENEDIFF_SECTION__KEY)
> config file > built-in default. Unknown keys are rejected everywhere, and a
run's fingerprint is the hash of every effective value, so it changes exactly
when some value changes.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .labels import MOVING_CLASS_IDS, NUM_CLASSES

ENV_PREFIX = "SCENEDIFF_"


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text) -> tuple:
    if isinstance(text, tuple):
        return text
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _parse_float_list(text) -> tuple:
    if isinstance(text, tuple):
        return text
    return tuple(float(v) for v in str(text).split(",") if v.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "ints": _parse_int_list,
    "floats": _parse_float_list,
}

# key -> (type name, default)
SCHEMA = {
    "run.seed": ("int", 0),
    "grid.min_x": ("float", -25.6),
    "grid.min_y": ("float", -25.6),
    "grid.min_z": ("float", -2.2),
    "grid.max_x": ("float", 25.6),
    "grid.max_y": ("float", 25.6),
    "grid.max_z": ("float", 4.2),
    "grid.resolution": ("float", 0.1),
    "map.resolution": ("float", 0.1),
    "map.pad": ("float", 1.0),
    "map.moving_classes": ("ints", tuple(sorted(MOVING_CLASS_IDS))),
    "vae.levels": ("int", 4),
    "vae.latent_dim": ("int", 16),
    "vae.widths": ("ints", (32, 64, 128, 256)),
    "vae.class_count": ("int", NUM_CLASSES),
    "vae.level_loss_weights": ("floats", (1.0, 1.0, 2.0, 3.0)),
    "vae.prune_weight": ("float", 1.0),
    "vae.semantic_weight": ("float", 1.0),
    "vae.kl_weight": ("float", 0.002),
    "vae.epochs": ("int", 50),
    "vae.learning_rate": ("float", 1e-4),
    "vae.lr_decay": ("float", 0.9),
    "vae.lr_decay_every": ("int", 5),
    "vae.refine_noise_sigma": ("float", 0.1),
    "vae.refine_epochs": ("int", 50),
    "ddpm.beta_start": ("float", 1e-4),
    "ddpm.beta_end": ("float", 0.015),
    "ddpm.steps": ("int", 1000),
    "ddpm.snr_gamma": ("float", 5.0),
    "ddpm.epochs": ("int", 150),
    "ddpm.learning_rate": ("float", 2e-4),
    "ddpm.lr_decay": ("float", 0.8),
    "ddpm.lr_decay_every": ("int", 50),
    "ddpm.conditional": ("bool", False),
    "ddpm.null_prob": ("float", 0.1),
    "ddpm.guidance_weight": ("float", 2.0),
    "ddpm.base_channels": ("int", 64),
    "ddpm.depth": ("int", 2),
    "ddpm.time_embed_dim": ("int", 64),
    "ddpm.condition_channels": ("int", 16),
    "lidar.profile": ("str", "64-beam"),
    "lidar.azimuth_step": ("float", 0.2),
    "lidar.origin_x": ("float", 0.0),
    "lidar.origin_y": ("float", 0.0),
    "lidar.origin_z": ("float", 0.0),
    "lidar.min_range": ("float", 0.3),
    "lidar.max_range": ("float", 100.0),
    "semseg.levels": ("int", 3),
    "semseg.widths": ("ints", (16, 32, 64)),
    "semseg.class_count": ("int", NUM_CLASSES),
    "semseg.epochs": ("int", 15),
    "semseg.learning_rate": ("float", 0.24),
    "semseg.momentum": ("float", 0.9),
    "semseg.feature_tap_level": ("int", 0),
    "bench.size": ("int", 64),
    "bench.occupancy": ("float", 0.1),
    "bench.repeats": ("int", 3),
}


class RunConfig:
    """Effective configuration after applying the precedence chain."""

    def __init__(self, values: dict):
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        self.values = {key: values.get(key, default) for key, (_, default) in SCHEMA.items()}

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.values.items() if k.startswith(head)}

    def fingerprint(self) -> str:
        canonical = "\n".join(f"{k}={self.values[k]!r}" for k in sorted(self.values))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # ------------------------- typed views -------------------------

    def grid_spec(self):
        from .scenes import GridSpec

        return GridSpec(
            (self["grid.min_x"], self["grid.min_y"], self["grid.min_z"]),
            (self["grid.max_x"], self["grid.max_y"], self["grid.max_z"]),
            self["grid.resolution"],
        )

    def vae_config(self):
        from .autoencoder import VaeConfig

        s = self.section("vae")
        return VaeConfig(
            levels=s["levels"],
            latent_dim=s["latent_dim"],
            widths=s["widths"],
            class_count=s["class_count"],
            level_loss_weights=s["level_loss_weights"],
            prune_weight=s["prune_weight"],
            semantic_weight=s["semantic_weight"],
            kl_weight=s["kl_weight"],
            epochs=s["epochs"],
            learning_rate=s["learning_rate"],
            lr_decay=s["lr_decay"],
            lr_decay_every=s["lr_decay_every"],
        )

    def ddpm_config(self):
        from .diffusion import DiffusionConfig

        s = self.section("ddpm")
        return DiffusionConfig(
            beta_start=s["beta_start"],
            beta_end=s["beta_end"],
            steps=s["steps"],
            snr_gamma=s["snr_gamma"],
            epochs=s["epochs"],
            learning_rate=s["learning_rate"],
            lr_decay=s["lr_decay"],
            lr_decay_every=s["lr_decay_every"],
            conditional=s["conditional"],
            null_prob=s["null_prob"],
            guidance_weight=s["guidance_weight"],
            latent_dim=self["vae.latent_dim"],
            levels=self["vae.levels"],
            base_channels=s["base_channels"],
            depth=s["depth"],
            time_embed_dim=s["time_embed_dim"],
            condition_channels=s["condition_channels"],
        )

    def segmenter_config(self):
        from .harness import SegmenterConfig

        s = self.section("semseg")
        return SegmenterConfig(
            levels=s["levels"],
            widths=s["widths"],
            class_count=s["class_count"],
            epochs=s["epochs"],
            learning_rate=s["learning_rate"],
            momentum=s["momentum"],
            feature_tap_level=s["feature_tap_level"],
        )

    def sensor_model(self):
        from .lidar import default_sensor

        return default_sensor(
            self["lidar.profile"],
            azimuth_step_deg=self["lidar.azimuth_step"],
            origin=(self["lidar.origin_x"], self["lidar.origin_y"], self["lidar.origin_z"]),
            min_range=self["lidar.min_range"],
            max_range=self["lidar.max_range"],
        )


def _coerce(key: str, raw) -> object:
    if key not in SCHEMA:
        raise ValueError(f"unknown config key: {key}")
    type_name, _ = SCHEMA[key]
    try:
        return _PARSERS[type_name](raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad value for {key}: {raw!r} ({exc})") from exc


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw.strip())
    return values


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Apply the precedence chain: overrides > env > file > defaults."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(env_overrides(environ))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw.strip())
    return RunConfig(values)
