"""Run settings: plain-text ``key = value`` files with CLI overrides.

Every key in DEFAULTS is also a command-line flag ``--key``. Precedence is
CLI over file over default. Values are coerced to the type of the default.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import argparse
import logging

from util import ConfigError, sha256_text


log = logging.getLogger(__name__)


DEFAULTS: dict[str, Any] = {
    # run
    "seed": 0,
    "dtype": "float32",
    "scene_kind": "textured-plane",
    "frames": 60,
    # networks
    "image_size": 64,
    "patch_size": 8,
    "embed_dim": 64,
    "num_heads": 4,
    "mlp_ratio": 4.0,
    "depth_layers": 4,
    "pose_encoder_layers": 4,
    "pose_decoder_layers": 2,
    "neck_channels": 32,
    "head_hidden": 128,
    "pool": "mean",
    "d_min": 0.1,
    "d_max": 100.0,
    "pose_scale": 0.001,
    "pose_branch": "reloc3rx",  # or "cnn"
    # adapters
    "adapter_kind": "domora",
    "base_rank": 8,
    "rank_policy": "linear",
    "compression": "truncation-sum",
    "rotation_base": 10000.0,
    "adapt_cross_attention": False,
    # optimization
    "learning_rate": 1e-4,
    "lr_decay_factor": 0.1,
    "lr_decay_every": 10,
    "lr_decay_unit": "epochs",
    "batch_size": 4,
    "epochs": 10,
    "max_steps": 0,  # 0 = no cap
    # loss
    "alpha": 0.85,
    "beta": 0.15,
    "msssim_scales": 0,  # 0 = by image size
    "smoothness_weight": 1e-3,
    "ssim_window": "gaussian",
    "ssim_window_size": 11,
    "z_min": 1e-4,
    # evaluation
    "eval_workers": 4,
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def coerce(key: str, raw: Any, where: str = "") -> Any:
    """Convert ``raw`` to the type of DEFAULTS[key]."""
    if key not in DEFAULTS:
        raise ConfigError(f"{where}unknown key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        raw = str(raw)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{where}{key} expects {kind}, got {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    settings: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}: "
        if "=" not in line:
            raise ConfigError(f"{where}expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        settings[key] = coerce(key, value, where)
    return settings


def load_settings(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> dict[str, Any]:
    """Defaults, then the file at ``path``, then ``overrides`` (None values skipped)."""
    if path is not None:
        p = Path(path)
        try:
            data = parse_config_text(p.read_text(), str(p))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
    else:
        data = {}
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = coerce(key, value, "--")
    for key, value in DEFAULTS.items():
        data.setdefault(key, value)
    return data


def config_hash(settings: dict[str, Any]) -> str:
    """sha256 over the canonical sorted ``key=value`` lines."""
    return sha256_text("\n".join(f"{k}={settings[k]!r}" for k in sorted(settings)))


def provenance(settings: dict[str, Any]) -> dict[str, Any]:
    """Seed and config hash stamped on every artifact of a run."""
    return {"seed": settings["seed"], "config_hash": config_hash(settings)}


def format_settings(settings: dict[str, Any]) -> str:
    """Settings as a config file that load_settings reads back unchanged."""
    return "".join(f"{k} = {settings[k]}\n" for k in sorted(settings))


def add_setting_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("settings (override the config file)")
    for key in DEFAULTS:
        group.add_argument(f"--{key}", default=None, metavar="VALUE")


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(args, key, None) for key in DEFAULTS}
