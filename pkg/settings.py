"""
Configuration handling

Settings live in one flat dotted-key namespace ("gsr.voxel_size", ...).
Precedence is defaults < JSON config file < command-line flags.
"""

import json
import logging
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

# Set up logging
logging.basicConfig(level=os.environ.get("SEGGS_LOG_LEVEL", "INFO").upper())
logger = logging.getLogger(__name__)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SEGGS_THREADS", "") or (os.cpu_count() or 1)))
    except ValueError:
        logger.warning("SEGGS_THREADS is not an integer, falling back to cpu count")
        return os.cpu_count() or 1


DEFAULTS: Dict[str, Any] = {
    # General
    "seed": 0,
    "threads": default_threads(),
    "out_dir": "runs",

    # Rasterizer constants
    "raster.cov_dilation": 0.3,
    "raster.alpha_min": 1.0 / 255.0,
    "raster.alpha_max": 0.999,
    "raster.t_min": 1e-4,
    "raster.transmittance": True,
    "raster.label_alpha": 0.5,

    # Semantic prediction network
    "gsr.voxel_size": 0.10,
    "gsr.semantic_dim": 16,
    "gsr.conv_channels": [32, 32, 16],
    "gsr.attention": "self",
    "gsr.heads": 1,
    "gsr.mapping": "nearest",
    "gsr.use_adapter": True,
    "gsr.adapter_hidden": 96,

    # Losses
    "loss.temperature": 1.0,
    "loss.reduction": "mean",
    "loss.use_3d_text": True,
    "loss.use_2d_text": True,
    "loss.use_cosine": True,
    "loss.decoder_hidden": 128,

    # Training
    "train.learning_rate": 0.02,
    "train.batch_size": 3,
    "train.epochs": 300,
    "train.max_steps": 0,
    "train.momentum": 0.0,
    "train.checkpoint_every": 100,

    # Augmentation
    "augment.enabled": True,
    "augment.scale_range": [0.9, 1.1],
    "augment.rotate": True,
    "augment.flip_prob": 0.5,

    # Data
    "data.vocabulary": "",
    "data.unseen": "curtain,bookshelf,sofa,bed",

    # Evaluation
    "eval.protocol": "CSA3D",

    # Gradient checking
    "gradcheck.tol": 1e-4,
    "gradcheck.h": 1e-5,
    "gradcheck.seeds": 5,
    "gradcheck.max_coords": 6,
    "gradcheck.gaussians": 16,
    "gradcheck.height": 24,
    "gradcheck.width": 32,

    # Synthetic scenes
    "synth.extent": [4.0, 3.0, 2.5],
    "synth.classes": "floor,wall,chair,table,lamp",
    "synth.gaussians_per_class": 160,
    "synth.cloud_density": 4,
    "synth.views": 8,
    "synth.width": 64,
    "synth.height": 48,
    "synth.domain_shift": 0.0,
    "synth.embedding_dim": 512,
}


def _coerce(key: str, value: Any) -> Any:
    """Coerce a raw value to the type of its default"""
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            items = value.split(",") if isinstance(value, str) else list(value)
            item_type = type(default[0]) if default else float
            return [item_type(v) for v in items]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value for {key}: {value!r}")


def merge_settings(base: Dict[str, Any], updates: Optional[Dict[str, Any]], source: str) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in (updates or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"Unknown configuration key '{key}' in {source}")
        if value is None:
            continue
        merged[key] = _coerce(key, value)
    return merged


def load_settings(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Build the effective settings: defaults, then the JSON config file, then flags
    """
    settings = dict(DEFAULTS)

    if config_path:
        try:
            with open(config_path, "r") as f:
                file_settings = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid JSON: {e}")
        if not isinstance(file_settings, dict):
            raise ConfigError(f"Config file {config_path} must hold a flat JSON object")
        settings = merge_settings(settings, file_settings, config_path)

    settings = merge_settings(settings, overrides, "command-line flags")
    return settings


def echo_settings(settings: Dict[str, Any]) -> None:
    """Write the effective configuration to the run log"""
    logger.info("Effective configuration:")
    for key in sorted(settings):
        logger.info(f"  {key} = {settings[key]!r}")


def parse_name_list(value: str):
    return [name.strip() for name in value.split(",") if name.strip()]
