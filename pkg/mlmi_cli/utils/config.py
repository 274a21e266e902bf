import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from mlmi_cli.exceptions import ValidationError

# Name of the echoed configuration inside every output directory
EFFECTIVE_CONFIG_NAME = "config.json"


def load_run_config(path: Optional[Path]) -> Dict[str, Any]:
    """Load a JSON run config. A missing path means an empty config."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ValidationError(f"Config file {path} must contain a JSON object")
    return data


def config_section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    """Returns the section for one subcommand, e.g. config["impute"]."""
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ValidationError(f"Config section '{name}' must be a JSON object")
    return section


def resolve_settings(flags: Dict[str, Any], config: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merge settings for one command.

    Priority: Flag > Config file > Built-in default.
    A flag counts as given when it is not None.
    """
    settings = dict(defaults)
    for key, value in config.items():
        if key in defaults:
            settings[key] = value
    for key, value in flags.items():
        if value is not None:
            settings[key] = value
    return settings


def save_effective_config(out_dir: Path, settings: Dict[str, Any]) -> Path:
    """Echo the effective configuration into the output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / EFFECTIVE_CONFIG_NAME

    with open(target, "w", encoding="utf-8") as f:
        json.dump(settings, f, indent=4, sort_keys=True, default=str)
        f.write("\n")

    os.chmod(target, 0o600)
    return target


def command_config(ctx, name: str) -> Dict[str, Any]:
    """Section of the run config loaded by the root callback (see main.py)."""
    return config_section(ctx.meta.get("run_config") or {}, name)
