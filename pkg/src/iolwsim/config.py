"""Structured YAML configuration: profile, rssi_map, per_curve, scenario.

Command-line flags override file values; the calibrate subcommand writes
its fitted curve back into the per_curve section.
"""

from __future__ import annotations

from dataclasses import asdict

import yaml

from .channel import PerCurve, RssiMap
from .engine import ScenarioConfig
from .stack import TimingProfile


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def profile_from(raw: dict) -> TimingProfile:
    section = dict(raw.get("profile") or {})
    if "backoff_cycles" in section:
        section["backoff_cycles"] = tuple(section["backoff_cycles"])
    try:
        return TimingProfile(**section)
    except TypeError as exc:
        raise ConfigError(f"profile section: {exc}") from exc


def rssi_map_from(raw: dict) -> RssiMap:
    section = raw.get("rssi_map") or {}
    anchors = section.get("anchors")
    if anchors is None:
        return RssiMap()
    return RssiMap(anchors=tuple((float(a), float(r)) for a, r in anchors))


def per_curve_from(raw: dict) -> PerCurve:
    section = raw.get("per_curve")
    if section is None:
        from .channel import DEFAULT_PER_CURVE

        return DEFAULT_PER_CURVE
    try:
        return PerCurve(**{k: float(v) for k, v in section.items()})
    except TypeError as exc:
        raise ConfigError(f"per_curve section: {exc}") from exc


def scenario_from(raw: dict, **overrides) -> ScenarioConfig:
    section = dict(raw.get("scenario") or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    section.setdefault("profile", profile_from(raw))
    section.setdefault("rssi_map", rssi_map_from(raw))
    section.setdefault("per_curve", per_curve_from(raw))
    try:
        return ScenarioConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario section: {exc}") from exc


def write_manifest(path, cfg: ScenarioConfig, version: str | None = None) -> None:
    """Full scenario record; any output directory is reproducible from it."""
    from . import __version__
    from .engine import _config_dict

    doc = {
        "tool": "iolwsim",
        "version": version or __version__,
        "digest": cfg.digest(),
        "scenario": _config_dict(cfg),
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def write_per_curve(path, curve: PerCurve) -> None:
    """Insert or replace the per_curve section, keeping the rest of the file."""
    try:
        raw = load_config(path)
    except FileNotFoundError:
        raw = {}
    raw["per_curve"] = asdict(curve)
    with open(path, "w") as fh:
        yaml.safe_dump(raw, fh, sort_keys=True)
