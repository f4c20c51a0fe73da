"""Layered run configuration: defaults < file < environment < flags.

The resolved configuration is a nested dict mirroring the module configs;
unknown keys are rejected at merge time. Every run logs the resolved
configuration and its fingerprint (sha256 of the canonical JSON), which is
embedded in all produced artifacts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

from .eam import PropagationConfig
from .grounding import TrainConfig
from .planner import PlannerConfig, ReasonerEndpoint
from .simcore import SensorConfig
from .worldgen import GenConfig

ENV_CONFIG_PATH = "EAMNAV_CONFIG"
ENV_OVERRIDES = "EAMNAV_SET"

DEFAULTS: dict = {
    "worldgen": {
        "width": 48,
        "height": 48,
        "rooms_min": 4,
        "rooms_max": 8,
        "min_room_dim": 5,
        "corridor_prob": 0.6,
        "bathroom_adjacency_prob": 0.8,
        "extra_door_prob": 0.25,
        "object_density": 5,
    },
    "sensors": {
        "fov_degrees": 90.0,
        "n_rays": 64,
        "max_range": 12.0,
        "p_detect": 0.9,
        "p_confuse": 0.05,
    },
    "propagation": {
        "decay": 0.5,
        "iterations": 8,
        "wall_attenuation": 0.0,
        "renormalize": True,
    },
    "grounding": {
        "dim": 16,
        "learning_rate": 2e-3,
        "warmup_fraction": 0.1,
        "batch_size": 16,
        "epochs": 50,
        "grad_clip": 0.2,
        "beta1": 0.9,
        "beta2": 0.999,
        "loss_scale": 20.0,
        "val_fraction": 0.15,
        "patience": 8,
        "finetune_loss_scale": 5.0,
        "finetune_learning_rate": 1e-3,
        "corpus_frames_per_world": 60,
        "corpus_fov_degrees": 150.0,
        "corpus_max_range": 14.0,
        "corpus_min_objects": 3,
        "base_seed": 0,
        "base_noise": 1.5,
    },
    "diffusion": {
        "steps": 200,
        "beta_min": 1e-4,
        "beta_max": 0.03,
        "width": 32,
        "resolution": 32,
        "batch_size": 8,
        "epochs": 10,
        "learning_rate": 2e-4,
        "weight_decay": 0.01,
        "lora_rank": 8,
        "lora_scaling": 1.0,
    },
    "planner": {
        "min_edge_size": 3,
        "radius": 6,
        "lambda_affinity": 1.0,
        "lambda_unknown": 0.4,
        "lambda_distance": 0.3,
        "top_k": 6,
        "waypoint_spacing": 4,
        "stall_steps": 20,
        "replan_period": 12,
        "success_radius": 2.0,
        "target_prob_threshold": 0.25,
        "min_ground_objects": 3,
        "propagate_every": 4,
        "propagation_iterations": 2,
        "fusion_samples": 4,
        "fusion_growth": 0.12,
    },
    "reasoner": {
        "url": "",
        "model": "rule-based",
        "deadline_s": 5.0,
        "enabled": False,
    },
    "benchmark": {
        "policies": ["eamnav-full", "frontier-nearest"],
        "n_episodes": 20,
        "world_seed_base": 0,
        "episode_seed_base": 10000,
        "min_start_goal": 30.0,
        "step_budget": 500,
        "jobs": 1,
    },
}


class ConfigError(ValueError):
    """Unknown key, malformed value or unreadable configuration file."""


def _merge(base: dict, other: dict, path: str = "") -> None:
    for key, value in other.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {here} must be a table")
            _merge(base[key], value, here)
        else:
            base[key] = _coerce(base[key], value, here)


def _coerce(default, value, path: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(f)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            return [v.strip() for v in value.split(",") if v.strip()]
        if isinstance(value, list):
            return list(value)
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def _apply_assignment(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value: {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key must be section.key: {key!r}")
    _merge(cfg, {parts[0]: {parts[1]: value.strip()}})


def load_config(
    path: str | None = None,
    overrides: list[str] | None = None,
    env: dict | None = None,
) -> dict:
    """Resolve the layered configuration (ascending precedence)."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    file_path = path or env.get(ENV_CONFIG_PATH)
    if file_path:
        try:
            with open(file_path) as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {file_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {file_path} is not valid JSON: {exc}") from exc
        _merge(cfg, data)
    env_sets = env.get(ENV_OVERRIDES, "")
    for assignment in filter(None, (s.strip() for s in env_sets.split(";"))):
        _apply_assignment(cfg, assignment)
    for assignment in overrides or []:
        _apply_assignment(cfg, assignment)
    return cfg


def fingerprint(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- typed views --------------------------------------------------------------

def gen_config(cfg: dict) -> GenConfig:
    w = cfg["worldgen"]
    return GenConfig(
        width=w["width"],
        height=w["height"],
        rooms_min=w["rooms_min"],
        rooms_max=w["rooms_max"],
        min_room_dim=w["min_room_dim"],
        corridor_prob=w["corridor_prob"],
        bathroom_adjacency_prob=w["bathroom_adjacency_prob"],
        extra_door_prob=w["extra_door_prob"],
    )


def sensor_config(cfg: dict) -> SensorConfig:
    s = cfg["sensors"]
    return SensorConfig(
        fov_degrees=s["fov_degrees"],
        n_rays=s["n_rays"],
        max_range=s["max_range"],
        p_detect=s["p_detect"],
        p_confuse=s["p_confuse"],
    )


def propagation_config(cfg: dict) -> PropagationConfig:
    p = cfg["propagation"]
    return PropagationConfig(
        decay=p["decay"],
        iterations=p["iterations"],
        wall_attenuation=p["wall_attenuation"],
        renormalize=p["renormalize"],
    )


def train_config(cfg: dict, finetune: bool = False) -> TrainConfig:
    g = cfg["grounding"]
    return TrainConfig(
        learning_rate=g["finetune_learning_rate"] if finetune else g["learning_rate"],
        warmup_fraction=g["warmup_fraction"],
        batch_size=g["batch_size"],
        epochs=g["epochs"],
        grad_clip=g["grad_clip"],
        betas=(g["beta1"], g["beta2"]),
        loss_scale=g["finetune_loss_scale"] if finetune else g["loss_scale"],
        val_fraction=g["val_fraction"],
        patience=g["patience"],
    )


def planner_config(cfg: dict) -> PlannerConfig:
    p = cfg["planner"]
    return PlannerConfig(
        min_edge_size=p["min_edge_size"],
        radius=p["radius"],
        lambda_affinity=p["lambda_affinity"],
        lambda_unknown=p["lambda_unknown"],
        lambda_distance=p["lambda_distance"],
        top_k=p["top_k"],
        waypoint_spacing=p["waypoint_spacing"],
        stall_steps=p["stall_steps"],
        replan_period=p["replan_period"],
        success_radius=p["success_radius"],
        target_prob_threshold=p["target_prob_threshold"],
        min_ground_objects=p["min_ground_objects"],
        propagate_every=p["propagate_every"],
        propagation=PropagationConfig(
            decay=cfg["propagation"]["decay"],
            iterations=p["propagation_iterations"],
            wall_attenuation=cfg["propagation"]["wall_attenuation"],
            renormalize=cfg["propagation"]["renormalize"],
        ),
        fusion_samples=p["fusion_samples"],
        fusion_growth=p["fusion_growth"],
    )


def reasoner_endpoint(cfg: dict) -> ReasonerEndpoint:
    r = cfg["reasoner"]
    return ReasonerEndpoint(
        url=r["url"], model=r["model"], deadline_s=r["deadline_s"], enabled=r["enabled"]
    )
