"""Run configuration: TOML file plus ``section.key=value`` overrides.

Every section maps onto one of the library's config objects; unknown keys and
wrongly typed values are rejected before any work starts.
"""

from __future__ import annotations

import copy
import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import __version__
from .ddpm import NoiseSchedule, TrainConfig, build_schedule
from .errors import ConfigError
from .model import LossWeights, ModelConfig
from .sapnp import SAPnPConfig, WeightTable
from .synth import DataConfig, ObservationNoise, TreeConfig

DEFAULTS = {
    "seed": 0,
    "paths": {"data": "data", "out": "runs/default", "checkpoint": ""},
    "data": {
        "n_cases": 23, "frames_per_case": 16, "window": 4, "stride": 4, "points": 32,
        "magnitude": 5.0, "local_fraction": 0.3, "obs_noise": 0.1, "occlusion_noise": 4.0,
        "occlusion_start": 0.05, "occlusion_stay": 0.9, "n_test_cases": 4, "oracle_pose": False,
        "tree_depth": 3,
    },
    "model": {
        "width": 128, "heads": 4, "blocks": 2, "ffn_hidden": 256, "time_dim": 64,
        "decoder_hidden": [256, 256], "conv_channels": [32, 64], "basis_modes": 8,
        "residual_gain": 20.0, "data_std": 1.0, "T": 100, "beta_start": 1e-3, "beta_end": 0.2,
        "skip_connection": "gated", "observation_skip": True, "linear_path": True,
    },
    "train": {
        "steps": 6000, "batch_size": 32, "lr": 1e-3, "lr_final": 1e-4, "warmup": 50,
        "grad_clip": 1.0, "renoise": True, "augment": True, "jitter": 1.0, "log_every": 0,
    },
    "loss": {"mse": 1.0, "curv": 0.1, "diff": 1.0},
    "ablation": {
        "temporal_modeling": True, "structural_prior": True,
        "transformer_encoder": True, "diversity_loss": True,
    },
    "sapnp": {
        "w_bifurcation": 1.0, "w_interior": 0.5, "w_endpoint": 0.2, "w_outlier": 0.0,
        "match_threshold": 0.5,
    },
    "eval": {"n_samples": 25, "workers": 1, "svg_limit": 8, "batch_size": 64},
}


def _check(section: str, key: str, value, default):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{where} must be a list of integers, got {value!r}")
    return value


def _merge(base: dict, doc: dict, section: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in doc.items():
        if key not in base:
            raise ConfigError(f"unknown config key {section + '.' if section else ''}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            out[key] = _merge(base[key], value, key)
        else:
            out[key] = _check(section, key, value, base[key])
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` with value in TOML syntax; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        doc = {}
        if path:
            try:
                doc = tomllib.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for text in overrides:
            keys, value = parse_override(text)
            node = doc
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, doc))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    # -- typed views ---------------------------------------------------------
    @property
    def temporal(self) -> bool:
        return self.values["ablation"]["temporal_modeling"]

    def data_config(self) -> DataConfig:
        d, s = self.values["data"], self.values["sapnp"]
        table = WeightTable(s["w_bifurcation"], s["w_interior"], s["w_endpoint"], s["w_outlier"])
        return DataConfig(
            tree=TreeConfig(depth=d["tree_depth"]),
            n_cases=d["n_cases"], frames_per_case=d["frames_per_case"], window=d["window"],
            stride=d["stride"], points=d["points"], magnitude=d["magnitude"],
            local_fraction=d["local_fraction"], obs_noise=d["obs_noise"],
            occlusion_noise=d["occlusion_noise"], occlusion_start=d["occlusion_start"],
            occlusion_stay=d["occlusion_stay"], n_test_cases=d["n_test_cases"],
            oracle_pose=d["oracle_pose"],
            sapnp=SAPnPConfig(weights=table, match_threshold=s["match_threshold"]),
        )

    def model_config(self) -> ModelConfig:
        m, a = self.values["model"], self.values["ablation"]
        return ModelConfig(
            points=self.values["data"]["points"],
            frames=self.values["data"]["window"] if a["temporal_modeling"] else 1,
            T=m["T"], beta_start=m["beta_start"], beta_end=m["beta_end"],
            width=m["width"], heads=m["heads"], blocks=m["blocks"], ffn_hidden=m["ffn_hidden"],
            time_dim=m["time_dim"], decoder_hidden=tuple(m["decoder_hidden"]),
            conv_channels=tuple(m["conv_channels"]), basis_modes=m["basis_modes"],
            residual_gain=m["residual_gain"], data_std=m["data_std"],
            skip_connection=m["skip_connection"], observation_skip=m["observation_skip"],
            linear_path=m["linear_path"],
            transformer_encoder=a["transformer_encoder"], seed=self.values["seed"],
        )

    def loss_weights(self) -> LossWeights:
        l, a = self.values["loss"], self.values["ablation"]
        return LossWeights(mse=l["mse"], curv=l["curv"] if a["structural_prior"] else 0.0,
                           diff=l["diff"] if a["diversity_loss"] else 0.0)

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(steps=t["steps"], batch_size=t["batch_size"], lr=t["lr"],
                           lr_final=t["lr_final"], warmup=t["warmup"], grad_clip=t["grad_clip"],
                           renoise=t["renoise"], weights=self.loss_weights(),
                           seed=self.values["seed"], log_every=t["log_every"],
                           augment=(ObservationNoise.from_data_config(self.data_config())
                                    if t["augment"] else None),
                           jitter=t["jitter"])

    def schedule(self) -> NoiseSchedule:
        m = self.values["model"]
        return build_schedule(m["T"], m["beta_start"], m["beta_end"])

    def validate(self) -> None:
        try:
            self.data_config()
            self.model_config()
            self.train_config()
            self.schedule()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.values["model"]["conv_channels"]) != 2:
            raise ConfigError("model.conv_channels needs exactly two entries")
        if self.values["train"]["steps"] < 1 or self.values["train"]["batch_size"] < 1:
            raise ConfigError("train.steps and train.batch_size must be positive")
        if self.values["eval"]["n_samples"] < 2:
            raise ConfigError("eval.n_samples must be at least 2")
        if self.values["eval"]["workers"] < 1:
            raise ConfigError("eval.workers must be at least 1")

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))


def build_id() -> str:
    """Package version plus the short commit hash of the source tree, when available."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+g{rev}" if rev else __version__
