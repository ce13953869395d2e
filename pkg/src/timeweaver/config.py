"""Configuration document: defaults, validation, and the published schema.

The on-disk format is a nested YAML mapping (an empty file means "all
defaults"). Unknown keys are rejected and every value is range-checked at
load time; errors name the offending key path, e.g. ``conditioning.beta``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import yaml

from .errors import ConfigError

# (default, kind, constraint, doc). kind: int|float|bool|int_list|float_pair
# constraint: (lo, hi) for numerics, (lo, hi, allowed) for int_list elements.
_SCHEMA: Dict[str, Dict[str, tuple]] = {
    "synth": {
        "resolution": (32, "int", (16, 128), "square image side; divisible by 8 and 4"),
        "blur_sigma_range": ((0.5, 3.0), "float_pair", (0.5, 3.0), "gaussian blur sigma sampling range"),
        "noise_sigma_range": ((0.0, 0.1), "float_pair", (0.0, 0.1), "additive noise sigma sampling range"),
        "downscale_choices": ([2, 3, 4], "int_list", (2, 4, (2, 3, 4)), "downscale factors sampled per record"),
        "quant_choices": ([16, 32, 64, 256], "int_list", (16, 256, (16, 32, 64, 256)), "quantization level choices"),
    },
    "conditioning": {
        "d_id": (64, "int", (8, 512), "identity embedding dimension"),
        "d_v": (32, "int", (8, 256), "patch token dimension"),
        "d_c": (64, "int", (8, 256), "denoiser cross-attention dimension"),
        "p": (8, "int", (2, 16), "patch grid side (p x p tokens)"),
        "n_queries": (8, "int", (1, 64), "learnable query tokens in the fusion module"),
        "n_layers": (2, "int", (1, 8), "fusion module depth"),
        "beta": (1.0, "float", (0.0, 16.0), "organ-patch enhancement strength"),
        "drop_prob": (0.15, "float", (0.0, 1.0), "per-instance facial-branch drop probability"),
        "use_global": (True, "bool", None, "enable the global identity branch"),
        "use_facial": (True, "bool", None, "enable the facial-token branch"),
        "use_mask": (True, "bool", None, "enable mask-based patch reweighting"),
    },
    "encoders": {
        "id_steps": (600, "int", (1, 100000), "identity encoder training steps"),
        "id_batch": (32, "int", (2, 512), "identity encoder batch size"),
        "id_lr": (1e-3, "float", (1e-6, 1.0), "identity encoder learning rate"),
        "id_margin": (0.2, "float", (0.0, 1.0), "additive cosine margin"),
        "id_scale": (16.0, "float", (1.0, 128.0), "cosine logit scale"),
        "age_steps": (800, "int", (1, 100000), "age estimator training steps"),
        "age_batch": (32, "int", (2, 512), "age estimator batch size"),
        "age_lr": (1e-3, "float", (1e-6, 1.0), "age estimator learning rate"),
        "holdout_frac": (0.2, "float", (0.0, 0.9), "identity fraction held out for validation"),
        "augment_prob": (0.5, "float", (0.0, 1.0), "probability of degrading a training crop"),
    },
    "diffusion": {
        "T": (100, "int", (2, 1000), "number of forward-process timesteps"),
        "channels": ([32, 64, 128], "int_list", (8, 512, None), "denoiser widths per resolution"),
        "lambda_ea": (0.5, "float", (0.0, 100.0), "edge-aware perceptual loss weight"),
        "warmup_frac": (0.6, "float", (0.0, 1.0), "fraction of steps before the perceptual loss activates"),
        "lr": (2e-4, "float", (1e-7, 1.0), "optimizer learning rate"),
        "batch_size": (8, "int", (1, 256), "training batch size"),
        "steps": (2000, "int", (1, 1000000), "restoration fine-tune steps"),
        "pretrain_steps": (1200, "int", (0, 1000000), "age-prompted base pretraining steps"),
        "pretrain_age_prompt_prob": (0.5, "float", (0.0, 1.0), "probability of the age-form prompt during pretraining"),
        "pretrain_control_drop_prob": (0.3, "float", (0.0, 1.0), "probability of dropping control features during pretraining"),
    },
    "guidance": {
        "sampler_steps": (20, "int", (1, 1000), "DDIM steps"),
        "n_opt": (1, "int", (0, 64), "inner latent refinement iterations per step"),
        "eta": (1.0, "float", (0.0, 1e9), "latent refinement step size"),
        "ttab_enabled": (True, "bool", None, "token-targeted attention boost switch"),
        "aagg_enabled": (True, "bool", None, "age-aware gradient guidance switch"),
    },
    "eval": {
        "ssim_window": (7, "int", (3, 15), "SSIM gaussian window side (odd)"),
        "ssim_sigma": (1.5, "float", (0.1, 8.0), "SSIM window sigma"),
        "ssim_k1": (0.01, "float", (1e-6, 1.0), "SSIM stabilizer K1"),
        "ssim_k2": (0.03, "float", (1e-6, 1.0), "SSIM stabilizer K2"),
        "n_samples": (50, "int", (1, 10000), "restorations per guidance-ablation variant"),
        "min_bucket_samples": (30, "int", (1, 10000), "minimum samples per age-gap bucket"),
        "bucket_cap": (30, "int", (1, 10000), "samples evaluated per age-gap bucket"),
        "batch_size": (16, "int", (1, 256), "restoration batch size in suites"),
        "eta": (3072.0, "float", (0.0, 1e9), "refinement step size used by the suites"),
        "n_opt": (1, "int", (0, 64), "inner refinement iterations used by the suites"),
        "sampler_steps": (20, "int", (1, 1000), "DDIM steps used by the suites"),
    },
}


def _check_scalar(path: str, value: Any, kind: str, constraint) -> Any:
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        value = float(value)
    lo, hi = constraint
    if not lo <= value <= hi:
        raise ConfigError(f"{path}: value {value} outside [{lo}, {hi}]")
    return value


def _check_value(path: str, value: Any, kind: str, constraint) -> Any:
    if kind in ("int", "float", "bool"):
        return _check_scalar(path, value, kind, constraint)
    if kind == "float_pair":
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"{path}: expected a [lo, hi] pair, got {value!r}")
        lo = _check_scalar(f"{path}[0]", value[0], "float", constraint)
        hi = _check_scalar(f"{path}[1]", value[1], "float", constraint)
        if lo > hi:
            raise ConfigError(f"{path}: pair must be ordered, got {value!r}")
        return (lo, hi)
    if kind == "int_list":
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{path}: expected a non-empty list, got {value!r}")
        lo, hi, allowed = constraint
        out = []
        for i, v in enumerate(value):
            v = _check_scalar(f"{path}[{i}]", v, "int", (lo, hi))
            if allowed is not None and v not in allowed:
                raise ConfigError(f"{path}[{i}]: {v} not in {sorted(allowed)}")
            out.append(v)
        return out
    raise AssertionError(kind)


@dataclass
class Config:
    """Validated configuration tree; sections are plain dicts."""

    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __getattr__(self, name: str):
        try:
            return _Section(self.sections[name])
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.sections)

    def content_hash(self) -> str:
        blob = json.dumps(self.sections, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **overrides: Any) -> "Config":
        """Return a copy with dotted-path overrides, e.g. replace(**{"guidance.eta": 2.0})."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1) if "." in dotted else (dotted, None)
            if key is None or section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key: {dotted}")
            _, kind, constraint, _ = _SCHEMA[section][key]
            data[section][key] = _check_value(dotted, value, kind, constraint)
        return Config(data)


class _Section:
    def __init__(self, data: Dict[str, Any]):
        self._data = data

    def __getattr__(self, name: str):
        try:
            return self._data[name]
        except KeyError:
            raise AttributeError(name) from None


def default_config() -> Config:
    sections = {
        section: {key: copy.deepcopy(spec[0]) for key, spec in keys.items()}
        for section, keys in _SCHEMA.items()
    }
    return Config(sections)


def load_config(path: str | Path | None = None) -> Config:
    """Load and validate a YAML config; absent keys take their defaults."""
    data: Any = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def parse_config(data: Dict[str, Any]) -> Config:
    cfg = default_config()
    for section, keys in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section: {section}")
        if not isinstance(keys, dict):
            raise ConfigError(f"{section}: expected a mapping")
        for key, value in keys.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
            _, kind, constraint, _ = _SCHEMA[section][key]
            cfg.sections[section][key] = _check_value(f"{section}.{key}", value, kind, constraint)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: Config) -> None:
    res = cfg.synth.resolution
    if res % 8 != 0 or res % 4 != 0:
        raise ConfigError(f"synth.resolution: {res} must be divisible by 8")
    if res % cfg.conditioning.p != 0:
        raise ConfigError(f"conditioning.p: {cfg.conditioning.p} must divide synth.resolution {res}")
    if cfg.eval.ssim_window % 2 == 0:
        raise ConfigError(f"eval.ssim_window: {cfg.eval.ssim_window} must be odd")
    if len(cfg.diffusion.channels) != 3:
        raise ConfigError("diffusion.channels: expected exactly 3 widths")


def config_schema() -> Dict[str, Any]:
    """The published schema: defaults, types, ranges, one-line docs."""
    out: Dict[str, Any] = {}
    for section, keys in _SCHEMA.items():
        out[section] = {}
        for key, (default, kind, constraint, doc) in keys.items():
            entry: Dict[str, Any] = {"default": default, "type": kind, "doc": doc}
            if kind in ("int", "float", "float_pair"):
                entry["range"] = list(constraint)
            elif kind == "int_list":
                entry["range"] = [constraint[0], constraint[1]]
                if constraint[2] is not None:
                    entry["allowed"] = list(constraint[2])
            out[section][key] = entry
    return out


def dump_schema(path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n")
