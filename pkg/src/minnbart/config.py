"""
Run configuration: an INI file with one section per concern.

Example::

    [data]
    csv = panel.csv
    codes = codes.csv

    [sampler]
    seed = 20240101
    M = 200
    p = 13
    volatility = sv

    [split_prior]
    regime = minnesota
    lambda1 = 1
    lambda2 = 0.5

    [evaluation]
    t0 = 160
    h_max = 8

    [output]
    dir = out

Relative paths are resolved against the config file's directory. Unknown
sections or keys are errors; everything not given takes the documented
default, and the resolved values are what the run manifest records.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .gibbs import SamplerConfig


class ConfigError(ValueError):
    """Invalid configuration; `field` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


SAMPLER_KEYS = {
    "seed": int, "M": int, "p": int, "r": _opt_int, "volatility": str,
    "n_burn": int, "n_save": int, "thin": int, "gamma": float, "beta": float,
    "tau2": _opt_float, "homo_shape": float, "homo_scale": float,
    "refresh_every": int, "n_jobs": int, "checkpoint_every": int,
}
SPLIT_KEYS = {"regime": str, "lambda1": float, "lambda2": float, "lam": float, "update_lambda": _bool}
DATA_KEYS = {"csv": str, "codes": str}
EVAL_KEYS = {"t0": int, "h_max": int, "refit_stride": int, "benchmark": str, "rmspe": _bool, "n_jobs": int}
OUTPUT_KEYS = {"dir": str}

SECTIONS = {"data": DATA_KEYS, "sampler": SAMPLER_KEYS, "split_prior": SPLIT_KEYS,
            "evaluation": EVAL_KEYS, "output": OUTPUT_KEYS}


@dataclass
class RunConfig:
    sampler: SamplerConfig
    data: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def to_dict(self):
        return {"sampler": self.sampler.to_dict(), "data": dict(self.data),
                "evaluation": dict(self.evaluation), "output": dict(self.output)}

    @classmethod
    def from_dict(cls, d):
        return cls(SamplerConfig.from_dict(d["sampler"]), dict(d["data"]),
                   dict(d["evaluation"]), dict(d["output"]))


DATA_DEFAULTS = {"csv": None, "codes": None}
EVAL_DEFAULTS = {"t0": None, "h_max": 1, "refit_stride": 1, "benchmark": None, "rmspe": False, "n_jobs": 1}
OUTPUT_DEFAULTS = {"dir": "out"}


def parse_config_text(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
        schema = SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{section}]", f"{section}.{key}")
            try:
                values[(section, key)] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", f"{section}.{key}") from None
    if ("sampler", "seed") not in values:
        raise ConfigError("[sampler] seed is required", "sampler.seed")

    kw = {k: v for (s, k), v in values.items() if s in ("sampler", "split_prior")}
    for name in ("lambda1", "lambda2", "lam"):
        if name in kw and not kw[name] > 0:
            raise ConfigError(f"[split_prior] {name} must be positive, got {kw[name]}", f"split_prior.{name}")
    try:
        sampler = SamplerConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    base = Path(base_dir)

    def section(name, defaults, path_keys=()):
        out = dict(defaults)
        out.update({k: v for (s, k), v in values.items() if s == name})
        for key in path_keys:
            if out.get(key):
                out[key] = str((base / out[key]).resolve())
        return out

    evaluation = section("evaluation", EVAL_DEFAULTS, ("benchmark",))
    if evaluation["h_max"] < 1 or evaluation["refit_stride"] < 1 or evaluation["n_jobs"] < 1:
        raise ConfigError("[evaluation] h_max, refit_stride and n_jobs must be at least 1")
    return RunConfig(sampler, section("data", DATA_DEFAULTS, ("csv", "codes")), evaluation,
                     section("output", OUTPUT_DEFAULTS, ("dir",)))


def parse_config(path):
    """Read and validate an INI config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)

