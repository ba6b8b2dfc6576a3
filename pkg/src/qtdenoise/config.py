"""Flat ``key = value`` run configuration shared by the command-line tools."""
from __future__ import annotations

import os

import numpy as np

from .context import load_template, make_template
from .denoiser import OptimizerConfig
from .vb import ModelConfig

__all__ = ["ConfigError", "DEFAULTS", "parse_config", "load_config", "format_config",
           "read_config", "validate", "build_configs"]


class ConfigError(ValueError):
    """One or more configuration problems; ``errors`` lists them all."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_INT = ("k", "d", "d_max", "min_leaf_dim", "max_iters", "patience", "vb_sweeps_per_step", "seed")
_FLOAT = ("sigma", "g", "a", "b", "step_c0", "step_c1", "boundary_pad")
_VECTOR = ("alpha", "mu", "lambda")
_STRING = ("template",)
KEYS = _INT + _FLOAT + _VECTOR + _STRING

DEFAULTS = {
    "k": 100, "d": 10, "d_max": 30, "min_leaf_dim": 2,
    "g": 0.75, "alpha": [0.01], "mu": [0.0], "lambda": [1.0], "a": 1.0, "b": 100.0,
    "step_c0": 0.1, "step_c1": 0.05, "max_iters": 150, "patience": 10,
    "vb_sweeps_per_step": 1, "seed": 0,
}


def _convert(key, raw, errors):
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _VECTOR:
            vals = [float(x) for x in raw.replace(",", " ").split()]
            if not vals:
                raise ValueError
            return vals
        return raw
    except ValueError:
        errors.append(f"{key}: cannot parse {raw!r}")
        return None


def parse_config(text: str, overrides=None) -> dict:
    """Parse config text into a dict of typed values (no defaults applied).

    ``overrides`` maps keys to raw strings and wins over the file.  On
    failure the raised :class:`ConfigError` carries the well-formed entries
    in ``partial`` so later checks can still run.
    """
    errors, out = [], {}
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        items.append((key.lower(), value))
    items.extend((k.lower(), str(v)) for k, v in (overrides or {}).items())
    for key, value in items:
        if key not in KEYS:
            errors.append(f"unknown key {key!r}")
            continue
        conv = _convert(key, value, errors)
        if conv is not None:
            out[key] = conv
    if errors:
        exc = ConfigError(errors)
        exc.partial = out
        raise exc
    return out


def load_config(path, overrides=None) -> dict:
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    return parse_config(text, overrides)


def read_config(path, overrides=None, require_sigma: bool = True) -> dict:
    """Load, merge overrides and validate, reporting parse and range errors together."""
    try:
        return validate(load_config(path, overrides), require_sigma)
    except ConfigError as exc:
        errors = list(exc.errors)
        partial = getattr(exc, "partial", None)
        if partial is None:
            raise
    try:
        validate(partial, require_sigma)
    except ConfigError as exc:
        errors.extend(exc.errors)
    raise ConfigError(errors)


def format_config(cfg: dict) -> str:
    lines = []
    for key in KEYS:
        if key not in cfg:
            continue
        val = cfg[key]
        if key in _VECTOR:
            val = " ".join(repr(float(x)) for x in val)
        elif key in _FLOAT:
            val = repr(float(val))
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def validate(cfg: dict, require_sigma: bool = True) -> dict:
    """Apply defaults and check ranges; raise :class:`ConfigError` listing every problem."""
    full = {**DEFAULTS, **cfg}
    errors = []
    if require_sigma and "sigma" not in full:
        errors.append("sigma: required key is missing")
    elif "sigma" in full and not full["sigma"] > 0:
        errors.append(f"sigma: must be positive, got {full['sigma']}")
    for key in ("k", "d", "min_leaf_dim", "max_iters", "patience", "vb_sweeps_per_step"):
        if full[key] < 1:
            errors.append(f"{key}: must be >= 1, got {full[key]}")
    if full["d_max"] < 0:
        errors.append(f"d_max: must be >= 0, got {full['d_max']}")
    if not 0.0 <= full["g"] <= 1.0:
        errors.append(f"g: must lie in [0, 1], got {full['g']}")
    for key in ("a", "b"):
        if not full[key] > 0:
            errors.append(f"{key}: must be positive, got {full[key]}")
    if full["step_c0"] < 0 or full["step_c1"] < 0:
        errors.append("step_c0/step_c1: must be nonnegative")
    K, D = full["k"], full["d"]
    if len(full["alpha"]) not in (1, K):
        errors.append(f"alpha: expected 1 or {K} values, got {len(full['alpha'])}")
    elif min(full["alpha"]) <= 0:
        errors.append("alpha: entries must be positive")
    if len(full["mu"]) not in (1, D):
        errors.append(f"mu: expected 1 or {D} values, got {len(full['mu'])}")
    if len(full["lambda"]) not in (1, D * D):
        errors.append(f"lambda: expected 1 or {D * D} values, got {len(full['lambda'])}")
    if "template" in full and not os.path.exists(full["template"]):
        errors.append(f"template: file not found {full['template']!r}")
    if errors:
        raise ConfigError(errors)
    return full


def build_configs(full: dict):
    """Turn a validated config dict into ``(ModelConfig, OptimizerConfig)``."""
    D = full["d"]
    if "template" in full:
        tpl = load_template(full["template"])
        if "boundary_pad" in full:
            tpl = type(tpl)(tpl.offsets, full["boundary_pad"])
    else:
        tpl = make_template(D, full.get("boundary_pad", 128.0))
    lam = full["lambda"]
    lam = lam[0] if len(lam) == 1 else np.asarray(lam).reshape(D, D)
    alpha = full["alpha"][0] if len(full["alpha"]) == 1 else full["alpha"]
    mu = full["mu"][0] if len(full["mu"]) == 1 else full["mu"]
    try:
        model = ModelConfig(sigma2=full["sigma"] ** 2, K=full["k"], D=D, g=full["g"],
                            alpha=alpha, mu=mu, lam=lam, a=full["a"], b=full["b"],
                            d_max=full["d_max"], min_leaf_dim=full["min_leaf_dim"], template=tpl)
        opt = OptimizerConfig(step_c0=full["step_c0"], step_c1=full["step_c1"],
                              max_iters=full["max_iters"], patience=full["patience"],
                              vb_sweeps_per_step=full["vb_sweeps_per_step"], seed=full["seed"])
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    return model, opt
