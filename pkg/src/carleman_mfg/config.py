"""Run-configuration loading, validation, and canonical resolution.

Configs are plain-text nested key-value blocks (YAML).  Validation happens
before any computation and names the missing or malformed key.  The resolved
config is the defaults-filled, canonically ordered flat text used both for
reproducibility echoes and for the config hash in every report header.
"""

from __future__ import annotations

import hashlib

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1

SUBCOMMANDS = (
    "verify", "estimate", "sweep", "holder", "lipschitz", "corollary",
    "reconstruct",
)

_GRID_DEFAULTS = {"dim": 1, "lengths": [1.0], "nx": [101], "nt": 201, "T": 1.0}
_WEIGHT_DEFAULTS = {
    "lam": 1.0, "s": 2.0, "s_list": None, "lam_list": None, "eps": 0.1,
    "normalization_ref": "phi_max", "sign": 1,
}
_COEFF_DEFAULTS = {
    "bound": 0.25, "rho0": 0.3, "n_modes": 3, "amplitude": 1.0,
    "rate_scale": 2.0, "q_box": None, "q_floor": 0.0, "sources": "zero",
    "seed": None,
}
_EXPERIMENT_DEFAULTS = {
    "estimate_id": "THM21", "field": "u", "sign": -1, "pair": None,
    "omega": None, "eps": None, "M": 5.0, "D_list": None,
    "perturbation_list": None, "delta_list": None, "beta": 1e-6,
    "kind": "terminal", "paired_scaling": False,
    "solver": {"tol": 1e-6, "atol": 1e-14, "btol": 1e-14, "iter_lim": 200000},
    "picard": {"tol": 1e-9, "max_iter": 60},
    "thresholds": {
        "nullspace": 1e-12,
        "richardson_low": 3.4,
        "richardson_high": 4.6,
        "time_reversal": 1e-12,
        "identity_defect": 1e-3,
        "identity_ratio": 3.0,
        "green_ratio": 2.5,
    },
}
_REPORT_DEFAULTS = {"figures": True, "precision": 12}

# keys without a usable default, per subcommand; grid and seed are always
# required so a config cannot silently run on a grid it never named
_REQUIRED = {
    "verify": [],
    "estimate": [],
    "sweep": [("weights", "s_list")],
    "holder": [("experiment", "D_list")],
    "lipschitz": [("experiment", "omega"), ("experiment", "perturbation_list")],
    "corollary": [("experiment", "omega"), ("experiment", "perturbation_list")],
    "reconstruct": [],
}


def load_config(path):
    """Parse a YAML config file into a plain dict."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError:
        raise
    except yaml.YAMLError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of blocks")
    return raw


def _merge(defaults, block, prefix):
    if block is None:
        block = {}
    if not isinstance(block, dict):
        raise ConfigError(f"config block {prefix} must be a mapping")
    out = {}
    for key, default in defaults.items():
        value = block.get(key, default)
        if isinstance(default, dict):
            value = dict(default) if value is default else {**default,
                                                            **(value or {})}
        out[key] = value
    for key in block:
        if key not in defaults:
            raise ConfigError(f"unknown config key: {prefix}.{key}")
    return out


def resolve_config(raw, subcommand):
    """Fill defaults, validate, and return the resolved config dict."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    known_blocks = {"grid", "weights", "coefficients", "experiment", "report",
                    "seed"}
    for key in raw:
        if key not in known_blocks:
            raise ConfigError(f"unknown config key: {key}")

    if "grid" not in raw or raw["grid"] is None:
        raise ConfigError("missing config key: grid")
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("missing config key: seed")
    for block, key in _REQUIRED[subcommand]:
        if block not in raw or raw[block] is None:
            raise ConfigError(f"missing config key: {block}")
        if key is not None and raw[block].get(key) is None:
            raise ConfigError(f"missing config key: {block}.{key}")

    cfg = {
        "seed": int(raw["seed"]),
        "grid": _merge(_GRID_DEFAULTS, raw.get("grid"), "grid"),
        "weights": _merge(_WEIGHT_DEFAULTS, raw.get("weights"), "weights"),
        "coefficients": _merge(_COEFF_DEFAULTS, raw.get("coefficients"),
                               "coefficients"),
        "experiment": _merge(_EXPERIMENT_DEFAULTS, raw.get("experiment"),
                             "experiment"),
        "report": _merge(_REPORT_DEFAULTS, raw.get("report"), "report"),
    }
    _validate_numeric(cfg)
    if cfg["coefficients"]["seed"] is None:
        cfg["coefficients"]["seed"] = cfg["seed"]
    return cfg


def _validate_numeric(cfg):
    g = cfg["grid"]
    if g["dim"] not in (1, 2):
        raise ConfigError("grid.dim must be 1 or 2")
    for key in ("lengths", "nx"):
        if not isinstance(g[key], (list, tuple)):
            g[key] = [g[key]]
        if len(g[key]) != g["dim"]:
            raise ConfigError(f"grid.{key} must have {g['dim']} entries")
    if any(v <= 0 for v in g["lengths"]) or g["T"] <= 0:
        raise ConfigError("grid lengths and T must be positive")
    if any(int(n) < 3 for n in g["nx"]) or int(g["nt"]) < 3:
        raise ConfigError("grid.nx and grid.nt must be >= 3")

    w = cfg["weights"]
    if w["lam"] <= 0 or w["s"] <= 0:
        raise ConfigError("weights.lam and weights.s must be positive")
    if w["eps"] is not None and not (0 < w["eps"] < g["T"]):
        raise ConfigError("weights.eps must lie in (0, T)")
    if w["sign"] not in (1, -1):
        raise ConfigError("weights.sign must be 1 or -1")

    c = cfg["coefficients"]
    if c["bound"] < 0:
        raise ConfigError("coefficients.bound must be nonnegative")
    if c["sources"] not in ("zero", "manufactured"):
        raise ConfigError("coefficients.sources must be 'zero' or 'manufactured'")

    e = cfg["experiment"]
    if e["beta"] is not None and e["beta"] <= 0:
        raise ConfigError("experiment.beta must be positive")
    if e["kind"] not in ("terminal", "interior", "interior_u"):
        raise ConfigError("experiment.kind must be terminal|interior|interior_u")


def _flatten(prefix, value, lines):
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else str(key), value[key], lines)
    elif isinstance(value, (list, tuple)):
        body = ", ".join(_scalar_text(v) for v in value)
        lines.append(f"{prefix} = [{body}]")
    else:
        lines.append(f"{prefix} = {_scalar_text(value)}")


def _scalar_text(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg, subcommand):
    """Canonical flat text of the resolved config (hash input and echo body)."""
    lines = [f"subcommand = {subcommand}"]
    _flatten("", cfg, lines)
    return "\n".join(lines) + "\n"


def config_hash(cfg, subcommand):
    return hashlib.sha256(resolved_text(cfg, subcommand).encode()).hexdigest()[:12]
