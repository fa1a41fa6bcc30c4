"""Experiment configuration: TOML schema, defaults, validation, overrides.

A config file is a flat two-level TOML document. Every key is optional and
falls back to a default; unknown keys are rejected by name so typos fail
loudly. ``resolve`` materializes all defaults into a plain dict that the
orchestration layer consumes, and ``to_toml`` writes that dict back out so a
run directory always carries the exact configuration it was produced with.
"""

from __future__ import annotations

import copy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import losses
from .errors import ConfigurationError
from .fedcore import ALGORITHMS

# None means "filled in by resolve" (algorithm-dependent or kind-dependent)
DEFAULTS = {
    "algorithm": "fedavg",
    "lambda": None,
    "feddyn_sign": -1,
    "head": "linear",
    "meta_gamma": False,
    "rounds": 100,
    "local_epochs": 5,
    "participation": 0.4,
    "clients": 20,
    "alpha": 0.3,
    "imbalance_ratio": 1.0,
    "seed": 0,
    "workers": 1,
    "loss": {"kind": "ce", "gamma": None, "ir_power": 1.0},
    "sgd": {"lr0": 0.01, "lr_round_decay": 0.99, "momentum": 0.9,
            "weight_decay": 1e-5, "batch_size": 40},
    "dataset": {"kind": "synthetic", "classes": 10, "dim": 32,
                "n_per_class": 500, "separation": 4.0, "test_per_class": 100,
                "images_path": "", "labels_path": "",
                "test_images_path": "", "test_labels_path": ""},
    "model": {"hidden_dims": [64], "feature_dim": 64, "hyper_hidden": 0},
    "meta_set": {"per_class": 0, "eta": 0.1, "eps": 0.01},
    "attack": {"poisoned_clients": []},
    "eval": {"every": 1, "checkpoint_every": 0},
    "output": {"dir": ""},
    "repeat": {"seeds": 1},
}

# default prox/penalty strength per algorithm when "lambda" is left unset
LAMBDA_DEFAULTS = {"fedprox": 0.01, "feddyn": 0.01, "ditto": 0.75}


def _check_value(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(default, bool) or not isinstance(value, bool):
            raise ConfigurationError(f"config key {path!r}: expected "
                                     f"{type(default).__name__}, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"config key {path!r}: expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, type(default)):
        raise ConfigurationError(f"config key {path!r}: expected "
                                 f"{type(default).__name__}, got {value!r}")
    return value


def _merge(user: dict) -> dict:
    if not isinstance(user, dict):
        raise ConfigurationError("config root must be a table")
    out = copy.deepcopy(DEFAULTS)
    for key, value in user.items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {key!r} must be a table")
            for sub, sub_value in value.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigurationError(f"unknown config key {key!r}.{sub!r}")
                out[key][sub] = _check_value(f"{key}.{sub}", DEFAULTS[key][sub], sub_value)
        else:
            out[key] = _check_value(key, DEFAULTS[key], value)
    return out


def resolve(user: dict) -> dict:
    """Merge a parsed config with the defaults and validate every field."""
    cfg = _merge(user)

    if cfg["algorithm"] not in ALGORITHMS:
        raise ConfigurationError(
            f"algorithm must be one of {ALGORITHMS}, got {cfg['algorithm']!r}")
    if cfg["lambda"] is None:
        cfg["lambda"] = LAMBDA_DEFAULTS.get(cfg["algorithm"], 0.0)
    cfg["lambda"] = float(cfg["lambda"])
    if cfg["lambda"] < 0:
        raise ConfigurationError("lambda must be nonnegative")
    if cfg["feddyn_sign"] not in (-1, 1):
        raise ConfigurationError("feddyn_sign must be -1 or 1")
    if cfg["head"] not in ("linear", "hyper"):
        raise ConfigurationError("head must be 'linear' or 'hyper'")

    if cfg["loss"]["kind"] not in losses.KINDS:
        raise ConfigurationError(
            f"loss.kind must be one of {losses.KINDS}, got {cfg['loss']['kind']!r}")
    # materialize the per-kind default so the resolved file is explicit
    spec = losses.LossSpec(cfg["loss"]["kind"], cfg["loss"]["gamma"],
                           float(cfg["loss"]["ir_power"]))
    cfg["loss"]["gamma"] = spec.gamma
    cfg["loss"]["ir_power"] = spec.ir_power

    if cfg["rounds"] < 0:
        raise ConfigurationError("rounds must be >= 0")
    if cfg["local_epochs"] < 1:
        raise ConfigurationError("local_epochs must be >= 1")
    if not 0 < cfg["participation"] <= 1:
        raise ConfigurationError("participation must be in (0, 1]")
    if cfg["clients"] < 1:
        raise ConfigurationError("clients must be >= 1")
    if cfg["alpha"] <= 0:
        raise ConfigurationError("alpha must be positive")
    if cfg["imbalance_ratio"] < 1:
        raise ConfigurationError("imbalance_ratio must be >= 1")
    if cfg["workers"] < 1:
        raise ConfigurationError("workers must be >= 1")
    if cfg["repeat"]["seeds"] < 1:
        raise ConfigurationError("repeat.seeds must be >= 1")
    if cfg["eval"]["every"] < 1:
        raise ConfigurationError("eval.every must be >= 1")
    if cfg["eval"]["checkpoint_every"] < 0:
        raise ConfigurationError("eval.checkpoint_every must be >= 0")
    if cfg["meta_set"]["per_class"] < 0:
        raise ConfigurationError("meta_set.per_class must be >= 0")
    if cfg["meta_gamma"] and cfg["meta_set"]["per_class"] < 1:
        raise ConfigurationError("meta_gamma needs meta_set.per_class >= 1")
    if cfg["meta_gamma"] and cfg["loss"]["kind"] != "bsm":
        raise ConfigurationError("meta_gamma tunes the bsm exponent; set loss.kind = 'bsm'")

    ds = cfg["dataset"]
    if ds["kind"] not in ("synthetic", "idx"):
        raise ConfigurationError("dataset.kind must be 'synthetic' or 'idx'")
    if ds["kind"] == "synthetic":
        if ds["classes"] < 2 or ds["dim"] < 1 or ds["n_per_class"] < 1 \
                or ds["separation"] <= 0 or ds["test_per_class"] < 1:
            raise ConfigurationError("bad synthetic dataset parameters")
    else:
        for key in ("images_path", "labels_path", "test_images_path", "test_labels_path"):
            if not ds[key]:
                raise ConfigurationError(f"dataset.{key} is required for idx datasets")

    model = cfg["model"]
    model["hidden_dims"] = [int(h) for h in model["hidden_dims"]]
    if not model["hidden_dims"] or any(h < 1 for h in model["hidden_dims"]):
        raise ConfigurationError("model.hidden_dims must be positive integers")
    if model["feature_dim"] < 1:
        raise ConfigurationError("model.feature_dim must be >= 1")
    if model["hyper_hidden"] < 0:
        raise ConfigurationError("model.hyper_hidden must be >= 0 (0 = auto)")

    bad = [m for m in cfg["attack"]["poisoned_clients"]
           if not isinstance(m, int) or m < 0 or m >= cfg["clients"]]
    if bad:
        raise ConfigurationError(f"attack.poisoned_clients out of range: {bad}")
    return cfg


def load_config(path) -> dict:
    """Parse and resolve a TOML config file."""
    try:
        with open(path, "rb") as f:
            user = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return resolve(user)


def apply_overrides(user: dict, overrides) -> dict:
    """Apply ``key=value`` / ``table.key=value`` strings on top of a config.

    Values are parsed as TOML literals, so quoting, booleans and lists all
    work the same way they do in the file.
    """
    user = copy.deepcopy(user)
    for item in overrides:
        key, sep, literal = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        try:
            value = tomllib.loads(f"v = {literal.strip()}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"override {item!r}: bad value: {exc}") from exc
        parts = key.strip().split(".")
        if len(parts) == 1:
            user[parts[0]] = value
        elif len(parts) == 2:
            user.setdefault(parts[0], {})
            if not isinstance(user[parts[0]], dict):
                raise ConfigurationError(f"override {item!r}: {parts[0]!r} is not a table")
            user[parts[0]][parts[1]] = value
        else:
            raise ConfigurationError(f"override {item!r}: keys nest at most one level")
    return user


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigurationError(f"cannot serialize config value {v!r}")


def to_toml(resolved: dict) -> str:
    """Serialize a resolved config deterministically (schema order)."""
    scalar_lines = []
    table_lines = []
    for key, default in DEFAULTS.items():
        value = resolved[key]
        if isinstance(default, dict):
            table_lines.append(f"\n[{key}]")
            for sub in default:
                table_lines.append(f"{sub} = {_toml_value(value[sub])}")
        else:
            scalar_lines.append(f'"{key}" = {_toml_value(value)}'
                                if "-" in key else f"{key} = {_toml_value(value)}")
    return "\n".join(scalar_lines + table_lines) + "\n"
