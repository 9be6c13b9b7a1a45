"""Default hyperparameters, named profiles and JSON-schema validated configs."""
import copy
import hashlib
import json
from importlib import resources

import jsonschema

from .pitta import AdaptationConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def train_defaults():
    d = TrainConfig().to_dict()
    d["representation"] = "gmr"
    d["split"] = "train"
    return d


def adapt_defaults():
    d = AdaptationConfig().to_dict()
    d["split"] = "test"
    return d


# Desk-scale phantom study. Modality B swaps the tissue contrast, applies a
# gain/bias shift and carries a lesion in the ring whose intensity matches the
# inner disc. The tiny network needs a larger step size to converge in 500
# iterations.
PHANTOM_TINY_SPEC = {
    "size": [48, 48],
    "num_structures": 3,
    "n_slices": 1,
    "intensities": {"A": [0.0, 0.35, 0.9, 0.6], "B": [0.1, 0.75, 0.4, 0.25]},
    "noise_std": 0.03,
    "styles": {"A": {"gain": 1.0, "bias": 0.0, "gamma": 1.0},
               "B": {"gain": 2.0, "bias": 10.0, "gamma": 1.0}},
    "lesion": None,
    "seed": 0,
}
PHANTOM_TINY_LESION = {"class": 1, "radius_frac": 0.8, "delta": -0.35}

PROFILES = {
    "phantom-tiny": {
        "arms": ["SrcOnly(raw)", "SrcOnly(GMR)", "raw+PITTA", "GMR+PITTA"],
        "seeds": [0, 1, 2],
        "classes": [1, 2, 3],
        "class_names": {"1": "ring", "2": "inner", "3": "outer"},
        "train": {"profile": "tiny", "iterations": 500, "learning_rate": 1e-3, "batch_size": 12},
        "adapt": {"alpha": 0.9, "lv_classes": [1]},
        "dataset": {"phantom": {
            "spec": PHANTOM_TINY_SPEC,
            "n_train": 40,
            "n_test": 20,
            "train_seed": 0,
            "test_seed": 1000,
            "test_overrides": {"lesion": PHANTOM_TINY_LESION},
        }},
    },
}


def profile(name):
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; available: {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


def schema(kind):
    text = resources.files("gmdg").joinpath("schemas", f"{kind}.schema.json").read_text()
    return json.loads(text)


def validate(kind, cfg):
    try:
        jsonschema.validate(cfg, schema(kind))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{kind} config invalid at {path}: {exc.message}") from None
    return cfg


def parse_override(text):
    """``key=value`` with a JSON value (bare strings allowed); dots nest keys."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg, overrides):
    for key, value in overrides:
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def load_config(kind, path=None, overrides=(), base=None):
    if base is not None:
        cfg = copy.deepcopy(base)
    else:
        cfg = {"train": train_defaults, "adapt": adapt_defaults}.get(kind, dict)()
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg.update(user)
    apply_overrides(cfg, [parse_override(o) if isinstance(o, str) else o for o in overrides])
    return validate(kind, cfg)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
