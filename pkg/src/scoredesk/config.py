"""YAML run configuration: defaults, validation, dotted-path access.

A config file describes one experiment end to end (prior, prompts, views,
objective, trainer). Files only need the keys they change; everything
else comes from DEFAULTS. Unknown keys are rejected by their dotted path
so typos fail loudly instead of silently training the wrong thing.
"""

import copy
import hashlib
import json

import yaml
import numpy as np

from .engine import RunSetup, TrainConfig
from .fake_score import DsmConfig
from .generator import ViewTransform
from .objectives import ObjectiveSpec
from .prior import GaussianMixture, PromptBank
from .reward import RewardModel
from .schedule import NoiseSchedule


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "experiment": "run",
    "seed": 0,
    "schedule": {
        "kind": "vp_linear",
        "t_min": 0.02,
        "t_max": 0.98,
        "beta_min": 0.1,
        "beta_max": 20.0,
    },
    "prior": {
        "weights": [0.5, 0.5],
        "means": [[-3.0, 0.0], [3.0, 0.0]],
        "covs": 1.0,
    },
    "prompts": {
        "a": {"components": [0, 1], "weights": [0.55, 0.45]},
    },
    "views": [
        {"prompt": "a", "rotation_deg": 0.0, "offset": None},
    ],
    "generator": {
        "kind": "particles",
        "n_particles": 64,
        "dim": 2,
        "init_mean": 0.0,
        "init_std": 0.5,
        "latent_dim": 2,
        "hidden": 32,
    },
    "objective": {
        "family": "kl",
        "gamma": 0.0,
        "lam": 0.0,
        "alpha": None,
        "distance": "l2_sq",
        "huber_c": 1.0,
        "fake_source": "analytic",
        "w_kind": "constant",
        "omega_kind": "sigma_sq",
        "independent_draws": False,
    },
    "reward": {
        "kind": None,
        "scale": 1.0,
        "targets": None,
        "matrix": None,
        "feats": None,
    },
    "train": {
        "steps": 4000,
        "batch_per_step": 8,
        "lr": 5.0e-3,
        "optimizer": "adam",
        "t_strategy": "uniform",
        "snapshot_every": 200,
        "track_divergence": True,
        "divergence_n_mc": 2000,
        "fake_warmup_steps": 500,
        "fake_updates_per_step": 1,
        "frames_every": 0,
    },
    "dsm": {
        "hidden": [64, 64],
        "n_freqs": 4,
        "batch": 128,
        "lr": 3.0e-3,
        "optimizer": "adam",
        "lambda_kind": "sigma_sq",
        "updates_per_step": 1,
    },
}

# Subtrees whose keys are user data, not schema: don't flag their children.
_OPEN_SUBTREES = {"prompts", "reward.targets", "reward.feats"}


def _check_keys(user, ref, prefix=""):
    if not isinstance(user, dict):
        return
    for key, val in user.items():
        path = f"{prefix}{key}"
        if prefix.rstrip(".") in _OPEN_SUBTREES or path in _OPEN_SUBTREES:
            continue
        if not isinstance(ref, dict) or key not in ref:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(val, dict):
            _check_keys(val, ref[key], prefix=path + ".")


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) \
                and key not in _OPEN_SUBTREES:
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides=None):
    """Read a YAML file, merge onto defaults, apply dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be a mapping, got "
                              f"{type(user).__name__}")
        _check_keys(user, DEFAULTS)
        cfg = _merge(cfg, user)
    for dotted, value in (overrides or []):
        set_path(cfg, dotted, value)
    return cfg


def get_path(cfg, dotted):
    """Fetch cfg['a']['b'][2] style values from 'a.b.2'."""
    node = cfg
    for part in dotted.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict):
            if part not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        else:
            raise ConfigError(f"cannot descend into {dotted!r} at {part!r}")
    return node


def set_path(cfg, dotted, value):
    """Set a dotted path, parsing the value as YAML when it is a string."""
    if isinstance(value, str):
        value = yaml.safe_load(value)
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict):
            if part not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        else:
            raise ConfigError(f"cannot descend into {dotted!r} at {part!r}")
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif isinstance(node, dict):
        open_prefix = ".".join(parts[:-1]) in _OPEN_SUBTREES
        if last not in node and not open_prefix:
            raise ConfigError(f"unknown config key: {dotted}")
        node[last] = value
    else:
        raise ConfigError(f"cannot set {dotted!r}: parent is a leaf")


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def _as_config_error(fn, *args, **kwargs):
    """Turn constructor ValueErrors into ConfigErrors with the same text."""
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def build_schedule(cfg) -> NoiseSchedule:
    s = cfg["schedule"]
    return _as_config_error(
        NoiseSchedule, s["kind"], t_min=s["t_min"], t_max=s["t_max"],
        beta_min=s["beta_min"], beta_max=s["beta_max"])


def build_bank(cfg) -> PromptBank:
    p = cfg["prior"]
    base = _as_config_error(GaussianMixture, p["weights"], p["means"],
                            p["covs"])
    subsets = {}
    for name, sub in cfg["prompts"].items():
        if not isinstance(sub, dict) or "components" not in sub:
            raise ConfigError(f"prompt {name!r} needs a components list")
        comps = sub["components"]
        if sub.get("weights") is not None:
            subsets[name] = (comps, sub["weights"])
        else:
            subsets[name] = comps
    return _as_config_error(PromptBank.from_subsets, base, subsets)


def build_views(cfg, dim):
    views = []
    for v in cfg["views"]:
        if not isinstance(v, dict) or "prompt" not in v:
            raise ConfigError("every view needs a prompt name")
        deg = float(v.get("rotation_deg") or 0.0)
        off = v.get("offset")
        if deg == 0.0 and off is None:
            views.append(ViewTransform.identity(v["prompt"], dim))
        else:
            if dim != 2 and deg != 0.0:
                raise ConfigError("rotation views need dim == 2")
            off_arr = np.zeros(dim) if off is None else np.asarray(off, float)
            if deg != 0.0:
                views.append(ViewTransform.rotation2d(v["prompt"],
                                                      np.deg2rad(deg), off_arr))
            else:
                views.append(ViewTransform(v["prompt"], np.eye(dim), off_arr))
    return views


def build_objective(cfg) -> ObjectiveSpec:
    o = cfg["objective"]
    alpha = tuple(o["alpha"]) if o["alpha"] is not None else None
    return _as_config_error(
        ObjectiveSpec, family=o["family"], gamma=o["gamma"], lam=o["lam"],
        alpha=alpha, distance=o["distance"], huber_c=o["huber_c"],
        fake_source=o["fake_source"], w_kind=o["w_kind"],
        omega_kind=o["omega_kind"], independent_draws=o["independent_draws"])


def build_reward(cfg):
    r = cfg["reward"]
    if r["kind"] is None:
        return None
    return _as_config_error(RewardModel, r["kind"], targets=r["targets"],
                            scale=r["scale"], matrix=r["matrix"],
                            feats=r["feats"])


def build_run(cfg):
    """Materialize (RunSetup, TrainConfig) from a validated config dict."""
    sched = build_schedule(cfg)
    bank = build_bank(cfg)
    g = cfg["generator"]
    views = build_views(cfg, g["dim"])
    spec = build_objective(cfg)
    reward = build_reward(cfg)
    if spec.coefficients()[2] != 0.0 and reward is None:
        raise ConfigError("objective has a reward term but reward.kind is null")
    if (spec.family == "sim" and spec.fake_source == "analytic"
            and g["kind"] != "particles"):
        raise ConfigError("fake_source 'analytic' needs the particle "
                          "generator; use 'learned' with generator.kind "
                          f"{g['kind']!r}")
    d = cfg["dsm"]
    dsm = DsmConfig(hidden=tuple(d["hidden"]), n_freqs=d["n_freqs"],
                    batch=d["batch"], lr=d["lr"], optimizer=d["optimizer"],
                    lambda_kind=d["lambda_kind"],
                    updates_per_step=d["updates_per_step"])
    setup = RunSetup(sched=sched, bank=bank, views=views, spec=spec,
                     n_particles=g["n_particles"], dim=g["dim"],
                     init_mean=g["init_mean"], init_std=g["init_std"],
                     reward=reward, dsm=dsm, generator_kind=g["kind"],
                     latent_dim=g["latent_dim"], mlp_hidden=g["hidden"])
    t = cfg["train"]
    train = TrainConfig(steps=t["steps"], batch_per_step=t["batch_per_step"],
                        lr=t["lr"], optimizer=t["optimizer"], seed=cfg["seed"],
                        t_strategy=t["t_strategy"],
                        snapshot_every=t["snapshot_every"],
                        track_divergence=t["track_divergence"],
                        divergence_n_mc=t["divergence_n_mc"],
                        fake_warmup_steps=t["fake_warmup_steps"],
                        fake_updates_per_step=t["fake_updates_per_step"],
                        frames_every=t["frames_every"])
    return setup, train
