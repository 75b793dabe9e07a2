"""Experiment configuration: YAML schema, defaults, validation.

Schema (every key optional; ``null`` means "scenario default")::

    scenario: single          # single | multi
    channel: awgn             # awgn | rayleigh | rician
    rician_k: 4.0
    n: 8
    k: 4
    k_c: 1
    n_tx: 1                   # users (forced to 1 for single)
    n_rx: null                # receive antennas, default n_tx
    seed: 0
    out: runs/default
    autoencoder: {train_snr_db, epochs, batch, lr, train_size}
    covert: {lam_b, lam_u, lam_w, snr_low, snr_high, epochs, batch, lr,
             update_order, trigger_dim, train_size, search_objective,
             detector_steps, willie_steps, alice_steps, eval_every,
             eval_snr_db}            # eval_snr_db: training-curve SNR, default AE train SNR
    sweep: {snr_db, trials, workers, chunk}
    search: {start_db, epochs_per_candidate, max_candidates, step_db, eval_trials}
    audit: {epochs, trials, snr_db, checkpoints}
    constellation: {snr_db, trials}

The ``fast`` profile swaps in desk-scale run lengths for keys the file does
not set: 60 autoencoder epochs, 500 covert epochs, 10^4 sweep trials.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import channel as ch
from .autoencoder import DEFAULT_TRAIN_SNR, AeConfig
from .covert import DEFAULT_LAMBDAS, DEFAULT_SNR_RANGE, UPDATE_ORDERS, CovertConfig
from .nn import ConfigError

log = logging.getLogger(__name__)

DEFAULTS = {
    "scenario": "single",
    "channel": "awgn",
    "rician_k": 4.0,
    "n": 8,
    "k": 4,
    "k_c": 1,
    "n_tx": 1,
    "n_rx": None,
    "seed": 0,
    "out": "runs/default",
    "autoencoder": {
        "train_snr_db": None, "epochs": 100, "batch": 1024, "lr": 1e-3, "train_size": 8192,
    },
    "covert": {
        "lam_b": None, "lam_u": None, "lam_w": None, "snr_low": None, "snr_high": None,
        "epochs": 5000, "batch": 1024, "lr": 1e-3, "update_order": "text", "trigger_dim": 16,
        "train_size": 8192, "search_objective": "covert", "detector_steps": None,
        "willie_steps": None, "alice_steps": 4, "eval_every": 10, "eval_snr_db": None,
    },
    "sweep": {"snr_db": None, "trials": 51200, "workers": 1, "chunk": 10000},
    "search": {
        "start_db": None, "epochs_per_candidate": 300, "max_candidates": 20, "step_db": 1.0,
        "eval_trials": 2048,
    },
    "audit": {"epochs": 500, "trials": 4096, "snr_db": None, "checkpoints": 5},
    "constellation": {"snr_db": None, "trials": 1000},
}

FAST_PROFILE = {
    "autoencoder": {"epochs": 60},
    "covert": {"epochs": 500},
    "sweep": {"trials": 10000},
}

# received-constellation SNR per channel model
CONSTELLATION_SNR = {ch.AWGN: 6.0, ch.RAYLEIGH: 15.0, ch.RICIAN: 16.0}

_INT_KEYS = {"n", "k", "k_c", "n_tx", "seed", "epochs", "batch", "train_size", "trigger_dim",
             "detector_steps", "willie_steps", "alice_steps", "eval_every", "trials", "workers",
             "chunk", "epochs_per_candidate", "max_candidates", "eval_trials", "checkpoints"}


def _sweep_grid(scenario, kind):
    if kind == ch.AWGN:
        return [float(v) for v in range(-4, 11)]
    return [float(v) for v in range(0, 32, 2)]


@dataclass
class ExperimentConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def model(self):
        return ch.ChannelModel(self.data["channel"], float(self.data["rician_k"]))

    @property
    def out(self):
        return Path(self.data["out"])

    def ae_config(self):
        d, a = self.data, self.data["autoencoder"]
        return AeConfig(
            n=d["n"], k=d["k"], mode=d["scenario"], channel=self.model, n_tx=d["n_tx"],
            n_rx=d["n_rx"], train_snr_db=a["train_snr_db"], epochs=a["epochs"],
            batch=a["batch"], lr=a["lr"], train_size=a["train_size"],
            test_size=d["sweep"]["trials"],
        )

    def covert_config(self):
        c = dict(self.data["covert"])
        c["k_c"] = self.data["k_c"]
        c["eval_snrs"] = (float(c.pop("eval_snr_db")),)
        return CovertConfig(**c).resolve(self.data["scenario"], self.data["channel"])

    def to_yaml(self):
        return yaml.safe_dump(self.data, sort_keys=True)

    def hash(self):
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _merge(base, over, prefix, problems):
    for key, val in over.items():
        name = f"{prefix}{key}"
        if key not in base:
            problems.append(f"unknown key '{name}'")
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                problems.append(f"'{name}' must be a mapping")
            else:
                _merge(base[key], val, name + ".", problems)
        else:
            base[key] = val


def _walk(d, prefix=""):
    for key, val in d.items():
        if isinstance(val, dict):
            yield from _walk(val, f"{prefix}{key}.")
        else:
            yield f"{prefix}{key}", key, val


def _check_types(data, problems):
    for name, key, val in _walk(data):
        if val is None:
            continue
        if key in _INT_KEYS:
            if isinstance(val, bool) or not isinstance(val, int):
                problems.append(f"'{name}' must be an integer, got {val!r}")
        elif key == "snr_db":
            if not isinstance(val, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in val
            ):
                problems.append(f"'{name}' must be a list of numbers")
        elif key in ("scenario", "channel", "out", "update_order", "search_objective"):
            if not isinstance(val, str):
                problems.append(f"'{name}' must be a string")
        elif isinstance(val, bool) or not isinstance(val, (int, float)):
            problems.append(f"'{name}' must be a number, got {val!r}")


def _fill_defaults(d):
    scenario, kind = d["scenario"], d["channel"]
    if scenario == "single":
        d["n_tx"] = 1
    if d["n_rx"] is None:
        d["n_rx"] = d["n_tx"]
    a, c = d["autoencoder"], d["covert"]
    if a["train_snr_db"] is None:
        a["train_snr_db"] = DEFAULT_TRAIN_SNR[(scenario, kind)]
    given = [c[k] for k in ("lam_b", "lam_u", "lam_w")]
    lams = DEFAULT_LAMBDAS[scenario]
    if any(v is not None for v in given):
        chosen = [lams[i] if v is None else v for i, v in enumerate(given)]
        ref = np.array(lams) / lams[1]
        got = np.array(chosen, dtype=float) / chosen[1] if chosen[1] else np.array(chosen)
        level = logging.INFO if np.allclose(ref, got) else logging.WARNING
        log.log(level, "loss weights %s give lam_b:lam_u:lam_w = %s (scenario default %s)",
                chosen, got.tolist(), ref.tolist())
    for i, key in enumerate(("lam_b", "lam_u", "lam_w")):
        if c[key] is None:
            c[key] = lams[i]
    lo, hi = DEFAULT_SNR_RANGE[(scenario, kind)]
    c["snr_low"] = lo if c["snr_low"] is None else c["snr_low"]
    c["snr_high"] = hi if c["snr_high"] is None else c["snr_high"]
    if c["eval_snr_db"] is None:
        c["eval_snr_db"] = a["train_snr_db"]
    if d["sweep"]["snr_db"] is None:
        d["sweep"]["snr_db"] = _sweep_grid(scenario, kind)
    if d["search"]["start_db"] is None:
        d["search"]["start_db"] = a["train_snr_db"]
    if d["audit"]["snr_db"] is None:
        d["audit"]["snr_db"] = [float(v) for v in np.linspace(c["snr_low"], c["snr_high"], 4)]
    if d["constellation"]["snr_db"] is None:
        d["constellation"]["snr_db"] = [CONSTELLATION_SNR[kind]]


def _validate(d, problems):
    if d["scenario"] not in ("single", "multi"):
        problems.append(f"'scenario' must be single or multi, got {d['scenario']!r}")
    if d["channel"] not in ch.KINDS:
        problems.append(f"'channel' must be one of {list(ch.KINDS)}, got {d['channel']!r}")
    for key in ("n", "k", "k_c", "n_tx"):
        if isinstance(d[key], int) and d[key] < 1:
            problems.append(f"'{key}' must be positive")
    c = d["covert"]
    if c["update_order"] not in UPDATE_ORDERS:
        problems.append(f"'covert.update_order' must be one of {sorted(UPDATE_ORDERS)}")
    if c["search_objective"] not in ("literal", "covert"):
        problems.append("'covert.search_objective' must be literal or covert")
    for key in ("lam_b", "lam_u", "lam_w"):
        if isinstance(c[key], (int, float)) and c[key] < 0:
            problems.append(f"'covert.{key}' must be non-negative")
    if d["sweep"]["trials"] is not None and d["sweep"]["trials"] < 1:
        problems.append("'sweep.trials' must be positive")


def resolve_config(raw=None, fast=False, overrides=None):
    """Merge ``raw`` (a mapping) over defaults, fill scenario defaults, validate."""
    data = copy.deepcopy(DEFAULTS)
    problems = []
    if fast:
        _merge(data, FAST_PROFILE, "", problems)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    _merge(data, raw, "", problems)
    if overrides:
        _merge(data, overrides, "", problems)
    _check_types(data, problems)
    if not problems:
        _validate(data, problems)
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    _fill_defaults(data)
    c = data["covert"]
    if c["snr_low"] > c["snr_high"]:
        raise ConfigError(
            f"invalid configuration: 'covert.snr_low' ({c['snr_low']}) > "
            f"'covert.snr_high' ({c['snr_high']})"
        )
    cfg = ExperimentConfig(data)
    try:
        cfg.ae_config()
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def parse_config(path=None, fast=False, overrides=None):
    """Read a UTF-8 YAML file (or nothing) into a validated :class:`ExperimentConfig`."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    return resolve_config(raw, fast=fast, overrides=overrides)
