"""Experiment configuration: YAML in, validated dataclasses out.

A minimal file::

    scenarios: [umi-compact, umi-dense]
    seeds: [0]
    output: runs/demo

Scenario entries are a preset name, a mapping ``{preset: name, <overrides>}``
or a full mapping of ScenarioConfig fields. Every other section falls back to
the defaults below. Unknown keys are rejected, and every error message starts
with the dotted path of the offending field (``train.eta``, ``scenarios[1].f_d``).
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import yaml

from .channel import CLEAN, PRESETS, ScenarioConfig, preset
from .harness import REGIMENS, TrainConfig
from .predictors import BACKBONES

DEFAULT_SNR_SWEEP = (0.0, 4.0, 8.0, 12.0, 16.0, 20.0)
CLEAN_TOKEN = "clean"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 512  # training windows per task
    n_heldout: int = 500  # held-out windows per task
    window: int = 8  # history length T
    n_eval: int = 1000  # windows per SNR point in the sweep
    n_gain: int = 2000  # channel-gain samples per scenario and seed


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple
    train: TrainConfig
    seeds: tuple
    output: str
    snr_sweep: tuple = DEFAULT_SNR_SWEEP
    regimens: tuple = ()  # empty: just train.regimen
    backbones: tuple = ()  # empty: just train.backbone
    data: DataConfig = field(default_factory=DataConfig)
    workers: int = 1

    def __post_init__(self):
        if not self.regimens:
            object.__setattr__(self, "regimens", (self.train.regimen,))
        if not self.backbones:
            object.__setattr__(self, "backbones", (self.train.backbone,))

    @property
    def scenario_seq(self):
        return ">".join(s.name for s in self.scenarios)

    def to_dict(self):
        return {
            "scenarios": [s.to_dict() for s in self.scenarios],
            "train": dataclasses.asdict(self.train),
            "regimens": list(self.regimens),
            "backbones": list(self.backbones),
            "seeds": list(self.seeds),
            "snr_sweep": [CLEAN_TOKEN if math.isinf(s) else s for s in self.snr_sweep],
            "data": dataclasses.asdict(self.data),
            "workers": self.workers,
            "output": self.output,
        }

    def digest(self):
        """SHA-256 of the canonical JSON form; ``output`` and ``workers`` excluded."""
        d = self.to_dict()
        del d["output"], d["workers"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# validation helpers ----------------------------------------------------------


def _fail(path, msg):
    raise ConfigError(f"{path}: {msg}")


def _mapping(v, path):
    if not isinstance(v, dict):
        _fail(path, f"expected a mapping, got {type(v).__name__}")
    return v


def _no_unknown(d, allowed, path):
    extra = sorted(set(d) - set(allowed))
    if extra:
        where = f"{path}." if path else ""
        _fail(f"{where}{extra[0]}", f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _num(v, path, integer=False, lo=None, lo_open=False, hi_open=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(path, f"expected a number, got {v!r}")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            _fail(path, f"expected an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
        if math.isnan(v):
            _fail(path, "must not be NaN")
    if lo is not None and (v <= lo if lo_open else v < lo):
        _fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi_open is not None and v >= hi_open:
        _fail(path, f"must be < {hi_open}, got {v}")
    return v


def _choice(v, path, options):
    if v not in options:
        _fail(path, f"must be one of {list(options)}, got {v!r}")
    return v


def _bool(v, path):
    if not isinstance(v, bool):
        _fail(path, f"expected true or false, got {v!r}")
    return v


def _list(v, path):
    if isinstance(v, (str, bytes)) or not isinstance(v, (list, tuple)):
        _fail(path, f"expected a list, got {v!r}")
    return list(v)


# field checkers: name -> callable(value, path) -> normalized value
_TRAIN_FIELDS = {
    "regimen": lambda v, p: _choice(v, p, REGIMENS),
    "backbone": lambda v, p: _choice(v, p, BACKBONES),
    "hidden_size": lambda v, p: _num(v, p, integer=True, lo=1),
    "epochs": lambda v, p: _num(v, p, integer=True, lo=1),
    "batch_size": lambda v, p: _num(v, p, integer=True, lo=1),
    "eta": lambda v, p: _num(v, p, lo=0, lo_open=True),
    "alpha": lambda v, p: _num(v, p, lo=0),
    "beta": lambda v, p: _num(v, p, lo=0),
    "xi": lambda v, p: _num(v, p, lo=0, lo_open=True),
    "seed": lambda v, p: _num(v, p, integer=True, lo=0),
    "snr_db_train": lambda v, p: None if v is None else _num(v, p),
    "consolidate": _bool,
}

_SCENARIO_FIELDS = {
    "name": lambda v, p: v if isinstance(v, str) and v else _fail(p, "expected a non-empty string"),
    "f_d": lambda v, p: _num(v, p, lo=0),
    "sample_interval": lambda v, p: _num(v, p, lo=0, lo_open=True),
    "n_paths": lambda v, p: _num(v, p, integer=True, lo=1),
    "n_tx": lambda v, p: _num(v, p, integer=True, lo=1),
    "n_rx": lambda v, p: _num(v, p, integer=True, lo=1),
    "spatial_corr": lambda v, p: _num(v, p, lo=0, hi_open=1),
    "path_gain_spread": lambda v, p: _num(v, p, lo=0),
    "snr_db_train": lambda v, p: _num(v, p),
}

_DATA_FIELDS = {
    "n_train": lambda v, p: _num(v, p, integer=True, lo=1),
    "n_heldout": lambda v, p: _num(v, p, integer=True, lo=1),
    "window": lambda v, p: _num(v, p, integer=True, lo=1),
    "n_eval": lambda v, p: _num(v, p, integer=True, lo=100),
    "n_gain": lambda v, p: _num(v, p, integer=True, lo=1),
}

_TOP_KEYS = ("scenarios", "train", "regimens", "backbones", "seeds", "snr_sweep", "data", "workers", "output")


def _fields(d, checkers, path):
    _no_unknown(d, checkers, path)
    return {k: checkers[k](v, f"{path}.{k}") for k, v in d.items()}


def _scenario(entry, path):
    if isinstance(entry, str):
        if entry not in PRESETS:
            _fail(path, f"unknown scenario preset {entry!r} (known: {', '.join(sorted(PRESETS))})")
        return preset(entry)
    d = dict(_mapping(entry, path))
    base = d.pop("preset", None)
    if base is not None and base not in PRESETS:
        _fail(f"{path}.preset", f"unknown scenario preset {base!r} (known: {', '.join(sorted(PRESETS))})")
    values = _fields(d, _SCENARIO_FIELDS, path)
    if base is None:
        for required in ("name", "f_d"):
            if required not in values:
                _fail(f"{path}.{required}", "required when no preset is given")
        return ScenarioConfig(**values)
    return preset(base, **values)


def _snr(v, path):
    if v == CLEAN_TOKEN:
        return CLEAN
    return _num(v, path)


def config_from_dict(d, base_dir=None):
    """Validate a parsed mapping. Relative ``output`` paths resolve against ``base_dir``."""
    d = _mapping(d, "<config>")
    _no_unknown(d, _TOP_KEYS, "")

    scenarios = _list(d.get("scenarios"), "scenarios") if "scenarios" in d else _fail("scenarios", "required")
    if not scenarios:
        _fail("scenarios", "at least one scenario is required")
    scenarios = tuple(_scenario(s, f"scenarios[{i}]") for i, s in enumerate(scenarios))

    train = TrainConfig(**_fields(_mapping(d.get("train", {}), "train"), _TRAIN_FIELDS, "train"))

    regimens = tuple(_choice(r, f"regimens[{i}]", REGIMENS) for i, r in enumerate(_list(d.get("regimens", []), "regimens")))
    backbones = tuple(
        _choice(b, f"backbones[{i}]", BACKBONES) for i, b in enumerate(_list(d.get("backbones", []), "backbones"))
    )
    for name, values in (("regimens", regimens), ("backbones", backbones)):
        if len(set(values)) != len(values):
            _fail(name, "duplicate entries")

    if "seeds" not in d:
        _fail("seeds", "required")
    seeds = tuple(_num(s, f"seeds[{i}]", integer=True, lo=0) for i, s in enumerate(_list(d["seeds"], "seeds")))
    if not seeds:
        _fail("seeds", "at least one seed is required")
    if len(set(seeds)) != len(seeds):
        _fail("seeds", "duplicate entries")

    sweep = tuple(_snr(s, f"snr_sweep[{i}]") for i, s in enumerate(_list(d.get("snr_sweep", DEFAULT_SNR_SWEEP), "snr_sweep")))
    if not sweep:
        _fail("snr_sweep", "at least one SNR point is required")

    data = DataConfig(**_fields(_mapping(d.get("data", {}), "data"), _DATA_FIELDS, "data"))
    workers = _num(d.get("workers", 1), "workers", integer=True, lo=1)

    output = d.get("output")
    if not isinstance(output, str) or not output:
        _fail("output", "required, a directory path")
    if base_dir is not None and not os.path.isabs(output):
        output = os.path.normpath(os.path.join(base_dir, output))

    return ExperimentConfig(scenarios, train, seeds, output, sweep, regimens, backbones, data, workers)


def parse_config(path):
    """Read and validate a YAML experiment file."""
    if not os.path.isfile(path):
        raise ConfigError(f"{path}: no such config file")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    if raw is None:
        raise ConfigError(f"{path}: empty config file")
    return config_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(cfg, path=None):
    """YAML text of ``cfg`` (fully expanded); also written to ``path`` if given."""
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def check_output_writable(cfg):
    try:
        os.makedirs(cfg.output, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output: cannot create {cfg.output!r}: {exc.strerror}") from None
    if not os.access(cfg.output, os.W_OK):
        raise ConfigError(f"output: {cfg.output!r} is not writable")
