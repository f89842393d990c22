"""Run configuration: schema-checked JSON files plus flag overrides.

A run config is one flat JSON object. Unknown keys are rejected rather than
ignored so typos fail loudly, and validation errors carry the offending
json path. Flags always win over file values; defaults equal the training
and solver dataclass defaults.
"""

import dataclasses
import json
import os

import jsonschema

from .solvers import SolverConfig
from .training import Phase1Config, Phase2Config


class ConfigError(ValueError):
    pass


_TASKS = ["nqueens", "coloring", "sat3"]
_DISTRIBUTIONS = ["er", "hk", "regular", "paley", "complete"]

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": _TASKS},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "checkpoint": {"type": "string"},
        "checkpoint_out": {"type": "string"},
        # phase 1
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "negatives": {"type": "integer", "minimum": 0},
        "lambda_e": {"type": "number", "minimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "layers": {"type": "integer", "minimum": 1},
        "activation": {"enum": ["softplus", "relu"]},
        # phase 2
        "phase2_epochs": {"type": "integer", "minimum": 0},
        "phase2_lr": {"type": "number", "exclusiveMinimum": 0},
        "unroll_steps": {"type": "integer", "minimum": 1},
        "train_starts": {"type": "integer", "minimum": 1},
        "hard_negatives": {"type": "integer", "minimum": 0},
        "alpha": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "minimum": 0},
        "rho": {"type": "number", "minimum": 0},
        "rho_h": {"type": "number", "minimum": 0},
        "clip_norm": {"type": "number", "exclusiveMinimum": 0},
        # solver / eval
        "steps": {"type": "integer", "minimum": 1},
        "starts": {"type": "integer", "minimum": 1},
        "eta0": {"type": "number", "exclusiveMinimum": 0},
        "eta_end": {"type": "number", "minimum": 0},
        "method": {"enum": ["adam", "gd"]},
        "n": {"type": "integer", "minimum": 1},
        "boards": {"type": "integer", "minimum": 1},
        "instances": {"type": "integer", "minimum": 1},
        "formulas": {"type": "integer", "minimum": 1},
        "distribution": {"enum": _DISTRIBUTIONS},
        "planted": {"type": "boolean"},
        "clauses": {"type": "integer", "minimum": 1},
        "count": {"type": "integer", "minimum": 1},
        "grid": {"type": "string"},
        "losses": {"type": "boolean"},
    },
}


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config error at {e.json_path}: {e.message}") from None
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return validate(cfg)


def merge(file_cfg, overrides):
    """File values underneath, explicit flag values on top."""
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return validate(merged)


def _fill(cls, cfg, renames=None):
    renames = renames or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in cfg.items():
        name = renames.get(key, key)
        if name in names:
            kwargs[name] = value
    return cls(**kwargs)


def phase1_config(cfg):
    return _fill(Phase1Config, cfg)


def phase2_config(cfg):
    # plain epochs/lr are phase-1 fields; phase 2 uses the prefixed spellings
    cfg = {k: v for k, v in cfg.items() if k not in ("epochs", "lr")}
    return _fill(
        Phase2Config,
        cfg,
        renames={"phase2_epochs": "epochs", "phase2_lr": "lr", "starts": "eval_starts"},
    )


def solver_config(cfg):
    return _fill(SolverConfig, cfg, renames={"starts": "num_starts"})


def output_root():
    return os.environ.get("CCEM_OUTPUT_ROOT", "runs")


def write_report(out_dir, config, metrics, seeds=None, csvs=None, timing=None):
    """Persist one run: metrics.json embedding the exact config, plus CSVs.

    csvs maps file stem -> (header row, iterable of rows). Returns the
    metrics path. metrics.json is bit-exact under a fixed config and seed
    (sorted keys, repr floats); wall-clock goes to timing.json instead.
    """
    os.makedirs(out_dir, exist_ok=True)
    bundle = {"config": config, "metrics": metrics, "seeds": seeds or {}}
    path = os.path.join(out_dir, "metrics.json")
    with open(path, "w") as fh:
        json.dump(bundle, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if timing is not None:
        with open(os.path.join(out_dir, "timing.json"), "w") as fh:
            json.dump(timing, fh, indent=2, sort_keys=True)
            fh.write("\n")
    for stem, (header, rows) in (csvs or {}).items():
        with open(os.path.join(out_dir, f"{stem}.csv"), "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")
    return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
