"""JSON run configuration: schema, validation and conversion to ExperimentConfig."""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from . import laws as L
from .harness import ExperimentConfig, default_t_grid, default_x_grid


class ConfigError(ValueError):
    pass


_law_entry = {
    "type": "object",
    "additionalProperties": False,
    "required": ["step", "atoms"],
    "properties": {
        "name": {"type": "string"},
        "step": {"type": "number", "exclusiveMinimum": 0},
        "origin": {"type": "number"},
        "atoms": {"type": "array", "minItems": 1,
                  "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}}},
        "gaussian_variance": {"type": "number", "minimum": 0},
    },
}

_num_list = {"type": "array", "minItems": 1, "items": {"type": "number"}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "blocking", "experiment"],
    "properties": {
        "model": {
            "type": "object", "additionalProperties": False, "required": ["n", "laws"],
            "properties": {
                "n": {"type": "integer", "minimum": 2},
                "laws": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                "catalog": {"type": "object", "additionalProperties": _law_entry},
                "catalog_file": {"type": "string"},
                "lambda_n": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "lambda": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "blocking": {
            "type": "object", "additionalProperties": False, "required": ["n_min"],
            "properties": {"n_min": {"type": "integer", "minimum": 1}},
        },
        "functions": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "L": {"type": "number", "exclusiveMinimum": 0},
                "battery_size": {"type": "integer", "minimum": 2, "multipleOf": 2},
                "battery_seed": {"type": "integer", "minimum": 0},
                "haar_level": {"type": "integer", "minimum": 1, "maximum": 12},
                "file": {"type": "string"},
                "specs": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "additionalProperties": False, "required": ["kind"],
                    "properties": {"kind": {"enum": ["const", "sqrt", "shifted_sqrt", "cusp", "sine", "tent_series"]},
                                   "L": {"type": "number", "exclusiveMinimum": 0},
                                   "seed": {"type": "integer", "minimum": 0},
                                   "params": {"type": "object"},
                                   "negate": {"type": "boolean"}}}},
            },
        },
        "experiment": {
            "type": "object", "additionalProperties": False, "required": ["replications", "seed"],
            "properties": {
                "replications": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "chunk_size": {"type": "integer", "minimum": 1},
                "x_grid": _num_list,
                "t_grid": _num_list,
                "baseline": {"type": "boolean"},
                "retain_levels": {"type": "boolean"},
                "sweep_n": {"type": "array", "minItems": 2, "items": {"type": "integer", "minimum": 2}},
                "mgf_constants": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                "quantile_constants": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
                "bootstrap": {"type": "integer", "minimum": 100},
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "replication_csv": {"type": "boolean"},
                "diagnostics_csv": {"type": "boolean"},
                "figures": {"type": "boolean"},
            },
        },
    },
}


def _path_of(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def load_document(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    validate_document(doc)
    return doc


def validate_document(doc: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_path_of(e)}: {e.message}" for e in errors))


def to_experiment(doc: dict, base_dir=".", seed: int | None = None,
                  retain_levels: bool | None = None) -> ExperimentConfig:
    model, blocking = doc["model"], doc["blocking"]
    fns = doc.get("functions", {})
    exp = doc["experiment"]
    catalog = dict(model.get("catalog", {}))
    if "catalog_file" in model:
        try:
            loaded = L.load_catalog(Path(base_dir) / model["catalog_file"])
        except OSError as exc:
            raise ConfigError(f"model/catalog_file: {exc}") from None
        except L.LawError as exc:
            raise ConfigError(f"model/catalog_file: {exc}") from None
        for name, d in loaded.items():
            catalog.setdefault(name, L.law_to_dict(d, name))
    battery = fns.get("specs")
    if "file" in fns:
        try:
            battery = json.loads((Path(base_dir) / fns["file"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"functions/file: {exc}") from None
    try:
        cfg = ExperimentConfig(
            n=model["n"], n_min=blocking["n_min"], law_names=list(model["laws"]), catalog=catalog,
            lambda_n=model.get("lambda_n", 1.0), lam=model.get("lambda"),
            L=fns.get("L", 1.0), haar_level=fns.get("haar_level", 6), R=exp["replications"],
            seed=exp["seed"] if seed is None else seed, battery=battery,
            battery_size=fns.get("battery_size", 20), battery_seed=fns.get("battery_seed", 0),
            x_grid=exp.get("x_grid", default_x_grid()), t_grid=exp.get("t_grid", default_t_grid()),
            retain_levels=exp.get("retain_levels", False) if retain_levels is None else retain_levels,
            chunk_size=exp.get("chunk_size", 500), baseline=exp.get("baseline", True),
            mgf_constants=tuple(exp.get("mgf_constants", (0.25, 64.0))),
            quantile_constants=tuple(exp.get("quantile_constants", (32.0, 1.0, 1.0))),
            bootstrap=exp.get("bootstrap", 1000),
        )
        for entry in catalog.values():
            L.law_from_dict(entry)
    except (ValueError, L.LawError) as exc:
        raise ConfigError(str(exc)) from None
    table = cfg.law_table()
    missing = [nm for nm in cfg.law_names if nm not in table]
    if missing:
        raise ConfigError(f"model/laws: unknown law name(s) {missing}")
    return cfg


def example_document(n: int = 8, replications: int = 100) -> dict:
    return {
        "model": {"n": n, "laws": ["rademacher"], "lambda_n": 1.0, "lambda": 0.5},
        "blocking": {"n_min": 3},
        "functions": {"L": 1.0, "battery_size": 20},
        "experiment": {"replications": replications, "seed": 1, "chunk_size": 500,
                       "retain_levels": True, "sweep_n": [64, 256, 1024]},
        "output": {"directory": "results", "replication_csv": True, "diagnostics_csv": True,
                   "figures": True},
    }
