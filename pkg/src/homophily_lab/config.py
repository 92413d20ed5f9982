"""Run configuration: a JSON document validated against a JSON schema.

Every field has a default, so ``{}`` is a valid config. ``RunConfig.to_dict``
emits the fully populated document and ``RunConfig.from_dict`` of that
output gives back an equal object.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import jsonschema

from .model import HomophilyMode, ModelParams
from .population import NetworkSpec, SimConfig, default_networks


class ConfigValidationError(ValueError):
    pass


_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_U64 = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "homophily_lab run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "r": {"type": "number", "exclusiveMinimum": 0},
                "c_near": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "c_far": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "lambda_map": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                               "minItems": 2},
                "mu_map": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "minItems": 2},
            },
        },
        "population": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_schools": _POS_INT,
                "n_grades": _POS_INT,
                "students_per_network": _POS_INT,
                "male_share": _PROB,
                "networks": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["school", "grade", "n_students"],
                        "properties": {
                            "school": {"type": "integer"},
                            "grade": {"type": "integer"},
                            "n_students": _POS_INT,
                            "male_share": _PROB,
                        },
                    },
                },
                "poor_share": _PROB,
                "achievement_mean": {"type": "number"},
                "achievement_sd": {"type": "number", "exclusiveMinimum": 0},
                "centrality_mean": {"type": "number"},
                "centrality_sd": {"type": "number", "exclusiveMinimum": 0},
                "trait_correlation": {"type": "number", "exclusiveMinimum": -0.5, "exclusiveMaximum": 1},
                "baseline_density": _PROB,
                "persistence": _PROB,
                "first_year_near_multiplier": {"type": "number", "exclusiveMinimum": 0},
                "first_year_grade": {"type": "integer"},
            },
        },
        "dorm_pattern": {"type": "array", "items": _POS_INT, "minItems": 1},
        "d_range": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 50},
                    "minItems": 1, "uniqueItems": True},
        "seed": _U64,
        "n_seeds": {"type": "integer", "minimum": 0},
        "replications": {"type": "integer", "minimum": 0},
        "oracle_reps": {"type": "integer", "minimum": 1},
        "mode": {"enum": [m.value for m in HomophilyMode]},
        "preference_lambda": {"type": "number", "exclusiveMinimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
    },
}

_POPULATION_DEFAULTS = {
    "n_schools": 19,
    "n_grades": 3,
    "students_per_network": 88,
    "male_share": 0.43,
    "poor_share": 0.41,
    "achievement_mean": 0.0,
    "achievement_sd": 1.0,
    "centrality_mean": 0.0,
    "centrality_sd": 1.0,
    "trait_correlation": 0.0,
    "baseline_density": 0.1,
    "persistence": 0.0,
    "first_year_near_multiplier": 1.0,
    "first_year_grade": 1,
}


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs.

    Defaults: model primitives of :class:`ModelParams`; 19 schools x 3 grades
    of 88 students; dorm sizes cycling 2, 4, 6, 8, 3; neighbourhoods 1..9;
    seed 0 with one seed and one replication; learning mode.
    """

    model: dict = field(default_factory=lambda: ModelParams().to_dict())
    population: dict = field(default_factory=lambda: dict(_POPULATION_DEFAULTS))
    dorm_pattern: Tuple[int, ...] = (2, 4, 6, 8, 3)
    d_range: Tuple[int, ...] = tuple(range(1, 10))
    seed: int = 0
    n_seeds: int = 1
    replications: int = 1
    oracle_reps: int = 100_000
    mode: str = HomophilyMode.LEARNING.value
    preference_lambda: float = 1.0
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, data):
        data = json.loads(json.dumps(data))  # detach and normalise tuples
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigValidationError(f"config invalid at {where}: {exc.message}") from None
        model = {**ModelParams().to_dict(), **data.get("model", {})}
        population = {**_POPULATION_DEFAULTS, **data.get("population", {})}
        kw = {k: data[k] for k in ("seed", "n_seeds", "replications", "oracle_reps", "mode",
                                   "preference_lambda", "output_dir") if k in data}
        for k in ("dorm_pattern", "d_range"):
            if k in data:
                kw[k] = tuple(data[k])
        cfg = cls(model=model, population=population, **kw)
        cfg.model_params()
        cfg.sim_config(cfg.seed)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigValidationError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "model": dict(self.model),
            "population": dict(self.population),
            "dorm_pattern": list(self.dorm_pattern),
            "d_range": list(self.d_range),
            "seed": self.seed,
            "n_seeds": self.n_seeds,
            "replications": self.replications,
            "oracle_reps": self.oracle_reps,
            "mode": self.mode,
            "preference_lambda": self.preference_lambda,
            "output_dir": self.output_dir,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self):
        """sha256 of the canonical JSON form, so equal configs hash equal."""
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()

    def override(self, **changes):
        data = self.to_dict()
        for k, v in changes.items():
            if v is not None:
                data[k] = v
        return RunConfig.from_dict(data)

    @property
    def seeds(self):
        return tuple(self.seed + k for k in range(self.n_seeds))

    @property
    def homophily_mode(self):
        return HomophilyMode.parse(self.mode)

    def model_params(self, **kwargs):
        from .model import ModelInputError

        try:
            return ModelParams.from_dict(self.model, **kwargs)
        except ModelInputError as exc:
            raise ConfigValidationError(str(exc)) from None

    def networks(self):
        pop = self.population
        if "networks" in pop:
            return tuple(NetworkSpec(**n) for n in pop["networks"])
        return default_networks(pop["n_schools"], pop["n_grades"], pop["students_per_network"],
                                pop["male_share"])

    def sim_config(self, seed, replication=0):
        pop = self.population
        skip = {"n_schools", "n_grades", "students_per_network", "male_share", "networks"}
        kw = {k: v for k, v in pop.items() if k not in skip}
        try:
            return SimConfig(networks=self.networks(), seed=seed, replication_id=replication, **kw)
        except ValueError as exc:
            raise ConfigValidationError(str(exc)) from None
