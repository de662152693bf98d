"""Scenario documents: JSON schema, loading and construction of the physical setup."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import jsonschema

from .fileio import canonical_json, sha256_bytes
from .gridfield import (Bump, GeometryError, GridSpec, LameField, RegionMasks, default_regions,
                        make_lame_field, make_masks)
from .tensorlab import DomainError, lame_from_poisson


class ConfigError(ValueError):
    """Invalid scenario: schema violation or inadmissible geometry or coefficients."""


_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1, "maxItems": 2}
_region = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["box", "ball"]},
        "lo": _vec, "hi": _vec, "center": _vec,
        "radius": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}
_bump = {
    "type": "object",
    "required": ["center", "radius", "amplitude"],
    "properties": {
        "field": {"enum": ["L", "M"]},
        "center": _vec,
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "amplitude": _num,
    },
    "additionalProperties": False,
}
_basis = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["node", "bump"]},
        "stride": {"type": "integer", "minimum": 1},
        "radius": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "required": ["dimension", "halfWidth", "pointsPerAxis", "s", "lame"],
    "properties": {
        "name": {"type": "string"},
        "dimension": {"enum": [1, 2]},
        "halfWidth": {"type": "number", "exclusiveMinimum": 0},
        "pointsPerAxis": {"type": "integer", "minimum": 16, "multipleOf": 2},
        "s": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "regions": {
            "type": "object",
            "properties": {"omega": _region, "w1": _region, "w2": _region},
            "additionalProperties": False,
        },
        "lame": {
            "type": "object",
            "required": ["L0", "M0"],
            "properties": {
                "L0": _num, "M0": {"type": "number", "exclusiveMinimum": 0},
                "bumps": {"type": "array", "items": _bump},
                "nu": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 0.5},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {"rtol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-3},
                           "method": {"enum": ["cg", "direct"]}},
            "additionalProperties": False,
        },
        "verify": {
            "type": "object",
            "properties": {
                "checks": {"type": "array", "items": {"type": "string"}},
                "params": {"type": "object"},
                "fault": {"enum": [None, "negate_lambda"]},
            },
            "additionalProperties": False,
        },
        "forward": {
            "type": "object",
            "properties": {"datum": {"type": "object", "properties": {
                "region": {"enum": ["w1", "w2"]}, "center": _vec,
                "radius": {"type": "number", "exclusiveMinimum": 0}, "amplitude": _num,
                "component": {"type": "integer", "minimum": 0, "maximum": 1}},
                "additionalProperties": False}},
            "additionalProperties": False,
        },
        "dnmap": {
            "type": "object",
            "properties": {"basis": _basis, "transformed": {"type": "boolean"}},
            "additionalProperties": False,
        },
        "reduce": {
            "type": "object",
            "properties": {"N": {"type": "array", "items": {"type": "integer", "minimum": 16}}},
            "additionalProperties": False,
        },
        "runge": {
            "type": "object",
            "properties": {
                "target": {"type": "object", "required": ["center", "radius"],
                           "properties": {"center": _vec, "radius": {"type": "number"},
                                          "component": {"type": "integer", "minimum": 0}},
                           "additionalProperties": False},
                "control": {"type": "array", "items": {"enum": ["w1", "w2"]}, "minItems": 1},
                "alphas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                           "minItems": 1},
            },
            "additionalProperties": False,
        },
        "invert": {
            "type": "object",
            "required": ["truth"],
            "properties": {
                "truth": {"type": "array", "items": _bump},
                "nu": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 0.5},
                "beta": {"type": "number", "minimum": 0},
                "maxIter": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0},
                "target": {"type": "number", "exclusiveMinimum": 0},
                "gradient": {"enum": ["fd", "adjoint"]},
                "basis": _basis,
            },
            "additionalProperties": False,
        },
        "gauge1d": {
            "type": "object",
            "properties": {
                "K": {"type": "number", "exclusiveMinimum": 0},
                "M": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                      "minItems": 1},
                "KContrast": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def default_scenario(n: int = 1) -> dict:
    return {
        "name": f"default-{n}d",
        "dimension": n,
        "halfWidth": 8.0 if n == 1 else 4.0,
        "pointsPerAxis": 512 if n == 1 else 48,
        "s": 0.5,
        "regions": default_regions(n),
        "lame": {"L0": 1.0, "M0": 1.0, "bumps": [
            {"field": "L", "center": [0.2] * n, "radius": 0.7, "amplitude": 0.4},
            {"field": "M", "center": [-0.1] * n, "radius": 0.8, "amplitude": 0.6}]},
    }


@dataclass
class Setup:
    """Constructed objects of a scenario at one resolution."""

    grid: GridSpec
    masks: RegionMasks
    lame: LameField
    s: float
    rtol: float
    method: str


class Scenario:
    """Validated scenario document."""

    def __init__(self, doc: dict):
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as e:
            loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"scenario invalid at {loc}: {e.message}") from None
        self.doc = copy.deepcopy(doc)
        n = doc["dimension"]
        for key in ("regions",):
            for name, reg in doc.get(key, {}).items():
                for k in ("lo", "hi", "center"):
                    if k in reg and len(reg[k]) != n:
                        raise ConfigError(f"region {name}.{k} must have {n} entries")
        for b in doc["lame"].get("bumps", []):
            if len(b["center"]) != n:
                raise ConfigError(f"bump center must have {n} entries")
        self.setup()  # admissibility is checked at load time

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read scenario: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"scenario is not valid JSON: {e}") from None
        return cls(doc)

    @property
    def n(self) -> int:
        return self.doc["dimension"]

    @property
    def s(self) -> float:
        return float(self.doc["s"])

    def block(self, name: str) -> dict:
        return self.doc.get(name, {})

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.doc))

    def with_resolution(self, N: int) -> "Scenario":
        doc = copy.deepcopy(self.doc)
        doc["pointsPerAxis"] = int(N)
        return Scenario(doc)

    def setup(self, N: int | None = None) -> Setup:
        d = self.doc
        try:
            grid = GridSpec(d["dimension"], float(d["halfWidth"]), int(N or d["pointsPerAxis"]))
            masks = make_masks(grid, {**default_regions(grid.n), **d.get("regions", {})})
            lame = self.lame_field(grid, masks, d["lame"].get("bumps", []))
        except (GeometryError, DomainError) as e:
            raise ConfigError(str(e)) from None
        solver = d.get("solver", {})
        return Setup(grid, masks, lame, float(d["s"]), float(solver.get("rtol", 1e-10)),
                     solver.get("method", "cg"))

    def lame_field(self, grid, masks, bumps) -> LameField:
        lm = self.doc["lame"]
        bl = [Bump.from_dict(b) for b in bumps if b.get("field", "M") == "L"]
        bm = [Bump.from_dict(b) for b in bumps if b.get("field", "M") == "M"]
        try:
            lf = make_lame_field(grid, masks, float(lm["L0"]), float(lm["M0"]), bl, bm,
                                 float(lm.get("epsilon", 0.5)))
            if "nu" in lm:
                # L slaved to M through a fixed Poisson ratio; L0 must agree
                L0 = float(lame_from_poisson(float(lm["M0"]), float(lm["nu"]), grid.n))
                if abs(L0 - float(lm["L0"])) > 1e-9 * max(1.0, abs(L0)):
                    raise ConfigError(f"L0 must equal {L0!r} for nu={lm['nu']}")
                lf = lf.with_M(lf.M, nu=float(lm["nu"]))
        except (GeometryError, DomainError) as e:
            raise ConfigError(str(e)) from None
        return lf
