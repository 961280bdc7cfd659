"""Experiment configs: JSON schema, presets and object construction."""
from __future__ import annotations

import hashlib
import json
import math

import jsonschema
import numpy as np

from .errors import ConfigError
from .fields import PolynomialField, ScalarField, make_potential
from .manifolds import Manifold, make_manifold

OPERATIONS = [
    "verify-geometry",
    "simulate",
    "estimate-ptf",
    "estimate-grad",
    "estimate-hess",
    "estimate-third",
    "solve-stein",
    "decay-profile",
    "stein-bound",
    "spectral-gap",
    "spectral-decay",
    "spectral-kernel",
    "suite",
]

MANIFOLD_PRESETS = {
    "sphere2": {"kind": "sphere", "n": 2, "kappa": 1.0},
    "sphere3": {"kind": "sphere", "n": 3, "kappa": 1.0},
    "hyperbolic3": {"kind": "hyperbolic3", "kappa": -1.0},
    "circle": {"kind": "circle", "circumference": 2 * math.pi},
    "euclidean1": {"kind": "euclidean", "n": 1},
    "euclidean2": {"kind": "euclidean", "n": 2},
    "euclidean3": {"kind": "euclidean", "n": 3},
    "chart-identity": {"kind": "chart_diffusion", "n": 2, "sigma": "identity"},
    "chart-poincare": {"kind": "chart_diffusion", "n": 2, "sigma": "poincare", "box": [[-0.6, 0.6], [-0.6, 0.6]]},
    "chart-stereographic": {"kind": "chart_diffusion", "n": 2, "sigma": "stereographic"},
    "chart-shear": {"kind": "chart_diffusion", "n": 2, "sigma": "shear"},
}

_number_array = {"type": "array", "items": {"type": "number"}}

MANIFOLD_SCHEMA = {
    "oneOf": [
        {"type": "string", "enum": sorted(MANIFOLD_PRESETS)},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["euclidean", "sphere", "hyperbolic3", "circle", "chart_diffusion"]},
                "n": {"type": "integer", "minimum": 1},
                "kappa": {"type": "number"},
                "circumference": {"type": "number", "exclusiveMinimum": 0},
                "sigma": {"enum": ["identity", "scaled", "poincare", "stereographic", "shear"]},
                "params": {"type": "object"},
                "box": {"type": "array", "items": _number_array},
            },
        },
    ]
}

POTENTIAL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name"],
    "properties": {
        "name": {"enum": ["zero", "gaussian", "log_heat_kernel", "height"]},
        "A": {"oneOf": [{"type": "number"}, {"type": "array", "items": _number_array}]},
        "y": _number_array,
        "kappa": {"type": "number", "exclusiveMaximum": 0},
        "t": {"type": "number", "exclusiveMinimum": 0},
        "beta": {"type": "number"},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["operation", "seed"],
    "properties": {
        "operation": {"enum": OPERATIONS},
        "manifold": MANIFOLD_SCHEMA,
        "potential": POTENTIAL_SCHEMA,
        "params": {"type": "object"},
        "n_samples": {"type": "integer", "minimum": 2},
        "steps_per_unit": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "output": {"type": "string"},
    },
}


def validate(config: dict) -> dict:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{loc}: {e.message}") from None
    return config


def canonical(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """sha256 of the canonical config, ignoring where the output goes."""
    c = {k: v for k, v in config.items() if k != "output"}
    return hashlib.sha256(canonical(c).encode()).hexdigest()


def build_manifold(spec) -> Manifold:
    if spec is None:
        spec = "sphere2"
    if isinstance(spec, str):
        spec = MANIFOLD_PRESETS[spec]
    try:
        return make_manifold(dict(spec))
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def build_potential(spec, M):
    try:
        return make_potential(spec or {"name": "zero"}, M)
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"potential: {e}") from None


def build_function(spec, M) -> ScalarField:
    """Test functions for the estimators, in ambient coordinates.

    "height" / {"kind": "coordinate", "index": i}: the i-th coordinate
    (default last);  {"kind": "fourier", "mode": k}: sin(2 pi k x / L) on the
    circle;  {"kind": "polynomial", "c0", "b", "Q", "T"}: explicit cubic.
    """
    d = M.ambient_dim
    if spec is None:
        spec = "fourier" if M.kind == "circle" else "height"
    if isinstance(spec, str):
        spec = {"kind": {"height": "coordinate"}.get(spec, spec)}
    kind = spec.get("kind")
    if kind == "coordinate":
        i = int(spec.get("index", -1))
        b = np.zeros(d)
        b[i] = float(spec.get("scale", 1.0))
        return PolynomialField(0.0, b, dim=d, name=f"x{i % d}")
    if kind == "fourier":
        if M.kind != "circle":
            raise ConfigError("fourier test functions need the circle")
        from .semigroup import circle_fourier_family

        return circle_fourier_family(M, int(spec.get("mode", 1)), float(spec.get("phase", 0.0))).f
    if kind == "polynomial":
        return PolynomialField(spec.get("c0", 0.0), spec.get("b"), spec.get("Q"), spec.get("T"), dim=d)
    raise ConfigError(f"unknown test function {spec!r}")


def build_point(value, M, default=None):
    if value is None:
        return M.base_point() if default is None else default
    x = np.asarray(value, float)
    if x.shape != (M.ambient_dim,):
        raise ConfigError(f"point must have {M.ambient_dim} coordinates")
    if M.kind in ("sphere", "hyperbolic3", "circle"):
        x = M.project_point(x)
    return x


def build_direction(value, n, index=0):
    if value is None:
        u = np.zeros(n)
        u[index % n] = 1.0
        return u
    u = np.asarray(value, float)
    if u.shape != (n,):
        raise ConfigError(f"directions are frame coordinates of length {n}")
    return u
