"""JSON scenario documents: strict parsing, defaults and round-trip serialization.

A scenario has six top-level sections::

    {
      "system":     {"d", "N", "M", "T", "p", "dt", "L", "Mprime", "U_low", "U_high",
                     "ell", "feature_radius", "initial": {"herd", "herders"}},
      "kernels":    {"H1", "H2", "K1", "K2"},
      "noises":     {"sigma_i", "sigma_c"},
      "costs":      {"running", "transient", "endpoint"},
      "control":    {"pieces", "h", "bias", "weights", "search"},
      "experiment": {"seed", "N_list", "N_ref", "replicas", "q", "budget", "restarts",
                     "N_star", "inner_replicas", "bank_scale"}
    }

Only ``system.d`` is required; everything else has a documented default.
Coefficients are given as ``{"family": name, ...parameters}``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .coefficients import initial_law_from_dict, kernel_from_dict, noise_from_dict
from .control import ControlParams
from .costs import CostSpec
from .errors import ScenarioError
from .model import AssumptionBounds, InitialLaw, KernelSet, NoiseSet, SystemSpec, ensure_valid

SECTIONS = ("system", "kernels", "noises", "costs", "control", "experiment")

SYSTEM_DEFAULTS = {
    "N": 256,
    "M": 1,
    "T": 1.0,
    "p": 4.0,
    "dt": 0.01,
    "L": 1.0,
    "Mprime": 1.0,
    "ell": 1,
    "feature_radius": None,
}

EXPERIMENT_DEFAULTS = {
    "seed": 0,
    "N_list": [64, 128, 256, 512],
    "N_ref": 4096,
    "replicas": 16,
    "q": 1.0,
    "budget": 100,
    "restarts": 2,
    "N_star": 2000,
    "inner_replicas": 16,
    "bank_scale": None,
}

CONTROL_DEFAULTS = {"pieces": 8, "h": 0.0, "bias": 1.0, "weights": None, "search": "all"}


@dataclass(frozen=True, eq=False)
class Scenario:
    spec: SystemSpec
    costs: CostSpec
    control: ControlParams
    experiment: dict
    search: str = "all"
    document: dict = field(default_factory=dict, repr=False)

    @property
    def seed(self):
        return int(self.experiment["seed"])

    def to_dict(self):
        return scenario_to_dict(self)

    def sha256(self):
        return scenario_hash(self.to_dict())


def _section(doc, name):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ScenarioError(f"{name}: expected an object", field=name)
    return sec


def _reject_unknown(sec, allowed, where):
    extra = sorted(set(sec) - set(allowed))
    if extra:
        raise ScenarioError(f"{where}: unknown field {extra[0]!r}", field=f"{where}.{extra[0]}")


def _number(value, where, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {value!r}", field=where)
    if kind is int:
        if int(value) != value:
            raise ScenarioError(f"{where}: expected an integer, got {value!r}", field=where)
        return int(value)
    return float(value)


def _parse_system(sec):
    _reject_unknown(sec, set(SYSTEM_DEFAULTS) | {"d", "U_low", "U_high", "initial"}, "system")
    if "d" not in sec:
        raise ScenarioError("system: missing required field 'd'", field="system.d")
    d = _number(sec["d"], "system.d", int)
    vals = {k: sec.get(k, v) for k, v in SYSTEM_DEFAULTS.items()}
    for key in ("N", "M", "ell"):
        vals[key] = _number(vals[key], f"system.{key}", int)
    for key in ("T", "p", "dt", "L", "Mprime"):
        vals[key] = _number(vals[key], f"system.{key}")
    if vals["feature_radius"] is not None:
        vals["feature_radius"] = _number(vals["feature_radius"], "system.feature_radius")
    if vals["dt"] > vals["T"]:
        raise ScenarioError(f"system.dt={vals['dt']} exceeds the horizon T={vals['T']}", field="system.dt")
    initial = sec.get("initial", {})
    if not isinstance(initial, dict):
        raise ScenarioError("system.initial: expected an object", field="system.initial")
    _reject_unknown(initial, {"herd", "herders"}, "system.initial")
    herd = initial.get("herd", {"family": "gaussian", "mean": [0.0] * d, "std": [1.0] * d})
    law = initial_law_from_dict(herd, d, "system.initial.herd")
    herders = np.asarray(initial.get("herders", np.zeros((vals["M"], d)).tolist()), dtype=float)
    if herders.shape != (vals["M"], d):
        raise ScenarioError(
            f"system.initial.herders: expected shape ({vals['M']}, {d}), got {list(herders.shape)}",
            field="system.initial.herders",
        )
    ell = vals["ell"]
    box = {}
    for key, default in (("U_low", -1.0), ("U_high", 1.0)):
        arr = np.asarray(sec.get(key, np.full((d, ell), default).tolist()), dtype=float)
        box[key] = np.broadcast_to(arr, (d, ell)).copy() if arr.ndim < 2 else arr
    bounds = AssumptionBounds(vals["L"], vals["Mprime"], box["U_low"], box["U_high"], ell)
    return d, vals, InitialLaw(law, herders), bounds


def _parse_control(sec, spec):
    _reject_unknown(sec, CONTROL_DEFAULTS, "control")
    vals = {k: sec.get(k, v) for k, v in CONTROL_DEFAULTS.items()}
    pieces = _number(vals["pieces"], "control.pieces", int)
    if pieces < 1:
        raise ScenarioError("control.pieces must be >= 1", field="control.pieces")
    if vals["search"] not in ("all", "h"):
        raise ScenarioError("control.search must be 'all' or 'h'", field="control.search")
    d, M, ell = spec.d, spec.M, spec.bounds.ell
    try:
        params = ControlParams.constant(spec, 0.0, pieces, np.asarray(vals["bias"], dtype=float))
        h = np.broadcast_to(np.asarray(vals["h"], dtype=float), (M, pieces, d, ell))
        params = params.replace(h_knots=h)
        if vals["weights"] is not None:
            w = np.broadcast_to(np.asarray(vals["weights"], dtype=float), params.g_weights.shape)
            params = params.replace(g_weights=w)
    except ValueError as exc:
        raise ScenarioError(f"control: {exc}", field="control") from None
    if not params.is_admissible():
        raise ScenarioError("control: parameters lie outside the admissible set (U box, L, Mprime)", field="control")
    return params, vals["search"]


def _parse_experiment(sec):
    _reject_unknown(sec, EXPERIMENT_DEFAULTS, "experiment")
    vals = {k: copy.deepcopy(sec.get(k, v)) for k, v in EXPERIMENT_DEFAULTS.items()}
    for key in ("seed", "N_ref", "replicas", "budget", "restarts", "N_star", "inner_replicas"):
        vals[key] = _number(vals[key], f"experiment.{key}", int)
    if vals["seed"] < 0 or vals["seed"] >= 2**64:
        raise ScenarioError("experiment.seed must be an unsigned 64-bit integer", field="experiment.seed")
    vals["q"] = _number(vals["q"], "experiment.q")
    if vals["bank_scale"] is not None:
        vals["bank_scale"] = _number(vals["bank_scale"], "experiment.bank_scale")
    if not isinstance(vals["N_list"], list) or not vals["N_list"]:
        raise ScenarioError("experiment.N_list must be a non-empty list", field="experiment.N_list")
    vals["N_list"] = [_number(n, "experiment.N_list", int) for n in vals["N_list"]]
    return vals


def scenario_from_dict(doc, validate=True):
    """Materialize a scenario document; ``validate`` runs the assumption checks."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario: expected a JSON object at top level", field="")
    _reject_unknown(doc, SECTIONS, "scenario")
    d, vals, initial, bounds = _parse_system(_section(doc, "system"))
    ksec = _section(doc, "kernels")
    _reject_unknown(ksec, ("H1", "H2", "K1", "K2"), "kernels")
    zero = {"family": "zero"}
    kernels = KernelSet(*(kernel_from_dict(ksec.get(k, zero), d, f"kernels.{k}") for k in ("H1", "H2", "K1", "K2")))
    nsec = _section(doc, "noises")
    _reject_unknown(nsec, ("sigma_i", "sigma_c"), "noises")
    noises = NoiseSet(*(noise_from_dict(nsec.get(k, zero), d, f"noises.{k}") for k in ("sigma_i", "sigma_c")))
    spec = SystemSpec(
        d,
        vals["N"],
        vals["M"],
        vals["T"],
        vals["p"],
        vals["dt"],
        kernels,
        noises,
        initial,
        bounds,
        vals["feature_radius"],
    )
    costs = CostSpec.from_dict(_section(doc, "costs"), d)
    control, search = _parse_control(_section(doc, "control"), spec)
    experiment = _parse_experiment(_section(doc, "experiment"))
    if validate:
        ensure_valid(spec)
    return Scenario(spec, costs, control, experiment, search, doc)


def _located(exc):
    return ScenarioError(f"scenario: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", field=f"line {exc.lineno}")


def parse_scenario_text(text, validate=True):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _located(exc) from None
    return scenario_from_dict(doc, validate)


def parse_scenario(path, validate=True):
    """Read and materialize a scenario file (``OSError`` propagates for I/O problems)."""
    with open(path, encoding="utf-8") as fh:
        return parse_scenario_text(fh.read(), validate)


def scenario_to_dict(scn):
    """Fully materialized document; parsing it again yields the same configuration."""
    spec = scn.spec
    b = spec.bounds
    low, high = b.box(spec.d)
    return {
        "system": {
            "d": spec.d,
            "N": spec.N,
            "M": spec.M,
            "T": float(spec.T),
            "p": float(spec.p),
            "dt": float(spec.dt),
            "L": float(b.L),
            "Mprime": float(b.Mprime),
            "ell": int(b.ell),
            "U_low": low.tolist(),
            "U_high": high.tolist(),
            "feature_radius": spec.feature_radius,
            "initial": {"herd": spec.initial.herd_law.to_dict(), "herders": spec.initial.herder_start.tolist()},
        },
        "kernels": {name: k.to_dict() for name, k in spec.kernels.items()},
        "noises": {name: s.to_dict() for name, s in spec.noises.items()},
        "costs": scn.costs.to_dict(),
        "control": {
            "pieces": scn.control.pieces,
            "h": scn.control.h_knots.tolist(),
            "bias": scn.control.g_bias.tolist(),
            "weights": scn.control.g_weights.tolist(),
            "search": scn.search,
        },
        "experiment": copy.deepcopy(scn.experiment),
    }


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def scenario_hash(doc):
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()
