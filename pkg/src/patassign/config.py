"""YAML instance files: loading with located diagnostics, and writing back."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any

import numpy as np
import yaml

from .adp import FeatureScheme
from .model import ArrivalRegime, BoundedTransfer, DecisionLabel, DimensionError, ModelParams, NoTransfer, penalty_matrix


class ConfigError(ValueError):
    """Problem in a config file; ``kind`` is one of syntax, missing, type, dimension, invariant."""

    def __init__(self, kind: str, message: str, field: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.kind = kind
        self.field = field
        self.line = line
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    days: int = 1825
    reps: int = 1000
    warmup: int = 100
    iterations: int = 10
    steps: int = 100_000
    gain_steps: int | None = None
    burn_in: int = 100
    scheme: FeatureScheme = FeatureScheme.FULL_STATE
    threads: int = 1


@dataclass(frozen=True)
class Config:
    params: ModelParams
    labels: tuple[DecisionLabel, ...]
    run: RunSettings = field(default_factory=RunSettings)
    name: str = ""
    mean_los: np.ndarray | None = None
    digest: str = ""

    def label(self, name: str) -> DecisionLabel:
        for lab in self.labels:
            if lab.name == name:
                return lab
        raise KeyError(name)


def _line_map(text: str) -> dict[str, int]:
    """Dotted field path -> 1-based line where its value starts."""
    lines: dict[str, int] = {}

    def walk(node, path):
        if path:
            lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for key, val in node.value:
                walk(val, f"{path}.{key.value}" if path else str(key.value))
        elif isinstance(node, yaml.SequenceNode):
            for j, val in enumerate(node.value):
                walk(val, f"{path}[{j}]")

    root = yaml.compose(text)
    if root is not None:
        walk(root, "")
    return lines


class _Reader:
    def __init__(self, data: dict, lines: dict[str, int], source: str | None):
        self.data = data
        self.lines = lines
        self.source = source

    def fail(self, kind, message, path):
        line = self.lines.get(path) if path else None
        probe = path or ""
        while line is None and ("." in probe or "[" in probe):
            probe = probe[: max(probe.rfind("."), probe.rfind("["))]
            line = self.lines.get(probe)
        raise ConfigError(kind, message, path, line, self.source)

    def get(self, path: str, default: Any = ...):
        node: Any = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is not ...:
                    return default
                self.fail("missing", "required field is missing", path)
            node = node[part]
        return node

    def number(self, value, path) -> float:
        if isinstance(value, bool):
            self.fail("type", f"expected a number, got {value!r}", path)
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            num, slash, den = value.partition("/")
            try:
                return float(num) / float(den) if slash else float(num)
            except (ValueError, ZeroDivisionError):
                pass
        self.fail("type", f"expected a number or fraction, got {value!r}", path)

    def integer(self, value, path) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail("type", f"expected an integer, got {value!r}", path)
        return int(value)

    def array(self, path, shape: tuple[int, ...], integer=False, value=...) -> np.ndarray:
        raw = self.get(path) if value is ... else value
        conv = self.integer if integer else self.number

        def rec(v, p, depth):
            if depth == len(shape):
                return conv(v, p)
            if not isinstance(v, list):
                self.fail("dimension", f"expected a list at depth {depth + 1} of shape {shape}", p)
            if len(v) != shape[depth]:
                self.fail("dimension", f"expected {shape[depth]} entries, got {len(v)}", p)
            return [rec(x, f"{p}[{j}]", depth + 1) for j, x in enumerate(v)]

        return np.array(rec(raw, path, 0), dtype=np.int64 if integer else float)

    def cost(self, path, shape):
        """Scalar broadcast or full array."""
        raw = self.get(path)
        if isinstance(raw, list):
            return self.array(path, shape, value=raw)
        return np.full(shape, self.number(raw, path))


def _labels(r: _Reader) -> tuple[DecisionLabel, ...]:
    raw = r.get("labels", default=None)
    if raw is None:
        return (NoTransfer("a1"), BoundedTransfer(4, "a2"), BoundedTransfer(10, "a3"))
    if not isinstance(raw, list) or not raw:
        r.fail("type", "labels must be a nonempty list", "labels")
    out = []
    for j, item in enumerate(raw):
        p = f"labels[{j}]"
        if not isinstance(item, dict) or "name" not in item:
            r.fail("missing", "each label needs a name", p)
        name = str(item["name"])
        if "y_max" in item:
            y = r.integer(item["y_max"], f"{p}.y_max")
            if y < 0:
                r.fail("invariant", "y_max must be nonnegative", f"{p}.y_max")
            out.append(BoundedTransfer(y, name, bool(item.get("relocate", False))))
        else:
            out.append(NoTransfer(name))
    names = [lab.name for lab in out]
    if len(set(names)) != len(names):
        r.fail("invariant", "label names must be unique", "labels")
    return tuple(out)


def _run(r: _Reader) -> RunSettings:
    raw = r.get("run", default={})
    if not isinstance(raw, dict):
        r.fail("type", "run must be a mapping", "run")
    base = RunSettings()
    kw = {}
    for key in ("seed", "days", "reps", "warmup", "iterations", "steps", "gain_steps", "burn_in", "threads"):
        if key in raw and raw[key] is not None:
            kw[key] = r.integer(raw[key], f"run.{key}")
    if "scheme" in raw:
        try:
            kw["scheme"] = FeatureScheme(raw["scheme"])
        except ValueError:
            r.fail("invariant", f"unknown feature scheme {raw['scheme']!r}", "run.scheme")
    return replace(base, **kw)


def _length(r: _Reader, path: str) -> int:
    v = r.get(path)
    if not isinstance(v, list) or not v:
        r.fail("type", "expected a nonempty list", path)
    return len(v)


def parse_config(text: str, source: str | None = None) -> Config:
    try:
        data = yaml.safe_load(text)
        lines = _line_map(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        raise ConfigError("syntax", str(getattr(err, "problem", err)), None,
                          mark.line + 1 if mark else None, source) from err
    if not isinstance(data, dict):
        raise ConfigError("syntax", "top level must be a mapping", None, 1, source)
    r = _Reader(data, lines, source)

    m = r.array("wards.capacities", (_length(r, "wards.capacities"),), integer=True)
    K = m.size
    lam = r.array("types.arrival_rates", (_length(r, "types.arrival_rates"),))
    I = lam.size
    order = r.array("preference_order", (I, K), integer=True)
    for i, row in enumerate(order):
        if not np.array_equal(np.sort(row), np.arange(1, K + 1)):
            r.fail("invariant", f"row is not a permutation of 1..{K}", f"preference_order[{i}]")

    dp = r.get("departure_probs")
    if isinstance(dp, dict):
        primary = r.array("departure_probs.primary", (I,))
        factor = r.number(r.get("departure_probs.nonprimary_factor"), "departure_probs.nonprimary_factor")
        p = np.tile(primary * factor, (K, 1))
        p[np.argmin(order, axis=1), np.arange(I)] = primary
    else:
        p = r.array("departure_probs", (K, I))
    bad = np.argwhere((p <= 0) | (p > 1))
    if bad.size:
        k, i = bad[0]
        r.fail("invariant", f"departure probability {p[k, i]} for ward {k + 1}, type {i + 1} is outside (0, 1]",
               "departure_probs")

    assign = r.cost("costs.assignment", (K, I))
    transfer = r.cost("costs.transfer", (K, K, I))
    pen = r.get("costs.penalty")
    if isinstance(pen, dict):
        scope = pen.get("scope", "nonprimary")
        if scope not in ("nonprimary", "all"):
            r.fail("invariant", f"unknown penalty scope {scope!r}", "costs.penalty.scope")
        penalty = penalty_matrix(order, r.number(r.get("costs.penalty.value"), "costs.penalty.value"), scope)
    else:
        penalty = r.cost("costs.penalty", (K, I))
    include = r.get("costs.include_assignment", default=True)

    wcap = r.get("waiting_capacity", default=None)
    if wcap in (None, "unbounded", "inf"):
        wcap = None
    else:
        wcap = r.integer(wcap, "waiting_capacity")
    regime = r.get("arrival_regime", default="capacity_limited")
    try:
        regime = ArrivalRegime(regime)
    except ValueError:
        r.fail("invariant", f"unknown arrival regime {regime!r}", "arrival_regime")

    mean_los = None
    if r.get("types.mean_los", default=None) is not None:
        mean_los = r.array("types.mean_los", (I,))
    try:
        params = ModelParams(
            m, lam, p, order, assign, transfer, penalty,
            waiting_capacity=wcap, arrival_regime=regime, include_assignment_cost=bool(include),
            ward_names=r.get("wards.names", default=None), type_names=r.get("types.names", default=None),
        )
    except DimensionError as err:
        r.fail("dimension", str(err), str(err).split(" ")[0])
    except ValueError as err:
        r.fail("invariant", str(err), None)
    return Config(params, _labels(r), _run(r), str(data.get("name", "")), mean_los,
                  hashlib.sha256(text.encode()).hexdigest()[:12])


def load_config(path) -> Config:
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, str(path))


def builtin_config(name: str) -> Config:
    """One of the shipped instances, ``example1`` or ``example2``."""
    ref = resources.files("patassign") / "configs" / f"{name}.cfg"
    return parse_config(ref.read_text(), f"{name}.cfg")


def _plain(a: np.ndarray):
    return a.tolist()


def dump_config(cfg: Config) -> str:
    """Fully explicit YAML that reloads to an equal instance."""
    p = cfg.params
    data: dict[str, Any] = {}
    if cfg.name:
        data["name"] = cfg.name
    data["wards"] = {"capacities": _plain(p.capacities)}
    if p.ward_names:
        data["wards"]["names"] = list(p.ward_names)
    data["types"] = {"arrival_rates": _plain(p.arrival_rates)}
    if p.type_names:
        data["types"]["names"] = list(p.type_names)
    if cfg.mean_los is not None:
        data["types"]["mean_los"] = _plain(np.asarray(cfg.mean_los, float))
    data["departure_probs"] = _plain(p.departure_probs)
    data["preference_order"] = _plain(p.preference_order)
    data["waiting_capacity"] = p.waiting_capacity
    data["arrival_regime"] = p.arrival_regime.value
    data["costs"] = {
        "assignment": _plain(p.assign_cost),
        "transfer": _plain(p.transfer_cost),
        "penalty": _plain(p.penalty_cost),
        "include_assignment": bool(p.include_assignment_cost),
    }
    labs = []
    for lab in cfg.labels:
        if isinstance(lab, BoundedTransfer):
            item = {"name": lab.name, "y_max": int(lab.y_max)}
            if lab.relocate:
                item["relocate"] = True
            labs.append(item)
        else:
            labs.append({"name": lab.name})
    data["labels"] = labs
    run = cfg.run
    data["run"] = {k: getattr(run, k) for k in ("seed", "days", "reps", "warmup", "iterations", "steps",
                                                "gain_steps", "burn_in", "threads")}
    data["run"]["scheme"] = run.scheme.value
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


def save_config(cfg: Config, path):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
