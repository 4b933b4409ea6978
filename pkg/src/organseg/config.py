"""Flat ``section.key = value`` pipeline configuration.

Lines are ``key = value``; ``#`` starts a comment; a ``[section]`` line
prefixes the keys that follow it. Lists are comma separated. Every key has a
default and unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: str  # int, float, bool, str, ints, floats
    default: object
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    hi_open: bool = False
    doc: str = ""

    def check(self, key, value, where=""):
        items = value if self.kind in ("ints", "floats") else [value]
        if self.kind in ("ints", "floats") and not items:
            raise ConfigError(f"{where}{key}: list must not be empty")
        for v in items:
            if self.lo is not None and (v < self.lo or (self.lo_open and v == self.lo)):
                raise ConfigError(f"{where}{key}: {v} out of range ({self._range()})")
            if self.hi is not None and (v > self.hi or (self.hi_open and v == self.hi)):
                raise ConfigError(f"{where}{key}: {v} out of range ({self._range()})")

    def _range(self):
        lb = "(" if self.lo_open else "["
        rb = ")" if self.hi_open else "]"
        lo = "-inf" if self.lo is None else self.lo
        hi = "inf" if self.hi is None else self.hi
        return f"{lb}{lo}, {hi}{rb}"


_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))

FIELDS = {
    "run.seed": Field("int", 0, 0, 2**64 - 1, doc="master seed"),
    "phantom.count": Field("int", 16, 2),
    "phantom.seed": Field("int", 1000, 0),
    "phantom.dims": Field("ints", (64, 64, 32), 8, 512, doc="nx, ny, nz"),
    "phantom.spacing": Field("floats", (1.0, 1.0, 2.0), 0, lo_open=True, doc="sx, sy, sz in mm"),
    "phantom.target_fraction": Field("float", 0.03, 0, 0.5, lo_open=True),
    "phantom.noise_sigma": Field("float", 20.0, 0),
    "phantom.organ_count": Field("int", 4, 1),
    "superpixel.area_per_region": Field("float", 60.0, 1),
    "superpixel.min_regions": Field("int", 8, 1),
    "superpixel.lam": Field("float", 0.5, 0),
    "forest.n_trees": Field("int", 32, 1),
    "forest.max_depth": Field("int", 10, 1),
    "forest.voxels_per_class": Field("int", 1000, 1),
    "forest.cut": Field("float", 0.5, 0, 1, True, True),
    "forest.recall_target": Field("float", 0.0, 0, 1, doc="0 disables cut calibration"),
    "net.widths": Field("ints", (16, 32, 32, 32, 32), 1),
    "net.kernels": Field("ints", (5, 5, 3, 3, 3), 1),
    "net.fc": Field("int", 128, 1),
    "net.dropout": Field("float", 0.5, 0, 1, hi_open=True),
    "net.lr": Field("float", 0.01, 0, lo_open=True),
    "net.momentum": Field("float", 0.9, 0, 1, hi_open=True),
    "net.batch_size": Field("int", 32, 1),
    "net.weight_decay": Field("float", 0.0005, 0),
    "patchnet.size": Field("int", 64, 8),
    "patchnet.per_class_cap": Field("int", 400, 1, doc="per training case"),
    "patchnet.epochs": Field("int", 10, 1),
    "patchnet.stride": Field("int", 2, 1),
    "regionnet.size": Field("int", 64, 8),
    "regionnet.scales": Field("floats", (1.0, 1.5, 2.0, 3.0), 1.0),
    "regionnet.n_t": Field("int", 8, 0),
    "regionnet.magnitude": Field("float", 0.08, 0, 0.25),
    "regionnet.keep_original": Field("bool", True),
    "regionnet.regions_per_class": Field("int", 40, 1, doc="per training case"),
    "regionnet.epochs": Field("int", 10, 1),
    "edgenet.size": Field("int", 64, 8),
    "edgenet.per_class_cap": Field("int", 60, 1, doc="per training case"),
    "edgenet.epochs": Field("int", 10, 1),
    "edgenet.include_p0": Field("bool", True),
    "aggregate.sigma": Field("float", 3.0, 0),
    "aggregate.threshold_grid": Field("floats", _GRID, 0, 1, True, True),
    "crf.lambda_grid": Field("floats", (0.0, 0.05, 0.1, 0.2, 0.5, 1.0), 0),
    "crf.smoothed_unary": Field("bool", False),
    "cv.folds": Field("int", 4, 2),
    "cv.seed": Field("int", 0, 0),
}


def _parse_value(kind, text):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "str":
        return text
    parts = [p.strip() for p in text.split(",") if p.strip()]
    conv = int if kind == "ints" else float
    return tuple(conv(p) for p in parts)


def _format_value(kind, v):
    if kind in ("ints", "floats"):
        return ", ".join(repr(x) for x in v)
    if kind == "bool":
        return "true" if v else "false"
    return repr(v) if kind == "float" else str(v)


class PipelineConfig:
    """Fully defaulted configuration; read values with ``cfg["section.key"]``."""

    def __init__(self, values=None):
        self._values = {k: f.default for k, f in FIELDS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)
        self._cross_check()

    def set(self, key, value, where=""):
        if key not in FIELDS:
            raise ConfigError(f"{where}unknown config key {key!r}")
        f = FIELDS[key]
        if f.kind in ("ints", "floats"):
            conv = int if f.kind == "ints" else float
            value = tuple(conv(x) for x in value)
        elif f.kind == "int":
            value = int(value)
        elif f.kind == "float":
            value = float(value)
        elif f.kind == "bool":
            value = bool(value)
        f.check(key, value, where)
        self._values[key] = value

    def _cross_check(self):
        if len(self["phantom.dims"]) != 3 or len(self["phantom.spacing"]) != 3:
            raise ConfigError("phantom.dims and phantom.spacing need three values")
        if len(self["net.widths"]) != 5 or len(self["net.kernels"]) != 5:
            raise ConfigError("net.widths and net.kernels need five values")
        if self["cv.folds"] > self["phantom.count"]:
            raise ConfigError("cv.folds exceeds phantom.count")

    def __getitem__(self, key):
        return self._values[key]

    def with_values(self, values: dict) -> "PipelineConfig":
        vals = dict(self._values)
        vals.update(values)
        return PipelineConfig(vals)

    def to_text(self) -> str:
        lines = []
        for k, f in FIELDS.items():
            lines.append(f"{k} = {_format_value(f.kind, self._values[k])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self._values == other._values


def parse_config(text: str) -> PipelineConfig:
    values = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}: "
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{where}empty section name")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        if key not in FIELDS:
            raise ConfigError(f"{where}unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{where}duplicate key {key!r}")
        f = FIELDS[key]
        try:
            parsed = _parse_value(f.kind, val)
        except ValueError as e:
            raise ConfigError(f"{where}{key}: cannot parse {val!r} ({e})") from None
        f.check(key, parsed, where)
        values[key] = parsed
    return PipelineConfig(values)


def validate_config(path=None) -> PipelineConfig:
    """Read and validate a config file; ``None`` gives all defaults."""
    if path is None:
        return PipelineConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
