"""INI-style run configuration.

Example::

    [problem]
    preset = cavity-a1e3

    [mesh]
    resolution = 24 24 48

    [physics]
    kappa_f = auto

    [tuning]
    delta_T = 1.7

Any key of a preset may be overridden.  ``[mesh] resolution`` is mandatory.
"""

from __future__ import annotations

import configparser
import os
import re

from .materials import TuningInputs
from .mesh import Box, Cylinder, FACES
from .problem import PRESETS, ProblemSpec, SpecError, preset


class ConfigError(ValueError):
    """Configuration file could not be turned into a ProblemSpec."""


def _floats(text, n=None):
    vals = [float(v) for v in re.split(r"[\s,]+", text.strip()) if v]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return tuple(vals)


def _ints(text, n):
    vals = _floats(text, n)
    if any(v != int(v) for v in vals):
        raise ValueError("expected integers")
    return tuple(int(v) for v in vals)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _region(text):
    parts = text.split()
    if not parts or parts[0] == "none":
        return None
    kind, nums = parts[0], " ".join(parts[1:])
    if kind == "box":
        v = _floats(nums, 6)
        return Box(v[:3], v[3:])
    if kind == "cylinder":
        v = _floats(nums, 6)
        return Cylinder(v[:2], v[2], v[3], v[4:])
    raise ValueError(f"region must be 'box', 'cylinder' or 'none', got {kind!r}")


def _pins(text):
    return tuple(_floats(p, 3) for p in text.split(";") if p.strip())


def _kappa(text):
    t = text.strip()
    return "auto" if t == "auto" else float(t)


def _resolution(text):
    return _ints(text, 3)


_SCHEMA = {
    "problem": {"preset": str, "name": str},
    "mesh": {"resolution": _resolution, "size": lambda t: _floats(t, 3)},
    "geometry": {"design": _region, "heat_source": _region, "pressure_pins": _pins,
                 "snap_regions": _bool},
    "boundary": {f: str for f in FACES},
    "physics": {"alpha": float, "Q": float, "k_s": float, "k_f": float, "rho0": float,
                "mu": float, "cp": float, "kappa_f": _kappa},
    "tuning": {"H": float, "L": float, "delta_T": float, "alpha": float, "g": float,
               "nu": float, "beta_m": float, "Pr": float},
    "optimizer": {"volume_fraction": float, "filter_multiplier": float, "schedule": str,
                  "stage_length": int, "iterations": int, "move_limit": float,
                  "initial_design": str},
    "run": {"seed": int},
}


def _line_numbers(text):
    """Map (section, key) to the 1-based line where the key is set."""
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = no
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            lines[(section, key)] = no
    return lines


def parse_config(text, source="<config>"):
    """Parse configuration text into a resolved :class:`ProblemSpec`."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str  # keys are case sensitive (Q, H, L)
    lines = _line_numbers(text)

    def err(section, key, msg):
        no = lines.get((section, key)) or lines.get((section, None))
        where = f"{source}:{no}" if no else source
        return ConfigError(f"{where}: [{section}]{' ' + key if key else ''}: {msg}")

    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise err(section, None, f"unknown section; expected one of {sorted(_SCHEMA)}")
        for key, raw in cp.items(section):
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise err(section, key, f"unknown key; expected one of {sorted(_SCHEMA[section])}")
            try:
                values[(section, key)] = conv(raw)
            except ValueError as exc:
                raise err(section, key, f"cannot parse {raw!r}: {exc}") from None

    if ("mesh", "resolution") not in values:
        raise ConfigError(f"{source}: [mesh] resolution is mandatory")
    kw = {key: v for (section, key), v in values.items()
          if section not in ("problem", "tuning", "boundary")}
    if ("problem", "name") in values:
        kw["name"] = values[("problem", "name")]
    boundary = {k: v for (s, k), v in values.items() if s == "boundary"}
    tuning = {k: v for (s, k), v in values.items() if s == "tuning"}

    base = values.get(("problem", "preset"))
    try:
        if base is not None:
            if base not in PRESETS:
                raise err("problem", "preset", f"unknown preset; choose from {sorted(PRESETS)}")
            spec = preset(base, kw.pop("resolution"))
            if boundary:
                kw["boundary"] = {**spec.boundary, **boundary}
            if tuning:
                kw["tuning"] = _tuning(spec, {**kw}, tuning, spec.tuning)
            spec = spec.replace(**kw)
        else:
            if boundary:
                kw["boundary"] = boundary
            if tuning or kw.get("kappa_f") == "auto":
                kw["tuning"] = _tuning(None, kw, tuning, None)
            spec = ProblemSpec(**kw)
    except (SpecError, TypeError) as exc:
        for section, keys in _SCHEMA.items():
            key = next((k for k in keys if str(exc).startswith(k)), None)
            if key is not None and (section, key) in lines:
                raise err(section, key, str(exc)) from None
        raise ConfigError(f"{source}: {exc}") from None
    return spec


def _tuning(spec, kw, tuning, previous):
    base = {}
    if previous is not None:
        base = {k: getattr(previous, k) for k in ("H", "L", "delta_T", "alpha", "g", "nu",
                                                  "beta_m", "Pr")}
    else:
        size = kw.get("size", (0.5, 0.5, 1.0))
        base = {"H": size[2], "L": size[0], "alpha": kw.get("alpha", 1e3)}
    base.update(tuning)
    if "delta_T" not in base:
        raise ConfigError("[tuning] delta_T is required for kappa_f = auto")
    try:
        return TuningInputs(**base)
    except ValueError as exc:
        raise ConfigError(f"[tuning] {exc}") from None


def load_config(path_or_preset):
    """Load a spec from an INI file, or return a built-in preset by name."""
    if path_or_preset in PRESETS:
        return preset(path_or_preset)
    path = os.fspath(path_or_preset)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return parse_config(text, source=path)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _fmt_region(r):
    if r is None:
        return "none"
    if isinstance(r, Box):
        return "box " + _fmt(tuple(map(float, r.lo)) + tuple(map(float, r.hi)))
    return "cylinder " + _fmt(tuple(map(float, r.center)) + (float(r.r_inner), float(r.r_outer))
                              + tuple(map(float, r.z_range)))


def to_config_text(spec):
    """Serialize a spec so that :func:`parse_config` reproduces it exactly."""
    s = spec
    out = ["[problem]", f"name = {s.name}", "",
           "[mesh]", f"resolution = {_fmt(s.resolution)}", f"size = {_fmt(s.size)}", "",
           "[geometry]", f"design = {_fmt_region(s.design)}",
           f"heat_source = {_fmt_region(s.heat_source)}",
           "pressure_pins = " + "; ".join(_fmt(p) for p in s.pressure_pins),
           f"snap_regions = {_fmt(s.snap_regions)}", "", "[boundary]"]
    out += [f"{f} = {s.boundary[f]}" for f in FACES if f in s.boundary]
    out += ["", "[physics]"]
    out += [f"{k} = {_fmt(float(getattr(s, k)))}" for k in ("alpha", "Q", "k_s", "k_f",
                                                             "rho0", "mu", "cp")]
    out.append(f"kappa_f = {s.kappa_f if s.kappa_f == 'auto' else _fmt(float(s.kappa_f))}")
    if s.tuning is not None:
        out += ["", "[tuning]"]
        out += [f"{k} = {_fmt(float(getattr(s.tuning, k)))}"
                for k in ("H", "L", "delta_T", "alpha", "g", "nu", "beta_m", "Pr")]
    out += ["", "[optimizer]", f"volume_fraction = {_fmt(float(s.volume_fraction))}",
            f"filter_multiplier = {_fmt(float(s.filter_multiplier))}",
            f"schedule = {s.schedule}", f"stage_length = {s.stage_length}",
            f"iterations = {s.iterations}", f"move_limit = {_fmt(float(s.move_limit))}",
            f"initial_design = {s.initial_design}", "", "[run]", f"seed = {s.seed}", ""]
    return "\n".join(out)


def spec_metadata(spec):
    """Resolved-parameter record for the run metadata file."""
    meta = {"config": to_config_text(spec.resolved()),
            "kappa_f_source": "auto" if spec.kappa_f == "auto" else "explicit",
            "kappa_f": spec.resolved_kappa_f}
    return meta
