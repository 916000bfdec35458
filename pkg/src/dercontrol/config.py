"""TOML scenario files.

Example (every key shown; keys marked optional have the defaults given)::

    version = 1

    [network]
    parent = [0, 1, 2, 3]        # parent label of buses 1..n, 0 = substation
    r_ohm = 0.466                # scalar or one value per line
    x_ohm = 0.733
    v_base_kv = 12.0
    v0_pu = 1.0                  # optional
    v_lo_pu = 0.95               # optional, scalar or per bus
    v_hi_pu = 1.05               # optional

    [resources]
    buses = [2, 4]               # buses with storage and a PV inverter
    horizon = 8
    delta_h = 1.0                # optional
    start_hour = 8               # optional, clock hour of period 0
    storage_capacity_mwh = 0.5   # scalar or one value per resource bus
    storage_p_min_mw = -0.2
    storage_p_max_mw = 0.2
    storage_x0_mwh = 0.0         # optional
    pv_theta_mw = 2.0            # PV active capacity theta
    inverter_s_factor = 1.25     # optional, s = factor * theta

    [uncertainty]
    load_buses = [1, 2, 3, 4]
    load_p_base_mw = 0.25
    power_factor = 0.95          # optional
    load_spread = 0.3            # optional, loads ~ Uni[(1-spread) mu, (1+spread) mu]
    support = "box"              # optional; only the box hull of the laws is supported
    independent = true           # optional

    [solve]                      # optional section
    feastol = 1e-8
    opttol = 1e-8
    max_iter = 100
    seed = 1
    samples = 10000

    [sweep]                      # optional section
    parameter = "theta"
    grid = [0.0, 1.0, 2.0]
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .cases import build_case
from .network import NetworkModelError
from .qp import QPSettings
from .scenario import DisturbanceModel, Scenario, ScenarioError

SCHEMA_VERSION = 1
SWEEP_PARAMETERS = {"theta": ("resources", "pv_theta_mw"),
                    "storage_capacity_mwh": ("resources", "storage_capacity_mwh"),
                    "load_p_base_mw": ("uncertainty", "load_p_base_mw")}


class ConfigError(ValueError):
    """Invalid scenario file; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path, self.line, self.reason = path, line, message
        where = f"{path}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)


_SCHEMA = {
    "network": {"parent": list, "r_ohm": (float, list), "x_ohm": (float, list), "v_base_kv": float,
                "v0_pu": float, "v_lo_pu": (float, list), "v_hi_pu": (float, list)},
    "resources": {"buses": list, "horizon": int, "delta_h": float, "start_hour": float,
                  "storage_capacity_mwh": (float, list), "storage_p_min_mw": (float, list),
                  "storage_p_max_mw": (float, list), "storage_x0_mwh": (float, list),
                  "pv_theta_mw": float, "inverter_s_factor": float},
    "uncertainty": {"load_buses": list, "load_p_base_mw": float, "power_factor": float,
                    "load_spread": float, "support": str, "independent": bool},
    "solve": {"feastol": float, "opttol": float, "max_iter": int, "seed": int, "samples": int},
    "sweep": {"parameter": str, "grid": list},
}
_REQUIRED = {
    "network": ("parent", "r_ohm", "x_ohm", "v_base_kv"),
    "resources": ("buses", "horizon", "storage_capacity_mwh", "storage_p_min_mw", "storage_p_max_mw",
                  "pv_theta_mw"),
    "uncertainty": ("load_buses", "load_p_base_mw"),
}


@dataclass
class ScenarioConfig:
    """Parsed scenario file."""

    data: dict
    path: str = "<string>"
    text: str = field(default="", repr=False)

    def line_of(self, section, key=None):
        return _find_line(self.text, section, key)

    def get(self, section, key, default=None):
        return self.data.get(section, {}).get(key, default)

    def with_value(self, section, key, value) -> "ScenarioConfig":
        data = {k: dict(v) if isinstance(v, dict) else v for k, v in self.data.items()}
        data.setdefault(section, {})[key] = value
        return replace(self, data=data)

    @property
    def seed(self):
        return int(self.get("solve", "seed", 1))

    @property
    def samples(self):
        return int(self.get("solve", "samples", 10000))

    def qp_settings(self) -> QPSettings:
        return QPSettings(feastol=float(self.get("solve", "feastol", 1e-8)),
                          opttol=float(self.get("solve", "opttol", 1e-8)),
                          max_iter=int(self.get("solve", "max_iter", 100)))

    def sweep(self):
        name = self.get("sweep", "parameter", "theta")
        if name not in SWEEP_PARAMETERS:
            raise ConfigError(f"unknown sweep parameter {name!r}; choose from {sorted(SWEEP_PARAMETERS)}",
                              self.path, self.line_of("sweep", "parameter"))
        return name, [float(v) for v in self.get("sweep", "grid", [])]

    def with_sweep_value(self, name, value):
        section, key = SWEEP_PARAMETERS[name]
        return self.with_value(section, key, float(value))

    def scenario(self) -> Scenario:
        """Build the scenario; data errors are re-raised with the offending line."""
        net = self.data["network"]
        res = self.data["resources"]
        unc = self.data["uncertainty"]
        buses = [int(b) for b in res["buses"]]
        n = len(net["parent"])
        if unc.get("support", "box") != "box":
            raise ConfigError("only support = \"box\" is available in scenario files",
                              self.path, self.line_of("uncertainty", "support"))

        for key in ("storage_capacity_mwh", "storage_p_min_mw", "storage_p_max_mw", "storage_x0_mwh"):
            val = res.get(key)
            if isinstance(val, list) and len(val) != len(buses):
                raise ConfigError(f"{key} needs one value per resource bus ({len(buses)})",
                                  self.path, self.line_of("resources", key))

        for key, section in (("buses", "resources"), ("load_buses", "uncertainty")):
            for b in self.data[section][key]:
                if not 1 <= int(b) <= n:
                    raise ConfigError(f"{key} entry {b} is not a bus label in 1..{n}",
                                      self.path, self.line_of(section, key))
        try:
            sc = build_case(
                [int(p) for p in net["parent"]], buses, [int(b) for b in unc["load_buses"]],
                float(res["pv_theta_mw"]), T=int(res["horizon"]),
                start_hour=float(res.get("start_hour", 0.0)), delta=float(res.get("delta_h", 1.0)),
                r=net["r_ohm"], x=net["x_ohm"], v_base=float(net["v_base_kv"]),
                v0_pu=float(net.get("v0_pu", 1.0)), v_lo_pu=net.get("v_lo_pu", 0.95),
                v_hi_pu=net.get("v_hi_pu", 1.05), b=res["storage_capacity_mwh"],
                p_lo=res["storage_p_min_mw"], p_hi=res["storage_p_max_mw"],
                x0=res.get("storage_x0_mwh", 0.0), s_factor=float(res.get("inverter_s_factor", 1.25)),
                p_base=float(unc["load_p_base_mw"]), power_factor=float(unc.get("power_factor", 0.95)),
                load_spread=float(unc.get("load_spread", 0.3)))
            if not unc.get("independent", True):
                dm = sc.disturbance
                sc = Scenario(sc.network, sc.resources,
                              DisturbanceModel(dm.n, dm.T, dm.laws, dm.support, independent=False))
            return sc
        except NetworkModelError as e:
            raise ConfigError(str(e), self.path, self.line_of("network")) from e
        except ScenarioError as e:
            raise ConfigError(str(e), self.path, self.line_of("resources")) from e
        except ValueError as e:  # array shape mismatches
            raise ConfigError(str(e), self.path) from e


def _find_line(text, section, key=None):
    """1-based line of ``key`` inside ``[section]`` (or of the header)."""
    lines = text.splitlines()
    current = None
    for k, line in enumerate(lines, 1):
        stripped = line.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", stripped)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return k
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return k
    return None


def _check_type(value, expected):
    kinds = expected if isinstance(expected, tuple) else (expected,)
    for kind in kinds:
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return True
        if kind in (list, str, bool) and isinstance(value, kind):
            return True
    return False


def loads(text, path="<string>") -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"TOML syntax error: {e}", path, int(m.group(1)) if m else None) from e
    if "version" not in data:
        raise ConfigError("missing required top-level key 'version'", path, 1)
    if data["version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {data['version']!r} (expected {SCHEMA_VERSION})",
                          path, _find_line(text, None, "version") or 1)
    for section in data:
        if section == "version":
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", path, _find_line(text, section))
        if not isinstance(data[section], dict):
            raise ConfigError(f"{section} must be a table", path, _find_line(text, None, section))
        for key, value in data[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", path, _find_line(text, section, key))
            if not _check_type(value, _SCHEMA[section][key]):
                raise ConfigError(f"[{section}] {key} has the wrong type ({type(value).__name__})",
                                  path, _find_line(text, section, key))
    for section, keys in _REQUIRED.items():
        if section not in data:
            raise ConfigError(f"missing section [{section}]", path, None)
        for key in keys:
            if key not in data[section]:
                raise ConfigError(f"missing key {key!r} in [{section}]", path, _find_line(text, section))
    return ScenarioConfig(data, str(path), text)


def load(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read file: {e.strerror}", path) from e
    return loads(text, path)
