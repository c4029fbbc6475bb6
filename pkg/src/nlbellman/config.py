"""Experiment configuration: YAML blocks, named presets, overrides and hashing.

A configuration is a nested dict of plain data.  ``load_config`` fills in the
defaults and validates by building every object once, so a config that loads
is runnable.  ``dump_config`` writes the filled-in dict; loading the dump
gives back an equal config.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import yaml

from . import __version__
from .geometry import Domain, domain_from_config
from .grid import Grid, make_grid
from .hamiltonian import Control, ControlProblem, exterior_from_config
from .kernel import LevyKernel, QuadratureSpec, kernel_from_config, quadrature_from_config
from .montecarlo import McConfig, mc_config_from

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "PRESETS",
    "Setup",
    "apply_overrides",
    "build",
    "config_hash",
    "dump_config",
    "load_config",
    "preset",
]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "name": "custom",
    "kernel": {"alpha": 0.5, "density": "constant", "params": {}},
    "lam": 1.0,
    "phi": {"kind": "constant", "value": 0.0},
    "grid": {},
    "quadrature": {},
    "solver": {"method": "policy", "tol": 1e-9, "max_outer": 50,
               "eps_list": [float(2.0**-k) for k in range(7)]},
    "barriers": {"sweep": [float(2.0**-k) for k in range(4, 13)], "n_samples": 16, "sigma": None},
    "verify": {"n_samples": 64, "t_min_h": 8.0, "levels": 5, "boundary_tol": 1e-2,
               "min_depth_h": 4.0, "residual_depth": 0.1, "c_slack": 1.0, "pairs": 100},
    "compare": {"phi2": None, "shift": 1.0},
    "mc": {"paths": 100_000, "dt": 1e-3, "jump_cutoff": 1e-5, "t_max": 50.0,
           "probes": [], "tol_disc": None},
    "seed": 0,
    "output_dir": "nlbellman-out",
}

REQUIRED = ("domain", "controls")


def _ctl(c, f, label, A=None, dim=1):
    A = A if A is not None else [[0.0] * dim for _ in range(dim)]
    return {"A": A, "c": list(c), "f": list(f), "label": label}


PRESETS = {
    # u == 1 solves the problem exactly: phi = 1 and f = lam
    "constant": {
        "domain": {"kind": "interval", "params": {"a": 0.0, "b": 1.0}},
        "controls": [_ctl([0.7], [1.0], "b0")],
        "phi": {"kind": "constant", "value": 1.0},
        "grid": {"n": 127},
    },
    # no drift: every boundary point is Out and attains phi
    "outward-1d": {
        "domain": {"kind": "interval", "params": {"a": 0.0, "b": 1.0}},
        "controls": [_ctl([0.0], [1.0], "rest")],
        "phi": {"kind": "constant", "value": 0.0},
        "grid": {"n": 511},
    },
    # drift +1 pushes into the domain at 0 (Gamma_in) and out at 1
    "inward-1d": {
        "domain": {"kind": "interval", "params": {"a": 0.0, "b": 1.0}},
        "controls": [_ctl([1.0], [0.0], "right")],
        "phi": {"kind": "table", "knots": [0.0, 1.0], "values": [1.0, 0.0], "axis": 0},
        "grid": {"n": 1023},
    },
    # two drifts, one expanding off-centre and one contracting: Mixed everywhere
    "mixed-disk": {
        "domain": {"kind": "disk", "params": {"center": [0.0, 0.0], "radius": 1.0}},
        "controls": [_ctl([0.2, 0.0], [1.0], "expand", A=[[1.0, 0.0], [0.0, 1.0]], dim=2),
                     _ctl([0.0, 0.0], [1.5], "contract", A=[[-1.0, 0.0], [0.0, -1.0]], dim=2)],
        "phi": {"kind": "cosine", "amplitude": 0.5, "freq": 3.0, "shift": 0.0, "offset": 0.0, "axis": 0},
        "grid": {"h": 0.0625},
        "mc": {"probes": [[0.0, 0.0], [0.5, 0.0], [0.0, -0.5]]},
    },
    # single control, used for the Monte Carlo cross-check
    "linear-validate": {
        "domain": {"kind": "interval", "params": {"a": 0.0, "b": 1.0}},
        "controls": [_ctl([0.5], [1.0], "b0")],
        "phi": {"kind": "table", "knots": [0.0, 1.0], "values": [1.0, 0.0], "axis": 0},
        "grid": {"n": 1023},
        "mc": {"probes": [[0.1], [0.3], [0.5], [0.7], [0.9]]},
    },
    # a free slow drift and a costly fast one, both toward the cheap end x = 0;
    # the optimal policy switches twice inside
    "switching-1d": {
        "domain": {"kind": "interval", "params": {"a": 0.0, "b": 1.0}},
        "controls": [_ctl([-0.5], [0.0], "slow"), _ctl([-3.0], [1.0], "fast")],
        "phi": {"kind": "table", "knots": [0.0, 1.0], "values": [0.0, 0.5], "axis": 0},
        "grid": {"n": 1023},
        "mc": {"probes": [[0.1], [0.5], [0.95]]},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("phi", "domain"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _plain(obj):
    """Convert numpy scalars and tuples so YAML and JSON see plain types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return load_config(_merge({"name": name}, PRESETS[name]))


def load_config(source) -> dict:
    """Fill defaults into a dict (or YAML text / path) and validate it."""
    if isinstance(source, str):
        try:
            if "\n" not in source and not source.lstrip().startswith("{"):
                with open(source) as fh:
                    source = fh.read()
            data = yaml.safe_load(source)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    else:
        data = source
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "preset" in data:
        base = PRESETS.get(data["preset"])
        if base is None:
            raise ConfigError(f"unknown preset {data['preset']!r}")
        data = _merge(_merge({"name": data["preset"]}, base), {k: v for k, v in data.items() if k != "preset"})
    unknown = set(data) - set(DEFAULTS) - set(REQUIRED)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in REQUIRED:
        if key not in data:
            raise ConfigError(f"missing config block {key!r}")
    cfg = _plain(_merge(DEFAULTS, data))
    build(cfg)
    return cfg


def apply_overrides(cfg: dict, pairs: Iterable[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    out = copy.deepcopy(cfg)
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad override value {raw!r}: {exc}") from None
        parts = key.strip().split(".")
        node = out
        try:
            for p in parts[:-1]:
                if isinstance(node, list):
                    node = node[int(p)]
                    continue
                if p not in node or not isinstance(node[p], (dict, list)):
                    node[p] = {}
                node = node[p]
            last = parts[-1]
            if isinstance(node, list):
                node[int(last)] = value
            else:
                node[last] = value
        except (IndexError, ValueError, TypeError):
            raise ConfigError(f"override key {key!r} does not address a config entry") from None
    return load_config(out)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form, ignoring the output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


@dataclass
class Setup:
    domain: Domain
    kernel: LevyKernel
    problem: ControlProblem
    grid_block: dict
    quad: QuadratureSpec
    mc: McConfig

    def grid(self, refine: int = 0) -> Grid:
        """Grid of the config, or refined ``refine`` times (h -> h / 2^refine)."""
        block = dict(self.grid_block)
        if "n" in block and block["n"] is not None:
            block["n"] = (int(block["n"]) + 1) * 2**refine - 1
        elif "h" in block and block["h"] is not None:
            block["h"] = float(block["h"]) / 2**refine
        return make_grid(self.domain, block)


def _control(block: dict, dim: int) -> Control:
    f = block.get("f", block.get("f_coeffs", [0.0]))
    A = block.get("A", np.zeros((dim, dim)))
    return Control(A, block["c"], f, block.get("label", ""))


def build(cfg: dict) -> Setup:
    try:
        domain = domain_from_config(cfg["domain"])
        kernel = kernel_from_config(cfg["kernel"], domain.dim)
        phi = exterior_from_config(cfg["phi"], domain.dim)
        controls = [_control(c, domain.dim) for c in cfg["controls"]]
        labels = [c.label for c in controls if c.label]
        if len(set(labels)) != len(labels):
            raise ValueError("control labels must be distinct")
        problem = ControlProblem(controls, cfg["lam"], phi, domain.dim)
        quad = quadrature_from_config(cfg.get("quadrature"))
        g = cfg.get("grid") or {}
        if g.get("n") is None and g.get("h") is None:
            raise ValueError("grid block needs n or h")
        if domain.dim == 1 and g.get("n") is None:
            raise ValueError("1D grids are given by their node count n")
        mc = {k: v for k, v in cfg.get("mc", {}).items() if k in ("paths", "dt", "jump_cutoff", "t_max")}
        mc["seed"] = cfg.get("seed", 0)
        mcc = mc_config_from(mc)
        s = cfg["solver"]
        if s["method"] not in ("policy", "value"):
            raise ValueError("solver.method must be 'policy' or 'value'")
        if not s["tol"] > 0:
            raise ValueError("solver.tol must be positive")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return Setup(domain, kernel, problem, dict(g), quad, mcc)


def csv_comment(cfg: dict, command: str) -> str:
    return f"# nlbellman {__version__} command={command} config={cfg.get('name', 'custom')} sha256={config_hash(cfg)}"


def summary_text(summary: dict) -> str:
    return json.dumps(_plain(summary), indent=2, sort_keys=True, default=str, allow_nan=True) + "\n"
