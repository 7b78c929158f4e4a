"""Experiment configuration: YAML loading, defaults, validation, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

EXPERIMENTS = ("evolve", "trajectories", "equivariance", "perceptions", "typicality", "compare", "select-trajectory")
THEORY_KINDS = ("SQM", "SBM", "SCBM", "GCBM")
CONFIG_PATH_ENV = "BOHMLAB_CONFIG_PATH"

DEFAULTS = {
    "name": "experiment",
    "experiment": "evolve",
    "seed": 0,
    "grid": {"extent": [[-16.0, 16.0]], "points": [512]},
    "potential": {"kind": "free"},
    "state": {"kind": "gaussian", "center": 0.0, "width": 1.0, "momentum": 0.0},
    "evolution": {"dt": 0.001, "t_final": 1.0, "mass": 1.0, "hbar": 1.0},
    "integration": {
        "rk_dt": 0.05, "output_dt": 0.1,
        "node_policy": {"node_epsilon": None, "speed_cap": None, "substep_shrink": 0.5,
                        "dt_min": 1e-9, "node_rel": 1e-12, "max_substeps": 200000},
    },
    "trajectories": {"x0": []},
    "ensemble": {"n": 1000, "density": {"kind": "quantum"}, "include": []},
    "snapshots": {"times": None, "binary": True},
    "equivariance": {"times": None},
    "perceptions": None,
    "theories": [],
    "observed": None,
    "agreement": {"n_sbm": 5, "replicates": 2000},
    "output": {"dir": None, "plots": True, "svg": False},
}
TOP_KEYS = set(DEFAULTS)


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        out = copy.deepcopy(base)
        for k, v in over.items():
            out[k] = _merge(base.get(k), v) if k in base else copy.deepcopy(v)
        return out
    return copy.deepcopy(over)


def resolve_path(path) -> Path:
    """Find a config by path, then in each directory of $BOHMLAB_CONFIG_PATH."""
    p = Path(path)
    if p.exists():
        return p
    for d in os.environ.get(CONFIG_PATH_ENV, "").split(os.pathsep):
        if d and (Path(d) / p).exists():
            return Path(d) / p
    raise FileNotFoundError(f"config not found: {path}")


def _line_map(text):
    """Map dotted field paths to 1-based source lines."""
    lines = {}

    def walk(node, prefix):
        lines.setdefault(prefix or "<root>", node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[key] = k.start_mark.line + 1
                walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, f"{prefix}[{i}]")

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


@dataclass
class ExperimentConfig:
    """Fully defaulted experiment description; ``data`` mirrors the YAML."""

    data: dict
    source_path: str | None = None
    lines: dict = field(default_factory=dict, repr=False)
    unknown: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict, source_path=None, lines=None) -> "ExperimentConfig":
        raw = raw or {}
        return cls(_merge(DEFAULTS, raw), source_path, lines or {}, sorted(set(raw) - TOP_KEYS))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = resolve_path(path)
        text = p.read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            mark = getattr(err, "problem_mark", None)
            where = f"line {mark.line + 1}: " if mark else ""
            raise ConfigError([f"{where}YAML parse error: {err}"]) from err
        if not isinstance(raw, dict):
            raise ConfigError(["line 1: top level must be a mapping"])
        return cls.from_dict(raw, str(p), _line_map(text))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    def __getitem__(self, k):
        return self.data[k]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d["output"] = {k: v for k, v in d["output"].items() if k != "dir"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def line_of(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rsplit(".", 1)[0] if "." in path else ""
        return None


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Every problem in the config, each as ``line N: field: message``."""
    from . import experiments  # noqa: avoid import cycle

    diags: list[tuple[str, str]] = []

    def bad(path, msg):
        diags.append((path, msg))

    d = cfg.data
    for k in cfg.unknown:
        bad(k, "unknown top-level key")
    if d["experiment"] not in EXPERIMENTS:
        bad("experiment", f"unknown experiment {d['experiment']!r}; choose from {', '.join(EXPERIMENTS)}")
    if not isinstance(d["seed"], int) or d["seed"] < 0:
        bad("seed", "seed must be a nonnegative integer")

    grid = None
    try:
        grid = experiments.build_grid(d["grid"])
    except Exception as err:
        bad("grid", str(err))

    ev = d["evolution"]
    t_final = ev.get("t_final")
    if not isinstance(t_final, (int, float)) or t_final < 0:
        bad("evolution.t_final", "t_final must be a nonnegative number")
        t_final = None
    cfg_ev = None
    try:
        cfg_ev = experiments.build_evolution(ev)
        if grid is not None:
            cfg_ev.check(grid)
    except Exception as err:
        bad("evolution", str(err))

    if grid is not None:
        try:
            experiments.build_potential(d["potential"]).values(grid)
        except Exception as err:
            bad("potential", str(err))
        try:
            experiments.build_state(d, grid)
        except Exception as err:
            bad("state", str(err))

    integ = d["integration"]
    for key in ("rk_dt", "output_dt"):
        if not isinstance(integ.get(key), (int, float)) or not integ[key] > 0:
            bad(f"integration.{key}", f"{key} must be positive")
    try:
        experiments.build_policy(integ.get("node_policy") or {})
    except Exception as err:
        bad("integration.node_policy", str(err))

    ens = d["ensemble"]
    if not isinstance(ens.get("n"), int) or ens["n"] < 1:
        bad("ensemble.n", "ensemble size must be an integer >= 1")
    if grid is not None:
        try:
            experiments.build_initial_density(ens.get("density") or {}, grid, None)
        except Exception as err:
            bad("ensemble.density", str(err))
        for i, x in enumerate(ens.get("include") or []):
            if not grid.contains(x):
                bad(f"ensemble.include[{i}]", f"point {x} lies outside the grid")
        for i, x in enumerate(d["trajectories"].get("x0") or []):
            if not grid.contains(x):
                bad(f"trajectories.x0[{i}]", f"point {x} lies outside the grid")

    def check_time(path, t):
        if t_final is not None and not (0 <= t <= t_final + 1e-12):
            bad(path, f"time {t} outside [0, t_final={t_final}]")

    for i, t in enumerate(d["equivariance"].get("times") or []):
        check_time(f"equivariance.times[{i}]", t)
    for i, t in enumerate(d["snapshots"].get("times") or []):
        check_time(f"snapshots.times[{i}]", t)

    S = None
    if d["perceptions"] is not None and grid is not None:
        try:
            S, problems = experiments.build_perceptions(d["perceptions"], grid, cfg.source_path, collect=True)
            for path, msg in problems:
                bad(path, msg)
        except Exception as err:
            bad("perceptions", str(err))
        if S is not None:
            for p in S:
                if t_final is not None and not (0 <= p.t <= t_final + 1e-12):
                    bad("perceptions", f"perception {p.id!r}: t_p={p.t} beyond final time {t_final}")
                if not p.region.within(grid) or p.region.dims != grid.dims:
                    bad("perceptions", f"perception {p.id!r}: region outside the grid")

    for i, th in enumerate(d["theories"] or []):
        kind = th.get("kind")
        if kind not in THEORY_KINDS:
            bad(f"theories[{i}].kind", f"unknown theory {kind!r}; choose from {', '.join(THEORY_KINDS)}")
        prior = th.get("prior", 1.0)
        if not isinstance(prior, (int, float)) or not prior > 0:
            bad(f"theories[{i}].prior", "prior must be positive")
        if kind == "SBM" and "x0" not in th:
            member = th.get("member", 0)
            n = ens.get("n") if isinstance(ens.get("n"), int) else 0
            if not isinstance(member, int) or not 0 <= member < n + len(ens.get("include") or []):
                bad(f"theories[{i}].member", f"member {member} not in the ensemble")
        if kind == "GCBM" and grid is not None:
            try:
                experiments.build_initial_density(th.get("density") or {}, grid, None)
            except Exception as err:
                bad(f"theories[{i}].density", str(err))

    exp = d["experiment"]
    if exp in ("perceptions", "typicality", "compare") and d["perceptions"] is None:
        bad("perceptions", f"experiment {exp!r} needs a perceptions section")
    if exp in ("typicality", "compare") and not d["theories"]:
        bad("theories", f"experiment {exp!r} needs at least one theory")
    if exp == "compare":
        if d["observed"] is None:
            bad("observed", "compare needs the id of the observed perception")
        elif S is not None and d["observed"] not in S.ids:
            bad("observed", f"observed perception {d['observed']!r} not in the perception set")
    if exp == "trajectories" and not d["trajectories"].get("x0"):
        bad("trajectories.x0", "trajectories experiment needs at least one seed point")
    if exp != "evolve" and t_final is not None and t_final <= 0 and exp not in ("perceptions",):
        bad("evolution.t_final", "trajectory experiments need t_final > 0")

    out = []
    for path, msg in diags:
        line = cfg.line_of(path)
        out.append(f"{'line ' + str(line) + ': ' if line else ''}{path}: {msg}")
    return out
