"""Experiment configuration: strict JSON schema, hashing, scene construction.

The config owns every numeric knob (grid resolution, time steps, particle
resolution, branch-rate constant, replica counts, pass thresholds, seed);
the verification targets pin their own scenario shapes and read the knobs
from here.  Unknown keys anywhere in the file are rejected with the dotted
path of the offender, and the sha256 of the canonical JSON form is embedded
in every artifact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np

from .geometry import FULL, Disk, DomainChain, Rect, build_chain
from .grids import Grid, make_grid
from .pde import ScalarField, solve_dirichlet, solve_blowup, arc_indicator_data
from .backbone import PairFields, TreeParams
from .superprocess import CloudParams
from .subsets import SubsetFamily, v_from_u

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration; message carries the dotted field path."""


def _take(d: dict, path: str, required: dict, optional: dict) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    out = {}
    for key, checker in required.items():
        if key not in d:
            raise ConfigError(f"{path}.{key}: missing required field")
        out[key] = checker(d[key], f"{path}.{key}")
    for key, (checker, default) in optional.items():
        out[key] = checker(d[key], f"{path}.{key}") if key in d else default
    return out


def _num(lo=None, hi=None, integer=False):
    def check(v, path):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        if integer and int(v) != v:
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{path}: must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ConfigError(f"{path}: must be <= {hi}, got {v}")
        return int(v) if integer else float(v)

    return check


def _bool(v, path):
    if not isinstance(v, bool):
        raise ConfigError(f"{path}: expected a boolean")
    return v


def _str_choice(*choices):
    def check(v, path):
        if v not in choices:
            raise ConfigError(f"{path}: expected one of {choices}, got {v!r}")
        return v

    return check


def _point(v, path):
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ConfigError(f"{path}: expected [x, y]")
    return [float(v[0]), float(v[1])]


def _arcs(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{path}: expected a nonempty list of [s0, s1] arcs")
    out = []
    for i, arc in enumerate(v):
        if not (isinstance(arc, (list, tuple)) and len(arc) == 2):
            raise ConfigError(f"{path}[{i}]: expected [s0, s1]")
        out.append((float(arc[0]), float(arc[1])))
    return out


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    params: dict

    def build(self) -> Disk | Rect:
        if self.kind == "disk":
            cx, cy = self.params["center"]
            return Disk(cx, cy, self.params["radius"])
        return Rect(self.params["xmin"], self.params["xmax"],
                    self.params["ymin"], self.params["ymax"])


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    f: float = 1.0
    arcs: tuple = ()
    cap: float = 8.0


@dataclass(frozen=True)
class Thresholds:
    n_se: float = 3.0
    p_min: float = 0.01
    max_flagged_frac: float = 0.01
    pde_residual: float = 1e-8
    nesting_residual: float = 1e-6
    shooting_tol: float = 1e-4
    se_frac_anchor: float = 0.02
    branch_floor: float = 0.04


@dataclass(frozen=True)
class SimSpec:
    n: int = 64
    beta: float = 4.0
    dt_cloud: float = 1e-3
    dt_tree: float = 2.5e-4
    dt_min_factor: float = 1.0 / 64.0
    chunk: int = 500
    tree_chunk: int = 2500
    pop_cap: int = 10**6
    node_budget: int = 100_000
    reps: int = 10_000
    tree_reps: int = 10_000
    immigration_trees: int = 20
    immigration_reps: int = 1000
    growth_trees: int = 300
    calibration_reps: int = 4000

    def cloud_params(self) -> CloudParams:
        return CloudParams(
            n=self.n, beta=self.beta, dt=self.dt_cloud,
            dt_min_factor=self.dt_min_factor, chunk=self.chunk,
            pop_cap=self.pop_cap,
        )

    def tree_params(self) -> TreeParams:
        return TreeParams(
            dt=self.dt_tree, dt_min_factor=self.dt_min_factor,
            node_budget=self.node_budget,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainSpec
    depth: int
    scale: float
    refine: int
    sim: SimSpec
    scenario: ScenarioSpec
    phi_kind: str
    phi_value: float
    start: tuple
    k: int
    seed: int
    thresholds: Thresholds
    workers: int = 1
    figures: bool = True

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def phi(self) -> Callable:
        value = self.phi_value
        if self.phi_kind == "const":
            return lambda pts: np.full(len(np.atleast_2d(pts)), value)
        shape = self.domain.build()

        def cos_bump(pts):
            s = shape.boundary_param(np.atleast_2d(pts))
            return value * (1.0 + 0.5 * np.cos(s))

        return cos_bump


def parse_config(data: dict) -> ExperimentConfig:
    top = _take(
        data, "config",
        required={
            "schema": _num(integer=True),
            "domain": lambda v, p: v,
            "chain": lambda v, p: v,
            "seed": _num(lo=0, integer=True),
        },
        optional={
            "grid": (lambda v, p: v, {"refine": 1}),
            "sim": (lambda v, p: v, {}),
            "scenario": (lambda v, p: v, {"kind": "dirichlet-f", "f": 1.0}),
            "phi": (lambda v, p: v, {"type": "const", "value": 1.0}),
            "start": (_point, [0.0, 0.0]),
            "k": (_num(lo=1, integer=True), 2),
            "thresholds": (lambda v, p: v, {}),
            "workers": (_num(lo=1, integer=True), 1),
            "figures": (_bool, True),
        },
    )
    if top["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"config.schema: expected {SCHEMA_VERSION}, got {top['schema']}")

    dom = top["domain"]
    kind = _str_choice("disk", "rect")(dom.get("type"), "config.domain.type")
    if kind == "disk":
        d = _take(dom, "config.domain",
                  required={"type": _str_choice("disk"),
                            "radius": _num(lo=1e-12)},
                  optional={"center": (_point, [0.0, 0.0])})
        domain = DomainSpec("disk", {"center": d["center"], "radius": d["radius"]})
    else:
        d = _take(dom, "config.domain",
                  required={"type": _str_choice("rect"),
                            "xmin": _num(), "xmax": _num(),
                            "ymin": _num(), "ymax": _num()},
                  optional={})
        domain = DomainSpec("rect", {k2: d[k2] for k2 in ("xmin", "xmax", "ymin", "ymax")})

    ch = _take(top["chain"], "config.chain",
               required={"depth": _num(lo=1, hi=8, integer=True)},
               optional={"scale": (_num(lo=1e-12), 1.0)})
    gr = _take(top["grid"], "config.grid",
               optional={"refine": (_num(lo=1, hi=8, integer=True), 1)}, required={})

    sim_defaults = SimSpec()
    sm = _take(
        top["sim"], "config.sim", required={},
        optional={
            "n": (_num(lo=1, integer=True), sim_defaults.n),
            "beta": (_num(lo=0.1), sim_defaults.beta),
            "dt_cloud": (_num(lo=1e-9), sim_defaults.dt_cloud),
            "dt_tree": (_num(lo=1e-9), sim_defaults.dt_tree),
            "dt_min_factor": (_num(lo=1e-6, hi=1.0), sim_defaults.dt_min_factor),
            "chunk": (_num(lo=1, integer=True), sim_defaults.chunk),
            "tree_chunk": (_num(lo=1, integer=True), sim_defaults.tree_chunk),
            "pop_cap": (_num(lo=100, integer=True), sim_defaults.pop_cap),
            "node_budget": (_num(lo=10, integer=True), sim_defaults.node_budget),
            "reps": (_num(lo=10, integer=True), sim_defaults.reps),
            "tree_reps": (_num(lo=10, integer=True), sim_defaults.tree_reps),
            "immigration_trees": (_num(lo=1, integer=True), sim_defaults.immigration_trees),
            "immigration_reps": (_num(lo=10, integer=True), sim_defaults.immigration_reps),
            "growth_trees": (_num(lo=10, integer=True), sim_defaults.growth_trees),
            "calibration_reps": (_num(lo=10, integer=True),
                                 sim_defaults.calibration_reps),
        },
    )
    sim = SimSpec(**sm)

    sc = top["scenario"]
    sc_kind = _str_choice("dirichlet-f", "blowup-arc", "blowup-plus-f", "arc-family")(
        sc.get("kind"), "config.scenario.kind"
    )
    if sc_kind == "dirichlet-f":
        s = _take(sc, "config.scenario", required={"kind": _str_choice(sc_kind)},
                  optional={"f": (_num(lo=0.0), 1.0)})
        scenario = ScenarioSpec(sc_kind, f=s["f"])
    elif sc_kind == "blowup-arc":
        s = _take(sc, "config.scenario",
                  required={"kind": _str_choice(sc_kind), "arcs": _arcs},
                  optional={"cap": (_num(lo=0.0), 8.0)})
        scenario = ScenarioSpec(sc_kind, arcs=tuple(s["arcs"]), cap=s["cap"])
    elif sc_kind == "blowup-plus-f":
        s = _take(sc, "config.scenario",
                  required={"kind": _str_choice(sc_kind), "arcs": _arcs},
                  optional={"cap": (_num(lo=0.0), 8.0), "f": (_num(lo=0.0), 1.0)})
        scenario = ScenarioSpec(sc_kind, arcs=tuple(s["arcs"]), cap=s["cap"], f=s["f"])
    else:
        s = _take(sc, "config.scenario",
                  required={"kind": _str_choice(sc_kind), "arcs": _arcs},
                  optional={"cap": (_num(lo=0.0), 8.0)})
        if len(s["arcs"]) < 2:
            raise ConfigError("config.scenario.arcs: arc-family needs >= 2 arcs")
        scenario = ScenarioSpec(sc_kind, arcs=tuple(s["arcs"]), cap=s["cap"])

    ph = _take(top["phi"], "config.phi",
               required={"type": _str_choice("const", "cos")},
               optional={"value": (_num(lo=0.0), 1.0)})
    th_defaults = Thresholds()
    th = _take(
        top["thresholds"], "config.thresholds", required={},
        optional={
            name: (_num(lo=0.0), getattr(th_defaults, name))
            for name in vars(th_defaults)
        },
    )

    cfg = ExperimentConfig(
        domain=domain,
        depth=ch["depth"],
        scale=ch["scale"],
        refine=gr["refine"],
        sim=sim,
        scenario=scenario,
        phi_kind=ph["type"],
        phi_value=ph["value"],
        start=tuple(top["start"]),
        k=top["k"],
        seed=top["seed"],
        thresholds=Thresholds(**th),
        workers=top["workers"],
        figures=top["figures"],
    )
    if cfg.k > cfg.depth:
        raise ConfigError(f"config.k: {cfg.k} exceeds chain depth {cfg.depth}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return parse_config(data)


def default_config(**overrides) -> ExperimentConfig:
    base = {
        "schema": 1,
        "domain": {"type": "disk", "center": [0.0, 0.0], "radius": 1.0},
        "chain": {"depth": 3, "scale": 1.0},
        "seed": 20260810,
    }
    base.update(overrides)
    return parse_config(base)


# ----------------------------------------------------------------------------
# Scenes: chain + grid + solved fields for one scenario


@dataclass
class Scene:
    cfg: ExperimentConfig
    chain: DomainChain
    grid: Grid
    x0: np.ndarray
    phi: Callable
    fields: Optional[PairFields] = None
    ufam: Optional[SubsetFamily] = None
    vfam: Optional[SubsetFamily] = None

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def g_at_start(self) -> float:
        return float(self.fields.g.interp(self.x0[None])[0])


def build_scene(cfg: ExperimentConfig) -> Scene:
    shape = cfg.domain.build()
    chain = build_chain(shape, cfg.depth, cfg.scale)
    grid = make_grid(chain, refine=cfg.refine)
    x0 = np.asarray(cfg.start, dtype=float)
    if not chain.region(1).contains(x0[None])[0]:
        raise ConfigError(f"config.start: {cfg.start} is not inside D_1")
    scene = Scene(cfg=cfg, chain=chain, grid=grid, x0=x0, phi=cfg.phi())
    sc = cfg.scenario
    if sc.kind == "dirichlet-f":
        g = solve_dirichlet(grid, FULL, sc.f, name="g")
        scene.fields = PairFields(g=g, u=None)
    elif sc.kind == "blowup-arc":
        g = solve_blowup(grid, sc.arcs, sc.cap, name="g-blowup")
        scene.fields = PairFields(g=g, u=None)
    elif sc.kind == "blowup-plus-f":
        u = solve_blowup(grid, sc.arcs, sc.cap, name="u-blowup")
        mixed = arc_indicator_data(shape, sc.arcs, sc.cap)
        g = solve_dirichlet(
            grid, FULL, lambda pts: np.maximum(mixed(pts), sc.f), name="g-mixed"
        )
        scene.fields = PairFields(g=g, u=u)
    else:  # arc-family
        n = len(sc.arcs)
        def union_solve(mask: int) -> ScalarField:
            sel = [sc.arcs[i - 1] for i in range(1, n + 1) if mask & (1 << (i - 1))]
            return solve_blowup(grid, sel, sc.cap, name=f"u-{mask}")
        ufam = SubsetFamily.build(n, union_solve)
        raw = SubsetFamily(n, {m: ufam[m].values for m in ufam.masks()})
        joint = v_from_u(raw, check=True, tol=-1e-9)
        vfam = SubsetFamily(n, {
            m: ufam[m].copy_with(np.maximum(joint[m], 0.0), name=f"v-{m}")
            for m in ufam.masks()
        })
        scene.ufam = ufam
        scene.vfam = vfam
    return scene
