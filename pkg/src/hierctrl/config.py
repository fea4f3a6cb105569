"""Run configuration: INI-style sections, expression-valued fields, builders.

Format: flat sections with `key = value`; expressions are quoted strings
over the variables x (, y in 2D) and t; per-axis lists are comma separated
and boxes in 2D separate the axes with a semicolon.  Validation happens
before any solve or output; invalid configs never produce artifacts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .carleman import build_carleman_weights, default_parameters
from .errors import ConfigError, EmptyMask, InvalidGrid, ParseError
from .expressions import parse_expr
from .mesh import SpaceTimeField, build_grid, build_mask
from .operators import ProblemSpec
from .semilinear import Nonlinearity, from_expression, preset_grad_tanh, preset_tanh, preset_zero

GEOMETRY_KEYS = {
    "leader": "leader",
    "follower1": "follower1",
    "follower2": "follower2",
    "target1": "target1",
    "target2": "target2",
}

SOLVER_DEFAULTS = {
    "nash_tol": 1e-12,
    "nash_max_iter": 200,
    "coupled_tol": 1e-12,
    "cg_tol": 1e-9,
    "cg_max_iter": 300,
    "outer_tol": 1e-8,
    "max_outer": 30,
    "damping": 1.0,
    "penalty_mode": "quadratic",
    "seed": 0,
    "n_samples": 50,
    "n_directions": 20,
}


def _strip_quotes(text):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def _floats(text, name):
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as numbers") from exc


def _box(text, dim, name):
    axes = [part for part in text.split(";")]
    if len(axes) != dim:
        raise ConfigError(f"{name}: need {dim} axis intervals, got {len(axes)}")
    box = []
    for part in axes:
        vals = _floats(part, name)
        if len(vals) != 2 or vals[0] >= vals[1]:
            raise ConfigError(f"{name}: interval must be 'lo, hi' with lo < hi, got {part!r}")
        box.append((vals[0], vals[1]))
    return tuple(box)


@dataclass
class RunConfig:
    """Parsed and validated configuration for one experiment run."""

    grid: object
    sections: dict
    exprs: dict
    boxes: dict
    case: str
    alpha: tuple
    mu: tuple
    lam: float
    s: float
    eps_list: tuple
    solver: dict
    seed: int
    omega0_center: tuple
    omega0_center2: tuple = None
    otilde_window: tuple = None
    nonlinearity_kind: str = "zero"
    nonlinearity_params: dict = field(default_factory=dict)

    def normalized(self):
        """Sections as parsed, for the run manifest."""
        return {sec: dict(items) for sec, items in self.sections.items()}


def _parse_expression(text, name, allowed):
    try:
        ast = parse_expr(_strip_quotes(text))
    except ParseError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    extra = ast.variables() - allowed
    if extra:
        raise ConfigError(f"{name}: unknown variables {sorted(extra)} (allowed: {sorted(allowed)})")
    return ast


def load_config(path) -> RunConfig:
    # ';' separates box axes in 2D, so only '#' marks inline comments
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    sections = {name: dict(parser.items(name)) for name in parser.sections()}

    g = sections.get("grid")
    if not g:
        raise ConfigError("missing [grid] section")
    try:
        dim = int(g.get("dim", "1"))
        lengths = _floats(g.get("lengths", "1.0"), "grid.lengths")
        nxs = tuple(int(v) for v in g.get("nx", "16").split(","))
        grid = build_grid(dim, lengths if len(lengths) > 1 else lengths[0],
                          nxs if len(nxs) > 1 else nxs[0],
                          float(g.get("T", "1.0")), int(g.get("nt", "16")))
    except InvalidGrid:
        raise
    except ValueError as exc:
        raise ConfigError(f"[grid]: {exc}") from exc

    space_vars = {"x", "y"} if dim == 2 else {"x"}
    st_vars = space_vars | {"t"}

    exprs = {}
    coeff = sections.get("coefficients", {})
    exprs["a"] = _parse_expression(coeff.get("a", "0"), "coefficients.a", st_vars)
    for ax in range(dim):
        key = f"b{ax + 1}"
        exprs[key] = _parse_expression(coeff.get(key, "0"), f"coefficients.{key}", st_vars)

    data = sections.get("data", {})
    exprs["u0"] = _parse_expression(data.get("u0", "0"), "data.u0", space_vars)
    exprs["ubar0"] = _parse_expression(data.get("ubar0", "0"), "data.ubar0", space_vars)
    exprs["zeta1"] = _parse_expression(data.get("zeta1", "0"), "data.zeta1", st_vars)
    exprs["zeta2"] = _parse_expression(data.get("zeta2", "0"), "data.zeta2", st_vars)
    exprs["f"] = _parse_expression(data.get("f", "0"), "data.f", st_vars)

    geom = sections.get("geometry", {})
    boxes = {}
    for key in GEOMETRY_KEYS:
        if key in geom:
            boxes[key] = _box(geom[key], dim, f"geometry.{key}")
    case = geom.get("case", "shared").strip()
    if case not in ("shared", "distinct"):
        raise ConfigError(f"geometry.case must be shared or distinct, got {case!r}")

    def center_of(key, default=None):
        if key not in geom:
            return default
        vals = _floats(geom[key], f"geometry.{key}")
        if len(vals) != dim:
            raise ConfigError(f"geometry.{key}: need {dim} coordinates")
        return vals

    omega0 = center_of("omega0_center", tuple(L / 2.0 for L in grid.lengths))
    omega0_2 = center_of("omega0_center2")
    window = None
    if "otilde_window" in geom:
        window = _box(geom["otilde_window"], dim, "geometry.otilde_window")

    w = sections.get("weights", {})
    try:
        alpha = (float(w.get("alpha1", "1e-3")), float(w.get("alpha2", "1e-3")))
        mu = (float(w.get("mu1", "1.0")), float(w.get("mu2", "1.0")))
    except ValueError as exc:
        raise ConfigError(f"[weights]: {exc}") from exc
    if min(mu) <= 0:
        raise ConfigError("control weights mu must be positive")
    if min(alpha) < 0:
        raise ConfigError("observation weights alpha must be nonnegative")
    lam_default, s_default = default_parameters(grid.T)
    lam_text = w.get("lambda", "auto").strip()
    s_text = w.get("s", "auto").strip()
    lam = lam_default if lam_text == "auto" else float(lam_text)
    s = s_default if s_text == "auto" else float(s_text)
    eps_list = _floats(w.get("eps_list", "1e-1, 1e-2, 1e-3, 1e-4, 1e-5"), "weights.eps_list")
    if any(e <= 0 for e in eps_list):
        raise ConfigError("eps_list entries must be positive")

    solver = dict(SOLVER_DEFAULTS)
    for key, value in sections.get("solver", {}).items():
        if key not in SOLVER_DEFAULTS:
            raise ConfigError(f"unknown solver option {key!r}")
        if key == "penalty_mode":
            if value not in ("quadratic", "exact-norm"):
                raise ConfigError("penalty_mode must be quadratic or exact-norm")
            solver[key] = value
        elif key in ("nash_max_iter", "cg_max_iter", "max_outer", "seed", "n_samples", "n_directions"):
            solver[key] = int(value)
        else:
            solver[key] = float(value)

    nl = sections.get("nonlinearity", {})
    kind = nl.get("preset", "zero").strip()
    params = {}
    if kind in ("tanh",):
        params["c"] = float(nl.get("c", "0.5"))
    elif kind == "grad-tanh":
        params["c"] = float(nl.get("c", "0.5"))
        params["c2"] = float(nl.get("c2", "0.0"))
    elif kind == "expr":
        if "expr" not in nl:
            raise ConfigError("nonlinearity preset expr needs an expr entry")
        allowed = {"u"} | {f"p{i + 1}" for i in range(dim)}
        _parse_expression(nl["expr"], "nonlinearity.expr", allowed)
        params["expr"] = _strip_quotes(nl["expr"])
        params["bound"] = float(nl.get("bound", "1.0"))
    elif kind != "zero":
        raise ConfigError(f"unknown nonlinearity preset {kind!r}")

    return RunConfig(
        grid=grid,
        sections=sections,
        exprs=exprs,
        boxes=boxes,
        case=case,
        alpha=alpha,
        mu=mu,
        lam=lam,
        s=s,
        eps_list=eps_list,
        solver=solver,
        seed=int(solver["seed"]),
        omega0_center=omega0,
        omega0_center2=omega0_2,
        otilde_window=window,
        nonlinearity_kind=kind,
        nonlinearity_params=params,
    )


REQUIRED_BOXES = {
    "nash": ("leader", "follower1", "follower2", "target1", "target2"),
    "null-control": ("leader", "follower1", "follower2", "target1", "target2"),
    "trajectory": ("leader", "follower1", "follower2", "target1", "target2"),
    "semilinear": ("leader", "follower1", "follower2", "target1", "target2"),
    "second-order": ("leader", "follower1", "follower2", "target1", "target2"),
    "observability": ("leader", "follower1", "follower2", "target1", "target2"),
    "carleman": (),
    "oracle": ("leader", "follower1", "follower2", "target1", "target2"),
}

NEEDS_CONTROLLABILITY = {"null-control", "trajectory", "semilinear", "observability"}
NEEDS_SECOND_ORDER = {"second-order"}


def validate_for(config: RunConfig, subcommand):
    """Geometry and hypothesis checks for the requested pipeline."""
    if subcommand not in REQUIRED_BOXES:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    missing = [k for k in REQUIRED_BOXES[subcommand] if k not in config.boxes]
    if missing:
        raise ConfigError(f"{subcommand}: missing geometry boxes {missing}")
    for key, box in config.boxes.items():
        try:
            build_mask(config.grid, box)
        except EmptyMask as exc:
            raise ConfigError(f"geometry.{key}: {exc}") from exc
    if subcommand in NEEDS_CONTROLLABILITY:
        spec = build_problem_spec(config)
        if not spec.has_controllability_geometry():
            raise ConfigError("each target region must intersect the leader region")
        if config.case == "shared":
            same_mask = np.array_equal(spec.target_masks[0].indicator, spec.target_masks[1].indicator)
            same_target = np.array_equal(spec.targets[0].values, spec.targets[1].values)
            if not (same_mask and same_target):
                raise ConfigError("shared case requires identical observation regions and targets")
        else:
            i1 = spec.target_masks[0].indicator & spec.leader_mask.indicator
            i2 = spec.target_masks[1].indicator & spec.leader_mask.indicator
            if np.array_equal(i1, i2):
                raise ConfigError("distinct case requires different target/leader intersections")
            if config.omega0_center2 is None:
                raise ConfigError("distinct case needs geometry.omega0_center2")
    if subcommand in NEEDS_SECOND_ORDER and config.nonlinearity_kind == "expr":
        raise ConfigError("second-order checker requires a preset with analytic second derivatives")


def _eval_spatial(config, name):
    grid = config.grid
    meshes = grid.meshes()
    env = {"x": meshes[0]}
    if grid.dim == 2:
        env["y"] = meshes[1]
    vals = np.broadcast_to(np.asarray(config.exprs[name].evaluate(env), dtype=float), grid.nx).copy()
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"data.{name} evaluates to non-finite values")
    return vals


def _eval_spacetime(config, name):
    grid = config.grid
    meshes = grid.meshes()
    out = np.empty((grid.nt + 1,) + grid.nx)
    for k, t in enumerate(grid.times()):
        env = {"x": meshes[0], "t": t}
        if grid.dim == 2:
            env["y"] = meshes[1]
        out[k] = np.broadcast_to(np.asarray(config.exprs[name].evaluate(env), dtype=float), grid.nx)
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{name} evaluates to non-finite values")
    return SpaceTimeField(grid, out)


def build_problem_spec(config: RunConfig) -> ProblemSpec:
    grid = config.grid
    b = tuple(_eval_spacetime(config, f"b{ax + 1}") for ax in range(grid.dim))
    return ProblemSpec(
        grid=grid,
        a=_eval_spacetime(config, "a"),
        b=b,
        leader_mask=build_mask(grid, config.boxes["leader"]),
        follower_masks=(build_mask(grid, config.boxes["follower1"]),
                        build_mask(grid, config.boxes["follower2"])),
        target_masks=(build_mask(grid, config.boxes["target1"]),
                      build_mask(grid, config.boxes["target2"])),
        alpha=config.alpha,
        mu=config.mu,
        targets=(_eval_spacetime(config, "zeta1"), _eval_spacetime(config, "zeta2")),
        w0=_eval_spatial(config, "u0"),
        ubar0=_eval_spatial(config, "ubar0"),
    )


def build_leader_field(config: RunConfig) -> SpaceTimeField:
    return _eval_spacetime(config, "f")


def build_carleman(config: RunConfig, spec=None):
    center = config.omega0_center
    kwargs = dict(lam=config.lam, s=config.s,
                  center=center if config.grid.dim == 2 else center[0])
    if config.case == "distinct":
        c2 = config.omega0_center2
        kwargs["center2"] = c2 if config.grid.dim == 2 else c2[0]
        if config.otilde_window is not None:
            kwargs["window"] = config.otilde_window if config.grid.dim == 2 else config.otilde_window[0]
    return build_carleman_weights(config.grid, config.case, spec=spec, **kwargs)


def build_nonlinearity(config: RunConfig) -> Nonlinearity:
    kind = config.nonlinearity_kind
    if kind == "zero":
        return preset_zero()
    if kind == "tanh":
        return preset_tanh(config.nonlinearity_params["c"])
    if kind == "grad-tanh":
        return preset_grad_tanh(config.nonlinearity_params["c"], config.nonlinearity_params["c2"])
    if kind == "expr":
        return from_expression(config.nonlinearity_params["expr"],
                               config.nonlinearity_params["bound"], dim=config.grid.dim)
    raise ConfigError(f"unknown nonlinearity preset {kind!r}")
