"""Run configuration: one commented YAML document describing a full run.

The document has seven sections plus two top-level keys, all required::

    market:    economic constants (see MarketParams)
    grid:      explicit lattice nodes {p_points, r_points}
    chain:     central-bank rate chain {rates, lam, dt, matrix}
    train:     fictitious-play knobs (see TrainConfig, minus its seed)
    init:      time-zero market state (see InitialCondition)
    rollout:   {mode: full-tree | sampled, n_paths}
    evaluate:  {p_grid_points, major_horizon, major_budget}
    output_dir, seed

Loading validates every module's invariants: unknown or duplicate keys are
rejected, missing keys are named, each error message is anchored to a file
line, the lattice must span the admissible state box, the initial common
rate must be a chain state, and the initial shares must total one.  The
training seed is not part of the document: all randomness flows from the
single top-level ``seed``, split per subsystem by :func:`subsystem_seeds`.
"""

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .market import CentralBankChain, MarketParams
from .measures import GridSpec, aggregate_minor_mass
from .trainer import InitialCondition, TrainConfig


class ConfigError(ValueError):
    """A run document failed to load; the message is file- and line-anchored."""

    def __init__(self, source, line, message):
        self.source = str(source)
        self.line = line
        self.message = message
        super().__init__(str(self))

    def __str__(self):
        if self.line is None:
            return f"{self.source}: {self.message}"
        return f"{self.source}:{self.line}: {self.message}"


@dataclass
class RunConfig:
    """A fully validated run document, ready to hand to the subsystems."""

    params: MarketParams
    grid: GridSpec
    chain: CentralBankChain
    train: TrainConfig
    init: InitialCondition
    rollout_mode: str
    rollout_paths: int
    eval_p_grid_points: int
    eval_major_horizon: int
    eval_major_budget: int
    output_dir: str
    seed: int
    raw: dict


def default_profile_path() -> Path:
    """The shipped benchmark profile; running it is the one-command paper run."""
    return Path(str(resources.files("bankmfg") / "profiles" / "default.yaml"))


def subsystem_seeds(root_seed) -> dict:
    """Split one root seed into independent per-subsystem integer seeds."""
    children = np.random.SeedSequence(int(root_seed)).spawn(3)
    names = ("train", "rollout", "evaluate")
    return {name: int(child.generate_state(1, np.uint64)[0])
            for name, child in zip(names, children)}


# ---------------------------------------------------------------------------
# scalar casters: YAML has already typed the values, so these only check


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"expected a number, got {v!r}")
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"expected an integer, got {v!r}")
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError(f"expected true or false, got {v!r}")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError(f"expected a string, got {v!r}")
    return v


def _float_list(v):
    if not isinstance(v, list) or not v:
        raise TypeError(f"expected a nonempty list of numbers, got {v!r}")
    return [_float(x) for x in v]


def _matrix_or_null(v):
    if v is None:
        return None
    if not isinstance(v, list) or not all(isinstance(r, list) for r in v):
        raise TypeError(f"expected null or a list of rows, got {v!r}")
    return [[_float(x) for x in row] for row in v]


_SCHEMA = {
    "market": {
        "kappa_major": _float, "kappa_minor": _float,
        "delta_major": _float, "delta_minor": _float,
        "W": _float, "l_major": _float, "l_minor": _float,
        "gamma": _float, "cost_lin": _float, "cost_fix": _float,
        "horizon_T": _int, "dt": _float,
        "rate_min": _float, "rate_max": _float,
        "prop_min": _float, "prop_max": _float,
    },
    "grid": {"p_points": _float_list, "r_points": _float_list},
    "chain": {"rates": _float_list, "lam": _float, "dt": _float,
              "matrix": _matrix_or_null},
    "train": {
        "outer_n": _int, "inner_m": _int, "batch_b": _int, "width": _int,
        "learning_rate": _float, "action_count": _int, "activation": _str,
        "averaging_mode": _str, "resample_width": _int, "replay_mix": _float,
        "dirichlet_alpha": _float, "replay_capacity": _int,
        "target_mode": _str, "divergence_threshold": _float,
        "checkpoint_every": _int, "keep_snapshots": _bool,
    },
    "init": {"p0": _float, "r0": _float, "r_c": _float,
             "mu_p_lo": _float, "mu_p_hi": _float,
             "mu_r_lo": _float, "mu_r_hi": _float},
    "rollout": {"mode": _str, "n_paths": _int},
    "evaluate": {"p_grid_points": _int, "major_horizon": _int,
                 "major_budget": _int},
    "output_dir": _str,
    "seed": _int,
}


def _line(node):
    return node.start_mark.line + 1


def _mapping_pairs(node, source, what):
    """Key -> (key_node, value_node) with duplicate detection."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(source, _line(node), f"{what} must be a mapping")
    out = {}
    for k_node, v_node in node.value:
        if not isinstance(k_node, yaml.ScalarNode):
            raise ConfigError(source, _line(k_node),
                              f"{what}: keys must be plain scalars")
        key = k_node.value
        if key in out:
            raise ConfigError(source, _line(k_node),
                              f"duplicate key {key!r} in {what}")
        out[key] = (k_node, v_node)
    return out


def _parse_document(path):
    """Compose the YAML node tree and type-check it against the layout."""
    source = Path(path)
    try:
        text = source.read_text()
    except OSError as e:
        raise ConfigError(source, None, f"cannot read config file: {e}")
    loader = yaml.SafeLoader(text)
    try:
        root = loader.get_single_node()
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(source, None if mark is None else mark.line + 1,
                          f"not valid YAML: {e}")
    if root is None:
        raise ConfigError(source, 1, "the config document is empty")

    top = _mapping_pairs(root, source, "the config document")
    values, lines = {}, {}
    for key, (k_node, v_node) in top.items():
        spec = _SCHEMA.get(key)
        if spec is None:
            raise ConfigError(source, _line(k_node), f"unknown key {key!r}")
        if isinstance(spec, dict):
            section = _mapping_pairs(v_node, source, f"section {key!r}")
            lines[key] = _line(k_node)
            values[key] = {}
            for sub, (sk_node, sv_node) in section.items():
                caster = spec.get(sub)
                if caster is None:
                    raise ConfigError(source, _line(sk_node),
                                      f"unknown key '{key}.{sub}'")
                raw = loader.construct_object(sv_node, deep=True)
                try:
                    values[key][sub] = caster(raw)
                except TypeError as e:
                    raise ConfigError(source, _line(sv_node),
                                      f"{key}.{sub}: {e}")
            for sub in spec:
                if sub not in values[key]:
                    raise ConfigError(source, lines[key],
                                      f"missing required key '{key}.{sub}'")
        else:
            raw = loader.construct_object(v_node, deep=True)
            lines[key] = _line(k_node)
            try:
                values[key] = spec(raw)
            except TypeError as e:
                raise ConfigError(source, _line(v_node), f"{key}: {e}")
    for key in _SCHEMA:
        if key not in values:
            what = "section" if isinstance(_SCHEMA[key], dict) else "key"
            raise ConfigError(source, 1, f"missing required {what} {key!r}")
    return source, values, lines


def load_run_config(path) -> RunConfig:
    """Load and fully validate a run document; raise ConfigError otherwise."""
    source, v, lines = _parse_document(path)

    def build(section, ctor, *args, **kw):
        try:
            return ctor(*args, **kw)
        except (ValueError, TypeError) as e:
            raise ConfigError(source, lines[section], f"{section}: {e}")

    params = build("market", MarketParams, **v["market"])
    grid = build("grid", GridSpec, v["grid"]["p_points"], v["grid"]["r_points"])
    chain = build("chain", CentralBankChain, v["chain"]["rates"],
                  lam=v["chain"]["lam"], dt=v["chain"]["dt"],
                  matrix=v["chain"]["matrix"])
    train = build("train", TrainConfig, seed=0, **v["train"])
    init = build("init", InitialCondition, **v["init"])

    def fail(section, message):
        raise ConfigError(source, lines[section], f"{section}: {message}")

    # the lattice is the discretization of the admissible state box; its
    # corners must coincide with the box so no legal state falls outside
    if (abs(grid.p_points[0] - params.prop_min) > 1e-12
            or abs(grid.p_points[-1] - params.prop_max) > 1e-12):
        fail("grid", "p_points must span [prop_min, prop_max] exactly")
    if (abs(grid.r_points[0] - params.rate_min) > 1e-12
            or abs(grid.r_points[-1] - params.rate_max) > 1e-12):
        fail("grid", "r_points must span [rate_min, rate_max] exactly")

    if not 0.0 <= init.p0 <= 1.0:
        fail("init", f"p0 must lie in [0, 1], got {init.p0!r}")
    if not params.rate_min - 1e-12 <= init.r0 <= params.rate_max + 1e-12:
        fail("init", f"r0 {init.r0!r} is outside the admissible rate range")
    try:
        chain.index(init.r_c)
    except ValueError as e:
        fail("init", str(e))
    try:
        mu0 = init.measure(grid)
    except ValueError as e:
        fail("init", str(e))
    total = init.p0 + aggregate_minor_mass(mu0)
    if abs(total - 1.0) > 1e-9:
        fail("init", f"major and minor shares must total 1, got {total!r}")

    if v["rollout"]["mode"] not in ("full-tree", "sampled"):
        fail("rollout", f"mode must be 'full-tree' or 'sampled', "
                        f"got {v['rollout']['mode']!r}")
    if v["rollout"]["n_paths"] < 1:
        fail("rollout", "n_paths must be a positive integer")
    if v["evaluate"]["p_grid_points"] < 2:
        fail("evaluate", "p_grid_points must be at least 2")
    if not 1 <= v["evaluate"]["major_horizon"] <= params.horizon_T:
        fail("evaluate", f"major_horizon must lie in [1, {params.horizon_T}]")
    if v["evaluate"]["major_budget"] < 1:
        fail("evaluate", "major_budget must be a positive integer")
    if not v["output_dir"]:
        raise ConfigError(source, lines["output_dir"],
                          "output_dir must be a nonempty path")
    if v["seed"] < 0:
        raise ConfigError(source, lines["seed"], "seed must be nonnegative")

    return RunConfig(
        params=params, grid=grid, chain=chain, train=train, init=init,
        rollout_mode=v["rollout"]["mode"],
        rollout_paths=v["rollout"]["n_paths"],
        eval_p_grid_points=v["evaluate"]["p_grid_points"],
        eval_major_horizon=v["evaluate"]["major_horizon"],
        eval_major_budget=v["evaluate"]["major_budget"],
        output_dir=v["output_dir"], seed=v["seed"], raw=v,
    )
