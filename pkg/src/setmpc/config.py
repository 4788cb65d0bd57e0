"""Benchmark configuration files.

One YAML file per benchmark carries everything a run needs: the model
selector and its parameter overrides, partition and action grid sizes, the
input ball radii, the reach-avoid boxes, cost weights, and the simulation
batch settings. Parsing is strict: unknown or duplicate keys are rejected
with the offending line number, and every cross reference (dimension
counts, box shapes, weight matrix sizes) is checked against the selected
model before a config is accepted.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from .dynamics import Box, MODEL_FACTORIES
from .errors import ConfigError
from .imdp_synthesis import VI_MAX_ITERS, VI_TOL


@dataclass(frozen=True)
class SynthesisConfig:
    tol: float = VI_TOL
    max_iters: int = VI_MAX_ITERS


@dataclass(frozen=True)
class MpcConfig:
    """Receding-horizon settings; Q and R are stored as full matrices."""

    horizon: int
    Q: tuple
    R: tuple


@dataclass(frozen=True)
class SimulationConfig:
    n_runs: int
    base_seed: int
    max_steps: int


@dataclass(frozen=True)
class BenchmarkConfig:
    """Validated run description; all list-like fields are tuples.

    goal and obstacles are optional box overrides ((lo, hi) vertex pairs);
    None keeps the selected model's own regions. sweep_epsilons is the
    radius schedule for sweep runs, None meaning just the single epsilon.
    """

    model: str
    partition: tuple
    action_grid: tuple
    epsilon: tuple
    initial_state: tuple
    mpc: MpcConfig
    simulation: SimulationConfig
    output_dir: str
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    model_params: dict = field(default_factory=dict)
    goal: tuple = None
    obstacles: tuple = None
    sweep_epsilons: tuple = None


_TOP_KEYS = {
    "model", "model_params", "partition", "action_grid", "epsilon",
    "initial_state", "goal", "obstacles", "synthesis", "mpc", "simulation",
    "sweep_epsilons", "output_dir",
}
_REQUIRED = {
    "model", "partition", "action_grid", "epsilon", "initial_state",
    "mpc", "simulation", "output_dir",
}
_SECTION_KEYS = {
    "synthesis": {"tol", "max_iters"},
    "mpc": {"horizon", "Q", "R"},
    "simulation": {"n_runs", "base_seed", "max_steps"},
}


def _construct(node):
    return yaml.constructor.SafeConstructor().construct_object(node, deep=True)


def _mapping_items(node, source, where):
    """Key -> (value node, line) for a mapping node, rejecting duplicates."""
    if not isinstance(node, yaml.MappingNode):
        line = node.start_mark.line + 1
        raise ConfigError(f"{source}:{line}: expected a mapping for {where}")
    items = {}
    for key_node, val_node in node.value:
        line = key_node.start_mark.line + 1
        key = key_node.value
        if not isinstance(key, str):
            raise ConfigError(f"{source}:{line}: non-string key in {where}")
        if key in items:
            raise ConfigError(f"{source}:{line}: duplicate key '{key}'")
        items[key] = (val_node, line)
    return items


def _check_keys(items, allowed, source, where):
    for key, (_, line) in items.items():
        if key not in allowed:
            raise ConfigError(f"{source}:{line}: unknown key '{key}' in {where}")


def _float_list(value, n, what, source, line):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}:{line}: {what} must be numeric") from None
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(
            f"{source}:{line}: {what} must have {n} entries, got shape "
            f"{arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{source}:{line}: {what} must be finite")
    return tuple(float(v) for v in arr)


def _int_list(value, n, what, source, line):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(f"{source}:{line}: {what} must list {n} integers")
    out = []
    for v in value:
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(
                f"{source}:{line}: {what} entries must be positive integers"
            )
        out.append(int(v))
    return tuple(out)


def _weight(value, n, what, source, line):
    """Accept a scalar, a diagonal list, or a full matrix; return a tuple
    of row tuples."""
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}:{line}: {what} must be numeric") from None
    if arr.ndim == 0:
        arr = float(arr) * np.eye(n)
    elif arr.ndim == 1:
        if arr.shape != (n,):
            raise ConfigError(
                f"{source}:{line}: diagonal {what} must have {n} entries"
            )
        arr = np.diag(arr)
    elif arr.shape != (n, n):
        raise ConfigError(f"{source}:{line}: {what} must be {n}x{n}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{source}:{line}: {what} must be finite")
    return tuple(tuple(float(v) for v in row) for row in arr)


def _box_pair(value, n, what, source, line):
    arr = None
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        pass
    if arr is None or arr.shape != (2, n):
        raise ConfigError(
            f"{source}:{line}: {what} must be [[lo...], [hi...]] with "
            f"{n} entries each"
        )
    if np.any(arr[0] > arr[1]):
        raise ConfigError(f"{source}:{line}: {what} has lo > hi")
    return tuple(float(v) for v in arr[0]), tuple(float(v) for v in arr[1])


def _get_scalar(items, key, kinds, what, source, default=None, required=True):
    if key not in items:
        if required:
            raise ConfigError(f"{source}: missing required key '{key}'")
        return default, None
    node, line = items[key]
    value = _construct(node)
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise ConfigError(f"{source}:{line}: {key} must be {what}")
    return value, line


def parse_config(text, source="<config>"):
    """Parse and validate a YAML benchmark config."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML ({exc})") from None
    if root is None:
        raise ConfigError(f"{source}: empty config")
    items = _mapping_items(root, source, "the config")
    _check_keys(items, _TOP_KEYS, source, "the config")
    for key in sorted(_REQUIRED - set(items)):
        raise ConfigError(f"{source}: missing required key '{key}'")

    name, line = _get_scalar(items, "model", str, "a string", source)
    if name not in MODEL_FACTORIES:
        known = ", ".join(sorted(MODEL_FACTORIES))
        raise ConfigError(
            f"{source}:{line}: unknown model '{name}' (known: {known})"
        )
    base = MODEL_FACTORIES[name]()
    n_x, n_u = base.n_x, base.n_u

    params = {}
    if "model_params" in items:
        node, line = items["model_params"]
        sub = _mapping_items(node, source, "model_params")
        for key, (vn, vline) in sub.items():
            if key not in base.params:
                raise ConfigError(
                    f"{source}:{vline}: unknown model parameter '{key}' "
                    f"for {name}"
                )
            value = _construct(vn)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(
                    f"{source}:{vline}: model parameter '{key}' must be "
                    f"numeric"
                )
            params[key] = float(value)

    node, line = items["partition"]
    partition = _int_list(_construct(node), n_x, "partition", source, line)
    node, line = items["action_grid"]
    action_grid = _int_list(_construct(node), n_u, "action_grid", source, line)

    node, line = items["epsilon"]
    epsilon = _float_list(_construct(node), n_u, "epsilon", source, line)
    if any(e < 0 for e in epsilon):
        raise ConfigError(f"{source}:{line}: epsilon must be nonnegative")

    node, line = items["initial_state"]
    initial_state = _float_list(
        _construct(node), n_x, "initial_state", source, line
    )

    goal = None
    if "goal" in items and not _is_null(items["goal"][0]):
        node, line = items["goal"]
        goal = _box_pair(_construct(node), n_x, "goal", source, line)

    obstacles = None
    if "obstacles" in items and not _is_null(items["obstacles"][0]):
        node, line = items["obstacles"]
        value = _construct(node)
        if not isinstance(value, list):
            raise ConfigError(f"{source}:{line}: obstacles must be a list")
        obstacles = tuple(
            _box_pair(b, n_x, f"obstacles[{i}]", source, line)
            for i, b in enumerate(value)
        )

    synthesis = SynthesisConfig()
    if "synthesis" in items:
        sub = _mapping_items(items["synthesis"][0], source, "synthesis")
        _check_keys(sub, _SECTION_KEYS["synthesis"], source, "synthesis")
        tol, tline = _get_scalar(
            sub, "tol", (int, float), "a number", source,
            default=VI_TOL, required=False,
        )
        if tol <= 0:
            raise ConfigError(f"{source}:{tline}: tol must be positive")
        max_iters, mline = _get_scalar(
            sub, "max_iters", int, "an integer", source,
            default=VI_MAX_ITERS, required=False,
        )
        if max_iters < 1:
            raise ConfigError(f"{source}:{mline}: max_iters must be >= 1")
        synthesis = SynthesisConfig(tol=float(tol), max_iters=int(max_iters))

    sub = _mapping_items(items["mpc"][0], source, "mpc")
    _check_keys(sub, _SECTION_KEYS["mpc"], source, "mpc")
    horizon, hline = _get_scalar(sub, "horizon", int, "an integer", source)
    if horizon < 1:
        raise ConfigError(f"{source}:{hline}: horizon must be >= 1")
    if "Q" not in sub:
        raise ConfigError(f"{source}: missing required key 'Q'")
    node, line = sub["Q"]
    q_mat = _weight(_construct(node), n_x, "Q", source, line)
    if "R" not in sub:
        raise ConfigError(f"{source}: missing required key 'R'")
    node, line = sub["R"]
    r_mat = _weight(_construct(node), n_u, "R", source, line)

    sub = _mapping_items(items["simulation"][0], source, "simulation")
    _check_keys(sub, _SECTION_KEYS["simulation"], source, "simulation")
    n_runs, rline = _get_scalar(sub, "n_runs", int, "an integer", source)
    if n_runs < 1:
        raise ConfigError(f"{source}:{rline}: n_runs must be >= 1")
    base_seed, sline = _get_scalar(
        sub, "base_seed", int, "an integer", source, default=0, required=False
    )
    if not 0 <= base_seed < 2 ** 64:
        raise ConfigError(f"{source}:{sline}: base_seed must fit in u64")
    max_steps, mline = _get_scalar(
        sub, "max_steps", int, "an integer", source, default=150,
        required=False,
    )
    if max_steps < 1:
        raise ConfigError(f"{source}:{mline}: max_steps must be >= 1")

    sweep = None
    if "sweep_epsilons" in items and not _is_null(items["sweep_epsilons"][0]):
        node, line = items["sweep_epsilons"]
        value = _construct(node)
        if not isinstance(value, list) or not value:
            raise ConfigError(
                f"{source}:{line}: sweep_epsilons must be a nonempty list"
            )
        sweep = []
        for i, entry in enumerate(value):
            vec = _float_list(
                entry, n_u, f"sweep_epsilons[{i}]", source, line
            )
            if any(e < 0 for e in vec):
                raise ConfigError(
                    f"{source}:{line}: sweep_epsilons[{i}] must be "
                    f"nonnegative"
                )
            sweep.append(vec)
        sweep = tuple(sweep)

    out_dir, _ = _get_scalar(items, "output_dir", str, "a string", source)

    return BenchmarkConfig(
        model=name,
        partition=partition,
        action_grid=action_grid,
        epsilon=epsilon,
        initial_state=initial_state,
        mpc=MpcConfig(horizon=int(horizon), Q=q_mat, R=r_mat),
        simulation=SimulationConfig(
            n_runs=int(n_runs), base_seed=int(base_seed),
            max_steps=int(max_steps),
        ),
        output_dir=out_dir,
        synthesis=synthesis,
        model_params=params,
        goal=goal,
        obstacles=obstacles,
        sweep_epsilons=sweep,
    )


def _is_null(node):
    return isinstance(node, yaml.ScalarNode) and node.tag.endswith(":null")


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, source=str(path))


def config_to_dict(cfg):
    """Canonical plain-type form; omitted optionals stay omitted."""
    out = {
        "model": cfg.model,
        "partition": list(cfg.partition),
        "action_grid": list(cfg.action_grid),
        "epsilon": list(cfg.epsilon),
        "initial_state": list(cfg.initial_state),
        "synthesis": {
            "tol": cfg.synthesis.tol,
            "max_iters": cfg.synthesis.max_iters,
        },
        "mpc": {
            "horizon": cfg.mpc.horizon,
            "Q": [list(row) for row in cfg.mpc.Q],
            "R": [list(row) for row in cfg.mpc.R],
        },
        "simulation": {
            "n_runs": cfg.simulation.n_runs,
            "base_seed": cfg.simulation.base_seed,
            "max_steps": cfg.simulation.max_steps,
        },
        "output_dir": cfg.output_dir,
    }
    if cfg.model_params:
        out["model_params"] = dict(cfg.model_params)
    if cfg.goal is not None:
        out["goal"] = [list(cfg.goal[0]), list(cfg.goal[1])]
    if cfg.obstacles is not None:
        out["obstacles"] = [[list(lo), list(hi)] for lo, hi in cfg.obstacles]
    if cfg.sweep_epsilons is not None:
        out["sweep_epsilons"] = [list(e) for e in cfg.sweep_epsilons]
    return out


def dump_config(cfg):
    """Serialize to canonical YAML; parse(dump(cfg)) == cfg."""
    return yaml.safe_dump(
        config_to_dict(cfg), sort_keys=True, default_flow_style=None
    )


def make_model(cfg):
    """Instantiate the configured system model with all overrides applied."""
    factory = MODEL_FACTORIES[cfg.model]
    base = factory()
    overrides = {"initial_state": list(cfg.initial_state)}
    if cfg.model_params:
        overrides["params"] = {**base.params, **cfg.model_params}
    if cfg.goal is not None:
        overrides["goal_box"] = Box(list(cfg.goal[0]), list(cfg.goal[1]))
    if cfg.obstacles is not None:
        overrides["unsafe_boxes"] = tuple(
            Box(list(lo), list(hi)) for lo, hi in cfg.obstacles
        )
    return factory(**overrides)


def weight_matrices(cfg):
    """(Q, R) as float arrays."""
    return (
        np.asarray(cfg.mpc.Q, dtype=float),
        np.asarray(cfg.mpc.R, dtype=float),
    )


def with_seed(cfg, base_seed):
    """Copy of cfg with the simulation base seed replaced."""
    if not 0 <= int(base_seed) < 2 ** 64:
        raise ConfigError("base_seed must fit in u64")
    sim = dataclasses.replace(cfg.simulation, base_seed=int(base_seed))
    return dataclasses.replace(cfg, simulation=sim)


def sweep_schedule(cfg):
    """Radius list a sweep runs over; falls back to the single epsilon."""
    if cfg.sweep_epsilons is not None:
        return [tuple(e) for e in cfg.sweep_epsilons]
    return [tuple(cfg.epsilon)]
