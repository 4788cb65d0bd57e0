"""Command line frontend for the certification pipeline.

Subcommands cover the full workflow: `abstract` builds the interval
abstraction, `synthesize` certifies a policy, `simulate` runs a closed-loop
Monte Carlo batch, `sweep` repeats certification and simulation over a
radius schedule, and `export-imdp` writes the explicit abstraction in the
line-oriented text format. Every command reads one YAML config and is
deterministic given (config, seed): reruns produce byte-identical CSV
output except for wall-clock columns. Report commands also render a figure
next to each CSV (value heatmap, closed-loop trajectories, radius elbow).
"""

import argparse
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np

from .abstraction import (
    build_action_set,
    build_imdp,
    estimate_transition_count,
    export_imdp,
)
from .config import (
    load_config,
    make_model,
    sweep_schedule,
    weight_matrices,
    with_seed,
)
from .errors import (
    ConfigError,
    ContractViolation,
    InfeasibleAmbiguitySet,
    LabelAlignmentError,
    NonConvergence,
)
from .factored import build_factored
from .partition import build_partition, cell_center
from .simulation import (
    MAX_EXPLICIT_TRANSITIONS,
    TIMEOUT,
    MpcController,
    VanillaController,
    epsilon_sweep,
    monte_carlo,
    synthesize_for,
)


def _fmt(value):
    """Deterministic CSV cell text; None becomes the empty field."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return format(v, ".10g")
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _draw_regions(ax, model):
    from matplotlib.patches import Rectangle

    gb = model.goal_box
    ax.add_patch(Rectangle(
        (gb.lo[0], gb.lo[1]), gb.hi[0] - gb.lo[0], gb.hi[1] - gb.lo[1],
        fill=False, edgecolor="tab:green", linewidth=1.5, label="goal",
    ))
    for ob in model.unsafe_boxes:
        ax.add_patch(Rectangle(
            (ob.lo[0], ob.lo[1]), ob.hi[0] - ob.lo[0], ob.hi[1] - ob.lo[1],
            fill=True, facecolor="tab:red", alpha=0.3, label="unsafe",
        ))


def _save_heatmap(path, model, partition, v_lo):
    """Certified lower bound over the first two state dimensions."""
    plt = _plt()
    counts = tuple(partition.per_dim_counts)
    grid = np.asarray(v_lo[: partition.num_cells]).reshape(counts)
    note = ""
    if len(counts) > 2:
        # fix the trailing dimensions at the initial state's cell
        from .partition import locate

        idx = np.unravel_index(
            locate(partition, model.initial_state), counts
        )
        for d in range(len(counts) - 1, 1, -1):
            grid = np.take(grid, idx[d], axis=d)
        note = " (slice at initial state)"
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    im = ax.imshow(
        grid.T,
        origin="lower",
        aspect="auto",
        extent=[
            model.state_box.lo[0], model.state_box.hi[0],
            model.state_box.lo[1], model.state_box.hi[1],
        ],
        vmin=0.0, vmax=1.0, cmap="viridis",
    )
    fig.colorbar(im, ax=ax, label="certified lower bound")
    _draw_regions(ax, model)
    ax.plot(*model.initial_state[:2], "w*", markersize=10)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_title(f"{model.name}{note}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _save_trajectories(path, model, episodes, limit=20):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for ep in episodes[:limit]:
        ok = ep.sat is True
        ax.plot(
            ep.states[:, 0], ep.states[:, 1],
            color=("tab:blue" if ok else "tab:orange"),
            alpha=0.6, linewidth=0.9,
        )
    _draw_regions(ax, model)
    ax.plot(*model.initial_state[:2], "k*", markersize=10)
    ax.set_xlim(model.state_box.lo[0], model.state_box.hi[0])
    ax.set_ylim(model.state_box.lo[1], model.state_box.hi[1])
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_title(f"{model.name}: {min(limit, len(episodes))} episodes")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _save_elbow(path, rows):
    """Dual-axis certification/cost trade-off over the ball area."""
    plt = _plt()
    good = [r for r in rows if not r.error]
    fig, ax1 = plt.subplots(figsize=(6.0, 4.5))
    ax2 = ax1.twinx()
    areas = [r.ball_area for r in good]
    ax1.plot(areas, [r.lam for r in good], "o-", color="tab:blue")
    ax2.plot(areas, [r.e_j for r in good], "s--", color="tab:red")
    ax1.set_xlabel("input ball area")
    ax1.set_ylabel("certified lower bound", color="tab:blue")
    ax2.set_ylabel("mean closed-loop cost", color="tab:red")
    ax1.set_ylim(-0.02, 1.02)
    ax1.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _build_spaces(cfg):
    model = make_model(cfg)
    partition = build_partition(model, cfg.partition)
    actions = build_action_set(model, cfg.action_grid, cfg.epsilon)
    return model, partition, actions


def cmd_abstract(cfg, out_dir, args):
    model, partition, actions = _build_spaces(cfg)
    counts = "x".join(str(c) for c in partition.per_dim_counts)
    est = estimate_transition_count(model, partition, actions)
    if est <= MAX_EXPLICIT_TRANSITIONS:
        t0 = time.perf_counter()
        imdp = build_imdp(model, partition, actions)
        t_abs = time.perf_counter() - t0
        path = out_dir / "imdp.txt"
        export_imdp(imdp, path)
        n_trans = int(imdp.row_ptr[-1])
        print(f"{counts} interior cells ({model.name})")
        print(
            f"states {imdp.num_states} actions {imdp.num_actions} "
            f"transitions {n_trans}"
        )
        print(f"t_abs {t_abs:.2f} s")
        print(f"wrote {path}")
        return 0
    t0 = time.perf_counter()
    fimdp = build_factored(model, partition, actions)
    t_abs = time.perf_counter() - t0
    print(f"{counts} interior cells ({model.name})")
    print(
        f"states {fimdp.num_states} actions {fimdp.num_actions} "
        f"(factored: estimated {est:.3g} explicit transitions)"
    )
    print(f"t_abs {t_abs:.2f} s")
    print("explicit transition file skipped at this scale; "
          "use export-imdp on a coarser grid")
    return 0


def cmd_synthesize(cfg, out_dir, args):
    model, partition, actions = _build_spaces(cfg)
    values, policy, kind, t_abs, t_synth = synthesize_for(
        model, partition, actions,
        tol=cfg.synthesis.tol, max_iters=cfg.synthesis.max_iters,
    )
    n_x = model.n_x
    header = (
        ["cell"]
        + [f"center_{d}" for d in range(n_x)]
        + ["v_lo", "v_hi", "action"]
    )
    rows = []
    for i in range(partition.num_cells):
        center = cell_center(partition, i)
        rows.append(
            [i] + [float(c) for c in center]
            + [float(values.v_lo[i]), float(values.v_hi[i]),
               int(policy.action[i])]
        )
    _write_csv(out_dir / "values.csv", header, rows)
    _save_heatmap(out_dir / "heatmap.png", model, partition, values.v_lo)
    print(
        f"lambda {policy.lam:.6f} at the initial state "
        f"({kind} abstraction, {values.iterations} iterations, "
        f"residual {values.residual:.2e})"
    )
    print(f"t_abs {t_abs:.2f} s  t_synth {t_synth:.2f} s")
    print(f"wrote {out_dir / 'values.csv'} and {out_dir / 'heatmap.png'}")
    return 0


_SUMMARY_FIELDS = [
    "lambda", "sat_frequency", "timeout_fraction", "e_j", "e_j_state",
    "e_j_input", "e_j_sat", "mean_fallback", "t_abs", "t_synth",
    "t_mpc_step",
]


def cmd_simulate(cfg, out_dir, args):
    model, partition, actions = _build_spaces(cfg)
    values, policy, kind, t_abs, t_synth = synthesize_for(
        model, partition, actions,
        tol=cfg.synthesis.tol, max_iters=cfg.synthesis.max_iters,
    )
    Q, R = weight_matrices(cfg)
    if args.controller == "vanilla":
        controller = VanillaController(partition, actions, policy, Q, R)
    else:
        controller = MpcController(
            model, partition, actions, policy, Q, R, cfg.mpc.horizon
        )
    sim = cfg.simulation
    summary = monte_carlo(
        model, controller, model.initial_state,
        sim.n_runs, sim.base_seed, sim.max_steps,
    )
    n_u = model.n_u
    header = (
        ["controller", "kind"]
        + [f"eps_{d}" for d in range(n_u)]
        + ["ball_area"] + _SUMMARY_FIELDS
    )
    area = float(np.prod([2.0 * e for e in cfg.epsilon]))
    row = (
        [args.controller, kind]
        + list(cfg.epsilon)
        + [area, policy.lam, summary.sat_frequency,
           summary.timeout_fraction, summary.mean_j_total,
           summary.mean_j_state, summary.mean_j_input,
           summary.mean_j_total_sat, summary.mean_fallback,
           t_abs, t_synth, summary.t_mpc_step]
    )
    _write_csv(out_dir / "summary.csv", header, [row])
    ep_rows = [
        [e, ep.steps, int(ep.sat is True), int(ep.sat == TIMEOUT),
         ep.fallback_count, ep.j_state, ep.j_input, ep.j_total]
        for e, ep in enumerate(summary.episodes)
    ]
    _write_csv(
        out_dir / "episodes.csv",
        ["episode", "steps", "sat", "timeout", "fallbacks",
         "j_state", "j_input", "j_total"],
        ep_rows,
    )
    _save_trajectories(
        out_dir / "trajectories.png", model, summary.episodes
    )
    step_ms = (
        f"{1e3 * summary.t_mpc_step:.1f} ms" if summary.t_mpc_step else "-"
    )
    print(
        f"{args.controller} on {model.name}: lambda {policy.lam:.4f}  "
        f"sat {summary.sat_frequency:.2f}  E[J] {summary.mean_j_total:.2f}  "
        f"t_mpc_step {step_ms}"
    )
    print(f"wrote {out_dir / 'summary.csv'}, {out_dir / 'episodes.csv'}, "
          f"{out_dir / 'trajectories.png'}")
    return 0


def cmd_sweep(cfg, out_dir, args):
    model = make_model(cfg)
    Q, R = weight_matrices(cfg)
    mpc_cfg = {"Q": Q, "R": R, "horizon": cfg.mpc.horizon}
    sim = cfg.simulation
    rows = epsilon_sweep(
        model, cfg.partition, cfg.action_grid, sweep_schedule(cfg),
        mpc_cfg, sim.n_runs, sim.base_seed, sim.max_steps,
        controller=args.controller,
    )
    n_u = model.n_u
    header = (
        [f"eps_{d}" for d in range(n_u)]
        + ["ball_area"] + _SUMMARY_FIELDS + ["kind", "error"]
    )
    out_rows = []
    for r in rows:
        out_rows.append(
            list(r.epsilon)
            + [r.ball_area, r.lam, r.sat_frequency, r.timeout_fraction,
               r.e_j, r.e_j_state, r.e_j_input, r.e_j_sat,
               r.mean_fallback, r.t_abs, r.t_synth, r.t_mpc_step,
               r.kind, r.error]
        )
    _write_csv(out_dir / "sweep.csv", header, out_rows)
    elbow_rows = [
        [r.ball_area, r.lam, r.e_j] for r in rows if not r.error
    ]
    _write_csv(
        out_dir / "elbow.csv", ["ball_area", "lambda", "e_j"], elbow_rows
    )
    _save_elbow(out_dir / "elbow.png", rows)
    for r in rows:
        eps = ",".join(f"{e:g}" for e in r.epsilon)
        if r.error:
            print(f"eps=({eps}) failed: {r.error}")
        else:
            print(
                f"eps=({eps}) lambda {r.lam:.4f}  sat "
                f"{r.sat_frequency:.2f}  E[J] {r.e_j:.2f}  "
                f"t_abs {r.t_abs:.1f} s"
            )
    print(f"wrote {out_dir / 'sweep.csv'}, {out_dir / 'elbow.csv'}, "
          f"{out_dir / 'elbow.png'}")
    return 0


def cmd_export_imdp(cfg, out_dir, args):
    model, partition, actions = _build_spaces(cfg)
    est = estimate_transition_count(model, partition, actions)
    if est > MAX_EXPLICIT_TRANSITIONS:
        print(
            f"error: estimated {est:.3g} transitions exceeds the explicit "
            f"budget {MAX_EXPLICIT_TRANSITIONS:.3g}; this config is "
            f"factored-scale and has no explicit transition file",
            file=sys.stderr,
        )
        return 1
    t0 = time.perf_counter()
    imdp = build_imdp(model, partition, actions)
    t_abs = time.perf_counter() - t0
    path = out_dir / "imdp.txt"
    export_imdp(imdp, path)
    print(
        f"states {imdp.num_states} actions {imdp.num_actions} "
        f"transitions {int(imdp.row_ptr[-1])} t_abs {t_abs:.2f} s"
    )
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "abstract": cmd_abstract,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "export-imdp": cmd_export_imdp,
}


def _add_common(sp):
    sp.add_argument(
        "--config", required=True, metavar="PATH",
        help="benchmark config file (YAML)",
    )
    sp.add_argument(
        "--out", default=None, metavar="DIR",
        help="output directory (default: output_dir from the config)",
    )
    sp.add_argument(
        "--seed", type=int, default=None, metavar="U64",
        help="override the config base_seed",
    )
    sp.add_argument(
        "--threads", type=int, default=None, metavar="N",
        help="compiled-kernel thread count",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="setmpc",
        description="interval abstraction, certified synthesis, and "
                    "set-constrained MPC for stochastic systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "abstract": "build the interval abstraction and report its size",
        "synthesize": "certify a policy and write the value heatmap",
        "simulate": "closed-loop Monte Carlo batch with one controller",
        "sweep": "certify and simulate over a radius schedule",
        "export-imdp": "write the explicit abstraction as text",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        _add_common(sp)
        if name in ("simulate", "sweep"):
            sp.add_argument(
                "--controller", choices=["vanilla", "mpc"], default="mpc",
                help="closed-loop controller (default: mpc)",
            )
    return parser


def _set_threads(n):
    import numba

    limit = int(numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(max(1, min(int(n), limit)))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.threads is not None:
        _set_threads(args.threads)
    out_dir = Path(args.out if args.out is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out_dir, args)
    except NonConvergence as exc:
        print(
            f"error: value iteration stalled at residual "
            f"{exc.residual:.3e} after {exc.iterations} iterations",
            file=sys.stderr,
        )
        return 1
    except (ContractViolation, InfeasibleAmbiguitySet,
            LabelAlignmentError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
