"""Command-line front end: bounds, presample, simulate, sweep, replay.

Exit codes: 0 success, 1 argument/config error, 2 runtime failure,
3 acceptance-check failure (``sweep --check``, for CI use).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from scenplan.config import ConfigError, RunConfig, config_hash, load_config
from scenplan.risk import (
    RiskArgumentError,
    SampleSizeCapacityError,
    eps_allocation,
    solve_sample_size,
)
from scenplan.sampling import load_batch, save_batch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3


def cmd_bounds(args) -> int:
    """Sample size for the requested risk point plus the allocation table."""
    try:
        S = solve_sample_size(args.eps, args.beta, args.s_bar, args.discard)
    except (RiskArgumentError, SampleSizeCapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    P = S - args.discard
    print(f"eps={args.eps} beta={args.beta} s_bar={args.s_bar} discard={args.discard}")
    print(f"S = {S}  (P = {P})")
    print(f"resubstitution: eps(s_bar) at S   = {eps_allocation(S, P, args.s_bar, args.beta):.6g}")
    if P - 1 > args.s_bar:
        prev = eps_allocation(S - 1, P - 1, args.s_bar, args.beta)
        print(f"resubstitution: eps(s_bar) at S-1 = {prev:.6g} (> target)")
    print(f"{'s':>4}  {'eps(s)':>12}")
    for s in range(args.s_bar + 1):
        print(f"{s:>4}  {eps_allocation(S, P, s, args.beta):>12.6g}")
    return EXIT_OK


def cmd_presample(args, config: RunConfig) -> int:
    """Generate, prune, and archive one batch per obstacle slot."""
    from scenplan.sim import build_batches

    out = Path(args.out or config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    count = config.sim.pedestrians
    batches = build_batches(config, count)
    chash = config_hash(config)
    for v, batch in enumerate(batches):
        path = out / f"batch_obs{v}.smpb"
        save_batch(path, batch)
        frac = 1.0 - batch.relevant.size / batch.size
        print(
            f"{path}: S={batch.size} relevant={batch.relevant.size} "
            f"pruned={frac:.1%} truncation={batch.truncation.kind}"
        )
        loaded = load_batch(path)
        if loaded.samples.tobytes() != batch.samples.tobytes():
            print("error: archive round-trip mismatch", file=sys.stderr)
            return EXIT_RUNTIME
    print(f"config_hash={chash}")
    return EXIT_OK


def cmd_simulate(args, config: RunConfig) -> int:
    """Run one episode and persist its trace, polytopes, and metrics."""
    from scenplan.sim import run_episode

    out = args.out or config.output.dir
    metrics = run_episode(config, args.seed, out_dir=out)
    print(json.dumps(asdict(metrics), indent=1))
    return EXIT_OK


def cmd_sweep(args, config: RunConfig) -> int:
    """Episodes over pedestrian counts x seeds; writes the summary table."""
    from scenplan.sim import aggregate_sweep, run_sweep

    counts = [int(c) for c in args.pedestrians.split(",")]
    seeds = list(range(config.sim.seed0, config.sim.seed0 + config.sim.seeds))
    out = Path(args.out or config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_sweep(config, counts, seeds, jobs=args.jobs, out_dir=out)
    eps1 = config.risk.eps
    rows = aggregate_sweep(results, eps1)
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash(config)}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(
            f"ped={row['pedestrians']}: max_risk={row['max_collision_prob_stage1']:.3g} "
            f"violations={row['episodes_violating_eps']} collisions={row['collisions']} "
            f"completion={row['completion_mean_s']:.2f}({row['completion_std_s']:.2f})s "
            f"compute={row['planning_ms_mean']:.1f}({row['planning_ms_max']:.1f})ms"
        )
    print(f"summary written to {summary}")
    if args.check:
        bad = []
        for row in rows:
            if row["collisions"] > 0:
                bad.append(f"ped={row['pedestrians']}: physical collisions")
            if row["episodes_violating_eps"] > 0:
                bad.append(f"ped={row['pedestrians']}: risk violations")
            if row["support_violations"] > 0:
                bad.append(f"ped={row['pedestrians']}: support-bound violations")
        if bad:
            for item in bad:
                print(f"CHECK FAILED: {item}", file=sys.stderr)
            return EXIT_CHECK
        print("CHECK PASSED: zero collisions, risk violations, support violations")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Render robot/pedestrian trajectories and polytope frames as SVG."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    trace = Path(args.trace)
    if not trace.exists():
        print(f"error: no trace at {trace}", file=sys.stderr)
        return EXIT_USAGE
    rows, n_peds = _read_trace(trace)
    out = Path(args.out or trace.parent)
    out.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(9, 4))
    xy = np.array([[r["x"], r["y"]] for r in rows])
    ax.plot(xy[:, 0], xy[:, 1], "b-", lw=2, label="robot")
    for i in range(n_peds):
        pxy = np.array([[r[f"ped{i}_x"], r[f"ped{i}_y"]] for r in rows])
        ax.plot(pxy[:, 0], pxy[:, 1], "r-", alpha=0.5, lw=1)
    ax.axhline(0.0, color="gray", ls="--", lw=0.5)
    ax.set_aspect("equal")
    ax.legend(loc="upper right")
    ax.set_title(trace.stem)
    traj_svg = out / f"{trace.stem}_trajectories.svg"
    fig.savefig(traj_svg)
    plt.close(fig)
    print(f"wrote {traj_svg}")

    poly_path = trace.parent / f"{trace.stem}_poly.csv"
    if poly_path.exists():
        frame_svg = out / f"{trace.stem}_polytopes.svg"
        _plot_polytope_frame(poly_path, rows, n_peds, frame_svg, plt)
        print(f"wrote {frame_svg}")
    return EXIT_OK


def _read_trace(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.DictReader(fh)
        rows = []
        for ln, raw in enumerate(reader, start=3):
            try:
                rows.append({k: float(v) for k, v in raw.items()})
            except (TypeError, ValueError) as exc:
                raise SystemExit(f"error: malformed trace {path} line {ln}: {exc}")
    if not rows:
        raise SystemExit(f"error: empty trace {path}")
    n_peds = sum(1 for k in rows[0] if k.endswith("_x") and k.startswith("ped"))
    return rows, n_peds


def _plot_polytope_frame(poly_path, rows, n_peds, out_svg, plt):
    # middle-of-run frame, stages 1/8/15 in warm colors
    with open(poly_path) as fh:
        fh.readline()
        reader = csv.DictReader(fh)
        by_cycle: dict[int, dict[int, str]] = {}
        for raw in reader:
            by_cycle.setdefault(int(raw["cycle"]), {})[int(raw["stage"])] = raw["vertices"]
    cycle = sorted(by_cycle)[len(by_cycle) // 2]
    fig, ax = plt.subplots(figsize=(7, 6))
    row = rows[min(cycle, len(rows) - 1)]
    ax.plot(row["x"], row["y"], "bo", ms=8, label="robot")
    for i in range(n_peds):
        ax.plot(row[f"ped{i}_x"], row[f"ped{i}_y"], "rs", ms=6)
    colors = {1: "tab:red", 8: "tab:orange", 15: "gold"}
    for stage, color in colors.items():
        verts = by_cycle[cycle].get(stage)
        if not verts:
            continue
        pts = np.array([[float(a) for a in v.split(":")] for v in verts.split(";")])
        ring = np.vstack([pts, pts[:1]])
        ax.plot(ring[:, 0], ring[:, 1], "-", color=color, lw=1.5, label=f"stage {stage}")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(f"free space at cycle {cycle}")
    ax.set_xlim(row["x"] - 6, row["x"] + 6)
    ax.set_ylim(row["y"] - 5, row["y"] + 5)
    fig.savefig(out_svg)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenplan",
        description="scenario-based chance-constrained trajectory planning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="compute the sample size for a risk point")
    p.add_argument("--eps", type=float, default=1.0 - 0.9889)
    p.add_argument("--beta", type=float, default=1e-6)
    p.add_argument("--s-bar", dest="s_bar", type=int, default=20)
    p.add_argument("--discard", type=int, default=50)

    for name, help_text in [
        ("presample", "generate and prune per-obstacle sample batches"),
        ("simulate", "run one crossing episode"),
        ("sweep", "run a pedestrian-count x seed sweep"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="YAML config (defaults if omitted)")
        p.add_argument("--out", default=None, help="output directory")
        if name == "simulate":
            p.add_argument("--seed", type=int, default=1)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
            p.add_argument("--pedestrians", default="2,4,6")
            p.add_argument("--seed", type=int, default=None, help="override seed0")
            p.add_argument("--seeds", type=int, default=None, help="override seed count")
            p.add_argument("--check", action="store_true",
                           help="exit 3 unless collisions/violations are all zero")

    p = sub.add_parser("replay", help="render SVG plots from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bounds":
            return cmd_bounds(args)
        if args.command == "replay":
            return cmd_replay(args)
        config = load_config(args.config)
        if args.command == "sweep":
            sim = config.sim
            if args.seed is not None:
                sim = replace(sim, seed0=args.seed)
            if args.seeds is not None:
                sim = replace(sim, seeds=args.seeds)
            config = replace(config, sim=sim)
        if args.command == "presample":
            return cmd_presample(args, config)
        if args.command == "simulate":
            return cmd_simulate(args, config)
        if args.command == "sweep":
            return cmd_sweep(args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit:
        raise
    except Exception as exc:  # runtime failure surface for scripts
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
