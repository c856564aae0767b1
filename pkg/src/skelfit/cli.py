"""Batch CLI: solve, audit, ablate, bench and synth subcommands.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure
threshold exceeded. Artifacts under --out are byte-deterministic for fixed
inputs and seed except timing*.csv, which carry wall-clock measurements.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from skelfit import audit, fileio, synthgen
from skelfit.fileio import DataError
from skelfit.framesolver import SolverConfig, solve_trial
from skelfit.kinmodel import FullState, KinematicModel
from skelfit.presolve import PresolveConfig, make_presolve_fn
from skelfit.proxy import Composite, Identity, ProxyMap, Selection, make_spine_maps

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3


def build_proxy(model: KinematicModel, doc: dict | None) -> ProxyMap:
    """Proxy map from a config document; identity over y when absent."""
    if not doc or doc.get("variant", "identity") == "identity":
        return Identity(model.n_y)
    variant = doc["variant"]
    if variant == "selection":
        active = np.asarray(doc["active"], dtype=int)
        frozen = np.asarray(doc.get("frozen", model.default_state()), dtype=float)
        return Selection(active_indices=active, frozen_values=frozen)
    if variant == "spine":
        chain = np.asarray(doc["chain"], dtype=int)
        spine = make_spine_maps(
            chain,
            doc.get("mode", "poly"),
            degree=int(doc.get("degree", 2)),
            segment_count=int(doc.get("segment_count", 3)),
        )
        rest = np.setdiff1d(np.arange(model.n_y), chain)
        return Composite(((rest, Identity(rest.size)), (chain, spine)), model.n_y)
    raise DataError(f"unknown proxy variant {variant!r}")


# ---------------------------------------------------------------------------
# Spine ablation battery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationArm:
    mode: str
    n_p: int
    mean_rmse_mm: float
    median_temporal_roughness: float
    median_spatial_roughness: float
    total_time_ms: float
    p50_time_ms: float


def _spine_truth(spec, model, n_spine):
    """Coordinated ground truth: chain angles follow a slowly varying
    quadratic-in-arclength profile; the root drifts gently."""
    rng = np.random.default_rng(spec.seed + 1)
    xi = np.linspace(0.0, 1.0, n_spine)
    amps = rng.uniform(0.5, 1.0, size=3) * np.array([0.06, 0.22, 0.18])
    freqs = rng.uniform(0.2, 0.45, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    root_amp = rng.uniform(0.01, 0.02, size=3)
    states = []
    for t in range(spec.n_frames):
        ti = t * spec.dt
        c = amps * np.sin(2 * np.pi * freqs * ti + phases)
        y = model.default_state()
        y[0:3] = root_amp * np.sin(2 * np.pi * 0.3 * ti + np.arange(3))
        y[model.n_q - n_spine: model.n_q] = c[0] + c[1] * xi + c[2] * xi**2
        states.append(FullState.from_vector(model, y))
    return states


def run_spine_ablation(n_spine: int = 12, n_frames: int = 150, noise_sigma_mm: float = 2.0,
                       seed: int = 0, solver: SolverConfig | None = None):
    """Solve the same sparse-marker spine sequence in poly, nopoly and
    classical configurations; returns a list of AblationArm plus the truth
    chain history for reference."""
    solver = solver or SolverConfig(max_iters=30)
    marker_bodies = (0,) + tuple(range(3, n_spine + 1, 3))
    spec = synthgen.SynthSpec(
        topology="spine", body_count=n_spine + 1, markers_per_body=3,
        marker_bodies=marker_bodies, noise_sigma_mm=noise_sigma_mm,
        n_frames=n_frames, with_scale_slots=False, seed=seed,
    )
    model = synthgen.build_model(spec)
    states = _spine_truth(spec, model, n_spine)
    observations = synthgen.observe_states(spec, model, states)
    chain = np.arange(model.n_q - n_spine, model.n_q)
    rest = np.setdiff1d(np.arange(model.n_y), chain)

    def composite_with(spine_map):
        return Composite(((rest, Identity(rest.size)), (chain, spine_map)), model.n_y)

    proxies = {
        "poly": composite_with(make_spine_maps(chain, "poly", degree=2)),
        "nopoly": Identity(model.n_y),
        "classical": composite_with(make_spine_maps(chain, "classical", segment_count=3)),
    }
    init = model.default_state()
    arms = []
    histories = {}
    for mode, proxy in proxies.items():
        trial = solve_trial(model, proxy, observations, init, solver)
        hist = np.stack([f.y_est.as_vector()[chain] for f in trial.frames])
        histories[mode] = hist
        times_ms = np.array([f.wall_time_us for f in trial.frames]) / 1000.0
        arms.append(AblationArm(
            mode=mode,
            n_p=proxy.n_p,
            mean_rmse_mm=float(np.mean([f.marker_rmse_mm for f in trial.frames])),
            median_temporal_roughness=float(np.median(audit.temporal_roughness(hist))),
            median_spatial_roughness=float(np.median(audit.spatial_roughness(hist))),
            total_time_ms=float(np.sum(times_ms)),
            p50_time_ms=audit.percentile_nearest_rank(times_ms, 50),
        ))
    truth_hist = np.stack([st.as_vector()[chain] for st in states])
    return arms, histories, truth_hist


def format_ablation_table(arms) -> str:
    rows = [f"{'mode':<10}{'n_p':>5}{'rmse_mm':>10}{'t_rough':>12}{'s_rough':>12}"]
    for a in arms:
        rows.append(
            f"{a.mode:<10}{a.n_p:>5}{a.mean_rmse_mm:>10.4f}"
            f"{a.median_temporal_roughness:>12.3e}{a.median_spatial_roughness:>12.3e}"
        )
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# Throughput battery
# ---------------------------------------------------------------------------

def run_bench_battery(n_frames: int = 300, seed: int = 0, solver: SolverConfig | None = None):
    """Warm-started throughput run on a ~40-pose-DoF branching model."""
    solver = solver or SolverConfig()
    spec = synthgen.SynthSpec(
        topology="tree", body_count=12, markers_per_body=3, n_frames=n_frames,
        noise_sigma_mm=1.0, amp_angular=0.25, freq_hz=(0.2, 0.4), seed=seed,
    )
    model, states, observations = synthgen.generate(spec)
    trial = solve_trial(model, Identity(model.n_y), observations, model.default_state(), solver)
    return audit.throughput_stats(trial.frames), model, trial


# ---------------------------------------------------------------------------
# Subcommand runners
# ---------------------------------------------------------------------------

def _run_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ambiguous:
        spec = synthgen.make_ambiguous_spec(
            args.seed, n_frames=args.frames, noise_sigma_mm=args.noise_mm,
            dropout_rate=args.dropout,
        )
    else:
        spec = synthgen.SynthSpec(
            topology=args.topology, body_count=args.bodies,
            markers_per_body=args.markers_per_body, n_frames=args.frames,
            noise_sigma_mm=args.noise_mm, dropout_rate=args.dropout, seed=args.seed,
        )
    model, states, observations = synthgen.generate(spec)
    times = np.arange(spec.n_frames) * spec.dt
    fileio.save_model(model, out / "model.json")
    fileio.save_markers(observations, times, model, out / "markers.csv")
    fileio.save_states(states, times, out / "truth.csv")
    from dataclasses import asdict
    fileio.save_resolved_config({"synth_spec": asdict(spec)}, out / "spec_resolved.json")
    print(f"wrote model.json, markers.csv, truth.csv to {out}")
    return EXIT_OK


def _run_solve(args) -> int:
    model = fileio.load_model(args.model)
    observations, _times = fileio.load_markers(args.markers, model)
    doc = fileio.load_config(args.config) if args.config else {}
    solver = fileio.solver_config_from_doc(doc.get("solver", {}))
    proxy = build_proxy(model, doc.get("proxy"))
    presolve_doc = doc.get("presolve", {})
    use_presolve = args.presolve or bool(presolve_doc.get("enabled", False))
    presolve_fn = None
    if use_presolve:
        pre_keys = {k: v for k, v in presolve_doc.items() if k != "enabled"}
        presolve_fn = make_presolve_fn(solver, PresolveConfig(**pre_keys))

    init = model.default_state()
    trial = solve_trial(model, proxy, observations, init, solver, presolve_fn=presolve_fn)

    resolved = {
        "mode": "solve",
        "model": str(args.model),
        "markers": str(args.markers),
        "seed": args.seed,
        "presolve": {"enabled": use_presolve, **{k: v for k, v in presolve_doc.items() if k != "enabled"}},
        "proxy": doc.get("proxy", {"variant": "identity"}),
        "solver": fileio.solver_config_to_doc(solver),
    }
    if args.out:
        fileio.write_results(trial, args.out, resolved_config=resolved)
    stats = audit.throughput_stats(trial.frames)
    n_fail = sum(1 for f in trial.frames if f.status == "failed_nonfinite")
    print(f"frames {stats.n_frames}  iters p50/p90 {stats.p50_iterations:.0f}/{stats.p90_iterations:.0f}  "
          f"rmse mean {trial.mean_rmse_mm:.3f} mm  time p50/p90 {stats.p50_time_ms:.3f}/{stats.p90_time_ms:.3f} ms")
    if n_fail / max(len(trial.frames), 1) > args.fail_threshold:
        print(f"solver failures: {n_fail}/{len(trial.frames)} frames non-finite", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _run_audit(args) -> int:
    report, joint_rep, base_rep = audit.run_leakage_battery(
        n_trials=args.trials, noise_sigma_mm=args.noise_mm, n_frames=args.frames,
        base_seed=args.seed,
    )
    table = report.format_table()
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "leakage_table.txt").write_text(table + "\n")
        import csv as _csv
        with (out / "audit_trials.csv").open("w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["trial", "arm", "marker_rmse_mm", "pose_rmse_mm", "scale_mae"])
            for k, (tj, tb) in enumerate(zip(joint_rep.trials, base_rep.trials)):
                w.writerow([k, "joint", f"{tj.marker_rmse_mm:.17g}", f"{tj.pose_rmse_mm:.17g}", f"{tj.scale_mae:.17g}"])
                w.writerow([k, "stagewise", f"{tb.marker_rmse_mm:.17g}", f"{tb.pose_rmse_mm:.17g}", f"{tb.scale_mae:.17g}"])
        fileio.save_resolved_config({
            "mode": "audit", "trials": args.trials, "frames": args.frames,
            "noise_mm": args.noise_mm, "seed": args.seed,
        }, out / "config_resolved.json")
    return EXIT_OK


def _run_ablate(args) -> int:
    arms, _histories, _truth = run_spine_ablation(
        n_spine=args.spine_dofs, n_frames=args.frames, noise_sigma_mm=args.noise_mm,
        seed=args.seed,
    )
    table = format_ablation_table(arms)
    print(table)
    for a in arms:
        print(f"{a.mode}: total {a.total_time_ms:.1f} ms, p50 {a.p50_time_ms:.3f} ms/frame", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_table.txt").write_text(table + "\n")
        import csv as _csv
        with (out / "ablation_timing.csv").open("w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["mode", "total_time_ms", "p50_time_ms"])
            for a in arms:
                w.writerow([a.mode, f"{a.total_time_ms:.3f}", f"{a.p50_time_ms:.3f}"])
        fileio.save_resolved_config({
            "mode": "ablate", "spine_dofs": args.spine_dofs, "frames": args.frames,
            "noise_mm": args.noise_mm, "seed": args.seed,
        }, out / "config_resolved.json")
    return EXIT_OK


def _run_bench(args) -> int:
    stats, model, _trial = run_bench_battery(n_frames=args.frames, seed=args.seed)
    print(f"model: {len(model.bodies)} bodies, n_q={model.n_q}, n_y={model.n_y}, "
          f"markers={model.n_markers}")
    print(f"frames {stats.n_frames}  time p50/p90 {stats.p50_time_ms:.3f}/{stats.p90_time_ms:.3f} ms  "
          f"iters p50/p90 {stats.p50_iterations:.0f}/{stats.p90_iterations:.0f}  fps {stats.fps:.0f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        import csv as _csv
        with (out / "timing_bench.csv").open("w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["n_frames", "p50_time_ms", "p90_time_ms", "p50_iters", "p90_iters", "fps"])
            w.writerow([stats.n_frames, f"{stats.p50_time_ms:.4f}", f"{stats.p90_time_ms:.4f}",
                        f"{stats.p50_iterations:.0f}", f"{stats.p90_iterations:.0f}", f"{stats.fps:.1f}"])
        fileio.save_resolved_config({
            "mode": "bench", "frames": args.frames, "seed": args.seed,
            "n_q": model.n_q, "n_y": model.n_y, "markers": model.n_markers,
        }, out / "config_resolved.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="skelfit", description=__doc__)
    sub = p.add_subparsers(dest="command")

    synth = sub.add_parser("synth", help="generate a synthetic model + trial")
    synth.add_argument("--out", required=True)
    synth.add_argument("--topology", default="chain", choices=sorted(synthgen.TOPOLOGIES))
    synth.add_argument("--bodies", type=int, default=4)
    synth.add_argument("--markers-per-body", type=int, default=3)
    synth.add_argument("--frames", type=int, default=100)
    synth.add_argument("--noise-mm", type=float, default=0.0)
    synth.add_argument("--dropout", type=float, default=0.0)
    synth.add_argument("--ambiguous", action="store_true",
                       help="use the leakage-prone clustered-marker spec")
    synth.add_argument("--seed", type=int, default=0)

    solve = sub.add_parser("solve", help="canonicalize one trial")
    solve.add_argument("--model", required=True)
    solve.add_argument("--markers", required=True)
    solve.add_argument("--config", default=None)
    solve.add_argument("--presolve", action="store_true")
    solve.add_argument("--out", default=None)
    solve.add_argument("--seed", type=int, default=0)
    solve.add_argument("--fail-threshold", type=float, default=0.0,
                       help="max tolerated fraction of non-finite frames")

    aud = sub.add_parser("audit", help="joint vs stage-wise leakage battery")
    aud.add_argument("--trials", type=int, default=30)
    aud.add_argument("--frames", type=int, default=30)
    aud.add_argument("--noise-mm", type=float, default=2.0)
    aud.add_argument("--seed", type=int, default=0)
    aud.add_argument("--out", default=None)

    abl = sub.add_parser("ablate", help="spine poly/nopoly/classical comparison")
    abl.add_argument("--spine-dofs", type=int, default=12)
    abl.add_argument("--frames", type=int, default=150)
    abl.add_argument("--noise-mm", type=float, default=2.0)
    abl.add_argument("--seed", type=int, default=0)
    abl.add_argument("--out", default=None)

    ben = sub.add_parser("bench", help="throughput battery on a ~40-DoF model")
    ben.add_argument("--frames", type=int, default=300)
    ben.add_argument("--seed", type=int, default=0)
    ben.add_argument("--out", default=None)

    return p


_RUNNERS = {
    "synth": _run_synth,
    "solve": _run_solve,
    "audit": _run_audit,
    "ablate": _run_ablate,
    "bench": _run_bench,
}


def cli_dispatch(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    if not argv:
        parser.print_help()
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or EXIT_OK)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return _RUNNERS[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    raise SystemExit(cli_dispatch())


if __name__ == "__main__":
    main()
