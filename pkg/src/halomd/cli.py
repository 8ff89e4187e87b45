"""
Command-line entry point.

    halomd train       [--config C] [--seed S] [--out DIR]
    halomd run         [--config C] [--workers N] [--scheme S] [--ranks N]
    halomd validate-dd [--config C] [--workers N] [--scheme S] [--ranks 1,2,4]
    halomd sweep       [--config C] [--workers N] [--scheme S] [--ranks 1,2,4,8]
    halomd fit-scaling POINTS.csv [--out DIR]
    halomd gyrate      TRAJECTORY.xyz (--group IDS | --species S) [--out DIR]

Every command writes its artifacts atomically into `--out` together with a
`manifest.json`. Exit codes: 0 when every check passed, 1 when a check
failed or the computation broke down, 2 for unusable input.
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .analysis import (
    STRONG,
    WEAK,
    WEAK_EFFICIENCY_DEFINITION,
    beta_for_efficiency,
    efficiency_table,
    fit_throughput,
    gyration_radii,
    load_correlation,
    load_imbalance,
    model_efficiency,
    read_points,
    scaling_efficiency,
    stability_check,
)
from .config import RunConfig, RunManifest, load_config
from .decomp import dd_evaluate
from .deeppot import DPModel, describe, evaluate_dp
from .engine import (
    CLASSICAL,
    DP_DD,
    SECONDS_PER_DAY,
    ClassicalProvider,
    DDProvider,
    MDConfig,
    build_providers,
    equilibrate,
    run_md,
)
from .exceptions import ConfigError, GeometryError, HaloMDError, ParseError, TrainingDivergedError
from .modelfile import load_model, save_model
from .neighbor import FULL, build_neighbor_list
from .system import (
    AtomSet,
    SimBox,
    assign_velocities,
    iter_xyz,
    lattice_init,
    random_configuration,
    read_xyz_frame,
    replicate,
    write_trajectory,
)
from .trace import export_chrome_trace
from .training import TrainingSet, oracle_dataset, train
from .util import PathLike, atomic_write_text, make_rng

logger = logging.getLogger(__name__)

CROSS_SCHEME = "cross_scheme"
# relative errors are taken against max(|reference|, 1)
ERROR_FLOOR = 1.0


def write_csv(df: pd.DataFrame, path: PathLike) -> Path:
    """Atomically write a table as CSV"""
    return atomic_write_text(path, df.to_csv(index=False))


def write_json(obj: dict, path: PathLike) -> Path:
    """Atomically write a JSON document"""
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _manifest(command: str, cfg: RunConfig, out: Path, config_path: Optional[str]) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(command, config_path, cfg.to_dict(), cfg.seed, str(out))


def initial_system(cfg: RunConfig) -> Tuple[SimBox, AtomSet]:
    """The configured starting configuration, without velocities"""
    if cfg.system.xyz is not None:
        return read_xyz_frame(cfg.system.xyz)
    return lattice_init(cfg.system.n_per_axis, cfg.system.density, cfg.system.species_pattern)


def model_from_config(cfg: RunConfig) -> DPModel:
    """The trained model named by `model.path`, else a freshly initialized one"""
    if cfg.model.path is not None:
        return load_model(cfg.model.path)
    logger.warning("no model.path given; using an untrained model")
    return DPModel.initialize(cfg.model.dp_config(cfg.seed))


def cmd_train(cfg: RunConfig, out: Path, config_path: Optional[str] = None) -> RunManifest:
    """Train on classical-oracle frames; writes model.hmdp and curve.csv"""
    manifest = _manifest("train", cfg, out, config_path)
    box, atoms = initial_system(cfg)
    t = cfg.train
    frames = oracle_dataset(
        box, atoms, cfg.lj.params(), t.n_frames, t.stride, cfg.md.dt, t.temperature, cfg.seed
    )
    data = TrainingSet.split(frames, t.valid_fraction, cfg.seed)
    if cfg.model.path is not None:
        model = load_model(cfg.model.path)
    else:
        model = DPModel.initialize(cfg.model.dp_config(cfg.seed))
    logger.info("training %s", describe(model))
    try:
        model, curve = train(model, data, t.training_params(cfg.seed))
    except TrainingDivergedError as ex:
        logger.error("%s; keeping the last finite model", ex)
        model, curve = ex.checkpoint, ex.curve
        manifest.passed = False
    save_model(out / "model.hmdp", model)
    manifest.add(out / "model.hmdp")
    manifest.add(write_csv(curve, out / "curve.csv"))
    return manifest


def cmd_run(cfg: RunConfig, out: Path, config_path: Optional[str] = None) -> RunManifest:
    """
    Equilibrate classically, then run MD with the configured potential.
    Writes trajectory.xyz, energies.csv, summary.json, trace.json,
    phases.csv and ledger.csv.
    """
    manifest = _manifest("run", cfg, out, config_path)
    rng = make_rng(cfg.seed)
    box, atoms = initial_system(cfg)
    atoms = assign_velocities(atoms, cfg.system.temperature, rng)
    lj = cfg.lj.params()
    if cfg.system.equilibrate_steps:
        atoms = equilibrate(
            box, atoms, [ClassicalProvider(lj)], cfg.system.temperature, cfg.system.equilibrate_steps, cfg.md.dt
        )
    md = cfg.md.md_config(cfg.seed, cfg.system.nn_species)
    model = None if md.potential == CLASSICAL else model_from_config(cfg)
    try:
        providers = build_providers(md, lj, model)
    except ValueError as ex:
        raise ConfigError(str(ex)) from ex
    result = run_md(box, atoms, md, providers)

    manifest.add(write_trajectory(out / "trajectory.xyz", result.frames, box))
    manifest.add(write_csv(result.energies, out / "energies.csv"))
    manifest.add(write_json(result.summary.to_dict(), out / "summary.json"))
    export_chrome_trace(result.trace, out / "trace.json")
    manifest.add(out / "trace.json")
    manifest.add(write_csv(result.trace.to_frame(), out / "phases.csv"))
    manifest.add(write_csv(result.ledger.to_frame(), out / "ledger.csv"))
    return manifest


def _relative(delta: float, reference: float) -> float:
    return delta / max(reference, ERROR_FLOOR)


def validate_dd(cfg: RunConfig, model: DPModel) -> pd.DataFrame:
    """
    Compare decomposed against single-domain evaluation on random
    configurations; one row per (configuration, scheme, rank count), plus
    cross-scheme rows when both schemes run.
    """
    v = cfg.validate
    rng = make_rng(cfg.seed)
    box = SimBox.cubic(v.box_length)
    rows: List[tuple] = []
    for c in range(v.n_configs):
        n = int(rng.integers(v.min_atoms, v.max_atoms + 1))
        atoms = random_configuration(n, box, rng, model.config.n_types, v.min_separation)
        ref = evaluate_dp(atoms, build_neighbor_list(atoms, box, model.rc, FULL), model)
        f_scale = float(np.max(np.abs(ref.forces))) if n else 0.0
        forces: Dict[Tuple[str, int], np.ndarray] = {}
        for scheme in v.schemes:
            for n_ranks in v.ranks:
                res = dd_evaluate(atoms, box, model, n_ranks, scheme, cfg.md.workers)
                forces[scheme, n_ranks] = res.forces
                e_err = _relative(abs(res.energy - ref.energy), abs(ref.energy))
                f_err = _relative(float(np.max(np.abs(res.forces - ref.forces))), f_scale)
                passed = e_err <= v.energy_tol and f_err <= v.force_tol
                rows.append((c, n, scheme, n_ranks, "x".join(map(str, res.grid.dims)), e_err, f_err, passed))
        if len(v.schemes) > 1:
            first, second = v.schemes[0], v.schemes[1]
            for n_ranks in v.ranks:
                diff = float(np.max(np.abs(forces[first, n_ranks] - forces[second, n_ranks])))
                f_err = _relative(diff, f_scale)
                rows.append((c, n, CROSS_SCHEME, n_ranks, "", 0.0, f_err, f_err <= v.force_tol))
        logger.info("configuration %d: %d atoms, energy %.6g", c, n, ref.energy)
    return pd.DataFrame(
        rows,
        columns=["config", "n_atoms", "scheme", "n_ranks", "grid", "energy_error", "force_error", "passed"],
    )


def cmd_validate_dd(cfg: RunConfig, out: Path, config_path: Optional[str] = None) -> RunManifest:
    """Writes validation.csv and its per-(scheme, ranks) summary; fails on any mismatch"""
    manifest = _manifest("validate-dd", cfg, out, config_path)
    model = model_from_config(cfg)
    table = validate_dd(cfg, model)
    summary = table.groupby(["scheme", "n_ranks"], as_index=False).agg(
        configs=("config", "count"),
        max_energy_error=("energy_error", "max"),
        max_force_error=("force_error", "max"),
        passed=("passed", "all"),
    )
    manifest.add(write_csv(table, out / "validation.csv"))
    manifest.add(write_csv(summary, out / "validation_summary.csv"))
    manifest.passed = bool(table["passed"].all())
    if not manifest.passed:
        logger.error("decomposed evaluation disagrees:\n%s", summary[~summary["passed"]].to_string(index=False))
    return manifest


SWEEP_COLUMNS = [
    "mode",
    "n_ranks",
    "n_atoms",
    "repeat",
    "throughput",
    "wall_throughput",
    "modeled_step_seconds",
    "mean_ghosts",
    "imbalance",
]
# appended when sweep.compare_classical is set
OVERHEAD_COLUMNS = ["classical_throughput", "dp_overhead"]


def _modeled_throughput(dt: float, modeled: float) -> float:
    return dt / modeled * SECONDS_PER_DAY if modeled > 0 else float("nan")


def cmd_sweep(cfg: RunConfig, out: Path, config_path: Optional[str] = None) -> RunManifest:
    """
    Scaling sweep over simulated rank counts with the decomposed potential.

    Throughput uses the modeled parallel step time (driver phases plus the
    slowest rank); `wall_throughput` is the measured one. Weak mode
    replicates the system along x by n_ranks / reference. With
    `sweep.compare_classical` every system is also run with the classical
    potential, and `dp_overhead` is its modeled throughput over the
    decomposed one.
    """
    manifest = _manifest("sweep", cfg, out, config_path)
    s = cfg.sweep
    if s.n_steps < 1:
        raise ConfigError("sweep.n_steps must be at least 1")
    reference = s.reference if s.reference is not None else min(s.ranks)
    if reference not in s.ranks:
        raise ConfigError(f"sweep.reference {reference} is not among sweep.ranks")
    model = model_from_config(cfg)
    base_box, base_atoms = initial_system(cfg)
    base_atoms = assign_velocities(base_atoms, cfg.system.temperature, make_rng(cfg.seed))

    rows, loads, pairs = [], [], []
    last_trace = None
    for repeat in range(s.repeats):
        for n_ranks in s.ranks:
            box, atoms = base_box, base_atoms
            if s.mode == WEAK:
                if n_ranks % reference:
                    raise ConfigError(f"weak scaling needs rank counts divisible by {reference}")
                box, atoms = replicate(base_box, base_atoms, (n_ranks // reference, 1, 1))
            md = MDConfig(
                dt=cfg.md.dt,
                n_steps=s.n_steps,
                potential=DP_DD,
                scheme=cfg.md.scheme,
                n_ranks=n_ranks,
                workers=cfg.md.workers,
                output_every=s.n_steps,
                seed=cfg.seed,
            )
            provider = DDProvider(model, n_ranks, md.scheme, md.workers)
            result = run_md(box, atoms, md, [provider])
            assert provider.last is not None
            modeled = result.summary.modeled_step_seconds
            per_rank = provider.last.ranks
            inference = [r.seconds.get("inference", 0.0) for r in per_rank]
            pairs.extend((r.n_local + r.n_ghost, t) for r, t in zip(per_rank, inference))
            load = provider.last.load_table()
            load.insert(0, "n_ranks", n_ranks)
            load.insert(0, "repeat", repeat)
            loads.append(load)
            dp_throughput = _modeled_throughput(cfg.md.dt, modeled)
            row: Tuple = (
                s.mode,
                n_ranks,
                len(atoms),
                repeat,
                dp_throughput,
                result.summary.throughput if result.summary.elapsed > 0 else float("nan"),
                modeled,
                float(np.mean([r.n_ghost for r in per_rank])),
                load_imbalance(inference).lam,
            )
            if s.compare_classical:
                baseline = MDConfig(dt=cfg.md.dt, n_steps=s.n_steps, output_every=s.n_steps, seed=cfg.seed)
                classical = run_md(box, atoms, baseline, [ClassicalProvider(cfg.lj.params())]).summary
                classical_throughput = _modeled_throughput(cfg.md.dt, classical.modeled_step_seconds)
                row += (classical_throughput, classical_throughput / dp_throughput)
            rows.append(row)
            last_trace = result.trace
            logger.info("%s sweep: %d ranks, %d atoms, %.4g s per step", s.mode, n_ranks, len(atoms), modeled)

    points = pd.DataFrame(rows, columns=SWEEP_COLUMNS + (OVERHEAD_COLUMNS if s.compare_classical else []))
    means = points.groupby("n_ranks")["throughput"].mean()
    summary = {
        "mode": s.mode,
        "reference": reference,
        "efficiency": {str(k): v for k, v in scaling_efficiency(means.to_dict(), reference, s.mode).items()},
        "load_time_correlation": load_correlation(*zip(*pairs)) if len(pairs) > 2 else None,
    }
    if s.mode == WEAK:
        summary["efficiency_definition"] = WEAK_EFFICIENCY_DEFINITION
    if s.compare_classical:
        summary["dp_overhead"] = {str(k): v for k, v in points.groupby("n_ranks")["dp_overhead"].mean().items()}
    manifest.add(write_csv(points, out / "sweep.csv"))
    manifest.add(write_csv(pd.concat(loads, ignore_index=True), out / "load.csv"))
    manifest.add(write_json(summary, out / "sweep_summary.json"))
    if last_trace is not None:
        export_chrome_trace(last_trace, out / "trace.json")
        manifest.add(out / "trace.json")
    return manifest


def efficiency_check(alpha: float, target: float = 0.66, n: int = 16, ahead: int = 32, reference: int = 8) -> dict:
    """
    Pick beta so the model's efficiency on `n` ranks is `target`, then
    report what the same model implies on `ahead` ranks

    >>> check = efficiency_check(1.0)
    >>> round(check["efficiency_ahead"], 6), check["monotone"]
    (0.392857, True)
    """
    beta = beta_for_efficiency(target, n, reference, alpha)
    e_n = model_efficiency(alpha, beta, n, reference)
    e_ahead = model_efficiency(alpha, beta, ahead, reference)
    return {
        "reference": reference,
        "n": n,
        "ahead": ahead,
        "beta": beta,
        "efficiency_n": e_n,
        "efficiency_ahead": e_ahead,
        "monotone": bool(e_ahead < e_n <= 1.0),
    }


def cmd_fit_scaling(
    cfg: RunConfig, out: Path, points_path: PathLike, config_path: Optional[str] = None
) -> RunManifest:
    """Fit the throughput model to a sweep CSV; writes fit.json and efficiency.csv"""
    manifest = _manifest("fit-scaling", cfg, out, config_path)
    points = read_points(points_path)
    fit = fit_throughput(points)
    mode = str(points["mode"].iloc[0]) if "mode" in points.columns else cfg.sweep.mode
    if mode not in (STRONG, WEAK):
        raise ParseError(f"{points_path}: unknown sweep mode {mode!r}")
    reference = cfg.sweep.reference if cfg.sweep.reference is not None else int(points["n_ranks"].min())
    table = efficiency_table(points, fit, reference, mode)
    check = efficiency_check(fit.alpha if fit.alpha > 0 else 1.0)
    doc = {**fit.to_dict(), "mode": mode, "reference": reference, "efficiency_check": check}
    logger.info("alpha %.6g beta %.6g r^2 %.6f", fit.alpha, fit.beta, fit.r_squared)
    manifest.add(write_json(doc, out / "fit.json"))
    manifest.add(write_csv(table, out / "efficiency.csv"))
    manifest.passed = check["monotone"]
    return manifest


def gyration_series(
    trajectory: PathLike, group: Optional[Sequence[int]] = None, species: Optional[Sequence[int]] = None
) -> pd.DataFrame:
    """Radii of gyration about x, y and z for every frame of a trajectory"""
    if (group is None) == (species is None):
        raise ConfigError("give exactly one of a group of ids or a species selection")
    rows = []
    for box, atoms, frame in iter_xyz(trajectory):
        ids = group if group is not None else atoms.global_ids[np.isin(atoms.species, species)]
        rows.append((frame, *gyration_radii(atoms, ids, box)))
    return pd.DataFrame(rows, columns=["frame", "rx", "ry", "rz"])


def cmd_gyrate(
    cfg: RunConfig,
    out: Path,
    trajectory: PathLike,
    group: Optional[Sequence[int]] = None,
    species: Optional[Sequence[int]] = None,
    config_path: Optional[str] = None,
) -> RunManifest:
    """Writes gyration.csv; with gyrate.band set, also a stability check"""
    manifest = _manifest("gyrate", cfg, out, config_path)
    g = cfg.gyrate
    group = group if group is not None else g.group
    species = species if species is not None else g.species
    series = gyration_series(trajectory, group, species)
    manifest.add(write_csv(series, out / "gyration.csv"))
    if g.band is not None:
        report = stability_check(series[["rx", "ry", "rz"]], g.window, g.band)
        doc = {"passed": report.passed, "max_deviation": report.max_deviation, "drift_slope": report.drift_slope}
        manifest.add(write_json(doc, out / "stability.json"))
        manifest.passed = report.passed
    return manifest


def _int_list(text: str) -> List[int]:
    try:
        values = [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from ex
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    """The argument parser of every subcommand"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--workers", type=int, help="concurrent simulated ranks")
    common.add_argument("--seed", type=int, help="seed of the one random generator")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument(
        "--scheme", choices=["masked-reduction", "wide-halo"], help="decomposition scheme"
    )
    common.add_argument("--ranks", type=_int_list, help="comma-separated simulated rank counts")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="halomd",
        description="""
            Desk-scale molecular dynamics with a local deep potential on a
            virtual domain decomposition.
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model on classical-oracle frames")
    sub.add_parser("run", parents=[common], help="run molecular dynamics")
    sub.add_parser("validate-dd", parents=[common], help="check decomposed against single-domain evaluation")
    sub.add_parser("sweep", parents=[common], help="scaling sweep over simulated rank counts")
    fit = sub.add_parser("fit-scaling", parents=[common], help="fit the throughput model")
    fit.add_argument("points", help="sweep CSV with n_ranks and throughput columns")
    gyr = sub.add_parser("gyrate", parents=[common], help="radii of gyration along a trajectory")
    gyr.add_argument("trajectory", help="extended-XYZ trajectory")
    gyr.add_argument("--group", type=_int_list, help="comma-separated atom ids")
    gyr.add_argument("--species", type=_int_list, help="comma-separated species")
    return parser


def _dispatch(args: argparse.Namespace, cfg: RunConfig, out: Path) -> RunManifest:
    simple: Dict[str, Callable[..., RunManifest]] = {
        "train": cmd_train,
        "run": cmd_run,
        "validate-dd": cmd_validate_dd,
        "sweep": cmd_sweep,
    }
    if args.command in simple:
        return simple[args.command](cfg, out, args.config)
    if args.command == "fit-scaling":
        return cmd_fit_scaling(cfg, out, args.points, args.config)
    return cmd_gyrate(cfg, out, args.trajectory, args.group, args.species, args.config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the exit code"""
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.workers, args.scheme, args.ranks)
        manifest = _dispatch(args, cfg, Path(args.out))
    except (ConfigError, ParseError, GeometryError, FileNotFoundError) as ex:
        logger.error("%s", ex)
        return 2
    except HaloMDError as ex:
        logger.error("%s", ex)
        return 1
    except ValueError as ex:
        # parameter validation inside the dataclasses
        logger.error("invalid parameter: %s", ex)
        return 2
    manifest.write()
    if not manifest.passed:
        logger.error("%s failed its checks; see %s", manifest.command, manifest.out_dir)
        return 1
    return 0
