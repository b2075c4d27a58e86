"""Command line front end: config parsing and staged experiment execution.

One command per invocation. `pipeline` runs everything; the stage commands
(synth-scene, campaign, select, estimate, optimize, evaluate) compose through
plain CSV/JSON artifacts in the output directory, so externally produced data
(ray tracing, a testbed) can be dropped in at any boundary under the standard
file names. No stage except `evaluate` reads the channel ground truth;
`estimate` only reports per-grid error as a diagnostic when a scene file
happens to be available, and trains without it.

Exit codes:
    0  success
    1  unexpected internal error
    2  configuration problem (flags, config file parse or validation)
    3  missing or malformed artifact dependency
    4  algorithmic failure (selection, training, optimizer limits)
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import artifacts, geostat
from .errors import (ArtifactError, ConfigurationError, InstanceTooLargeError,
                     SelectionError, StageFailure, TrainingDivergedError)
from .evaluate import (ExperimentConfig, MethodMetrics, MetricsRecord, avg_snr,
                       nmse, optimize_methods, preset, run_experiment,
                       select_grids, upper_bound_pattern)
from .measurement import (PhaseAlphabet, ReflectionPattern, campaign,
                          profiles_from_records, read_measurements,
                          read_patterns)
from .propagation import GroundTruthChannels
from .scene import build_grids, load_scene, region_geometry, synth_scene
from .seeds import derive_rng, derive_seed
from . import nnest

log = logging.getLogger("irscov")

OUT_ENV = "IRSCOV_OUT"
DEFAULT_OUT = "irscov_out"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_ALGORITHM = 4


def parse_config(path) -> ExperimentConfig:
    """Load and validate a JSON experiment config.

    Raises ConfigurationError with the offending line (parse errors) or key
    path (validation errors).
    """
    if not os.path.exists(str(path)):
        raise ConfigurationError(f"config file not found: {path}")
    with open(str(path), encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(data)


def exit_code(exc: BaseException) -> int:
    """Maps an exception to the documented process exit code."""
    while isinstance(exc, StageFailure) and exc.__cause__ is not None:
        exc = exc.__cause__
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, (ArtifactError, FileNotFoundError)):
        return EXIT_ARTIFACT
    if isinstance(exc, (SelectionError, TrainingDivergedError,
                        InstanceTooLargeError)):
        return EXIT_ALGORITHM
    return EXIT_INTERNAL


# ---------------------------------------------------------------------------
# shared artifact access
# ---------------------------------------------------------------------------

def _require(out_dir, name, hint):
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        raise ArtifactError(f"missing {path}; {hint}")
    return path


def _load_scene_artifact(cfg, out_dir):
    """Scene for stages that legitimately need full channel state."""
    if cfg.scene_path is not None:
        return load_scene(cfg.scene_path)
    return load_scene(_require(out_dir, artifacts.SCENE_FILE,
                               "run synth-scene first"))


def _load_measurements(out_dir, tag, hint):
    patterns = read_patterns(_require(out_dir, artifacts.patterns_file(tag),
                                      hint))
    records = read_measurements(_require(out_dir,
                                         artifacts.measurements_file(tag),
                                         hint))
    return patterns, profiles_from_records(records)


def _geometry(cfg, out_dir):
    """(d1, d2, grid_size) without touching channel state."""
    if cfg.scene_path is not None:
        return region_geometry(cfg.scene_path)
    path = os.path.join(out_dir, artifacts.SCENE_FILE)
    if os.path.exists(path):
        return region_geometry(path)
    scene = cfg.scene
    return scene.d1, scene.d2, scene.grid_size


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_scene(cfg, args, out_dir):
    writer = artifacts.StageWriter(out_dir)
    if cfg.scene_path is not None:
        scene = load_scene(cfg.scene_path)
    else:
        scene = synth_scene(derive_rng(cfg.seed, "scene"), cfg.scene)
    writer.scene(scene)
    print(f"scene: {scene.n_grids} grids, {scene.n_elements} elements "
          f"-> {writer.path(artifacts.SCENE_FILE)}")


def cmd_campaign(cfg, args, out_dir):
    scene = _load_scene_artifact(cfg, out_dir)
    alphabet = PhaseAlphabet(cfg.campaign.alpha)
    if args.stage == "initial":
        k1 = min(cfg.selection.k1, scene.n_grids)
        rng = derive_rng(cfg.seed, "k1")
        grids = sorted(int(i) for i in
                       rng.choice(scene.n_grids, size=k1, replace=False))
        m = cfg.campaign.m1
        master = derive_seed(cfg.seed, "campaign", 1)
    else:
        grids = geostat.read_selection(_require(out_dir,
                                                artifacts.SELECTION_FILE,
                                                "run select first"))
        m = cfg.campaign.m2
        master = derive_seed(cfg.seed, "campaign", 2)
    log.info("campaign %s: %d grids x %d patterns", args.stage, len(grids), m)
    patterns, profiles = campaign(
        master, scene, grids, m=m, q=cfg.campaign.q, p_tx=cfg.campaign.p_tx,
        noise_power=cfg.campaign.noise_power, alphabet=alphabet,
        coherence=cfg.campaign.coherence, threads=cfg.threads)
    writer = artifacts.StageWriter(out_dir)
    writer.campaign(args.stage, patterns, profiles, cfg.campaign,
                    q=cfg.campaign.q)
    print(f"campaign {args.stage}: {len(grids)} grids x {m} patterns "
          f"-> {writer.path(artifacts.measurements_file(args.stage))}")


def cmd_select(cfg, args, out_dir):
    d1, d2, grid_size = _geometry(cfg, out_dir)
    centers = {g.index: g.center for g in build_grids(d1, d2, grid_size)}
    profiles = None
    if cfg.selection.mode == "geostat":
        _, profiles = _load_measurements(out_dir, "initial",
                                         "run campaign --stage initial first")
    selected, detail = select_grids(cfg, (d1, d2, grid_size), centers,
                                    cfg.seed, profiles)
    writer = artifacts.StageWriter(out_dir)
    writer.selection(selected, detail)
    print(f"selected K2={len(selected)} ({detail['mode']}): "
          + " ".join(str(k) for k in selected))


def cmd_estimate(cfg, args, out_dir):
    patterns, profiles = _load_measurements(
        out_dir, "estimation", "run campaign --stage estimation first")
    estimates = {}
    for k in sorted(profiles):
        log.info("training grid %d (%d measurements)", k,
                 len(profiles[k].powers))
        tc = cfg.training.to_train_config(derive_seed(cfg.seed, "train", k))
        estimates[k] = nnest.train_from_patterns(patterns, profiles[k], tc)

    truth = None
    scene_path = (cfg.scene_path if cfg.scene_path is not None
                  else os.path.join(out_dir, artifacts.SCENE_FILE))
    if os.path.exists(str(scene_path)):
        scene = load_scene(scene_path)
        truth = GroundTruthChannels.from_scene(scene, cfg.campaign.p_tx,
                                               cfg.campaign.noise_power)
    writer = artifacts.StageWriter(out_dir)
    writer.estimates(estimates, truth)
    line = f"trained {len(estimates)} grids -> {writer.path(artifacts.ESTIMATE_DIR)}/"
    if truth is not None:
        sel = sorted(estimates)
        value = nmse([estimates[k].covariance for k in sel],
                     [truth.covariance(k) for k in sel])
        line += f" (nmse {value:.3e})"
    else:
        line += " (nmse skipped: no scene available)"
    print(line)


def cmd_optimize(cfg, args, out_dir):
    patterns, profiles = _load_measurements(
        out_dir, "estimation", "run campaign --stage estimation first")
    estimates = artifacts.read_estimates_dir(
        os.path.join(out_dir, artifacts.ESTIMATE_DIR))
    alphabet = PhaseAlphabet(cfg.campaign.alpha)
    raw = optimize_methods(cfg, cfg.seed, alphabet, estimates, patterns,
                           profiles, truth=None)
    rows = []
    for name in cfg.optimize.methods:
        if name not in raw:
            log.info("method %s needs ground truth; deferred to evaluate", name)
            continue
        pattern, score, wall = raw[name]
        rows.append(MethodMetrics(
            method=name, snr_db=float("nan"), objective=score,
            theta_indices=tuple(int(i) for i in alphabet.index_of(pattern.theta)),
            wall_time=wall))
    path = os.path.join(str(out_dir), artifacts.RESULTS_FILE)
    artifacts.write_results_csv(path, rows)
    for m in rows:
        print(f"{m.method}: objective {m.objective:.6g} ({m.wall_time:.2f} s)")
    print(f"results -> {path}")


def cmd_evaluate(cfg, args, out_dir):
    scene = _load_scene_artifact(cfg, out_dir)
    truth = GroundTruthChannels.from_scene(scene, cfg.campaign.p_tx,
                                           cfg.campaign.noise_power)
    alphabet = PhaseAlphabet(cfg.campaign.alpha)
    rows = artifacts.read_results_csv(_require(out_dir, artifacts.RESULTS_FILE,
                                               "run optimize first"))
    by_method = {}
    for row in rows:
        theta = alphabet.values[np.asarray(row["theta_indices"], dtype=int)]
        by_method[row["method"]] = (ReflectionPattern(theta),
                                    row["objective"], row["wall_time"])

    sel_path = os.path.join(str(out_dir), artifacts.SELECTION_FILE)
    selected = ()
    if os.path.exists(sel_path):
        selected = tuple(geostat.read_selection(sel_path))

    nmse_value = None
    est_dir = os.path.join(str(out_dir), artifacts.ESTIMATE_DIR)
    if os.path.isdir(est_dir):
        estimates = artifacts.read_estimates_dir(est_dir)
        keys = sorted(estimates)
        nmse_value = nmse([estimates[k].covariance for k in keys],
                          [truth.covariance(k) for k in keys])
        if not selected:
            selected = tuple(keys)

    if "upper" in cfg.optimize.methods and "upper" not in by_method:
        t0 = time.perf_counter()
        pattern, score = upper_bound_pattern(
            cfg, cfg.seed, truth, alphabet,
            warm_starts=[pat for pat, _, _ in by_method.values()])
        by_method["upper"] = (pattern, score, time.perf_counter() - t0)

    methods = []
    for name in cfg.optimize.methods:
        if name not in by_method:
            continue
        pattern, score, wall = by_method[name]
        methods.append(MethodMetrics(
            method=name, snr_db=avg_snr(pattern, truth), objective=score,
            theta_indices=tuple(int(i) for i in alphabet.index_of(pattern.theta)),
            wall_time=wall))
    record = MetricsRecord(seed=cfg.seed, digest=cfg.digest(),
                           k2=len(selected), selected=selected,
                           nmse=nmse_value, methods=tuple(methods))
    metrics_path = artifacts.write_metrics_csv(out_dir, record.digest, [record])
    artifacts.write_summary_json(out_dir, record.digest, [record])
    for m in methods:
        print(f"{m.method}: snr {m.snr_db:.2f} dB")
    print(f"metrics -> {metrics_path}")


def cmd_pipeline(cfg, args, out_dir):
    records = run_experiment(cfg, out_dir=out_dir)
    for rec in records:
        snrs = " ".join(f"{m.method}={m.snr_db:.2f}" for m in rec.methods)
        nm = "-" if rec.nmse is None else f"{rec.nmse:.3e}"
        print(f"seed {rec.seed}: K2={rec.k2} nmse={nm} {snrs}")
    digest = cfg.digest()
    print(f"metrics -> {os.path.join(str(out_dir), artifacts.metrics_file(digest))}")
    print(f"summary -> {os.path.join(str(out_dir), artifacts.summary_file(digest))}")


_COMMANDS = {
    "synth-scene": cmd_synth_scene,
    "campaign": cmd_campaign,
    "select": cmd_select,
    "estimate": cmd_estimate,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irscov",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth-scene", "draw a scene from the config and write scene.json"),
        ("campaign", "simulate a measurement campaign on the stored scene"),
        ("select", "variogram analysis and typical-grid selection"),
        ("estimate", "train per-grid channel estimates from measurements"),
        ("optimize", "run reflection optimizers on the stored estimates"),
        ("evaluate", "score stored results against the scene ground truth"),
        ("pipeline", "run every stage end to end, with repetitions"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH",
                       help="JSON experiment config")
        p.add_argument("--preset", choices=["desk", "paper"],
                       help="named baseline config (instead of --config)")
        p.add_argument("--out", metavar="DIR",
                       help=f"output directory (default ${OUT_ENV} or "
                            f"./{DEFAULT_OUT})")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--threads", type=int,
                       help="worker threads for campaigns")
        p.add_argument("-v", "--verbose", action="store_true",
                       help="stage progress on stderr")
        if name == "campaign":
            p.add_argument("--stage", choices=["initial", "estimation"],
                           default="estimation",
                           help="which campaign to run (default estimation)")
    return parser


def _load_cli_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigurationError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = parse_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    try:
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.threads is not None:
            cfg = replace(cfg, threads=args.threads)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s", stream=sys.stderr)
    out_dir = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    try:
        cfg = _load_cli_config(args)
        _COMMANDS[args.command](cfg, args, out_dir)
    except Exception as exc:
        stage = f" [{exc.stage}]" if isinstance(exc, StageFailure) else ""
        print(f"irscov: error{stage}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
