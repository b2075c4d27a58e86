"""Metrics, the Monte-Carlo power oracle, experiment configuration, and the
end-to-end pipeline.

The pipeline stages one experiment repetition: synthesize (or load) a scene,
run an initial measurement campaign, characterize spatial correlation and
select typical grids, run the estimation campaign, train the per-grid channel
estimators, optimize the reflection pattern with every configured method, and
score each method's average SNR against the full ground truth. All
stage-level randomness derives from one master seed, so a record is a pure
function of (config, seed).
"""

import hashlib
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import artifacts, geostat, measurement, nnest, optimize
from .errors import ConfigurationError, SelectionError, StageFailure
from .measurement import PhaseAlphabet, ReflectionPattern
from .propagation import GroundTruthChannels, instantaneous_channel
from .scene import SceneConfig, ScatterCluster, SynthParams, load_scene, synth_scene
from .seeds import derive_rng, derive_seed

__all__ = [
    "dbm_to_watts",
    "watts_to_dbm",
    "nmse",
    "avg_snr",
    "monte_carlo_expected_power",
    "noise_for_target_snr",
    "CampaignSettings",
    "SelectionSettings",
    "TrainingSettings",
    "OptimizeSettings",
    "ExperimentConfig",
    "MethodMetrics",
    "MetricsRecord",
    "preset",
    "run_pipeline",
    "run_experiment",
    "write_metrics",
    "read_metrics",
    "write_summary",
]

METHODS = ("rms", "csm", "nn-gar", "nn-sr", "upper")


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    if watts <= 0:
        raise ValueError(f"power must be > 0 W, got {watts!r}")
    return 10.0 * math.log10(watts) + 30.0


def nmse(g_hats, g_trues) -> float:
    """Mean over grids of ||G_hat - G||_F^2 / ||G||_F^2.

    Grids with a zero true covariance are excluded with a warning; if none
    remain the metric is undefined and raises.
    """
    g_hats, g_trues = list(g_hats), list(g_trues)
    if len(g_hats) != len(g_trues) or not g_trues:
        raise ValueError("need equal, nonzero numbers of covariance matrices")
    terms = []
    for i, (gh, gt) in enumerate(zip(g_hats, g_trues)):
        gh = np.asarray(gh, dtype=complex)
        gt = np.asarray(gt, dtype=complex)
        denom = float(np.sum(np.abs(gt) ** 2))
        if denom == 0.0:
            warnings.warn(f"grid {i}: zero true covariance excluded from NMSE")
            continue
        terms.append(float(np.sum(np.abs(gh - gt) ** 2)) / denom)
    if not terms:
        raise ValueError("all true covariances are zero; NMSE undefined")
    return float(np.mean(terms))


def avg_snr(v, truth: GroundTruthChannels) -> float:
    """Coverage SNR in dB of one reflection pattern over ALL grids.

    10 log10( sum_k (v^H G_k v + C_k - sigma^2) / (K sigma^2) ) with the true
    G_k and floor C_k, regardless of which grids were selected upstream. A
    nonpositive total returns -inf as a sentinel.
    """
    if isinstance(v, ReflectionPattern):
        v = v.v
    v = np.asarray(v, dtype=complex)
    beam = np.abs(truth.eff @ np.conj(v)) ** 2
    total = float(np.sum(beam + truth.floor - truth.noise_power))
    if total <= 0.0:
        return float("-inf")
    return 10.0 * math.log10(total / (truth.n_grids * truth.noise_power))


def monte_carlo_expected_power(rng: np.random.Generator, scene, k: int, v,
                               p_tx: float, noise_power: float, samples: int,
                               chunk: int = 200_000):
    """Empirical mean received power over fresh channel and noise draws.

    Returns (mean, standard error); the standard error is None for a single
    sample. This estimates the same quantity as the closed-form expected
    power and exists to validate it.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    if isinstance(v, ReflectionPattern):
        v = v.v
    v = np.asarray(v, dtype=complex)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        n_draw = min(chunk, samples - done)
        h = instantaneous_channel(rng, scene, k, size=n_draw)
        sig = math.sqrt(p_tx) * (h @ np.conj(v))
        if noise_power > 0.0:
            std = math.sqrt(noise_power / 2.0)
            sig = sig + std * (rng.standard_normal(n_draw)
                               + 1j * rng.standard_normal(n_draw))
        p = np.abs(sig) ** 2
        total += float(p.sum())
        total_sq += float((p ** 2).sum())
        done += n_draw
    mean = total / samples
    if samples == 1:
        return mean, None
    var = max(total_sq / samples - mean ** 2, 0.0) * samples / (samples - 1)
    return mean, math.sqrt(var / samples)


def noise_for_target_snr(scene, p_tx: float, target_db: float) -> float:
    """Noise power giving roughly `target_db` of measurement SNR: the mean
    over grids and uniform random patterns of the noiseless received power,
    divided by 10^(target_db/10)."""
    truth = GroundTruthChannels.from_scene(scene, p_tx, 0.0)
    mean_power = float(np.mean(np.sum(np.abs(truth.eff) ** 2, axis=1) + truth.floor))
    if mean_power <= 0:
        raise ValueError("scene has no received power; cannot set a noise level")
    return mean_power / 10.0 ** (target_db / 10.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CampaignSettings:
    """Measurement-campaign parameters (powers in dBm)."""

    m1: int = 10
    m2: int = 600
    q: int = 60
    p_tx_dbm: float = 33.0
    noise_dbm: float = -90.0
    alpha: int = 2
    coherence: int = 1

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 2:
            raise ValueError("need m1 >= 1 and m2 >= 2")
        if self.q < 0:
            raise ValueError(f"Q must be >= 0, got {self.q}")
        if self.coherence < 1:
            raise ValueError("coherence must be >= 1")
        PhaseAlphabet(self.alpha)  # validates alpha

    @property
    def p_tx(self) -> float:
        return dbm_to_watts(self.p_tx_dbm)

    @property
    def noise_power(self) -> float:
        return dbm_to_watts(self.noise_dbm)


@dataclass(frozen=True)
class SelectionSettings:
    """How the estimation grid set K2 is chosen.

    mode "geostat" runs the variogram machinery on an initial campaign over
    k1 grids; "all" selects every grid (no initial campaign); "random" draws
    k2 grids uniformly (the comparison baseline).
    """

    mode: str = "geostat"
    k1: int = 12
    rho: float = 0.4
    bin_width: float | None = None
    flat_tol: float = geostat.FLAT_TOL
    k2: int | None = None

    def __post_init__(self):
        if self.mode not in ("geostat", "all", "random"):
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.mode == "geostat":
            if self.k1 < 2:
                raise ValueError("geostat selection needs k1 >= 2")
            if self.rho <= 0:
                raise ValueError("rho must be > 0")
        if self.bin_width is not None and self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if self.mode == "random" and (self.k2 is None or self.k2 < 1):
            raise ValueError("random selection needs k2 >= 1")


@dataclass(frozen=True)
class TrainingSettings:
    """Per-grid estimator hyperparameters (seed is derived per grid)."""

    learning_rate: float = 2e-2
    decay: float = 1e-4
    batch_size: int = 2
    epochs: int = 200
    train_fraction: float = 0.8
    max_restarts: int = 3

    def to_train_config(self, seed: int) -> nnest.TrainConfig:
        return nnest.TrainConfig(
            learning_rate=self.learning_rate, decay=self.decay,
            batch_size=self.batch_size, epochs=self.epochs,
            train_fraction=self.train_fraction, seed=seed,
            max_restarts=self.max_restarts)

    def __post_init__(self):
        self.to_train_config(0)  # validates via TrainConfig


@dataclass(frozen=True)
class OptimizeSettings:
    methods: tuple = METHODS
    relax_samples: int = 128
    relax_spread: float = 1.0
    sr_tol: float = 1e-12

    def __post_init__(self):
        methods = tuple(self.methods)
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; valid: {METHODS}")
        if len(set(methods)) != len(methods):
            raise ValueError("duplicate methods")
        if not methods:
            raise ValueError("need at least one method")
        if self.relax_samples < 1:
            raise ValueError("relax_samples must be >= 1")
        object.__setattr__(self, "methods", methods)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    repetitions: int = 1
    threads: int = 1
    scene_path: str | None = None
    scene: SynthParams = field(default_factory=SynthParams)
    campaign: CampaignSettings = field(default_factory=CampaignSettings)
    selection: SelectionSettings = field(default_factory=SelectionSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    optimize: OptimizeSettings = field(default_factory=OptimizeSettings)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def digest(self) -> str:
        """12-hex config fingerprint embedded in output file names."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self) -> dict:
        def encode(obj):
            if isinstance(obj, (CampaignSettings, SelectionSettings,
                                TrainingSettings, OptimizeSettings, SynthParams,
                                ScatterCluster)):
                return {f.name: encode(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return [encode(v) for v in obj]
            return obj

        return {f.name: encode(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _config_from_dict(data)


def _build_section(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            value = _build_section(_SECTIONS[key], value, f"{path}.{key}")
        elif cls is ExperimentConfig and key == "scene":
            value = _synth_from_dict(value, f"{path}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _synth_from_dict(data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object")
    known = {f.name for f in fields(SynthParams)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in ("iu_clusters", "bi_clusters"):
            if not isinstance(value, list):
                raise ConfigurationError(f"{path}.{key}: expected a list")
            clusters = []
            for i, c in enumerate(value):
                cpath = f"{path}.{key}[{i}]"
                if not isinstance(c, dict):
                    raise ConfigurationError(f"{cpath}: expected an object")
                extra = sorted(set(c) - {"low", "high", "count"})
                if extra:
                    raise ConfigurationError(f"{cpath}: unknown keys {extra}")
                try:
                    clusters.append(ScatterCluster(tuple(c["low"]), tuple(c["high"]),
                                                   int(c.get("count", 1))))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ConfigurationError(f"{cpath}: {exc}") from None
            kwargs[key] = tuple(clusters)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return SynthParams(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


_SECTIONS = {
    "campaign": CampaignSettings,
    "selection": SelectionSettings,
    "training": TrainingSettings,
    "optimize": OptimizeSettings,
}


def _config_from_dict(data: dict) -> ExperimentConfig:
    return _build_section(ExperimentConfig, data, "config")


def preset(name: str) -> ExperimentConfig:
    """Named baseline configs: "desk" runs in seconds per repetition on one
    core; "paper" is the large long-running layout."""
    if name == "desk":
        # Single scatter cluster keeps the user-side channel low rank, so the
        # fitted correlation range stays stable seed to seed and the typical
        # selection lands well below the full grid count.
        scene = SynthParams(
            gain_iu=1e-6, gain_bi=1e-6,
            iu_clusters=(ScatterCluster((3.0, -9.0, 1.0), (12.0, -5.0, 4.0), 1),),
        )
        return ExperimentConfig(scene=scene)
    if name == "paper":
        scene = SynthParams(
            d1=30.0, d2=30.0, rows_y=8, rows_z=8,
            irs_pos=(15.0, -4.0, 3.0), bs_pos=(-30.0, -25.0, 15.0),
            gain_iu=1e-6, gain_bi=1e-6,
            iu_clusters=(ScatterCluster((-18.0, -18.0, 1.0), (-8.0, -8.0, 5.0), 2),),
        )
        return ExperimentConfig(
            scene=scene,
            campaign=CampaignSettings(m1=10, m2=600, q=60),
            selection=SelectionSettings(k1=20),
        )
    raise ConfigurationError(f"unknown preset {name!r}; valid: desk, paper")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodMetrics:
    method: str
    snr_db: float
    objective: float
    theta_indices: tuple
    wall_time: float


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    digest: str
    k2: int
    selected: tuple
    nmse: float | None
    methods: tuple

    def method(self, name: str) -> MethodMetrics:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)


class _Stage:
    """Tags exceptions escaping a pipeline stage with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageFailure):
            raise StageFailure(self.name, exc) from exc
        return False


def select_grids(cfg: ExperimentConfig, geometry, centers: dict, seed: int,
                 initial_profiles):
    """Returns (selected indices, selection detail dict).

    `geometry` is (d1, d2, grid_size) and `centers` maps grid index to center;
    selection deliberately sees only layout, never channel state.
    """
    sel = cfg.selection
    d1, d2, grid_size = geometry
    n_grids = len(centers)
    if sel.mode == "all":
        return tuple(range(n_grids)), {"mode": "all"}
    if sel.mode == "random":
        if sel.k2 > n_grids:
            raise SelectionError(f"k2={sel.k2} exceeds {n_grids} grids")
        rng = derive_rng(seed, "select")
        picks = rng.choice(n_grids, size=sel.k2, replace=False)
        return tuple(sorted(int(i) for i in picks)), {"mode": "random"}

    bin_width = sel.bin_width if sel.bin_width is not None else grid_size
    emp = geostat.empirical_variogram(initial_profiles, centers, bin_width)
    fit = geostat.fit_spherical(emp, flat_tol=sel.flat_tol)
    split = geostat.split_region(d1, d2, grid_size, fit.c_star)
    c_stars, etas = [], []
    for members in split.subregions:
        if fit.uncorrelated:
            # whole-field white: no finer structure to chase per subregion
            ct = 0.0
        else:
            ct = geostat.subregion_range(initial_profiles, members, centers,
                                         bin_width, flat_tol=sel.flat_tol)
        c_stars.append(ct)
        etas.append(geostat.typical_count(len(members), grid_size, ct, sel.rho))
    result = geostat.select_typical(derive_rng(seed, "select"), split, etas,
                                    c_stars)
    detail = {
        "mode": "geostat",
        "variogram": emp,
        "fit": fit,
        "split": split,
        "selection": result,
    }
    return result.selected, detail


def upper_bound_pattern(cfg: ExperimentConfig, seed: int,
                        truth: GroundTruthChannels, alphabet: PhaseAlphabet,
                        warm_starts=()):
    """Perfect-CSI reference: refine on the full truth, warm-started from the
    given patterns plus a relaxation start, keeping the best refinement."""
    opts = cfg.optimize
    truth_model = optimize.ObjectiveModel.from_vectors(list(truth.eff), alphabet)
    starts = list(warm_starts)
    starts.append(optimize.relax_init(
        truth_model, derive_rng(seed, "optimize", "upper"),
        opts.relax_samples, opts.relax_spread))
    best = None
    for v0 in starts:
        r = optimize.successive_refinement(v0, truth_model, rel_tol=opts.sr_tol)
        if best is None or r.objective > best.objective:
            best = r
    return best.pattern, best.objective


def optimize_methods(cfg: ExperimentConfig, seed: int, alphabet: PhaseAlphabet,
                      estimates: dict, patterns, profiles,
                      truth: GroundTruthChannels | None):
    """Runs every configured method; returns {name: (pattern, objective, time)}.

    With truth=None (stage-by-stage runs, where ground truth is off limits)
    the perfect-CSI upper bound is left out.
    """
    opts = cfg.optimize
    est_model = optimize.ObjectiveModel.from_vectors(
        [estimates[k].w_star for k in sorted(estimates)], alphabet)
    out = {}

    def run(name, fn):
        t0 = time.perf_counter()
        pattern, score = fn()
        out[name] = (pattern, score, time.perf_counter() - t0)

    if "rms" in opts.methods or "nn-sr" in opts.methods:
        rms_result = optimize.rms(patterns, profiles)
    if "rms" in opts.methods:
        run("rms", lambda: (rms_result.pattern, rms_result.objective))
    if "csm" in opts.methods:
        def _csm():
            r = optimize.csm(patterns, profiles, alphabet)
            return r.pattern, r.objective
        run("csm", _csm)
    if "nn-gar" in opts.methods:
        def _gar():
            pat = optimize.relax_init(est_model, derive_rng(seed, "optimize", "nn-gar"),
                                      opts.relax_samples, opts.relax_spread)
            return pat, optimize.objective(pat, est_model)
        run("nn-gar", _gar)
    if "nn-sr" in opts.methods:
        def _sr():
            r = optimize.successive_refinement(rms_result.pattern, est_model,
                                               rel_tol=opts.sr_tol)
            return r.pattern, r.objective
        run("nn-sr", _sr)
    if "upper" in opts.methods and truth is not None:
        # warm-started from every other method's answer so the perfect-CSI
        # SNR dominates each of them per seed, not just in the median
        run("upper", lambda: upper_bound_pattern(
            cfg, seed, truth, alphabet,
            warm_starts=[pat for pat, _, _ in out.values()]))
    return out


def run_pipeline(cfg: ExperimentConfig, seed: int | None = None,
                 out_dir=None) -> MetricsRecord:
    """One experiment repetition; see the module docstring for the stages.

    `seed` overrides cfg.seed (used by repetition fan-out); `out_dir` makes
    every stage boundary artifact land on disk as it is produced.
    """
    seed = cfg.seed if seed is None else seed
    alphabet = PhaseAlphabet(cfg.campaign.alpha)
    writer = artifacts.StageWriter(out_dir) if out_dir is not None else None

    with _Stage("scene"):
        if cfg.scene_path is not None:
            scene = load_scene(cfg.scene_path)
        else:
            scene = synth_scene(derive_rng(seed, "scene"), cfg.scene)
        truth = GroundTruthChannels.from_scene(scene, cfg.campaign.p_tx,
                                               cfg.campaign.noise_power)
        if writer:
            writer.scene(scene)

    with _Stage("initial-campaign"):
        initial_profiles = None
        if cfg.selection.mode == "geostat":
            k1 = min(cfg.selection.k1, scene.n_grids)
            rng = derive_rng(seed, "k1")
            k1_grids = sorted(int(i) for i in
                              rng.choice(scene.n_grids, size=k1, replace=False))
            patterns1, initial_profiles = measurement.campaign(
                derive_seed(seed, "campaign", 1), scene, k1_grids,
                m=cfg.campaign.m1, q=cfg.campaign.q, p_tx=cfg.campaign.p_tx,
                noise_power=cfg.campaign.noise_power, alphabet=alphabet,
                coherence=cfg.campaign.coherence, threads=cfg.threads)
            if writer:
                writer.campaign("initial", patterns1, initial_profiles,
                                cfg.campaign, q=cfg.campaign.q)

    with _Stage("select"):
        selected, detail = select_grids(
            cfg, (scene.d1, scene.d2, scene.grid_size),
            {g.index: g.center for g in scene.grids}, seed, initial_profiles)
        if writer:
            writer.selection(selected, detail)

    with _Stage("estimation-campaign"):
        patterns2, profiles2 = measurement.campaign(
            derive_seed(seed, "campaign", 2), scene, selected,
            m=cfg.campaign.m2, q=cfg.campaign.q, p_tx=cfg.campaign.p_tx,
            noise_power=cfg.campaign.noise_power, alphabet=alphabet,
            coherence=cfg.campaign.coherence, threads=cfg.threads)
        if writer:
            writer.campaign("estimation", patterns2, profiles2, cfg.campaign,
                            q=cfg.campaign.q)

    with _Stage("estimate"):
        estimates = {}
        for k in selected:
            tc = cfg.training.to_train_config(derive_seed(seed, "train", k))
            estimates[k] = nnest.train_from_patterns(patterns2, profiles2[k], tc)
        nmse_value = nmse([estimates[k].covariance for k in selected],
                          [truth.covariance(k) for k in selected])
        if writer:
            writer.estimates(estimates, truth)

    with _Stage("optimize"):
        raw = optimize_methods(cfg, seed, alphabet, estimates, patterns2,
                                profiles2, truth)

    with _Stage("metrics"):
        methods = []
        for name in cfg.optimize.methods:
            pattern, score, wall = raw[name]
            methods.append(MethodMetrics(
                method=name,
                snr_db=avg_snr(pattern, truth),
                objective=score,
                theta_indices=tuple(int(i) for i in alphabet.index_of(pattern.theta)),
                wall_time=wall,
            ))
        record = MetricsRecord(seed=seed, digest=cfg.digest(), k2=len(selected),
                               selected=tuple(selected), nmse=nmse_value,
                               methods=tuple(methods))
        if writer:
            writer.results(record)
    return record


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list:
    """All repetitions of one config; repetition r>0 uses a derived seed.

    With an out_dir, stage artifacts land under rep_<r>/ subdirectories when
    there are several repetitions, and the merged metrics CSV plus summary
    JSON (file names embedding the config digest) land at the root.
    """
    records = []
    for r in range(cfg.repetitions):
        rep_seed = cfg.seed if r == 0 else derive_seed(cfg.seed, "rep", r)
        rep_dir = None
        if out_dir is not None:
            rep_dir = out_dir if cfg.repetitions == 1 else \
                os.path.join(str(out_dir), f"rep_{r:04d}")
        records.append(run_pipeline(cfg, seed=rep_seed, out_dir=rep_dir))
    if out_dir is not None:
        os.makedirs(str(out_dir), exist_ok=True)
        digest = cfg.digest()
        artifacts.write_metrics_csv(out_dir, digest, records)
        artifacts.write_summary_json(out_dir, digest, records)
    return records


# aliases so metric file I/O is reachable without importing artifacts
write_metrics = artifacts.write_metrics_csv
read_metrics = artifacts.read_metrics_csv
write_summary = artifacts.write_summary_json
