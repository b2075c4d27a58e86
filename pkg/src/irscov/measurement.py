"""Discrete reflection patterns and averaged received-power measurements.

A measurement campaign fixes M random patterns, then for every (grid, pattern)
pair averages |received signal|² over Q symbols, resampling the random channel
components each symbol (coherence block of one symbol by default) and the
noise every symbol. These averaged powers are the only observable the
selection and estimation stages see.

Reproducibility: campaigns are keyed by an integer master seed; the generator
for (grid k, pattern m) is derived by hashing (seed, "measure", k, m), so
results are identical no matter how the loop is scheduled or sharded.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ArtifactError
from .propagation import (
    GroundTruthChannels,
    _as_channels,
    expected_power,
    instantaneous_channel,
)
from .seeds import derive_rng

__all__ = [
    "PhaseAlphabet",
    "ReflectionPattern",
    "MeasurementRecord",
    "PowerProfile",
    "random_pattern",
    "measure_power",
    "expected_measure",
    "campaign",
    "write_measurements",
    "read_measurements",
    "write_patterns",
    "read_patterns",
    "profiles_from_records",
]


@dataclass(frozen=True)
class PhaseAlphabet:
    """The 2^alpha discrete phases {omega, 2*omega, ..., 2pi}, omega = 2pi/2^alpha.

    Note the set contains 2pi rather than 0; alpha = 1 gives {pi, 2pi},
    i.e. reflection coefficients {-1, +1}.
    """

    alpha: int

    def __post_init__(self):
        if not (isinstance(self.alpha, int) and self.alpha >= 1):
            raise ValueError(f"alpha must be a positive integer, got {self.alpha!r}")

    @property
    def size(self) -> int:
        return 2 ** self.alpha

    @property
    def omega(self) -> float:
        return 2.0 * math.pi / self.size

    @cached_property
    def values(self) -> np.ndarray:
        vals = self.omega * np.arange(1, self.size + 1)
        vals.setflags(write=False)
        return vals

    def contains(self, theta: np.ndarray, tol: float = 1e-9) -> bool:
        theta = np.asarray(theta, dtype=float)
        idx = np.round(theta / self.omega)
        return bool(
            np.all(np.abs(theta - idx * self.omega) <= tol)
            and np.all(idx >= 1) and np.all(idx <= self.size)
        )

    def nearest_index(self, angle: np.ndarray) -> np.ndarray:
        """0-based indices of the alphabet values nearest to `angle` (circular)."""
        idx = np.round(np.asarray(angle, dtype=float) / self.omega).astype(int)
        return (idx - 1) % self.size  # value index i holds (i+1)*omega

    def index_of(self, theta: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        if not self.contains(theta, tol):
            raise ValueError("phases are not members of the alphabet")
        return (np.round(np.asarray(theta) / self.omega).astype(int) - 1) % self.size


@dataclass(frozen=True)
class ReflectionPattern:
    """One IRS phase configuration. `id` orders patterns within a campaign;
    optimizer-produced patterns keep the default -1."""

    theta: np.ndarray
    id: int = -1

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 1 or len(theta) < 1:
            raise ValueError("theta must be a nonempty 1-D vector")
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0) or np.any(theta > 2 * math.pi + 1e-12):
            raise ValueError("phases must lie in (0, 2*pi]")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @cached_property
    def v(self) -> np.ndarray:
        """Unit-modulus reflection vector e^{j theta}."""
        vec = np.exp(1j * self.theta)
        vec.setflags(write=False)
        return vec

    @property
    def n_elements(self) -> int:
        return len(self.theta)


@dataclass(frozen=True)
class MeasurementRecord:
    """One averaged power measurement. Q = 0 marks the infinite-averaging
    idealization produced by expected_measure; real campaigns have Q >= 1."""

    grid: int
    pattern: int
    p_bar: float
    q: int
    p_tx: float
    noise_power: float

    def __post_init__(self):
        if self.p_bar < 0:
            raise ValueError(f"measured power must be >= 0, got {self.p_bar!r}")
        if self.q < 0:
            raise ValueError(f"Q must be >= 0, got {self.q!r}")


@dataclass(frozen=True)
class PowerProfile:
    """All M measured powers of one grid, aligned with `pattern_ids`."""

    grid: int
    powers: np.ndarray
    pattern_ids: tuple[int, ...]

    def __post_init__(self):
        powers = np.asarray(self.powers, dtype=float)
        if powers.ndim != 1 or len(powers) != len(self.pattern_ids):
            raise ValueError("powers and pattern_ids must have equal length")
        powers.setflags(write=False)
        object.__setattr__(self, "powers", powers)

    def __len__(self) -> int:
        return len(self.powers)


def random_pattern(rng: np.random.Generator, alphabet: PhaseAlphabet, n: int,
                   pattern_id: int = 0) -> ReflectionPattern:
    """Pattern with each phase i.i.d. uniform over the alphabet."""
    if n < 1:
        raise ValueError(f"pattern needs >= 1 elements, got {n}")
    theta = alphabet.values[rng.integers(0, alphabet.size, size=n)]
    return ReflectionPattern(theta, pattern_id)


def _sample_noise(rng: np.random.Generator, noise_power: float, q: int) -> np.ndarray:
    if noise_power == 0:
        return np.zeros(q, dtype=complex)
    scale = math.sqrt(noise_power / 2.0)
    return scale * (rng.standard_normal(q) + 1j * rng.standard_normal(q))


def measure_power(rng: np.random.Generator, scene, k: int, pattern: ReflectionPattern,
                  q: int, p_tx: float, noise_power: float,
                  coherence: int = 1) -> MeasurementRecord:
    """Average |sqrt(P) vᴴ h(q) + n(q)|² over q = 1..Q (unit pilot symbol).

    The random channel components are redrawn every `coherence` symbols
    (default every symbol); noise is i.i.d. per symbol. Accepts a SceneConfig
    or DeterministicChannels.
    """
    if q < 1:
        raise ValueError(f"Q must be >= 1, got {q}")
    if coherence < 1:
        raise ValueError(f"coherence must be >= 1, got {coherence}")
    if p_tx < 0 or noise_power < 0:
        raise ValueError("powers must be >= 0")
    det = _as_channels(scene)
    if pattern.n_elements != det.scene.n_elements:
        raise ValueError("pattern size does not match the IRS")

    if det.scene.deterministic_only:
        gains = np.full(q, np.vdot(pattern.v, det.cascaded(k)))
    else:
        draws = -(-q // coherence)  # ceil
        channels = instantaneous_channel(rng, det, k, size=draws)
        gains = np.repeat(channels @ np.conj(pattern.v), coherence)[:q]
    y = math.sqrt(p_tx) * gains + _sample_noise(rng, noise_power, q)
    p_bar = float(np.mean(np.abs(y) ** 2))
    return MeasurementRecord(k, pattern.id, p_bar, q, p_tx, noise_power)


def expected_measure(truth, k: int, pattern: ReflectionPattern,
                     p_tx: float | None = None,
                     noise_power: float | None = None) -> MeasurementRecord:
    """Infinite-averaging idealization: p_bar = closed-form expected power.

    `truth` is a GroundTruthChannels, or a SceneConfig together with explicit
    p_tx and noise_power. The record carries Q = 0 as the idealization marker.
    """
    if not isinstance(truth, GroundTruthChannels):
        if p_tx is None or noise_power is None:
            raise ValueError("expected_measure needs p_tx and noise_power with a scene input")
        truth = GroundTruthChannels.from_scene(truth, p_tx, noise_power)
    p_bar = expected_power(truth, pattern.v, k)
    return MeasurementRecord(k, pattern.id, p_bar, 0, truth.p_tx, truth.noise_power)


def campaign(master_seed: int, scene, grids, m: int, q: int, p_tx: float,
             noise_power: float, alphabet: PhaseAlphabet, coherence: int = 1,
             threads: int = 1) -> tuple[list[ReflectionPattern], dict[int, PowerProfile]]:
    """Measure every grid in `grids` under one shared list of M random patterns.

    Patterns come from the (seed, "patterns") stream; measurement (k, m) from
    the (seed, "measure", k, m) stream, so any thread count produces the same
    numbers. Returns the pattern list and a grid -> PowerProfile map.
    """
    if m < 1:
        raise ValueError(f"M must be >= 1, got {m}")
    grids = sorted(set(int(k) for k in grids))
    if not grids:
        raise ValueError("campaign needs at least one grid")
    det = _as_channels(scene)
    pattern_rng = derive_rng(master_seed, "patterns")
    patterns = [random_pattern(pattern_rng, alphabet, det.scene.n_elements, i)
                for i in range(m)]

    def profile_for(k: int) -> PowerProfile:
        powers = np.empty(m)
        for i, pat in enumerate(patterns):
            rng = derive_rng(master_seed, "measure", k, i)
            powers[i] = measure_power(rng, det, k, pat, q, p_tx, noise_power,
                                      coherence).p_bar
        return PowerProfile(k, powers, tuple(range(m)))

    if threads > 1 and len(grids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            profiles = dict(zip(grids, pool.map(profile_for, grids)))
    else:
        profiles = {k: profile_for(k) for k in grids}
    return patterns, profiles


# ---------------------------------------------------------------------------
# measurement files
# ---------------------------------------------------------------------------
# Shortest-repr decimals so a write/read cycle reproduces the exact floats;
# this is the ingestion boundary for testbed data.

def write_measurements(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("grid,pattern,p_bar,Q,P,sigma2\n")
        for r in records:
            fh.write(f"{r.grid},{r.pattern},{r.p_bar!r},{r.q},{r.p_tx!r},{r.noise_power!r}\n")


def read_measurements(path) -> list[MeasurementRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["grid", "pattern", "p_bar", "Q", "P", "sigma2"]:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                records.append(MeasurementRecord(
                    int(row["grid"]), int(row["pattern"]), float(row["p_bar"]),
                    int(row["Q"]), float(row["P"]), float(row["sigma2"]),
                ))
            except (TypeError, ValueError) as exc:
                raise ArtifactError(f"{path}: line {reader.line_num}: {exc}") from None
    if not records:
        raise ArtifactError(f"{path}: no measurement records")
    return records


def write_patterns(path, patterns) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pattern,element,theta\n")
        for pat in patterns:
            for i, th in enumerate(pat.theta):
                fh.write(f"{pat.id},{i},{float(th)!r}\n")


def read_patterns(path) -> list[ReflectionPattern]:
    rows: dict[int, dict[int, float]] = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["pattern", "element", "theta"]:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                rows.setdefault(int(row["pattern"]), {})[int(row["element"])] = \
                    float(row["theta"])
            except (TypeError, ValueError) as exc:
                raise ArtifactError(f"{path}: line {reader.line_num}: {exc}") from None
    if not rows:
        raise ArtifactError(f"{path}: no patterns")
    patterns = []
    for pid in sorted(rows):
        elems = rows[pid]
        if sorted(elems) != list(range(len(elems))):
            raise ArtifactError(f"{path}: pattern {pid} has gaps in element indices")
        patterns.append(ReflectionPattern(np.array([elems[i] for i in range(len(elems))]), pid))
    return patterns


def profiles_from_records(records) -> dict[int, PowerProfile]:
    """Group records into per-grid profiles ordered by pattern id.

    Every grid must carry the same pattern-id set (campaign share contract).
    """
    by_grid: dict[int, dict[int, MeasurementRecord]] = {}
    for r in records:
        if r.pattern in by_grid.setdefault(r.grid, {}):
            raise ArtifactError(f"duplicate record for grid {r.grid}, pattern {r.pattern}")
        by_grid[r.grid][r.pattern] = r
    id_sets = {tuple(sorted(pats)) for pats in by_grid.values()}
    if len(id_sets) != 1:
        raise ArtifactError("grids carry different pattern sets; not one campaign")
    ids = id_sets.pop()
    return {
        k: PowerProfile(k, np.array([by_grid[k][i].p_bar for i in ids]), ids)
        for k in sorted(by_grid)
    }
