"""Channel construction: deterministic multipath sums, Rician random
components, cascaded BS-IRS-user channels, and the closed-form expected
received power.

Conventions. All channel vectors are columns of length N (the IRS size). The
cascade through the surface is elementwise: h[i] = conj(h_iu[i]) * h_bi[i],
so a reflection v enters the received signal as vᴴh. Powers are watts.

The expected received power under reflection v splits into a beamformable
term |vᴴ eff|² plus a reflection-independent floor; the four coefficients
weighting the split are in `power_coeffs` and the derivation is validated
end to end by a Monte-Carlo oracle in `evaluate`.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .scene import SceneConfig, steering_upa

__all__ = [
    "DeterministicChannels",
    "GroundTruthChannels",
    "PowerCoefficients",
    "deterministic_iu",
    "deterministic_bi",
    "cascade",
    "sample_random_channel",
    "instantaneous_channel",
    "power_coeffs",
    "expected_power",
    "export_channels",
    "import_channels",
]


def _path_sum(paths, gain: float, wavelength: float, rows_y: int, rows_z: int) -> np.ndarray:
    n = rows_y * rows_z
    total = np.zeros(n, dtype=complex)
    for p in paths:
        phase = np.exp(-2j * np.pi * p.length / wavelength)
        total += phase * steering_upa(p.azimuth, p.elevation, rows_y, rows_z)
    return np.sqrt(gain) * total


def deterministic_iu(scene: SceneConfig, k: int) -> np.ndarray:
    """Deterministic IRS-to-user channel of grid k: the per-path sum of
    phase-rotated steering vectors, scaled by the grid's large-scale gain."""
    if not 0 <= k < scene.n_grids:
        raise ValueError(f"grid {k} out of range [0, {scene.n_grids})")
    return _path_sum(
        scene.paths_iu[k], scene.gain_iu[k], scene.wavelength, scene.rows_y, scene.rows_z
    )


def deterministic_bi(scene: SceneConfig) -> np.ndarray:
    """Deterministic BS-to-IRS channel (grid-independent)."""
    return _path_sum(scene.paths_bi, scene.gain_bi, scene.wavelength, scene.rows_y, scene.rows_z)


def cascade(h_iu: np.ndarray, h_bi: np.ndarray) -> np.ndarray:
    """Elementwise cascaded channel conj(h_iu) * h_bi."""
    h_iu = np.asarray(h_iu)
    h_bi = np.asarray(h_bi)
    if h_iu.shape != h_bi.shape:
        raise ValueError(f"channel length mismatch: {h_iu.shape} vs {h_bi.shape}")
    return np.conj(h_iu) * h_bi


def sample_random_channel(rng: np.random.Generator, gain: float, n: int,
                          size: int | None = None) -> np.ndarray:
    """Circularly symmetric complex Gaussian vector(s), per-entry variance `gain`.

    Returns shape (n,), or (size, n) when size is given. Real and imaginary
    parts each carry variance gain/2.
    """
    if gain < 0:
        raise ValueError(f"gain must be >= 0, got {gain!r}")
    shape = (n,) if size is None else (size, n)
    if gain == 0:
        return np.zeros(shape, dtype=complex)
    scale = np.sqrt(gain / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class DeterministicChannels:
    """Deterministic channel vectors of a scene: h_bi (N,) and h_iu (K, N)."""

    scene: SceneConfig
    h_bi: np.ndarray
    h_iu: np.ndarray

    @classmethod
    def from_scene(cls, scene: SceneConfig) -> "DeterministicChannels":
        h_bi = deterministic_bi(scene)
        h_iu = np.stack([deterministic_iu(scene, k) for k in range(scene.n_grids)])
        h_bi.setflags(write=False)
        h_iu.setflags(write=False)
        return cls(scene, h_bi, h_iu)

    def cascaded(self, k: int) -> np.ndarray:
        return cascade(self.h_iu[k], self.h_bi)


def _as_channels(scene) -> DeterministicChannels:
    if isinstance(scene, DeterministicChannels):
        return scene
    return DeterministicChannels.from_scene(scene)


def instantaneous_channel(rng: np.random.Generator, scene, k: int,
                          size: int | None = None) -> np.ndarray:
    """One (or `size`) cascaded channel realization(s) for grid k.

    Deterministic and random components mix with the Rician weights
    sqrt(eps/(1+eps)) and sqrt(1/(1+eps)) on each link. Accepts a SceneConfig
    or a prebuilt DeterministicChannels (cheaper in sampling loops). For
    deterministic-only scenes no randomness is consumed and the cascaded
    deterministic channel is returned unchanged.
    """
    det = _as_channels(scene)
    cfg = det.scene
    if not 0 <= k < cfg.n_grids:
        raise ValueError(f"grid {k} out of range [0, {cfg.n_grids})")
    fixed = det.cascaded(k)
    if cfg.deterministic_only:
        return fixed if size is None else np.broadcast_to(fixed, (size, len(fixed))).copy()

    eps_iu = cfg.rician_iu[k]
    eps_bi = cfg.rician_bi
    h_iu = (
        np.sqrt(eps_iu / (1.0 + eps_iu)) * det.h_iu[k]
        + np.sqrt(1.0 / (1.0 + eps_iu))
        * sample_random_channel(rng, cfg.gain_iu[k], cfg.n_elements, size)
    )
    h_bi = (
        np.sqrt(eps_bi / (1.0 + eps_bi)) * det.h_bi
        + np.sqrt(1.0 / (1.0 + eps_bi))
        * sample_random_channel(rng, cfg.gain_bi, cfg.n_elements, size)
    )
    return np.conj(h_iu) * h_bi


class PowerCoefficients(NamedTuple):
    """Weights of the expected-power split for one grid.

    `coherent` scales the beamformable |vᴴ·cascade|² term; `iu_det` multiplies
    the squared norm of the deterministic IU channel (random BI leg); `bi_det`
    the squared norm of the deterministic BI channel; `diffuse` is the constant
    double-random term. All nonnegative, coherent <= 1.
    """

    coherent: float
    iu_det: float
    bi_det: float
    diffuse: float


def power_coeffs(eps_iu: float, eps_bi: float, gain_iu: float, gain_bi: float,
                 n: int) -> PowerCoefficients:
    """Expected-power split coefficients for one grid.

    Denominator (1+eps_iu)(1+eps_bi) throughout; the numerators are the
    Rician power fractions of the four det/random leg combinations, with the
    double-random term summing incoherently over the N elements.
    """
    if eps_iu < 0 or eps_bi < 0:
        raise ValueError("Rician ratios must be >= 0")
    if gain_iu <= 0 or gain_bi <= 0:
        raise ValueError("gains must be > 0")
    denom = (1.0 + eps_iu) * (1.0 + eps_bi)
    return PowerCoefficients(
        eps_iu * eps_bi / denom,
        eps_iu * gain_bi / denom,
        eps_bi * gain_iu / denom,
        n * gain_iu * gain_bi / denom,
    )


class GroundTruthChannels:
    """Everything the closed-form power model needs, per grid.

    Arrays are keyed by grid index: `h_prime` (K, N) cascaded deterministic
    channels, `eff` (K, N) the sqrt(P * coherent)-scaled channels whose
    quadratic form is the beamformable power, `coeffs` (K, 4) the
    PowerCoefficients columns, and `floor` (K,) the reflection-independent
    power floor (includes the noise power). Built either from a scene or from
    imported arrays (external ray-tracing data entering via import_channels).
    """

    def __init__(self, h_prime: np.ndarray, coeffs: np.ndarray, floor: np.ndarray,
                 p_tx: float, noise_power: float, scene: SceneConfig | None = None):
        h_prime = np.asarray(h_prime, dtype=complex)
        coeffs = np.asarray(coeffs, dtype=float)
        floor = np.asarray(floor, dtype=float)
        if h_prime.ndim != 2 or coeffs.shape != (len(h_prime), 4) or floor.shape != (len(h_prime),):
            raise ValueError("inconsistent ground-truth array shapes")
        if p_tx < 0 or noise_power < 0:
            raise ValueError("powers must be >= 0")
        if np.any(coeffs < 0) or np.any(coeffs[:, 0] > 1 + 1e-12):
            raise ValueError("power coefficients out of range")
        if np.any(floor < noise_power - 1e-18):
            raise ValueError("power floor below the noise power")
        self.h_prime = h_prime
        self.coeffs = coeffs
        self.floor = floor
        self.p_tx = float(p_tx)
        self.noise_power = float(noise_power)
        self.scene = scene
        self.eff = np.sqrt(p_tx * coeffs[:, 0])[:, None] * h_prime
        for arr in (self.h_prime, self.coeffs, self.floor, self.eff):
            arr.setflags(write=False)

    @classmethod
    def from_scene(cls, scene, p_tx: float, noise_power: float) -> "GroundTruthChannels":
        det = _as_channels(scene)
        cfg = det.scene
        k_total, n = det.h_iu.shape
        h_prime = np.conj(det.h_iu) * det.h_bi[None, :]
        coeffs = np.empty((k_total, 4))
        floor = np.empty(k_total)
        bi_norm2 = float(np.vdot(det.h_bi, det.h_bi).real)
        for k in range(k_total):
            if cfg.deterministic_only:
                c = PowerCoefficients(1.0, 0.0, 0.0, 0.0)
            else:
                c = power_coeffs(cfg.rician_iu[k], cfg.rician_bi, cfg.gain_iu[k],
                                 cfg.gain_bi, n)
            coeffs[k] = c
            iu_norm2 = float(np.vdot(det.h_iu[k], det.h_iu[k]).real)
            floor[k] = p_tx * (c.iu_det * iu_norm2 + c.bi_det * bi_norm2 + c.diffuse) \
                + noise_power
        return cls(h_prime, coeffs, floor, p_tx, noise_power, scene=cfg)

    @property
    def n_grids(self) -> int:
        return len(self.h_prime)

    @property
    def n_elements(self) -> int:
        return self.h_prime.shape[1]

    def grid_coeffs(self, k: int) -> PowerCoefficients:
        return PowerCoefficients(*self.coeffs[k])

    def covariance(self, k: int) -> np.ndarray:
        """True channel covariance G_k = eff_k eff_kᴴ (rank <= 1)."""
        e = self.eff[k]
        return np.outer(e, np.conj(e))

    def covariances(self, grids=None) -> list[np.ndarray]:
        grids = range(self.n_grids) if grids is None else grids
        return [self.covariance(k) for k in grids]


def _check_unit_modulus(v: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    if v.shape != (n,):
        raise ValueError(f"reflection vector must have shape ({n},), got {v.shape}")
    if np.any(np.abs(np.abs(v) - 1.0) > 1e-6):
        raise ValueError("reflection vector entries must be unit modulus")
    return v


def expected_power(truth: GroundTruthChannels, v: np.ndarray, k: int) -> float:
    """Closed-form expected received power |vᴴ eff_k|² + floor_k (watts)."""
    if not 0 <= k < truth.n_grids:
        raise ValueError(f"grid {k} out of range [0, {truth.n_grids})")
    v = _check_unit_modulus(v, truth.n_elements)
    return float(np.abs(np.vdot(v, truth.eff[k])) ** 2 + truth.floor[k])


# ---------------------------------------------------------------------------
# channel files
# ---------------------------------------------------------------------------
# Two CSVs: per-element cascaded channels and per-grid scalars. This is the
# boundary for externally generated (e.g. ray-traced) channel data; floats are
# written shortest-repr so the round trip is bit-exact.

def export_channels(channels_path, scalars_path, truth: GroundTruthChannels) -> None:
    with open(channels_path, "w", encoding="utf-8") as fh:
        fh.write("grid,element,re,im\n")
        for k in range(truth.n_grids):
            for i in range(truth.n_elements):
                z = truth.h_prime[k, i]
                fh.write(f"{k},{i},{float(z.real)!r},{float(z.imag)!r}\n")
    with open(scalars_path, "w", encoding="utf-8") as fh:
        fh.write("grid,coherent,iu_det,bi_det,diffuse,floor,p_tx,noise_power\n")
        for k in range(truth.n_grids):
            c = truth.coeffs[k]
            fh.write(
                f"{k},{float(c[0])!r},{float(c[1])!r},{float(c[2])!r},{float(c[3])!r},"
                f"{float(truth.floor[k])!r},{truth.p_tx!r},{truth.noise_power!r}\n"
            )


def import_channels(channels_path, scalars_path) -> GroundTruthChannels:
    import csv

    from .errors import ArtifactError

    entries: dict[tuple[int, int], complex] = {}
    with open(channels_path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["grid", "element", "re", "im"]:
            raise ArtifactError(f"{channels_path}: unexpected header {reader.fieldnames}")
        for row in reader:
            entries[int(row["grid"]), int(row["element"])] = \
                float(row["re"]) + 1j * float(row["im"])
    if not entries:
        raise ArtifactError(f"{channels_path}: no channel entries")
    k_total = max(k for k, _ in entries) + 1
    n = max(i for _, i in entries) + 1
    if len(entries) != k_total * n:
        raise ArtifactError(f"{channels_path}: incomplete (grid, element) coverage")
    h_prime = np.empty((k_total, n), dtype=complex)
    for (k, i), z in entries.items():
        h_prime[k, i] = z

    coeffs = np.empty((k_total, 4))
    floor = np.empty(k_total)
    p_tx = noise = None
    seen = set()
    with open(scalars_path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["grid", "coherent", "iu_det", "bi_det", "diffuse", "floor",
                    "p_tx", "noise_power"]
        if reader.fieldnames != expected:
            raise ArtifactError(f"{scalars_path}: unexpected header {reader.fieldnames}")
        for row in reader:
            k = int(row["grid"])
            if not 0 <= k < k_total:
                raise ArtifactError(f"{scalars_path}: grid {k} missing from channel file")
            seen.add(k)
            coeffs[k] = [float(row["coherent"]), float(row["iu_det"]),
                         float(row["bi_det"]), float(row["diffuse"])]
            floor[k] = float(row["floor"])
            p_tx, noise = float(row["p_tx"]), float(row["noise_power"])
    if len(seen) != k_total:
        raise ArtifactError(f"{scalars_path}: scalars cover {len(seen)} of {k_total} grids")
    return GroundTruthChannels(h_prime, coeffs, floor, p_tx, noise)
