"""Scene geometry: the served region, its grids, the IRS array, and the
deterministic multipath layout.

Coordinates are 3-D (x, y, z) in meters. The served region is the rectangle
[0, d1] x [0, d2] on the ground plane, tiled into square grids of side
`grid_size`. The IRS is a uniform planar array parallel to the y-z plane with
`rows_y` x `rows_z` elements at half-wavelength spacing; its steering
parameterization below covers directions with nonnegative y-component, so
scenes must keep users and scatterers on that side of the array.

A scene carries only the *deterministic* propagation state: per-path lengths
and arrival/departure angles plus large-scale gains and Rician factors.
Channel realizations are built from it in `propagation`.
"""

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "PathSpec",
    "Grid",
    "SceneConfig",
    "ScatterCluster",
    "SynthParams",
    "build_grids",
    "steering_ula",
    "steering_upa",
    "direction_angles",
    "synth_scene",
    "save_scene",
    "load_scene",
]


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathSpec:
    """One deterministic propagation path seen from the IRS.

    Attributes
    ----------
    length : float
        Total path length in meters (strictly positive); sets the path phase
        2*pi*length/wavelength.
    azimuth : float
        Polar angle in [0, pi] measured from the array's z axis; the z-axis
        direction cosine is cos(azimuth).
    elevation : float
        Angle in [0, pi] of the path direction projected on the x-y plane,
        measured from the x axis; the y-axis direction cosine is
        sin(azimuth) * sin(elevation).
    """

    length: float
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not (math.isfinite(self.length) and self.length > 0):
            raise ConfigurationError(f"path length must be positive, got {self.length!r}")
        for name in ("azimuth", "elevation"):
            val = getattr(self, name)
            if not (math.isfinite(val) and 0.0 <= val <= math.pi):
                raise ConfigurationError(f"path {name} must lie in [0, pi], got {val!r}")


@dataclass(frozen=True)
class Grid:
    """One square grid of the served region: 0-based index and center (x, y)."""

    index: int
    center: tuple[float, float]

    def center3d(self, height: float) -> np.ndarray:
        return np.array([self.center[0], self.center[1], height])


def build_grids(d1: float, d2: float, grid_size: float) -> list[Grid]:
    """Tile [0, d1] x [0, d2] into square grids of side `grid_size`.

    Both side lengths must be integer multiples of `grid_size`. Grids are
    listed row-major with the x index outermost: grid (i, j) has index
    i * (d2/grid_size) + j and center ((i + 1/2), (j + 1/2)) * grid_size.
    """
    for name, val in (("d1", d1), ("d2", d2), ("grid_size", grid_size)):
        if not (math.isfinite(val) and val > 0):
            raise ConfigurationError(f"{name} must be positive, got {val!r}")
    n1, n2 = d1 / grid_size, d2 / grid_size
    if abs(n1 - round(n1)) > 1e-9 or abs(n2 - round(n2)) > 1e-9:
        raise ConfigurationError(
            f"region {d1} x {d2} is not an integer number of {grid_size} m grids"
        )
    n1, n2 = round(n1), round(n2)
    return [
        Grid(i * n2 + j, ((i + 0.5) * grid_size, (j + 0.5) * grid_size))
        for i in range(n1)
        for j in range(n2)
    ]


def steering_ula(gamma: float, n: int) -> np.ndarray:
    """Steering vector of an n-element half-wavelength ULA.

    Entry i (0-based) is exp(-1j * i * pi * gamma), where gamma is the
    direction cosine along the array axis.
    """
    if n < 1:
        raise ValueError(f"array size must be >= 1, got {n}")
    if not math.isfinite(gamma):
        raise ValueError(f"direction cosine must be finite, got {gamma!r}")
    return np.exp(-1j * np.pi * gamma * np.arange(n))


def steering_upa(azimuth: float, elevation: float, rows_y: int, rows_z: int) -> np.ndarray:
    """Steering vector of a rows_y x rows_z UPA in the y-z plane.

    Kronecker product of the y-axis ULA factor (direction cosine
    sin(azimuth)*sin(elevation)) with the z-axis factor (cosine cos(azimuth)),
    y factor outermost: element (iy, iz) sits at flat index iy * rows_z + iz.
    Both angles live in [0, pi], which spans the half-space y >= 0.
    """
    for name, val in (("azimuth", azimuth), ("elevation", elevation)):
        if not (math.isfinite(val) and 0.0 <= val <= math.pi):
            raise ConfigurationError(f"{name} must lie in [0, pi], got {val!r}")
    gamma_y = math.sin(azimuth) * math.sin(elevation)
    gamma_z = math.cos(azimuth)
    return np.kron(steering_ula(gamma_y, rows_y), steering_ula(gamma_z, rows_z))


def direction_angles(vec: np.ndarray) -> tuple[float, float]:
    """(azimuth, elevation) of a 3-D direction, per the UPA convention above.

    azimuth = arccos(z/r); elevation = atan2(y, x), which lands in [0, pi]
    only for y >= 0 -- directions behind the array plane are rejected.
    """
    vec = np.asarray(vec, dtype=float)
    r = float(np.linalg.norm(vec))
    if not (math.isfinite(r) and r > 0):
        raise ValueError("direction vector must be nonzero and finite")
    x, y, z = (float(c) for c in vec)
    if y < -1e-9 * r:
        raise ConfigurationError(
            f"direction {vec.tolist()} points behind the array plane (y < 0)"
        )
    y = max(y, 0.0)
    azimuth = math.acos(min(1.0, max(-1.0, z / r)))
    elevation = math.atan2(y, x) if (x, y) != (0.0, 0.0) else 0.0
    return azimuth, elevation


@dataclass(frozen=True)
class SceneConfig:
    """Full deterministic description of one deployment.

    Per-grid sequences (`paths_iu`, `gain_iu`, `rician_iu`) are indexed by the
    grid order of `build_grids(d1, d2, grid_size)`. With `deterministic_only`
    the random channel components are switched off entirely (the infinite
    Rician-factor idealization), regardless of the stored Rician factors.
    """

    d1: float
    d2: float
    grid_size: float
    irs_pos: tuple[float, float, float]
    bs_pos: tuple[float, float, float]
    rows_y: int
    rows_z: int
    wavelength: float
    paths_bi: tuple[PathSpec, ...]
    paths_iu: tuple[tuple[PathSpec, ...], ...]
    gain_bi: float
    gain_iu: tuple[float, ...]
    rician_bi: float
    rician_iu: tuple[float, ...]
    deterministic_only: bool = False

    def __post_init__(self):
        grids = build_grids(self.d1, self.d2, self.grid_size)
        if not (isinstance(self.rows_y, int) and isinstance(self.rows_z, int)
                and self.rows_y >= 1 and self.rows_z >= 1):
            raise ConfigurationError(
                f"IRS rows must be positive integers, got {self.rows_y!r} x {self.rows_z!r}"
            )
        if not (math.isfinite(self.wavelength) and self.wavelength > 0):
            raise ConfigurationError(f"wavelength must be positive, got {self.wavelength!r}")
        for pos_name in ("irs_pos", "bs_pos"):
            pos = getattr(self, pos_name)
            if len(pos) != 3 or not all(math.isfinite(c) for c in pos):
                raise ConfigurationError(f"{pos_name} must be a finite 3-D point, got {pos!r}")
        k = len(grids)
        for name in ("paths_iu", "gain_iu", "rician_iu"):
            if len(getattr(self, name)) != k:
                raise ConfigurationError(
                    f"{name} has {len(getattr(self, name))} entries for {k} grids"
                )
        if not (math.isfinite(self.gain_bi) and self.gain_bi > 0):
            raise ConfigurationError(f"gain_bi must be positive, got {self.gain_bi!r}")
        if any(not (math.isfinite(g) and g > 0) for g in self.gain_iu):
            raise ConfigurationError("gain_iu entries must all be positive")
        for name in ("rician_bi", "rician_iu"):
            vals = getattr(self, name)
            vals = vals if name == "rician_iu" else (vals,)
            if any(not (math.isfinite(e) and e >= 0) for e in vals):
                raise ConfigurationError(f"{name} entries must be finite and >= 0")
        object.__setattr__(self, "_grids", tuple(grids))

    @property
    def grids(self) -> tuple[Grid, ...]:
        return self._grids

    @property
    def n_grids(self) -> int:
        return len(self._grids)

    @property
    def n_elements(self) -> int:
        return self.rows_y * self.rows_z

    def grid_centers(self) -> np.ndarray:
        """(K, 2) array of grid centers."""
        return np.array([g.center for g in self.grids])


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScatterCluster:
    """Axis-aligned box from which `count` scatterer positions are drawn."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError(f"cluster count must be >= 1, got {self.count}")
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ConfigurationError("cluster bounds must be 3-D")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ConfigurationError(f"cluster box {self.lo}..{self.hi} is empty")


@dataclass(frozen=True)
class SynthParams:
    """Knobs for `synth_scene`.

    IU scatterers are shared by all grids; each contributes one path per grid
    whose angles follow the scatterer-to-grid direction, so nearby grids get
    nearly identical path geometry and the synthesized field is spatially
    correlated. Clusters close to the region produce fast angular variation
    (short correlation) and distant clusters slow variation, which is the
    handle for building heterogeneous scenes. IU clusters must sit at y <= 0
    and BI clusters at y >= the IRS y-coordinate to keep every direction in
    front of the array.
    """

    d1: float = 15.0
    d2: float = 15.0
    grid_size: float = 3.0
    rows_y: int = 4
    rows_z: int = 4
    wavelength: float = 1.0
    irs_pos: tuple[float, float, float] = (7.5, -4.0, 3.0)
    bs_pos: tuple[float, float, float] = (-30.0, -25.0, 15.0)
    user_height: float = 1.0
    bi_clusters: tuple[ScatterCluster, ...] = (
        ScatterCluster((-15.0, -3.5, 2.0), (-5.0, -1.0, 8.0), 2),
    )
    iu_clusters: tuple[ScatterCluster, ...] = (
        ScatterCluster((-30.0, -22.0, 1.0), (-22.0, -16.0, 6.0), 1),
    )
    gain_bi: float = 1.0
    gain_iu: float = 1.0
    rician_bi: float = 4.0
    rician_iu: float = 4.0
    deterministic_only: bool = False


def _sample_cluster_points(rng: np.random.Generator, clusters) -> np.ndarray:
    pts = [rng.uniform(c.lo, c.hi, size=(c.count, 3)) for c in clusters]
    return np.vstack(pts)


def synth_scene(rng: np.random.Generator, params: SynthParams) -> SceneConfig:
    """Draw scatterer positions and assemble a geometrically consistent scene.

    Every path length is a straight-line bounce through its scatterer
    (|a - s| + |s - b|), and every path angle is read off the corresponding
    direction at the stated endpoint: BS-IRS paths use the IRS-to-scatterer
    direction, IRS-user paths the scatterer-to-grid direction. Identical rng
    state reproduces the scene bit for bit.
    """
    grids = build_grids(params.d1, params.d2, params.grid_size)
    irs = np.asarray(params.irs_pos, dtype=float)
    bs = np.asarray(params.bs_pos, dtype=float)

    bi_scatter = _sample_cluster_points(rng, params.bi_clusters)
    iu_scatter = _sample_cluster_points(rng, params.iu_clusters)
    if np.any(bi_scatter[:, 1] < irs[1]):
        raise ConfigurationError("BI scatter clusters must keep y >= the IRS y-coordinate")
    if np.any(iu_scatter[:, 1] > 0.0):
        raise ConfigurationError("IU scatter clusters must sit at y <= 0, south of the region")

    paths_bi = []
    for s in bi_scatter:
        azimuth, elevation = direction_angles(s - irs)
        length = float(np.linalg.norm(s - bs) + np.linalg.norm(irs - s))
        paths_bi.append(PathSpec(length, azimuth, elevation))

    paths_iu = []
    for g in grids:
        center = g.center3d(params.user_height)
        specs = []
        for s in iu_scatter:
            azimuth, elevation = direction_angles(center - s)
            length = float(np.linalg.norm(s - irs) + np.linalg.norm(center - s))
            specs.append(PathSpec(length, azimuth, elevation))
        paths_iu.append(tuple(specs))

    k = len(grids)
    return SceneConfig(
        d1=params.d1,
        d2=params.d2,
        grid_size=params.grid_size,
        irs_pos=tuple(float(c) for c in irs),
        bs_pos=tuple(float(c) for c in bs),
        rows_y=params.rows_y,
        rows_z=params.rows_z,
        wavelength=params.wavelength,
        paths_bi=tuple(paths_bi),
        paths_iu=tuple(paths_iu),
        gain_bi=params.gain_bi,
        gain_iu=(params.gain_iu,) * k,
        rician_bi=params.rician_bi,
        rician_iu=(params.rician_iu,) * k,
        deterministic_only=params.deterministic_only,
    )


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------
# JSON with fixed sections; floats survive the round trip exactly because the
# encoder emits shortest-repr decimal.

def _path_to_dict(p: PathSpec) -> dict:
    return {"length": p.length, "azimuth": p.azimuth, "elevation": p.elevation}


def _path_from_dict(d: dict, where: str) -> PathSpec:
    try:
        return PathSpec(float(d["length"]), float(d["azimuth"]), float(d["elevation"]))
    except KeyError as exc:
        raise ConfigurationError(f"scene file: {where} is missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"scene file: {where}: {exc}") from None


def scene_to_dict(scene: SceneConfig) -> dict:
    return {
        "region": {"d1": scene.d1, "d2": scene.d2, "grid_size": scene.grid_size},
        "irs": {
            "pos": list(scene.irs_pos),
            "rows_y": scene.rows_y,
            "rows_z": scene.rows_z,
            "wavelength": scene.wavelength,
        },
        "bs": {"pos": list(scene.bs_pos)},
        "paths": {
            "bi": [_path_to_dict(p) for p in scene.paths_bi],
            "iu": [[_path_to_dict(p) for p in per_grid] for per_grid in scene.paths_iu],
        },
        "fading": {
            "gain_bi": scene.gain_bi,
            "gain_iu": list(scene.gain_iu),
            "rician_bi": scene.rician_bi,
            "rician_iu": list(scene.rician_iu),
            "deterministic_only": scene.deterministic_only,
        },
    }


def _section(data: dict, name: str) -> dict:
    if name not in data:
        raise ConfigurationError(f"scene file: missing section {name!r}")
    if not isinstance(data[name], dict):
        raise ConfigurationError(f"scene file: section {name!r} must be an object")
    return data[name]


def scene_from_dict(data: dict) -> SceneConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("scene file: top level must be an object")
    unknown = set(data) - {"region", "irs", "bs", "paths", "fading"}
    if unknown:
        raise ConfigurationError(f"scene file: unknown section(s) {sorted(unknown)}")
    region = _section(data, "region")
    irs = _section(data, "irs")
    bs = _section(data, "bs")
    paths = _section(data, "paths")
    fading = _section(data, "fading")
    try:
        return SceneConfig(
            d1=float(region["d1"]),
            d2=float(region["d2"]),
            grid_size=float(region["grid_size"]),
            irs_pos=tuple(float(c) for c in irs["pos"]),
            bs_pos=tuple(float(c) for c in bs["pos"]),
            rows_y=int(irs["rows_y"]),
            rows_z=int(irs["rows_z"]),
            wavelength=float(irs["wavelength"]),
            paths_bi=tuple(
                _path_from_dict(p, f"paths.bi[{i}]") for i, p in enumerate(paths["bi"])
            ),
            paths_iu=tuple(
                tuple(
                    _path_from_dict(p, f"paths.iu[{k}][{i}]") for i, p in enumerate(per_grid)
                )
                for k, per_grid in enumerate(paths["iu"])
            ),
            gain_bi=float(fading["gain_bi"]),
            gain_iu=tuple(float(g) for g in fading["gain_iu"]),
            rician_bi=float(fading["rician_bi"]),
            rician_iu=tuple(float(e) for e in fading["rician_iu"]),
            deterministic_only=bool(fading.get("deterministic_only", False)),
        )
    except KeyError as exc:
        raise ConfigurationError(f"scene file: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"scene file: {exc}") from None


def save_scene(path, scene: SceneConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1)
        fh.write("\n")


def load_scene(path) -> SceneConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scene file {path}: {exc}") from None
    return scene_from_dict(data)


def region_geometry(path) -> tuple[float, float, float]:
    """(d1, d2, grid_size) read from a scene file's region section only.

    Selection stages need grid geometry but must not touch the propagation
    truth; this reads nothing else.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scene file {path}: {exc}") from None
    region = _section(data, "region")
    try:
        return float(region["d1"]), float(region["d2"]), float(region["grid_size"])
    except KeyError as exc:
        raise ConfigurationError(f"scene file: region is missing key {exc.args[0]!r}") from None
