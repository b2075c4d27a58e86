"""Spatial-correlation characterization of the measured power field and
typical-grid selection.

The squared distance between two grids' power profiles, averaged over grid
pairs at similar separation, is an empirical variogram of the field. A
spherical model fitted to it yields the correlated range c* (the lag where
the model reaches 95% of its sill); the region is split into subregions
whose diagonal stays within c*_0, per-subregion ranges are refitted, and
each subregion contributes a few "typical" grids for channel estimation,
the count scaling with how fast its field decorrelates.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import ArtifactError, SelectionError
from .measurement import PowerProfile
from .scene import Grid, build_grids

__all__ = [
    "EmpiricalVariogram",
    "VariogramModel",
    "RegionSplit",
    "SelectionResult",
    "power_difference",
    "empirical_variogram",
    "fit_spherical",
    "correlated_range",
    "split_region",
    "subregion_range",
    "typical_count",
    "select_typical",
    "write_variogram",
    "read_variogram",
    "write_fit",
    "read_fit",
    "write_selection",
    "read_selection",
]

# A white field's bins vary only by sampling noise (relative spread about
# sqrt(2/(M * pairs-per-bin)) << 1); structured fields rise from ~0 toward a
# sill and spread O(1). Bins flatter than this are declared uncorrelated
# before any model fitting.
FLAT_TOL = 0.25
# After fitting, a partial sill below this fraction of the total sill is
# noise chasing on a flat field, not structure.
MIN_PARTIAL_FRACTION = 0.01


def _ceil_safe(x: float) -> int:
    # tolerate float noise at exact-integer boundaries (30/15.0000000000001)
    return math.ceil(x * (1.0 - 1e-12))


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Retained lag bins: mean pair distance, mean squared profile
    difference, and pair count per bin (empty bins are dropped)."""

    lag: np.ndarray
    gamma: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        lag = np.asarray(self.lag, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        count = np.asarray(self.count, dtype=int)
        if not (lag.shape == gamma.shape == count.shape) or lag.ndim != 1:
            raise ValueError("lag, gamma, count must be equal-length vectors")
        if len(lag) and (np.any(count < 1) or np.any(gamma < 0)):
            raise ValueError("retained bins need count >= 1 and gamma >= 0")
        for name, arr in (("lag", lag), ("gamma", gamma), ("count", count)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.lag)


@dataclass(frozen=True)
class VariogramModel:
    """Fitted spherical variogram: nugget + partial sill rising over
    `range_param`, with `sill` the total asymptote (nugget included) and
    `c_star` the 95%-of-sill lag. `uncorrelated` marks flat/degenerate fields
    (then c_star = 0 and the other parameters are nominal)."""

    nugget: float
    sill: float
    range_param: float
    c_star: float
    uncorrelated: bool = False

    def __post_init__(self):
        if self.nugget < 0 or self.sill < self.nugget - 1e-12:
            raise ValueError("need 0 <= nugget <= sill")
        if not self.uncorrelated and self.sill <= 0:
            raise ValueError("a correlated model needs sill > 0")
        if self.range_param <= 0:
            raise ValueError("range_param must be > 0")
        if self.c_star < 0:
            raise ValueError("c_star must be >= 0")

    @property
    def partial_sill(self) -> float:
        return self.sill - self.nugget

    def predict(self, d) -> np.ndarray:
        """Model value at lag(s) d >= 0."""
        d = np.asarray(d, dtype=float)
        t = np.minimum(d / self.range_param, 1.0)
        return self.nugget + self.partial_sill * (1.5 * t - 0.5 * t ** 3)


def power_difference(p_i: PowerProfile, p_j: PowerProfile) -> float:
    """Squared Euclidean distance between two aligned power profiles."""
    if p_i.pattern_ids != p_j.pattern_ids:
        raise ValueError("profiles come from different pattern lists")
    return float(np.sum((p_i.powers - p_j.powers) ** 2))


def _centers_map(grids) -> dict[int, tuple[float, float]]:
    if isinstance(grids, dict):
        return {int(k): (float(c[0]), float(c[1])) for k, c in grids.items()}
    out = {}
    for g in grids:
        if not isinstance(g, Grid):
            raise TypeError("grids must be Grid objects or an index->center dict")
        out[g.index] = g.center
    return out


def empirical_variogram(profiles: dict[int, PowerProfile], grids,
                        bin_width: float) -> EmpiricalVariogram:
    """Bin all profile pairs by center distance; gamma = mean squared
    difference per bin, lag = mean pair distance per bin.

    `grids` supplies centers (Grid sequence or index->(x, y) map) and must
    cover every profiled grid.
    """
    if bin_width <= 0:
        raise ValueError(f"bin_width must be > 0, got {bin_width!r}")
    if len(profiles) < 2:
        raise SelectionError("variogram needs at least two measured grids")
    centers = _centers_map(grids)
    missing = sorted(set(profiles) - set(centers))
    if missing:
        raise ValueError(f"no centers for measured grids {missing}")

    keys = sorted(profiles)
    sums: dict[int, list] = {}
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            i, j = keys[a], keys[b]
            (xi, yi), (xj, yj) = centers[i], centers[j]
            dist = math.hypot(xi - xj, yi - yj)
            diff = power_difference(profiles[i], profiles[j])
            slot = sums.setdefault(int(dist / bin_width), [0.0, 0.0, 0])
            slot[0] += dist
            slot[1] += diff
            slot[2] += 1
    if not sums:
        raise SelectionError("no grid pairs to bin")
    idx = sorted(sums)
    lag = np.array([sums[i][0] / sums[i][2] for i in idx])
    gamma = np.array([sums[i][1] / sums[i][2] for i in idx])
    count = np.array([sums[i][2] for i in idx])
    return EmpiricalVariogram(lag, gamma, count)


def _spherical(d: np.ndarray, nugget: float, psill: float, rng: float) -> np.ndarray:
    t = np.minimum(d / rng, 1.0)
    return nugget + psill * (1.5 * t - 0.5 * t ** 3)


def fit_spherical(emp: EmpiricalVariogram, flat_tol: float = FLAT_TOL) -> VariogramModel:
    """Weighted least-squares spherical fit of an empirical variogram.

    Residuals are weighted by sqrt(bin count); the range is multi-started at
    {1/4, 1/2, 1} of the maximum lag and the best run wins. Flat inputs (by
    the weighted coefficient of variation, or a vanishing fitted partial
    sill) come back flagged uncorrelated with c_star = 0.
    """
    if len(emp) < 3:
        raise SelectionError(f"spherical fit needs >= 3 bins, got {len(emp)}")
    w = emp.count.astype(float)
    mean = float(np.average(emp.gamma, weights=w))
    max_lag = float(emp.lag.max())
    if mean <= 0:
        # all-zero bins: constant field
        return VariogramModel(0.0, 0.0, max_lag, 0.0, uncorrelated=True)
    spread = math.sqrt(float(np.average((emp.gamma - mean) ** 2, weights=w)))
    if spread / mean <= flat_tol:
        return VariogramModel(mean, mean, max_lag, 0.0, uncorrelated=True)

    gmin, gmax = float(emp.gamma.min()), float(emp.gamma.max())
    sqrt_w = np.sqrt(w)

    def residuals(params):
        return sqrt_w * (_spherical(emp.lag, *params) - emp.gamma)

    best = None
    for frac in (0.25, 0.5, 1.0):
        x0 = [max(gmin, 0.0), max(gmax - gmin, 1e-3 * gmax), frac * max_lag]
        sol = least_squares(
            residuals, x0,
            bounds=([0.0, 0.0, 1e-6 * max_lag], [2 * gmax, 3 * gmax, 10 * max_lag]),
        )
        if best is None or sol.cost < best.cost:
            best = sol
    nugget, psill, rng = (float(v) for v in best.x)
    sill = nugget + psill
    if sill <= 0 or psill < MIN_PARTIAL_FRACTION * sill:
        return VariogramModel(min(nugget, sill), max(sill, 0.0), max_lag, 0.0,
                              uncorrelated=True)
    model = VariogramModel(nugget, sill, rng, 0.0)
    return VariogramModel(nugget, sill, rng, correlated_range(model))


def correlated_range(model: VariogramModel, level: float = 0.95) -> float:
    """Smallest lag where the model reaches `level` of its total sill.

    For the spherical family this is x*range with 1.5x - 0.5x^3 equal to
    (level*sill - nugget)/partial_sill; solved by bisection on [0, 1]. A
    nugget large enough to already exceed the level gives 0.
    """
    psill = model.partial_sill
    if psill <= 0 or model.sill <= 0:
        return 0.0
    target = (level * model.sill - model.nugget) / psill
    if target <= 0:
        return 0.0
    if target >= 1.0:  # unreachable for level < 1, defensive
        return float(model.range_param)
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if 1.5 * mid - 0.5 * mid ** 3 < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * model.range_param


@dataclass(frozen=True)
class RegionSplit:
    """Rectangular split of the region into rho1 x rho2 equal segments.

    `subregions[t]` lists the grid indices whose centers fall in segment
    t = col*rho2 + row; `max_grids` is the guaranteed per-subregion cap."""

    rho1: int
    rho2: int
    subregions: tuple[tuple[int, ...], ...]
    max_grids: int
    c0_star: float

    @property
    def n_subregions(self) -> int:
        return self.rho1 * self.rho2


def split_region(d1: float, d2: float, grid_size: float, c0_star: float,
                 fallback_side: float | None = None) -> RegionSplit:
    """Split [0,d1]x[0,d2] so each subregion's diagonal stays within c0_star.

    Segment counts are ceil(d_i / (c0_star/sqrt(2))), capped at the grid
    count per axis so no subregion is empty. A nonpositive c0_star means the
    field is uncorrelated and the region is instead cut by `fallback_side`
    (default: half the shorter region side).
    """
    grids = build_grids(d1, d2, grid_size)
    n1 = round(d1 / grid_size)
    n2 = round(d2 / grid_size)
    if c0_star > 0:
        side = c0_star / math.sqrt(2.0)
    else:
        side = fallback_side if fallback_side and fallback_side > 0 else min(d1, d2) / 2.0
    rho1 = min(max(_ceil_safe(d1 / side), 1), n1)
    rho2 = min(max(_ceil_safe(d2 / side), 1), n2)

    seg1, seg2 = d1 / rho1, d2 / rho2
    members: list[list[int]] = [[] for _ in range(rho1 * rho2)]
    for g in grids:
        col = min(int(g.center[0] / seg1), rho1 - 1)
        row = min(int(g.center[1] / seg2), rho2 - 1)
        members[col * rho2 + row].append(g.index)
    max_grids = _ceil_safe(d1 / (rho1 * grid_size)) * _ceil_safe(d2 / (rho2 * grid_size))
    return RegionSplit(rho1, rho2, tuple(tuple(m) for m in members), max_grids,
                       max(c0_star, 0.0))


def subregion_range(profiles: dict[int, PowerProfile], subregion, grids,
                    bin_width: float, flat_tol: float = FLAT_TOL) -> float:
    """Correlated range of one subregion, from its own measured grids.

    Falls back to the maximum pairwise center distance inside the subregion
    when the measured intersection yields too few pairs or bins to fit.
    """
    centers = _centers_map(grids)
    inside = [k for k in subregion if k in profiles]
    sub_profiles = {k: profiles[k] for k in inside}
    try:
        emp = empirical_variogram(sub_profiles, centers, bin_width)
        return fit_spherical(emp, flat_tol).c_star
    except SelectionError:
        pts = [centers[k] for k in subregion]
        if len(pts) < 2:
            return 0.0
        return max(
            math.hypot(a[0] - b[0], a[1] - b[1])
            for i, a in enumerate(pts)
            for b in pts[i + 1:]
        )


def typical_count(subregion_size: int, grid_size: float, c_t_star: float,
                  scale: float) -> int:
    """Grids to estimate in a subregion: ceil(scale * |A| * d0^2 / c*^2),
    clamped to [1, |A|]. A nonpositive c* (uncorrelated subregion) selects
    every grid."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale!r}")
    if subregion_size < 1:
        raise ValueError("subregion must be nonempty")
    if c_t_star <= 0:
        return subregion_size
    raw = scale * subregion_size * grid_size ** 2 / c_t_star ** 2
    return min(max(_ceil_safe(raw), 1), subregion_size)


@dataclass(frozen=True)
class SelectionResult:
    """Per-subregion correlated ranges and counts, plus the selected grids."""

    c_stars: tuple[float, ...]
    etas: tuple[int, ...]
    per_subregion: tuple[tuple[int, ...], ...]
    selected: tuple[int, ...]

    @property
    def k2(self) -> int:
        return len(self.selected)


def select_typical(rng: np.random.Generator, split: RegionSplit, etas,
                   c_stars=None) -> SelectionResult:
    """Sample eta_t grids uniformly without replacement from each subregion."""
    etas = tuple(int(e) for e in etas)
    if len(etas) != split.n_subregions:
        raise ValueError(f"expected {split.n_subregions} counts, got {len(etas)}")
    chosen: list[tuple[int, ...]] = []
    for members, eta in zip(split.subregions, etas):
        if not 1 <= eta <= len(members):
            raise ValueError(f"eta {eta} out of range for subregion of {len(members)}")
        picks = rng.choice(len(members), size=eta, replace=False)
        chosen.append(tuple(sorted(members[i] for i in picks)))
    c_stars = tuple(float(c) for c in c_stars) if c_stars is not None \
        else (0.0,) * len(etas)
    return SelectionResult(
        c_stars=c_stars,
        etas=etas,
        per_subregion=tuple(chosen),
        selected=tuple(sorted(k for sub in chosen for k in sub)),
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_variogram(path, emp: EmpiricalVariogram) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lag,gamma,count\n")
        for lag, gamma, count in zip(emp.lag, emp.gamma, emp.count):
            fh.write(f"{float(lag)!r},{float(gamma)!r},{int(count)}\n")


def read_variogram(path) -> EmpiricalVariogram:
    import csv

    lags, gammas, counts = [], [], []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["lag", "gamma", "count"]:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            lags.append(float(row["lag"]))
            gammas.append(float(row["gamma"]))
            counts.append(int(row["count"]))
    if not lags:
        raise ArtifactError(f"{path}: no variogram bins")
    return EmpiricalVariogram(np.array(lags), np.array(gammas), np.array(counts))


def write_fit(path, model: VariogramModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "kind": "spherical",
            "nugget": model.nugget,
            "sill": model.sill,
            "range_param": model.range_param,
            "c_star": model.c_star,
            "uncorrelated": model.uncorrelated,
        }, fh, indent=1)
        fh.write("\n")


def read_fit(path) -> VariogramModel:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("kind") != "spherical":
        raise ArtifactError(f"{path}: unknown variogram kind {data.get('kind')!r}")
    return VariogramModel(
        float(data["nugget"]), float(data["sill"]), float(data["range_param"]),
        float(data["c_star"]), bool(data.get("uncorrelated", False)),
    )


def write_selection(path, selected) -> None:
    """Manifest consumed by the estimation stage: one grid index per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for k in selected:
            fh.write(f"{int(k)}\n")


def read_selection(path) -> tuple[int, ...]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise ArtifactError(f"{path}: line {line_no} is not a grid index") from None
    if not out:
        raise ArtifactError(f"{path}: empty selection manifest")
    return tuple(out)
