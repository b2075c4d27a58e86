"""Discrete passive-reflection optimization over the selected grids.

The design objective is the grid-averaged quadratic form (1/K) sum_k v^H G_k v
with every reflection phase restricted to the discrete alphabet. Covariances
are carried as rank factors so the objective costs O(N * rank) per pattern.

Methods: a relaxed eigenvector initialization with randomized quantization,
cyclic per-element successive refinement, measurement-only RMS and CSM
baselines, and an exhaustive oracle for small instances.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InstanceTooLargeError
from .measurement import PhaseAlphabet, PowerProfile, ReflectionPattern

__all__ = [
    "ObjectiveModel",
    "OptimizationResult",
    "objective",
    "rms",
    "csm",
    "relax_init",
    "successive_refinement",
    "exhaustive_search",
]

EXHAUSTIVE_BITS_MAX = 20


@dataclass(frozen=True)
class ObjectiveModel:
    """Per-grid channel covariances as rank factors.

    `factors[k]` is an (N, r_k) array with G_k = factors[k] @ factors[k]^H.
    Estimates produced upstream are rank one; general Hermitian PSD inputs
    are accepted via `from_covariances`.
    """

    factors: tuple
    alphabet: PhaseAlphabet

    def __post_init__(self):
        if not self.factors:
            raise ValueError("model needs at least one grid")
        n = self.factors[0].shape[0]
        fixed = []
        for f in self.factors:
            f = np.atleast_2d(np.asarray(f, dtype=complex))
            if f.ndim != 2 or f.shape[0] != n:
                raise ValueError("factor shapes disagree")
            f.setflags(write=False)
            fixed.append(f)
        object.__setattr__(self, "factors", tuple(fixed))

    @property
    def n_elements(self) -> int:
        return self.factors[0].shape[0]

    @property
    def n_grids(self) -> int:
        return len(self.factors)

    @classmethod
    def from_vectors(cls, vectors, alphabet: PhaseAlphabet) -> "ObjectiveModel":
        """Rank-1 model from per-grid channel vectors w_k (G_k = w_k w_k^H)."""
        return cls(tuple(np.asarray(w, dtype=complex).reshape(-1, 1) for w in vectors),
                   alphabet)

    @classmethod
    def from_covariances(cls, covariances, alphabet: PhaseAlphabet,
                         rel_tol: float = 1e-9) -> "ObjectiveModel":
        """Factor Hermitian PSD matrices by eigendecomposition, dropping
        eigenvalues below rel_tol of each matrix's largest."""
        factors = []
        for g in covariances:
            g = np.asarray(g, dtype=complex)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError(f"covariance must be square, got {g.shape}")
            if not np.allclose(g, g.conj().T, atol=1e-9 * max(1.0, np.abs(g).max())):
                raise ValueError("covariance must be Hermitian")
            vals, vecs = np.linalg.eigh(g)
            keep = vals > rel_tol * max(vals[-1], 0.0)
            if not np.any(keep):
                factors.append(np.zeros((g.shape[0], 1), dtype=complex))
            else:
                factors.append(vecs[:, keep] * np.sqrt(vals[keep]))
        return cls(tuple(factors), alphabet)

    def flat_factors(self) -> np.ndarray:
        """(N, L) stack of all grids' factors scaled by 1/sqrt(K), so the
        objective is the plain squared norm of its conjugate projection."""
        return np.hstack(self.factors) / math.sqrt(self.n_grids)


@dataclass(frozen=True)
class OptimizationResult:
    pattern: ReflectionPattern
    objective: float
    method: str
    trace: tuple = ()

    def theta_indices(self, alphabet: PhaseAlphabet) -> np.ndarray:
        return alphabet.index_of(self.pattern.theta)


def _feasible_v(v, alphabet: PhaseAlphabet) -> np.ndarray:
    if isinstance(v, ReflectionPattern):
        theta = v.theta
        v = v.v
    else:
        v = np.asarray(v, dtype=complex)
        if np.any(np.abs(np.abs(v) - 1.0) > 1e-6):
            raise ConfigurationError("reflection coefficients must be unit modulus")
        theta = np.mod(np.angle(v), 2.0 * np.pi)
        theta[theta == 0.0] = 2.0 * np.pi
    if not alphabet.contains(theta):
        raise ConfigurationError("pattern phases fall outside the alphabet")
    return v


def objective(v, model: ObjectiveModel) -> float:
    """(1/K) sum_k v^H G_k v for an alphabet-feasible pattern."""
    v = _feasible_v(v, model.alphabet)
    if len(v) != model.n_elements:
        raise ConfigurationError(
            f"pattern has {len(v)} elements, model {model.n_elements}")
    total = sum(float(np.sum(np.abs(np.conj(v) @ f) ** 2)) for f in model.factors)
    return total / model.n_grids


def _grid_average(profiles: dict[int, PowerProfile]) -> np.ndarray:
    if not profiles:
        raise ConfigurationError("no power profiles supplied")
    mats = [p.powers for p in profiles.values()]
    first = next(iter(profiles.values())).pattern_ids
    for p in profiles.values():
        if p.pattern_ids != first:
            raise ConfigurationError("profiles come from different pattern lists")
    return np.mean(mats, axis=0)


def rms(patterns, profiles: dict[int, PowerProfile]) -> OptimizationResult:
    """Best measured pattern: argmax of grid-averaged measured power.

    Ties go to the lowest pattern id. Consumes only measurement data.
    """
    avg = _grid_average(profiles)
    ids = next(iter(profiles.values())).pattern_ids
    if len(avg) != len(patterns):
        raise ConfigurationError(
            f"{len(patterns)} patterns but profiles cover {len(avg)}")
    best = int(np.argmax(avg))  # np.argmax takes the first max: lowest id
    return OptimizationResult(patterns[ids[best]], float(avg[best]), "rms",
                              trace=(float(avg[best]),))


def csm(patterns, profiles: dict[int, PowerProfile],
        alphabet: PhaseAlphabet) -> OptimizationResult:
    """Conditional-mean pattern: per element, the phase whose patterns have
    the highest grid-averaged mean power.

    Phases never sampled for an element are skipped; ties go to the smallest
    phase. Consumes only measurement data, so the result carries no objective
    score (nan); evaluate the pattern under a model separately.
    """
    avg = _grid_average(profiles)
    ids = next(iter(profiles.values())).pattern_ids
    if len(avg) != len(patterns):
        raise ConfigurationError(
            f"{len(patterns)} patterns but profiles cover {len(avg)}")
    n = patterns[0].n_elements
    idx = np.stack([alphabet.index_of(patterns[i].theta) for i in ids])
    theta = np.empty(n)
    for i in range(n):
        best_mean, best_slot = -np.inf, -1
        for slot in range(alphabet.size):
            members = idx[:, i] == slot
            if not np.any(members):
                continue
            mean = float(avg[members].mean())
            if mean > best_mean + 0.0:  # strict: first (smallest) phase wins ties
                best_mean, best_slot = mean, slot
        if best_slot < 0:
            raise ConfigurationError(f"element {i} has no sampled phases")
        theta[i] = alphabet.values[best_slot]
    pattern = ReflectionPattern(theta)
    return OptimizationResult(pattern, float("nan"), "csm")


def _quantize(phase: np.ndarray, alphabet: PhaseAlphabet) -> ReflectionPattern:
    return ReflectionPattern(alphabet.values[alphabet.nearest_index(phase)])


def relax_init(model: ObjectiveModel, rng: np.random.Generator,
               samples: int = 128, spread: float = 1.0) -> ReflectionPattern:
    """Quantized principal eigenvector of the summed covariance.

    The eigenvector of A = sum_k G_k is found by power iteration (tolerance
    1e-9, at most 500 iterations) and its arbitrary global phase is pinned to
    the strongest element, making the deterministic candidate reproducible.
    The returned pattern is the best of the directly quantized phases plus
    `samples` - 1 quantized Gaussian perturbations u + spread*g, mimicking
    randomization around the relaxed solution; global alphabet rotations of a
    candidate are equivalent (they commute with quantization and leave the
    objective unchanged), so only one representative per orbit is scored.
    A zero A yields the uniform all-ones pattern.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = model.n_elements
    a = np.zeros((n, n), dtype=complex)
    for f in model.factors:
        a += f @ f.conj().T
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return ReflectionPattern(np.full(n, 2.0 * np.pi))
    u = np.ones(n, dtype=complex) / math.sqrt(n)
    for _ in range(500):
        nxt = a @ u
        nrm = np.linalg.norm(nxt)
        if nrm == 0.0:
            # start vector happened to be orthogonal to range(A)
            u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            u /= np.linalg.norm(u)
            continue
        nxt /= nrm
        if np.linalg.norm(nxt - u) < 1e-9:
            u = nxt
            break
        u = nxt

    # the eigenvector's global phase is arbitrary; pin it to the strongest
    # element so the deterministic candidate is reproducible
    u = u * np.exp(-1j * np.angle(u[int(np.argmax(np.abs(u)))]))
    candidates = [_quantize(np.angle(u), model.alphabet)]
    scale = float(np.abs(u).mean())
    for _ in range(samples - 1):
        g = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        candidates.append(_quantize(np.angle(u + spread * scale * g), model.alphabet))
    best = max(candidates, key=lambda c: objective(c, model))
    return best


def successive_refinement(v0: ReflectionPattern, model: ObjectiveModel,
                          rel_tol: float = 1e-12,
                          sweep_order=None) -> OptimizationResult:
    """Cyclic coordinate ascent over per-element phases.

    Each element in turn is set to the best of its 2^alpha phases with the
    rest fixed, using cached per-factor partial sums so a trial costs O(rank)
    instead of O(N * rank). Sweeps repeat until a full pass improves the
    objective by no more than `rel_tol` relatively. The trace of accepted
    objective values is nondecreasing by construction.
    """
    alphabet = model.alphabet
    v = _feasible_v(v0, alphabet).copy()
    n = model.n_elements
    if len(v) != n:
        raise ConfigurationError(f"pattern has {len(v)} elements, model {n}")
    order = list(range(n)) if sweep_order is None else list(sweep_order)
    if sorted(order) != list(range(n)):
        raise ValueError("sweep_order must be a permutation of the elements")

    flat = model.flat_factors()          # (N, L), objective = ||flat^H conj(v)||^2... see below
    # s[l] = sum_i conj(v_i) flat[i, l]; objective = sum_l |s_l|^2
    s = flat.T @ np.conj(v)
    row_norm2 = np.sum(np.abs(flat) ** 2, axis=1)
    phases = np.exp(-1j * alphabet.values)   # conj(v_i) candidates
    current = float(np.sum(np.abs(s) ** 2))
    trace = [current]

    improved = True
    while improved:
        improved = False
        for i in order:
            row = flat[i]
            cross = np.vdot(s, row)          # sum_l conj(s_l) flat[i, l]
            deltas = phases - np.conj(v[i])
            # |s + d*row|^2 summed: current + 2 Re(d * cross) + |d|^2 * ||row||^2
            vals = current + 2.0 * np.real(deltas * cross) \
                + np.abs(deltas) ** 2 * row_norm2[i]
            j = int(np.argmax(vals))
            if vals[j] > current * (1.0 + rel_tol) and vals[j] > current:
                d = deltas[j]
                s += d * row
                v[i] = np.conj(phases[j])
                current = float(np.sum(np.abs(s) ** 2))
                trace.append(current)
                improved = True
    theta = np.mod(np.angle(v), 2.0 * np.pi)
    theta[theta < 1e-12] = 2.0 * np.pi
    pattern = ReflectionPattern(alphabet.values[alphabet.index_of(theta)])
    return OptimizationResult(pattern, current, "sr", trace=tuple(trace))


def exhaustive_search(model: ObjectiveModel) -> OptimizationResult:
    """Global optimum by enumeration, for instances with alpha*N <= 20.

    The first element's phase is pinned to the alphabet's first value: a
    global rotation by one alphabet step maps feasible patterns to feasible
    patterns with equal objective, so every orbit has a representative with
    theta_1 = omega. The first enumerated maximizer wins.
    """
    alphabet = model.alphabet
    n = model.n_elements
    bits = alphabet.alpha * n
    if bits > EXHAUSTIVE_BITS_MAX:
        raise InstanceTooLargeError(
            f"exhaustive search over 2^{bits} patterns exceeds 2^{EXHAUSTIVE_BITS_MAX}")
    flat = model.flat_factors()
    conj_phases = np.exp(-1j * alphabet.values)

    best_val, best_idx = -1.0, None
    theta_idx = np.zeros(n, dtype=int)  # theta_1 pinned to index 0

    # depth-first over elements 1..n-1 with a running partial projection
    def recurse(depth, s):
        nonlocal best_val, best_idx
        if depth == n:
            val = float(np.sum(np.abs(s) ** 2))
            if val > best_val:
                best_val, best_idx = val, theta_idx.copy()
            return
        for j in range(alphabet.size):
            theta_idx[depth] = j
            recurse(depth + 1, s + flat[depth] * conj_phases[j])

    recurse(1, flat[0] * conj_phases[0])
    theta = alphabet.values[best_idx]
    return OptimizationResult(ReflectionPattern(theta), best_val, "exhaustive")
