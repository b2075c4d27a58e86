"""Channel estimation from power measurements via the equivalent real-valued
single-layer network.

The measured power under pattern v is |vᴴh|² + C for the (scaled) cascaded
channel h and a constant floor. Writing x = [Re v; Im v] and stacking a
candidate channel w = w1 + j*w2 into the structured 2N x 2 matrix
W = [[w1, w2], [w2, -w1]], the identity ‖xᵀW‖² = |vᴴw|² turns power
fitting into least squares over (w1, w2) plus an additive bias, and the bias
has a closed form given the weights. The global phase of w is unidentifiable
(and for 1-bit alphabets additionally the complex conjugate), which is why
estimates are compared through their covariances w wᴴ.

Training is plain mini-batch SGD. Measured powers are normalized by the
training-set mean internally so the published learning-rate schedule is
meaningful on any absolute power scale; outputs are rescaled on the way out.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergedError
from .measurement import PhaseAlphabet, ReflectionPattern

__all__ = [
    "StructuredWeights",
    "TrainConfig",
    "ChannelEstimate",
    "lift",
    "forward",
    "bias_closed_form",
    "loss",
    "gradient",
    "train",
    "train_from_patterns",
    "phase_ambiguity_check",
]


def lift(v: np.ndarray) -> np.ndarray:
    """Real lift x = [Re(v); Im(v)] of a unit-modulus vector (or a batch)."""
    v = np.asarray(v, dtype=complex)
    if np.any(np.abs(np.abs(v) - 1.0) > 1e-6):
        raise ValueError("lift expects unit-modulus entries")
    return np.concatenate([v.real, v.imag], axis=-1)


@dataclass(frozen=True)
class StructuredWeights:
    """Candidate channel (w1, w2) = (Re w, Im w) plus the additive bias w0."""

    w1: np.ndarray
    w2: np.ndarray
    w0: float = 0.0

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=float)
        w2 = np.asarray(self.w2, dtype=float)
        if w1.ndim != 1 or w1.shape != w2.shape:
            raise ValueError("w1 and w2 must be equal-length 1-D vectors")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def n(self) -> int:
        return len(self.w1)

    @property
    def matrix(self) -> np.ndarray:
        """The 2N x 2 structured matrix [[w1, w2], [w2, -w1]]."""
        return np.block([[self.w1[:, None], self.w2[:, None]],
                         [self.w2[:, None], -self.w1[:, None]]])

    @property
    def w_complex(self) -> np.ndarray:
        return self.w1 + 1j * self.w2

    @classmethod
    def from_stacked(cls, gamma: np.ndarray, w0: float = 0.0) -> "StructuredWeights":
        gamma = np.asarray(gamma, dtype=float)
        n = len(gamma) // 2
        return cls(gamma[:n], gamma[n:], w0)


def _power_term(x: np.ndarray, weights: StructuredWeights) -> np.ndarray:
    """‖xᵀW‖² for one lifted pattern (2N,) or a batch (M, 2N)."""
    hidden = np.asarray(x) @ weights.matrix  # (..., 2) = (a, b)
    return np.sum(hidden ** 2, axis=-1)


def forward(x: np.ndarray, weights: StructuredWeights) -> float | np.ndarray:
    """Predicted power ‖xᵀW‖² + w0."""
    out = _power_term(x, weights) + weights.w0
    return float(out) if np.isscalar(out) or out.ndim == 0 else out


def bias_closed_form(x: np.ndarray, p_bar: np.ndarray, weights: StructuredWeights) -> float:
    """Optimal additive bias: mean residual of the power term."""
    x = np.atleast_2d(x)
    if len(x) < 1:
        raise ValueError("bias needs at least one record")
    return float(np.mean(np.asarray(p_bar) - _power_term(x, weights)))


def loss(x: np.ndarray, p_bar: np.ndarray, weights: StructuredWeights,
         w0: float | None = None) -> float:
    """MSE of (power term + bias − measured), bias closed-form unless given."""
    x = np.atleast_2d(x)
    term = _power_term(x, weights)
    if w0 is None:
        w0 = float(np.mean(np.asarray(p_bar) - term))
    r = term + w0 - np.asarray(p_bar)
    return float(np.mean(r ** 2))


def gradient(x: np.ndarray, p_bar: np.ndarray, weights: StructuredWeights,
             w0: float | None = None) -> np.ndarray:
    """Batch-loss gradient with respect to the stacked weights [w1; w2].

    Per record, with hidden pair (a, b) = xᵀW and residual r = a²+b²+w0−p̄:
    the chain rule gives (4/B)·Σ r·(a·x + b·x̃), where x̃ = [−Im v; Re v] is
    the lift of j·v. The bias is treated as a constant within the step; when
    it is the closed form over this same batch (the default) the residuals
    sum to zero and this equals the exact total derivative.
    """
    x = np.atleast_2d(x)
    if len(x) < 1:
        raise ValueError("gradient needs a nonempty batch")
    p_bar = np.asarray(p_bar)
    n = weights.n
    hidden = x @ weights.matrix
    if w0 is None:
        w0 = float(np.mean(p_bar - np.sum(hidden ** 2, axis=-1)))
    r = np.sum(hidden ** 2, axis=-1) + w0 - p_bar
    x_tilde = np.concatenate([-x[:, n:], x[:, :n]], axis=1)
    batch = len(x)
    return (4.0 / batch) * (x.T @ (r * hidden[:, 0]) + x_tilde.T @ (r * hidden[:, 1]))


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters. Defaults follow the published schedule: initial
    rate 2e-2 shrinking by 1e-4 each epoch (never below 0), batches of 2,
    200 epochs, 80% of records training / 20% validation."""

    learning_rate: float = 2e-2
    decay: float = 1e-4
    batch_size: int = 2
    epochs: int = 200
    train_fraction: float = 0.8
    seed: int = 0
    max_restarts: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")


@dataclass(frozen=True)
class ChannelEstimate:
    """Result of one grid's training: complex channel estimate, bias, and the
    per-epoch validation-error trace (best epoch marked)."""

    w_star: np.ndarray
    w0_star: float
    validation_trace: np.ndarray
    best_epoch: int
    grid: int = -1

    def __post_init__(self):
        for name in ("w_star", "validation_trace"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def covariance(self) -> np.ndarray:
        """Estimated channel covariance ŵ ŵᴴ (rank <= 1, Hermitian PSD)."""
        return np.outer(self.w_star, np.conj(self.w_star))


def _split(m: int, fraction: float) -> int:
    if m < 2:
        raise ValueError("training needs >= 2 records to hold out validation")
    m0 = int(round(fraction * m))
    return min(max(m0, 1), m - 1)


def train(x: np.ndarray, p_bar: np.ndarray, cfg: TrainConfig, grid: int = -1) -> ChannelEstimate:
    """Fit (w, w0) to lifted patterns `x` (M, 2N) and powers `p_bar` (M,).

    First M0 records train, the rest validate; the returned weights are those
    of the epoch with the lowest validation error (earliest on ties). If the
    training loss explodes past 1e6x its initial value (or goes non-finite),
    the learning rate is halved and training restarts from the same init, at
    most `max_restarts` times before TrainingDivergedError.
    """
    x = np.asarray(x, dtype=float)
    p_bar = np.asarray(p_bar, dtype=float)
    if x.ndim != 2 or len(x) != len(p_bar):
        raise ValueError("x must be (M, 2N) aligned with p_bar (M,)")
    if x.shape[1] % 2:
        raise ValueError("lifted patterns must have even length 2N")
    m0 = _split(len(x), cfg.train_fraction)
    x_train, p_train = x[:m0], p_bar[:m0]
    x_val, p_val = x[m0:], p_bar[m0:]

    if np.ptp(p_train) == 0.0:
        # zero-variance targets carry no pattern dependence; the constant fit
        # w = 0, w0 = c is exact and SGD could only wander off it
        c = float(p_train[0])
        val = float(np.sum((c - p_val) ** 2))
        return ChannelEstimate(np.zeros(x.shape[1] // 2, dtype=complex), c,
                               np.array([val]), 0, grid)

    # Scale-free SGD: descend on powers normalized by the training mean.
    scale = float(np.mean(p_train))
    if not (math.isfinite(scale) and scale > 0):
        scale = 1.0
    pt = p_train / scale
    pv = p_val / scale
    n2 = x.shape[1]

    init_rng = np.random.default_rng(cfg.seed)
    init_std = math.sqrt(max(np.mean(pt), 1e-12) / n2)
    gamma0 = init_rng.normal(0.0, init_std, size=n2)

    n = n2 // 2
    # x_tilde rows are the lifts of j*v; fixed per record, so precompute.
    xt_train = np.concatenate([-x_train[:, n:], x_train[:, :n]], axis=1)
    guard = 1e-18

    def fill(wmat: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        wmat[:n, 0] = gamma[:n]
        wmat[n:, 0] = gamma[n:]
        wmat[:n, 1] = gamma[n:]
        wmat[n:, 1] = -gamma[:n]
        return wmat

    for attempt in range(cfg.max_restarts + 1):
        rate0 = cfg.learning_rate / (2 ** attempt)
        rng = np.random.default_rng(cfg.seed + 1)  # shuffling stream, restart-stable
        gamma = gamma0.copy()
        wmat = fill(np.empty((n2, 2)), gamma)
        hidden = x_train @ wmat
        term = np.sum(hidden ** 2, axis=1)
        initial_loss = float(np.mean((term - np.mean(term) - (pt - np.mean(pt))) ** 2))
        guard = max(1e6 * initial_loss, 1e-18)
        best: tuple[float, int, np.ndarray, float] | None = None
        trace = np.empty(cfg.epochs)
        diverged = False

        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(cfg.epochs):
                rate = max(rate0 - cfg.decay * epoch, 0.0)
                order = rng.permutation(m0)
                for start in range(0, m0, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    fill(wmat, gamma)
                    hidden = x_train @ wmat
                    term = np.sum(hidden ** 2, axis=1)
                    w0 = np.mean(pt) - np.mean(term)
                    r = term[idx] + w0 - pt[idx]
                    hb = hidden[idx]
                    gamma -= (rate * 4.0 / len(idx)) * (
                        x_train[idx].T @ (r * hb[:, 0]) + xt_train[idx].T @ (r * hb[:, 1])
                    )
                if not np.all(np.isfinite(gamma)):
                    diverged = True
                    break
                fill(wmat, gamma)
                hidden = x_train @ wmat
                term = np.sum(hidden ** 2, axis=1)
                w0 = float(np.mean(pt) - np.mean(term))
                epoch_loss = float(np.mean((term + w0 - pt) ** 2))
                if not math.isfinite(epoch_loss) or epoch_loss > guard:
                    diverged = True
                    break
                val_err = float(np.sum((np.sum((x_val @ wmat) ** 2, axis=1) + w0 - pv) ** 2))
                trace[epoch] = val_err
                if best is None or val_err < best[0]:
                    best = (val_err, epoch, gamma.copy(), w0)
        if not diverged and best is not None:
            break
    else:
        raise TrainingDivergedError(
            f"grid {grid}: training loss exploded past {guard:.3g} even after "
            f"{cfg.max_restarts} restarts with halved learning rates"
        )

    _, best_epoch, gamma_best, w0_best = best
    w = StructuredWeights.from_stacked(gamma_best).w_complex * math.sqrt(scale)
    return ChannelEstimate(
        w_star=w,
        w0_star=w0_best * scale,
        validation_trace=trace * scale ** 2,
        best_epoch=best_epoch,
        grid=grid,
    )


def train_from_patterns(patterns, profile, cfg: TrainConfig) -> ChannelEstimate:
    """Convenience wrapper: lift a pattern list aligned with a PowerProfile."""
    by_id = {p.id: p for p in patterns}
    try:
        v_rows = np.stack([by_id[i].v for i in profile.pattern_ids])
    except KeyError as exc:
        raise ValueError(f"profile references unknown pattern id {exc.args[0]}") from None
    return train(lift(v_rows), profile.powers, cfg, grid=profile.grid)


def _min_rotation_gap(w_hat: np.ndarray, h_ref: np.ndarray) -> float:
    # min over xi of ||w e^{jxi} - h||^2 = ||w||^2 + ||h||^2 - 2|w^H h|
    return float(
        np.vdot(w_hat, w_hat).real + np.vdot(h_ref, h_ref).real
        - 2.0 * abs(np.vdot(w_hat, h_ref))
    )


def phase_ambiguity_check(w_hat: np.ndarray, h_true: np.ndarray,
                          alphabet: PhaseAlphabet, tol: float = 1e-3) -> bool:
    """Does ŵ match the true channel up to the unidentifiable transforms?

    Matched iff min over global phases of ‖ŵe^{jξ} − h‖/‖h‖ < tol; for 1-bit
    alphabets the conjugate of ŵ is admitted too (reflection coefficients are
    real there, so conjugating the channel leaves every measured power equal).
    """
    w_hat = np.asarray(w_hat, dtype=complex)
    h_true = np.asarray(h_true, dtype=complex)
    ref = float(np.linalg.norm(h_true))
    if ref == 0:
        return float(np.linalg.norm(w_hat)) < tol
    gap = _min_rotation_gap(w_hat, h_true)
    if alphabet.alpha == 1:
        gap = min(gap, _min_rotation_gap(np.conj(w_hat), h_true))
    return math.sqrt(max(gap, 0.0)) / ref < tol
