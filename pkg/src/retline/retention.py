"""Retention operators: decay priors, gamma schedules, parallel and recurrent forms.

The decay matrix weights pairwise query/key scores by powers of a factor
gamma in (0,1), replacing softmax for causal token mixing. The same operator
admits an exactly equivalent recurrent form driven by a fixed-size state,
which is what makes constant-memory decoding possible. Schedules assign a
gamma per (layer, head); the layer-wise schedule grows gamma with depth so
shallow layers stay local and deep layers integrate long-range context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, mul_const, pow_const, rotate_pairs, sigmoid, transpose

GAMMA_STRATEGIES = ("original", "gated", "small_gamma", "headwise", "layerwise")

DEFAULT_GAMMA_SUBTRACTOR = 0.86
DEFAULT_GATE_TEMPERATURE = 16.0

_LOG_LO = np.log(1.0 / 32.0)
_LOG_HI = np.log(1.0 / 512.0)


@dataclass(frozen=True)
class DecayMatrix:
    """Pairwise decay weights; lower-triangular for causal kinds, symmetric
    for the bidirectional kind. Entries all lie in [0, 1]."""

    n: int
    entries: np.ndarray
    kind: str  # causal | gated | bidirectional

    def __post_init__(self):
        if self.entries.shape != (self.n, self.n):
            raise ValueError("decay entries must be n x n")


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
    return gamma


def build_decay(n: int, gamma: float) -> DecayMatrix:
    """Causal decay: entry (i, j) = gamma^(i-j) for i >= j, zero above."""
    if n < 1:
        raise ValueError("sequence length must be at least 1")
    gamma = _check_gamma(gamma)
    idx = np.arange(n)
    power = idx[:, None] - idx[None, :]
    entries = np.tril(gamma ** np.maximum(power, 0))
    return DecayMatrix(n=n, entries=entries, kind="causal")


def build_decay_gated(gammas) -> DecayMatrix:
    """Product-form decay from per-position gates: entry (i, j) multiplies the
    gates of positions j+1 .. i. Gates are typically sigmoid(x W)^(1/tau)."""
    g = np.asarray(gammas, dtype=np.float64)
    if g.ndim != 1 or g.size < 1:
        raise ValueError("gates must be a nonempty vector")
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise ValueError("every gate must lie strictly inside (0, 1)")
    n = g.size
    entries = np.zeros((n, n))
    for j in range(n):
        entries[j, j] = 1.0
        running = 1.0
        for i in range(j + 1, n):
            running *= g[i]
            entries[i, j] = running
    return DecayMatrix(n=n, entries=entries, kind="gated")


def build_decay_bidirectional(n: int, gamma: float) -> DecayMatrix:
    """Symmetric decay over index distance: entry (i, j) = gamma^|i-j|."""
    if n < 1:
        raise ValueError("sequence length must be at least 1")
    gamma = _check_gamma(gamma)
    idx = np.arange(n)
    entries = gamma ** np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    return DecayMatrix(n=n, entries=entries, kind="bidirectional")


# ---------------------------------------------------------------------------
# gamma schedules


def _head_log_spread(heads: int) -> np.ndarray:
    # single-point linspace keeps the first endpoint (largest-memory head)
    if heads == 1:
        return np.array([_LOG_LO])
    return np.linspace(_LOG_LO, _LOG_HI, heads)


@dataclass(frozen=True)
class GammaSchedule:
    """Per-(layer, head) decay factors under one of five strategies.

    `original` spreads gamma across heads only; `small_gamma` shifts every
    head down by gamma_subtractor; `headwise` interpolates between the small
    and large extremes across heads; `layerwise` fades the subtractor out
    with depth so the last layer equals `original` exactly. The `gated`
    strategy is data-dependent: its per-position values come from
    gate_gammas(), not from this table.
    """

    strategy: str
    layers: int
    heads: int
    gamma_subtractor: float = DEFAULT_GAMMA_SUBTRACTOR
    tau: float = DEFAULT_GATE_TEMPERATURE

    def __post_init__(self):
        if self.strategy not in GAMMA_STRATEGIES:
            raise ValueError(f"unknown gamma strategy {self.strategy!r}")
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be at least 1")
        if not 0.0 < self.gamma_subtractor < 1.0:
            raise ValueError("gamma_subtractor must lie in (0, 1)")

    def values(self) -> np.ndarray:
        return gamma_schedule(self)

    def layer_values(self, layer: int) -> np.ndarray:
        if not 0 <= layer < self.layers:
            raise ValueError(f"layer index {layer} out of range")
        return self.values()[layer]


def gamma_schedule(cfg: GammaSchedule) -> np.ndarray:
    """Evaluate the schedule to a (layers, heads) array of gammas.

    Degenerate fractions are pinned at 1: a single layer is its own last
    layer, and a single head is its own last head.
    """
    L, H = cfg.layers, cfg.heads
    spread = np.exp(_head_log_spread(H))
    if cfg.strategy == "original":
        table = np.tile(1.0 - spread, (L, 1))
    elif cfg.strategy == "small_gamma":
        table = np.tile(1.0 - cfg.gamma_subtractor - spread, (L, 1))
    elif cfg.strategy == "headwise":
        frac = np.ones(H) if H == 1 else np.arange(H) / (H - 1)
        row = (1.0 - cfg.gamma_subtractor - 1.0 / 32.0) + frac * cfg.gamma_subtractor
        table = np.tile(row, (L, 1))
    elif cfg.strategy == "layerwise":
        frac = np.ones(L) if L == 1 else np.arange(L) / (L - 1)
        table = 1.0 - cfg.gamma_subtractor * (1.0 - frac)[:, None] - spread[None, :]
    elif cfg.strategy == "gated":
        raise ValueError(
            "the gated strategy is data-dependent; derive per-position values "
            "with gate_gammas() instead of a fixed schedule"
        )
    else:  # pragma: no cover - guarded by __post_init__
        raise ValueError(f"unknown gamma strategy {cfg.strategy!r}")
    if np.any(table <= 0.0) or np.any(table >= 1.0):
        raise ValueError(
            "schedule produced gamma outside (0, 1); lower gamma_subtractor"
        )
    return table


def gate_gammas(z: Tensor, tau: float = DEFAULT_GATE_TEMPERATURE) -> Tensor:
    """Data-dependent gates sigmoid(z)^(1/tau); z is the gate pre-activation
    x W_gamma. Larger tau pushes gates toward 1 (longer memory)."""
    if tau <= 0:
        raise ValueError("gate temperature must be positive")
    return pow_const(sigmoid(z), 1.0 / tau)


# ---------------------------------------------------------------------------
# phases


def default_theta(d: int) -> np.ndarray:
    """Per-pair angular frequencies 10000^(-2i/d) (standard rotary spacing)."""
    if d < 2 or d % 2 != 0:
        raise ValueError("phase rotation needs an even dimension of at least 2")
    return 10000.0 ** (-2.0 * np.arange(d // 2) / d)


@dataclass(frozen=True)
class PhaseConfig:
    """Per-position rotations applied to queries and keys. Rotation by the
    token's own position makes scores depend only on relative offsets, and
    preserves vector norms exactly."""

    enabled: bool = True
    theta: np.ndarray | None = None

    def angles(self, positions, d: int) -> np.ndarray:
        theta = self.theta if self.theta is not None else default_theta(d)
        if theta.shape != (d // 2,):
            raise ValueError("theta must have one frequency per coordinate pair")
        pos = np.asarray(positions, dtype=np.float64)
        return pos[:, None] * theta[None, :]


def apply_phases(x: Tensor, positions, phases: PhaseConfig) -> Tensor:
    if not phases.enabled:
        return x
    return rotate_pairs(x, phases.angles(positions, x.shape[1]))


# ---------------------------------------------------------------------------
# retention forms


@dataclass
class RetentionState:
    """Fixed-size recurrent accumulator: after absorbing tokens 1..n it equals
    sum_m gamma^(n-m) k_m^T v_m. One lives per (layer, head) per decode lane."""

    s: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, d: int) -> "RetentionState":
        return cls(s=np.zeros((d, d)), step=0)

    @property
    def elements(self) -> int:
        return self.s.size


def retention_parallel(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    decay: DecayMatrix,
    phases: PhaseConfig | None = None,
) -> Tensor:
    """Parallel form: (Q K^T elementwise decay) V over the whole sequence.

    Phases default to enabled, rotating Q and K by position before scoring.
    """
    n = x.shape[0]
    if decay.n != n:
        raise ValueError(f"decay built for length {decay.n}, sequence has {n}")
    if phases is None:
        phases = PhaseConfig(enabled=True)
    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    positions = np.arange(1, n + 1)
    q = apply_phases(q, positions, phases)
    k = apply_phases(k, positions, phases)
    scores = mul_const(matmul(q, transpose(k)), decay.entries)
    return matmul(scores, v)


def retention_recurrent_step(
    state: RetentionState,
    q_n: Tensor,
    k_n: Tensor,
    v_n: Tensor,
    gamma: float,
) -> tuple[Tensor, RetentionState]:
    """One recurrent update: S' = gamma S + k^T v, output q S'.

    Rows must already carry any phase rotation for their position. The state
    is treated as a value; a new RetentionState is returned.
    """
    if q_n.shape[0] != 1 or k_n.shape != q_n.shape or v_n.shape != q_n.shape:
        raise ValueError("recurrent step expects matching (1, d) rows")
    d = q_n.shape[1]
    if state.s.shape != (d, d):
        raise ValueError(f"state shape {state.s.shape} does not match d={d}")
    kv = matmul(transpose(k_n), v_n)
    s_new = gamma * state.s + kv.data
    out = matmul(q_n, Tensor._wrap(s_new, False))
    return out, RetentionState(s=s_new, step=state.step + 1)


def retention_recurrent(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    gamma: float,
    phases: PhaseConfig | None = None,
) -> Tensor:
    """Run the recurrent form over a whole sequence (reference path for
    equivalence checks against retention_parallel)."""
    if phases is None:
        phases = PhaseConfig(enabled=True)
    n, d = x.shape
    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    positions = np.arange(1, n + 1)
    q = apply_phases(q, positions, phases)
    k = apply_phases(k, positions, phases)
    state = RetentionState.fresh(d)
    rows = []
    for i in range(n):
        row, state = retention_recurrent_step(
            state,
            Tensor._wrap(q.data[i:i + 1], False),
            Tensor._wrap(k.data[i:i + 1], False),
            Tensor._wrap(v.data[i:i + 1], False),
            gamma,
        )
        rows.append(row.data[0])
    return Tensor._wrap(np.array(rows), False)
