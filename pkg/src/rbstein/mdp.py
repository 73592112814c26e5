"""Markov decision primitives and the controlled-restarts environment.

States are 0-based integers. The controlled-restarts environment (CRE) pairs a
symmetric "sticky" passive matrix with a deterministic reset to state 0 under the
active action, and pays ``s**2`` when an arm in state ``s`` is activated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 1e-9
DEFAULT_K_MAX = 50


class InvalidMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic square matrix.

    Construction validates entries in [0, 1] and row sums within ``ROW_SUM_TOL``;
    rows are never silently renormalised.
    """

    entries: np.ndarray

    def __post_init__(self):
        P = np.array(self.entries, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise InvalidMatrixError(f"expected a non-empty square matrix, got shape {P.shape}")
        if not np.all(np.isfinite(P)):
            raise InvalidMatrixError("matrix has non-finite entries")
        if P.min() < -ROW_SUM_TOL or P.max() > 1 + ROW_SUM_TOL:
            raise InvalidMatrixError("entries must lie in [0, 1]")
        dev = np.abs(P.sum(axis=1) - 1.0)
        if dev.max() > ROW_SUM_TOL:
            row = int(dev.argmax())
            raise InvalidMatrixError(f"row {row} sums to {P[row].sum():.15g}, not 1")
        P.setflags(write=False)
        object.__setattr__(self, "entries", P)

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def to_csv(self, path) -> None:
        write_matrix_csv(self.entries, path)

    @classmethod
    def from_csv(cls, path) -> "TransitionMatrix":
        return cls(read_matrix_csv(path))


def as_array(P) -> np.ndarray:
    if isinstance(P, TransitionMatrix):
        return P.entries
    return np.asarray(P, dtype=float)


@dataclass(frozen=True)
class CreArmSpec:
    p: float
    n_states: int
    q: float = field(init=False)

    def __post_init__(self):
        S = int(self.n_states)
        if S < 2:
            raise ValueError("a CRE arm needs at least 2 states")
        if not (1.0 / S < self.p <= 1.0):
            raise ValueError(f"persistence p={self.p} must lie in (1/{S}, 1]")
        object.__setattr__(self, "n_states", S)
        object.__setattr__(self, "q", (1.0 - self.p) / (S - 1))


def cre_passive(spec: CreArmSpec) -> TransitionMatrix:
    S = spec.n_states
    P = np.full((S, S), spec.q)
    np.fill_diagonal(P, spec.p)
    return TransitionMatrix(P)


def cre_reset(n_states: int) -> TransitionMatrix:
    if n_states < 2:
        raise ValueError("reset matrix needs n_states >= 2")
    P = np.zeros((n_states, n_states))
    P[:, 0] = 1.0
    return TransitionMatrix(P)


def cre_reward(state, action):
    """``state**2`` when active, 0 when passive. Vectorises over arrays."""
    state = np.asarray(state)
    action = np.asarray(action)
    out = np.where(action == 1, state.astype(float) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def cre_reward_table(n_states: int) -> np.ndarray:
    """Reward table ``r[s, a]`` for the CRE."""
    s = np.arange(n_states, dtype=float)
    return np.column_stack([np.zeros(n_states), s**2])


def matrix_power(P, k: int, k_max: int = DEFAULT_K_MAX) -> TransitionMatrix:
    """``P**k`` by repeated multiplication; ``k`` is bounded by ``k_max``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k > k_max:
        raise ValueError(f"k={k} exceeds k_max={k_max}")
    A = as_array(P)
    out = np.eye(A.shape[0])
    for _ in range(k):
        out = out @ A
    return TransitionMatrix(out)


def matrix_powers(P: np.ndarray, k_max: int) -> np.ndarray:
    """Stack ``[P**0, P**1, ..., P**k_max]`` along a new leading axis.

    Broadcasts over leading batch dimensions of ``P``.
    """
    P = np.asarray(P, dtype=float)
    out = np.empty((k_max + 1,) + P.shape)
    out[0] = np.broadcast_to(np.eye(P.shape[-1]), P.shape)
    for k in range(1, k_max + 1):
        out[k] = out[k - 1] @ P
    return out


@dataclass(frozen=True)
class RngStream:
    """Independent random stream identified by ``(seed, stream_id)``.

    Built on numpy's ``SeedSequence`` spawn keys, so streams for different arms or
    replications never overlap and do not depend on creation order.
    """

    seed: int
    stream_id: tuple = ()

    def __post_init__(self):
        sid = self.stream_id
        if isinstance(sid, (int, np.integer)):
            sid = (int(sid),)
        object.__setattr__(self, "stream_id", tuple(int(s) for s in sid))
        object.__setattr__(self, "seed", int(self.seed) & (2**64 - 1))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(ids))


def sample_next(P, state: int, rng: np.random.Generator) -> int:
    """Draw the next state from row ``state`` by inverting the CDF at one uniform."""
    row = as_array(P)[state]
    u = rng.random()
    nxt = int(np.searchsorted(np.cumsum(row), u, side="right"))
    return min(nxt, len(row) - 1)


def sample_next_many(P: np.ndarray, states: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorised inverse-CDF step for a batch of arms.

    ``P`` has shape (N, S, S); ``states`` and ``u`` have shape (N,). Uses the same
    rule as :func:`sample_next`, so a single-arm batch reproduces it exactly.
    """
    rows = P[np.arange(len(states)), states]
    cdf = np.cumsum(rows, axis=1)
    nxt = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, P.shape[-1] - 1)


def is_stochastically_monotone(P) -> bool:
    """Rows nondecreasing in first-order stochastic dominance."""
    A = as_array(P)
    tails = np.cumsum(A[:, ::-1], axis=1)[:, ::-1]
    return bool(np.all(np.diff(tails, axis=0) >= -1e-12))


def stationary_distribution(P) -> np.ndarray:
    A = as_array(P)
    S = A.shape[0]
    M = np.vstack([A.T - np.eye(S), np.ones(S)])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, b, rcond=None)
    return pi


def write_matrix_csv(P, path) -> None:
    A = as_array(P)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        for row in A:
            w.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows)
