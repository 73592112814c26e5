"""Transition-matrix recovery from partially observed, k-step unlabeled trajectories.

A trajectory is an integer array with ``-1`` marking time steps whose state was
not recorded. Successive recorded states ``i`` at time ``t`` and ``j`` at time
``t + k`` contribute one count ``M[i, j, k]``. The log-likelihood of the counts is

    sum_{i,j,k} M[i,j,k] * (log f(k | eta_i) + log (P^k)[i, j])

where ``f`` is a model for the gap length and ``P`` is parameterised row-wise in
gauge-fixed softmax coordinates (last dual coordinate pinned to zero).
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .mdp import DEFAULT_K_MAX

UNLABELED = -1
N_ACTIONS = 2


class RunLengthError(ValueError):
    """A trajectory has more than ``k_max`` consecutive unlabeled entries."""


class SupportError(ValueError):
    pass


# -- augmented states -------------------------------------------------------


def augment(state, action):
    """Flat index of the state-action pair: ``state * 2 + action``."""
    return np.asarray(state) * N_ACTIONS + np.asarray(action)


def split_augmented(z):
    z = np.asarray(z)
    return z // N_ACTIONS, z % N_ACTIONS


@dataclass(frozen=True)
class AugmentedState:
    state: int
    action: int

    def __post_init__(self):
        if self.action not in (0, 1):
            raise ValueError("action must be 0 or 1")
        if self.state < 0:
            raise ValueError("state must be nonnegative")

    @property
    def flat(self) -> int:
        return int(augment(self.state, self.action))

    @classmethod
    def from_flat(cls, z: int) -> "AugmentedState":
        s, a = split_augmented(z)
        return cls(int(s), int(a))


# -- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Per-entity record of observed states, ``-1`` where unlabeled.

    ``actions`` is present only for controlled runs; counting then happens over
    augmented state-action pairs.
    """

    states: np.ndarray
    actions: np.ndarray | None = None
    entity_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64).reshape(-1)
        if np.any(s < UNLABELED):
            raise ValueError("states must be >= 0, or -1 for unlabeled")
        object.__setattr__(self, "states", s)
        if self.actions is not None:
            a = np.asarray(self.actions, dtype=np.int64).reshape(-1)
            if a.shape != s.shape:
                raise ValueError("actions must be parallel to states")
            if np.any((a != 0) & (a != 1)):
                raise ValueError("actions must be 0 or 1")
            object.__setattr__(self, "actions", a)

    def __len__(self):
        return len(self.states)

    @property
    def observed(self) -> np.ndarray:
        return self.states != UNLABELED

    def flat_states(self) -> np.ndarray:
        """States in counting coordinates (augmented when actions are present)."""
        if self.actions is None:
            return self.states
        return np.where(self.observed, augment(self.states, self.actions), UNLABELED)

    def max_unlabeled_run(self) -> int:
        """Longest run of unlabeled entries strictly between two observed ones."""
        idx = np.flatnonzero(self.observed)
        if len(idx) < 2:
            return 0
        return int(np.max(np.diff(idx)) - 1)


def split_long_gaps(traj: Trajectory, k_max: int) -> list[Trajectory]:
    """Cut a trajectory wherever more than ``k_max - 1`` unlabeled entries separate
    two observations, so every retained gap spans at most ``k_max`` steps; leading
    and trailing unlabeled entries are trimmed."""
    idx = np.flatnonzero(traj.observed)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > k_max)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    stops = np.concatenate([idx[breaks], [idx[-1]]]) + 1
    out = []
    for a, b in zip(starts, stops):
        acts = None if traj.actions is None else traj.actions[a:b]
        out.append(Trajectory(traj.states[a:b], acts, traj.entity_id))
    return out


# -- counts -------------------------------------------------------------------


@dataclass(frozen=True)
class KStepCounts:
    """Sparse counts of ``i -> j`` transitions spanning ``k`` steps, ``1 <= k <= k_max``.

    ``n_states`` is the size of the counting space (``2 |S|`` for augmented data).
    """

    n_states: int
    k_max: int
    table: dict = field(default_factory=dict)

    def __post_init__(self):
        for (i, j, k), c in self.table.items():
            if not (0 <= i < self.n_states and 0 <= j < self.n_states):
                raise ValueError(f"state index out of range in key {(i, j, k)}")
            if not (1 <= k <= self.k_max):
                raise ValueError(f"k={k} outside 1..{self.k_max}")
            if c < 0 or int(c) != c:
                raise ValueError("counts must be nonnegative integers")

    @property
    def total(self) -> int:
        return int(sum(self.table.values()))

    def dense(self) -> np.ndarray:
        """Array ``M[i, j, k - 1]`` of shape (n_states, n_states, k_max)."""
        M = np.zeros((self.n_states, self.n_states, self.k_max))
        for (i, j, k), c in self.table.items():
            M[i, j, k - 1] = c
        return M

    @classmethod
    def from_dense(cls, M: np.ndarray) -> "KStepCounts":
        M = np.asarray(M)
        n, _, K = M.shape
        nz = np.argwhere(M != 0)
        table = {(int(i), int(j), int(k) + 1): int(M[i, j, k]) for i, j, k in nz}
        return cls(n, K, table)

    def merge(self, other: "KStepCounts") -> "KStepCounts":
        if other.n_states != self.n_states:
            raise ValueError("cannot merge counts over different state spaces")
        table = Counter(self.table)
        table.update(other.table)
        return KStepCounts(self.n_states, max(self.k_max, other.k_max), dict(table))

    def observed_k(self, source: int) -> np.ndarray:
        """Gap lengths observed out of ``source``, repeated by multiplicity."""
        ks = [k for (i, _, k), c in sorted(self.table.items()) if i == source for _ in range(c)]
        return np.array(ks, dtype=np.int64)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "count"])
            for (i, j, k), c in sorted(self.table.items()):
                w.writerow([i, j, k, c])

    @classmethod
    def from_csv(cls, path, n_states: int, k_max: int) -> "KStepCounts":
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        table = Counter()
        for r in rows:
            table[(int(r["i"]), int(r["j"]), int(r["k"]))] += int(r["count"])
        return cls(n_states, k_max, dict(table))


def extract_counts(
    trajectories: Iterable[Trajectory], k_max: int, n_states: int | None = None
) -> KStepCounts:
    """Sufficient statistics of a set of trajectories.

    ``n_states`` is the plain state-space size; the counting space doubles when the
    trajectories carry actions. Inferred from the data when omitted.
    """
    trajectories = list(trajectories)
    augmented = any(t.actions is not None for t in trajectories)
    if augmented and any(t.actions is None for t in trajectories):
        raise ValueError("cannot mix controlled and uncontrolled trajectories")
    table: Counter = Counter()
    top = -1
    for n, traj in enumerate(trajectories):
        flat = traj.flat_states()
        idx = np.flatnonzero(flat != UNLABELED)
        if len(idx) == 0:
            continue
        top = max(top, int(traj.states[idx].max()))
        gaps = np.diff(idx)
        bad = np.flatnonzero(gaps > k_max)
        if len(bad):
            pos = int(idx[bad[0]])
            label = traj.entity_id or f"#{n}"
            raise RunLengthError(
                f"trajectory {label}: {gaps[bad[0]] - 1} consecutive unlabeled entries "
                f"after position {pos} exceed k_max={k_max}"
            )
        src, dst = flat[idx[:-1]], flat[idx[1:]]
        keys = np.stack([src, dst, gaps], axis=1)
        if len(keys):
            uniq, cnt = np.unique(keys, axis=0, return_counts=True)
            for (i, j, k), c in zip(uniq.tolist(), cnt.tolist()):
                table[(i, j, k)] += c
    if n_states is None:
        n_states = max(top + 1, 1)
    elif top >= n_states:
        raise ValueError(f"state {top} out of range for n_states={n_states}")
    size = n_states * N_ACTIONS if augmented else n_states
    return KStepCounts(size, k_max, dict(table))


# -- gap-length model -----------------------------------------------------------


class KFamily(str, Enum):
    POISSON = "poisson"
    ZERO_TRUNCATED_POISSON = "ztpoisson"


@dataclass(frozen=True)
class KStepModel:
    """Per-source-state distribution of gap lengths ``k >= 1``.

    ``ztpoisson``: zero-truncated Poisson with rate ``exp(eta)``.
    ``poisson``: ``k - 1 ~ Poisson(mu - 1)`` where ``eta = log mu`` is the log of the
    mean gap, so ``eta >= 0``.
    """

    family: KFamily
    eta: np.ndarray

    def __post_init__(self):
        fam = KFamily(self.family)
        eta = np.array(self.eta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(eta)):
            raise ValueError("eta must be finite")
        if fam is KFamily.POISSON and np.any(eta < 0):
            raise ValueError("poisson eta is a log-mean gap and must be >= 0")
        eta.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "eta", eta)

    @property
    def rate(self) -> np.ndarray:
        if self.family is KFamily.ZERO_TRUNCATED_POISSON:
            return np.exp(self.eta)
        return np.expm1(self.eta)

    @property
    def mean(self) -> np.ndarray:
        lam = self.rate
        if self.family is KFamily.POISSON:
            return 1.0 + lam
        return lam / -np.expm1(-lam)

    def log_pmf(self, k) -> np.ndarray:
        """``log f(k | eta_i)`` for every source ``i`` (rows) and each ``k`` (columns)."""
        k = np.atleast_1d(np.asarray(k, dtype=float))
        lam = self.rate[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family is KFamily.ZERO_TRUNCATED_POISSON:
                out = k * np.log(lam) - lam - gammaln(k + 1) - np.log(-np.expm1(-lam))
            else:
                m = k - 1
                out = np.where(lam > 0, m * np.log(lam) - lam - gammaln(m + 1), np.where(m == 0, 0.0, -np.inf))
        return np.where(k >= 1, out, -np.inf)


def kstep_pmf(model: KStepModel, source: int, k: int) -> float:
    if k < 1:
        warnings.warn(f"k={k} is outside the support k >= 1", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.exp(model.log_pmf([k])[source, 0]))


def _ztp_mean(lam: float) -> float:
    return lam / -math.expm1(-lam)


def solve_ztp_rate(mean_k: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Rate ``lam`` with zero-truncated Poisson mean ``lam / (1 - exp(-lam)) = mean_k``.

    Newton from the right; the mean is increasing and convex in ``lam``, so the
    iterates decrease monotonically to the root.
    """
    if mean_k < 1:
        raise SupportError(f"mean gap {mean_k} < 1 is impossible for k >= 1 data")
    if mean_k - 1 < 1e-12:
        return 0.0
    lam = max(mean_k, 2 * (mean_k - 1))
    for _ in range(max_iter):
        e = -math.expm1(-lam)
        resid = lam / e - mean_k
        if abs(resid) <= tol:
            return lam
        deriv = (e - lam * math.exp(-lam)) / (e * e)
        lam = max(lam - resid / deriv, 0.5 * lam)
    raise RuntimeError(f"Newton iteration did not converge for mean {mean_k}")


# smallest rate kept when all observed gaps are 1, so eta stays finite
MIN_RATE = 1e-10


def fit_eta(
    counts: KStepCounts,
    family: KFamily | str = KFamily.ZERO_TRUNCATED_POISSON,
    prior_eta: float | None = None,
) -> KStepModel:
    """Moment/ML fit of the gap model per source state.

    Sources with no counted transitions get ``prior_eta``; by default the value
    fitted to all transitions pooled.
    """
    family = KFamily(family)
    M = counts.dense()
    ks = np.arange(1, counts.k_max + 1, dtype=float)
    per_source = M.sum(axis=1)  # (n, K)
    n_obs = per_source.sum(axis=1)

    def eta_for(mean_k: float) -> float:
        if family is KFamily.POISSON:
            return math.log(mean_k)
        return math.log(max(solve_ztp_rate(mean_k), MIN_RATE))

    if prior_eta is None:
        total = n_obs.sum()
        prior_eta = eta_for((per_source.sum(axis=0) @ ks) / total) if total > 0 else 0.0
    eta = np.full(counts.n_states, float(prior_eta))
    for i in np.flatnonzero(n_obs > 0):
        eta[i] = eta_for(per_source[i] @ ks / n_obs[i])
    return KStepModel(family, eta)


# -- transition parameters ----------------------------------------------------------


def dual_to_simplex(nu: np.ndarray) -> np.ndarray:
    """Gauge-fixed softmax along the last axis: appends a zero coordinate.

    Accepts any leading batch shape; output has one more entry on the last axis.
    """
    nu = np.asarray(nu, dtype=float)
    full = np.concatenate([nu, np.zeros(nu.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def simplex_to_dual(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("boundary points (zero coordinates) have no dual image")
    logx = np.log(x)
    return logx[..., :-1] - logx[..., -1:]


@dataclass(frozen=True)
class TransitionParams:
    """Row-wise dual coordinates of a transition matrix, shape (rows, n_states - 1)."""

    nu: np.ndarray

    def __post_init__(self):
        nu = np.array(self.nu, dtype=float)
        if nu.ndim != 2:
            raise ValueError("nu must be 2-D (rows, n_states - 1)")
        if not np.all(np.isfinite(nu)):
            raise ValueError("nu must be finite")
        nu.setflags(write=False)
        object.__setattr__(self, "nu", nu)

    @property
    def n_states(self) -> int:
        return self.nu.shape[1] + 1

    def matrix(self) -> np.ndarray:
        return dual_to_simplex(self.nu)

    @classmethod
    def from_matrix(cls, P) -> "TransitionParams":
        return cls(simplex_to_dual(np.asarray(P, dtype=float)))

    @classmethod
    def uniform(cls, n_states: int) -> "TransitionParams":
        return cls(np.zeros((n_states, n_states - 1)))


# -- likelihood and gradients -------------------------------------------------------


def _kmax_used(M: np.ndarray) -> int:
    nz = np.flatnonzero(M.reshape(-1, M.shape[-1]).any(axis=0))
    return int(nz[-1]) + 1 if len(nz) else 0


def transition_loglik(M: np.ndarray, P: np.ndarray) -> float:
    """``sum M[i,j,k] log (P^k)[i,j]`` with ``M`` dense (n, n, K)."""
    K = _kmax_used(M)
    total = 0.0
    Pk = np.eye(P.shape[0])
    for k in range(K):
        Pk = Pk @ P
        mk = M[..., k]
        nz = mk > 0
        if not nz.any():
            continue
        vals = Pk[nz]
        if np.any(vals <= 0):
            return -math.inf
        total += float(mk[nz] @ np.log(vals))
    return total


def entry_gradient(M: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Gradient of :func:`transition_loglik` with respect to the entries of ``P``.

    Uses ``d(P^k)_ij / dP_ab = sum_m (P^m)_ia (P^{k-1-m})_bj`` accumulated backwards,
    so the cost is linear in the largest observed ``k``. Broadcasts over leading
    batch dimensions of ``M`` (..., n, n, K) and ``P`` (..., n, n).
    """
    K = _kmax_used(M)
    P = np.asarray(P, dtype=float)
    shape = np.broadcast_shapes(M.shape[:-1], P.shape)
    if K == 0:
        return np.zeros(shape)
    # only source rows that carry counts contribute; restrict the recursions to them
    rows = np.flatnonzero(M.reshape(-1, *M.shape[-3:]).any(axis=(0, 2, 3)))
    M = M[..., rows, :, :K]
    rshape = shape[:-2] + (len(rows), shape[-1])
    Q = np.empty((K + 1,) + rshape)  # Q[m] = rows of P^m
    Q[0] = np.broadcast_to(np.eye(P.shape[-1])[rows], rshape)
    for k in range(1, K + 1):
        Q[k] = Q[k - 1] @ P
    Pt = np.swapaxes(P, -1, -2)
    E = np.empty((K,) + rshape)
    acc = np.zeros(rshape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for m in range(K - 1, -1, -1):
            mk = M[..., m]
            acc = np.where(mk > 0, mk / Q[m + 1], 0.0) + acc @ Pt
            E[m] = acc
        # G = sum_m (P^m)^T E_m, with E_m supported on the count rows
        lead = len(rshape) - 2
        Qs = np.moveaxis(Q[:K], 0, lead).reshape(rshape[:-2] + (K * len(rows), shape[-1]))
        Es = np.moveaxis(E, 0, lead).reshape(rshape[:-2] + (K * len(rows), shape[-1]))
        G = np.broadcast_to(np.swapaxes(Qs, -1, -2) @ Es, shape)
    if not np.all(np.isfinite(G)):
        raise SupportError("observed transition has zero model probability")
    return np.array(G)


def dual_pullback(G: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Chain an entry gradient ``G`` through the gauge-fixed softmax rows ``X``."""
    inner = (G * X).sum(axis=-1, keepdims=True)
    return (X * (G - inner))[..., :-1]


def log_likelihood(counts: KStepCounts, model: KStepModel, params: TransitionParams) -> float:
    """Full log-likelihood including the gap-model term; ``-inf`` if impossible."""
    _check_dims(counts, model, params)
    M = counts.dense()
    if counts.total == 0:
        return 0.0
    logf = model.log_pmf(np.arange(1, counts.k_max + 1))  # (n, K)
    per_source_k = M.sum(axis=1)
    nz = per_source_k > 0
    if np.any(np.isneginf(logf[nz])):
        return -math.inf
    return float((per_source_k[nz] * logf[nz]).sum()) + transition_loglik(M, params.matrix())


def score_entries(counts: KStepCounts, params: TransitionParams) -> np.ndarray:
    """Gradient in matrix-entry coordinates (exposed for testing)."""
    return entry_gradient(counts.dense(), params.matrix())


def score_transition(counts: KStepCounts, model: KStepModel, params: TransitionParams) -> np.ndarray:
    """Exact gradient of :func:`log_likelihood` with respect to ``params.nu``.

    The gap-model term does not depend on the transition parameters.
    """
    _check_dims(counts, model, params)
    X = params.matrix()
    return dual_pullback(entry_gradient(counts.dense(), X), X)


def _check_dims(counts: KStepCounts, model: KStepModel, params: TransitionParams):
    n = counts.n_states
    if params.nu.shape != (n, n - 1):
        raise ValueError(f"params shape {params.nu.shape} does not match {n} counting states")
    if model.eta.shape != (n,):
        raise ValueError(f"model has {model.eta.shape[0]} eta values for {n} states")


# -- CSV input ------------------------------------------------------------------------


def read_trajectories_csv(path) -> list[Trajectory]:
    """Read ``entity_id, t, state[, action]`` rows; ``state = -1`` marks unlabeled.

    Missing time steps inside an entity's range are treated as unlabeled.
    """
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_entity: dict[str, list] = {}
    has_action = bool(rows) and "action" in rows[0] and any(r.get("action", "") != "" for r in rows)
    for r in rows:
        a = int(r["action"]) if has_action and r.get("action", "") != "" else 0
        by_entity.setdefault(r["entity_id"], []).append((int(r["t"]), int(r["state"]), a))
    out = []
    for eid in sorted(by_entity):
        recs = sorted(by_entity[eid])
        t0, t1 = recs[0][0], recs[-1][0]
        states = np.full(t1 - t0 + 1, UNLABELED)
        actions = np.zeros(t1 - t0 + 1, dtype=np.int64)
        for t, s, a in recs:
            states[t - t0] = s
            actions[t - t0] = a
        out.append(Trajectory(states, actions if has_action else None, eid))
    return out


def write_trajectories_csv(trajectories: Sequence[Trajectory], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        has_action = any(t.actions is not None for t in trajectories)
        w.writerow(["entity_id", "t", "state"] + (["action"] if has_action else []))
        for n, traj in enumerate(trajectories):
            eid = traj.entity_id or str(n)
            for t, s in enumerate(traj.states):
                row = [eid, t, int(s)]
                if has_action:
                    row.append(int(traj.actions[t]) if traj.actions is not None else "")
                w.writerow(row)
