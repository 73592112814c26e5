"""Arm-selection policies: Whittle index, myopic and uniform random.

Every selector returns a sorted integer array of exactly ``M`` distinct arms.
Ties are always broken in favour of the lowest arm index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import as_array, cre_reset, cre_reward_table, TransitionMatrix

PASSIVE, ACTIVE = 0, 1
VI_TOL = 1e-8
VI_MAX_ITER = 100_000
BISECT_TOL = 1e-6
# aperiodicity transform weight used by relative value iteration
APERIODIC_MIX = 0.5


class NotIndexableAtState(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArmModel:
    """Single-arm MDP: passive and active transition matrices plus ``reward[s, a]``."""

    P0: np.ndarray
    P1: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        P0 = TransitionMatrix(as_array(self.P0)).entries
        P1 = TransitionMatrix(as_array(self.P1)).entries
        r = np.array(self.reward, dtype=float)
        if P0.shape != P1.shape:
            raise ValueError("passive and active matrices must have the same size")
        if r.shape != (P0.shape[0], 2):
            raise ValueError(f"reward table must have shape ({P0.shape[0]}, 2)")
        r.setflags(write=False)
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "P1", P1)
        object.__setattr__(self, "reward", r)

    @property
    def n_states(self) -> int:
        return self.P0.shape[0]

    @classmethod
    def cre(cls, P0) -> "ArmModel":
        """Controlled-restarts arm with the given passive matrix."""
        S = as_array(P0).shape[0]
        return cls(as_array(P0), cre_reset(S).entries, cre_reward_table(S))


@dataclass(frozen=True)
class VIResult:
    gain: float
    bias: np.ndarray
    actions: np.ndarray


def _q_values(arm: ArmModel, subsidy, h: np.ndarray) -> np.ndarray:
    """Q-values ``(..., S, 2)`` for biases ``h`` of shape (..., S)."""
    subsidy = np.asarray(subsidy, dtype=float)[..., None]
    q0 = arm.reward[:, 0] + subsidy + h @ arm.P0.T
    q1 = arm.reward[:, 1] + h @ arm.P1.T
    return np.stack([q0, q1], axis=-1)


def _greedy(q: np.ndarray) -> np.ndarray:
    """Active only when strictly better; passive wins ties."""
    tol = 1e-9 * (1.0 + np.abs(q).max(axis=-1))
    return (q[..., 1] > q[..., 0] + tol).astype(np.int64)


def avg_reward_vi(
    arm: ArmModel,
    subsidy,
    tol: float = VI_TOL,
    max_iter: int = VI_MAX_ITER,
    h0: np.ndarray | None = None,
) -> VIResult:
    """Relative value iteration for the average-reward, passive-subsidised arm.

    Iterates the aperiodicity-transformed operator ``(1 - a) h + a T h`` with
    reference state 0, stopping once the span of ``T h - h`` is at most ``tol``.
    ``subsidy`` may be an array; every entry is then solved independently and the
    result fields gain a leading axis of the same shape.
    """
    a = APERIODIC_MIX
    lam = np.asarray(subsidy, dtype=float)
    S = arm.n_states
    h = np.zeros(lam.shape + (S,)) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=float), lam.shape + (S,)).copy()
    done = np.zeros(lam.shape, dtype=bool)
    gain = np.zeros(lam.shape)
    for _ in range(max_iter):
        Th = _q_values(arm, lam, h).max(axis=-1)
        diff = Th - h
        span = diff.max(axis=-1) - diff.min(axis=-1)
        now = ~done & (span <= tol)
        gain = np.where(now, 0.5 * (diff.max(axis=-1) + diff.min(axis=-1)), gain)
        done |= now
        if done.all():
            h = h - h[..., :1]
            actions = _greedy(_q_values(arm, lam, h))
            if lam.ndim == 0:
                return VIResult(float(gain), h, actions)
            return VIResult(gain, h, actions)
        step = (1 - a) * h + a * Th
        step = step - step[..., :1]
        h = np.where(done[..., None], h, step)
    raise ConvergenceError(f"relative value iteration did not converge in {max_iter} iterations")


def evaluate_policy(arm: ArmModel, subsidy: float, actions: np.ndarray):
    """Gain and bias (``h[0] = 0``) of a stationary deterministic policy.

    Returns ``None`` when the evaluation equations are singular, which happens for
    policies with more than one recurrent class.
    """
    S = arm.n_states
    Pp = np.where(actions[:, None] == ACTIVE, arm.P1, arm.P0)
    rp = np.where(actions == ACTIVE, arm.reward[:, 1], arm.reward[:, 0] + subsidy)
    # unknowns: gain, h[1:], with h[0] pinned to zero
    A = np.empty((S, S))
    A[:, 0] = 1.0
    A[:, 1:] = np.eye(S)[:, 1:] - Pp[:, 1:]
    if np.linalg.cond(A) > 1e10:
        return None
    x = np.linalg.solve(A, rp)
    return float(x[0]), np.concatenate([[0.0], x[1:]])


def policy_iteration(arm: ArmModel, subsidy: float, max_iter: int = 200) -> VIResult:
    """Exact average-reward solve by policy iteration, falling back to relative VI
    when a visited policy is multichain."""
    actions = _greedy(np.column_stack([arm.reward[:, 0] + subsidy, arm.reward[:, 1]]))
    for _ in range(max_iter):
        ev = evaluate_policy(arm, subsidy, actions)
        if ev is None:
            return avg_reward_vi(arm, subsidy)
        gain, h = ev
        q = _q_values(arm, subsidy, h)
        cur = q[np.arange(arm.n_states), actions]
        better = q.max(axis=1) > cur + 1e-10 * (1.0 + np.abs(cur))
        if not better.any():
            return VIResult(gain, h, _greedy(q))
        actions = np.where(better, q.argmax(axis=1), actions)
    raise ConvergenceError("policy iteration did not converge")


def whittle_index(arm: ArmModel, state: int, tol: float = BISECT_TOL, solver=policy_iteration, max_expand: int = 40) -> float:
    """Subsidy at which the optimal action in ``state`` flips from active to passive.

    Bisection on ``lam`` starting from ``[-r_max, 2 r_max]``, doubling the bracket
    outwards until the action at ``lam_lo`` is active and at ``lam_hi`` passive.
    """
    r_max = max(float(np.abs(arm.reward).max()), 1.0)
    lo, hi = -r_max, 2.0 * r_max

    def active(lam):
        return solver(arm, lam).actions[state] == ACTIVE

    for _ in range(max_expand):
        if active(lo):
            break
        lo -= hi - lo
    else:
        raise NotIndexableAtState(f"state {state}: passive even at subsidy {lo}")
    for _ in range(max_expand):
        if not active(hi):
            break
        hi += hi - lo
    else:
        raise NotIndexableAtState(f"state {state}: active even at subsidy {hi}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if active(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class WhittleTable:
    """Index ``index[arm, state]``; the state may be an observed state or a
    steps-since-reset counter, depending on how the table was built."""

    index: np.ndarray

    def __post_init__(self):
        idx = np.array(self.index, dtype=float)
        if idx.ndim != 2:
            raise ValueError("index table must be 2-D (arms, states)")
        if not np.all(np.isfinite(idx)):
            raise ValueError("index table has non-finite entries")
        idx.setflags(write=False)
        object.__setattr__(self, "index", idx)

    def lookup(self, states) -> np.ndarray:
        states = np.minimum(np.asarray(states, dtype=np.int64), self.index.shape[1] - 1)
        return self.index[np.arange(self.index.shape[0]), states]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "state", "index"])
            for (i, s), v in np.ndenumerate(self.index):
                w.writerow([i, s, f"{v:.12g}"])

    @classmethod
    def from_csv(cls, path) -> "WhittleTable":
        with open(Path(path), newline="") as fh:
            rows = [(int(r["arm"]), int(r["state"]), float(r["index"])) for r in csv.DictReader(fh)]
        idx = np.zeros((max(r[0] for r in rows) + 1, max(r[1] for r in rows) + 1))
        for i, s, v in rows:
            idx[i, s] = v
        return cls(idx)


def whittle_table(arms, tol: float = BISECT_TOL) -> WhittleTable:
    return WhittleTable(np.array([[whittle_index(a, s, tol) for s in range(a.n_states)] for a in arms]))


def top_m(scores, M: int) -> np.ndarray:
    """Indices of the ``M`` largest scores, lowest index first among ties; sorted."""
    scores = np.asarray(scores, dtype=float)
    N = len(scores)
    if not 0 <= M <= N:
        raise ValueError(f"budget M={M} must lie in [0, {N}]")
    order = np.lexsort((np.arange(N), -scores))
    return np.sort(order[:M])


def select_whittle(table: WhittleTable, states, M: int) -> np.ndarray:
    return top_m(table.lookup(states), M)


def predict_beliefs(beliefs: np.ndarray, P0: np.ndarray, P1: np.ndarray | None = None, actions=None) -> np.ndarray:
    """One-step prediction ``b P_a`` for a batch of arms (passive unless told otherwise)."""
    b = np.asarray(beliefs, dtype=float)
    w = np.einsum("ns,nst->nt", b, np.asarray(P0, dtype=float))
    if actions is not None and P1 is not None:
        w1 = np.einsum("ns,nst->nt", b, np.asarray(P1, dtype=float))
        w = np.where(np.asarray(actions)[:, None] == ACTIVE, w1, w)
    return w


def myopic_rank(beliefs, arms, M: int, actions=None, predict: bool = True) -> np.ndarray:
    """Top-``M`` arms by expected active reward under the predicted next-state
    distribution; this total order agrees with first-order stochastic dominance
    whenever the latter applies, because the active reward is nondecreasing.

    ``actions`` are the arms' previous actions (passive when omitted). With
    ``predict=False`` the beliefs are taken to describe the current state already.
    """
    arms = list(arms)
    if predict:
        P0 = np.stack([a.P0 for a in arms])
        P1 = np.stack([a.P1 for a in arms])
        w = predict_beliefs(beliefs, P0, P1, actions)
    else:
        w = np.asarray(beliefs, dtype=float)
    r1 = np.stack([a.reward[:, 1] for a in arms])
    return top_m((w * r1).sum(axis=1), M)


def fosd_dominates(w, v) -> bool:
    """``w`` first-order stochastically dominates ``v``."""
    tw = np.cumsum(np.asarray(w)[::-1])[::-1]
    tv = np.cumsum(np.asarray(v)[::-1])[::-1]
    return bool(np.all(tw >= tv - 1e-12))


def select_random(N: int, M: int, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= M <= N:
        raise ValueError(f"budget M={M} must lie in [0, {N}]")
    return np.sort(rng.choice(N, size=M, replace=False))


# -- restart arms under partial observation --------------------------------------------
#
# When activation resets an arm to state 0 and reveals nothing else, the belief about
# an arm is e_0 P0^tau, where tau counts steps since its last activation. A stationary
# policy seen from a reset is then a threshold: wait theta steps, activate. Its average
# reward is g_theta(lam) = (lam * theta + A(theta)) / (theta + 1) with
# A(theta) = sum_{tau < theta} R0(tau) + R1(theta).


def reset_beliefs(P0: np.ndarray, tau_max: int, start=None) -> np.ndarray:
    """Beliefs ``start P0^tau`` for ``tau = 0..tau_max``; shape (N, tau_max + 1, S)."""
    P0 = np.asarray(P0, dtype=float)
    N, S, _ = P0.shape
    b = np.zeros((N, tau_max + 1, S))
    b[:, 0] = np.eye(S)[0] if start is None else start
    for tau in range(1, tau_max + 1):
        b[:, tau] = np.einsum("ns,nst->nt", b[:, tau - 1], P0)
    return b


def reset_whittle_indices(P0: np.ndarray, reward: np.ndarray, tau_max: int = 50) -> np.ndarray:
    """Whittle index of every steps-since-reset count for a batch of restart arms.

    Closed form ``W(tau) = (tau + 2) A(tau) - (tau + 1) A(tau + 1)``, valid when it is
    nondecreasing. Otherwise the index at ``tau`` is the subsidy at which the best
    threshold moves past ``tau``, read off the upper envelope of the threshold gains.
    Returns an array of shape (N, tau_max + 1).
    """
    P0 = np.asarray(P0, dtype=float)
    reward = np.broadcast_to(np.asarray(reward, dtype=float), (P0.shape[0], P0.shape[1], 2))
    b = reset_beliefs(P0, tau_max + 1)
    R0 = np.einsum("nts,ns->nt", b, reward[:, :, 0])
    R1 = np.einsum("nts,ns->nt", b, reward[:, :, 1])
    A = np.concatenate([np.zeros((P0.shape[0], 1)), np.cumsum(R0, axis=1)[:, :-1]], axis=1) + R1
    tau = np.arange(tau_max + 1)
    W = (tau + 2) * A[:, :-1] - (tau + 1) * A[:, 1:]
    bad = np.flatnonzero(np.any(np.diff(W, axis=1) < -1e-12, axis=1))
    for n in bad:
        W[n] = _envelope_indices(A[n], tau_max)
    return W


def _envelope_indices(A: np.ndarray, tau_max: int) -> np.ndarray:
    """Index at each ``tau``: the subsidy where the best threshold moves past ``tau``.

    Threshold gains are lines in ``lam`` with slopes ``theta / (theta + 1)``
    increasing in ``theta``. Walking the upper envelope left to right therefore
    visits thresholds in increasing order, and the index at ``tau`` is the
    breakpoint where the envelope leaves the thresholds ``<= tau``.
    """
    theta = np.arange(len(A))
    slope = theta / (theta + 1)
    icpt = A / (theta + 1)

    def cross(i, j):
        return (icpt[i] - icpt[j]) / (slope[j] - slope[i])

    hull: list[int] = []
    for j in range(len(A)):
        while len(hull) >= 2 and cross(hull[-2], j) <= cross(hull[-2], hull[-1]):
            hull.pop()
        hull.append(j)
    hull_theta = np.array(hull)
    breaks = np.array([cross(i, j) for i, j in zip(hull[:-1], hull[1:])])
    pos = np.searchsorted(hull_theta, np.arange(tau_max + 1), side="right") - 1
    return breaks[pos]
