"""Finite-particle Stein variational gradient descent on the probability simplex.

Three flavours share one update rule:

* :func:`svgd_step` - plain SVGD in an unconstrained space;
* :func:`msvgd_step` - mirror SVGD, run in gauge-fixed softmax (dual) coordinates
  with the pushed-forward score, so every particle decodes to interior rows;
* :func:`psvgd_step` - SVGD in matrix-entry coordinates followed by a Euclidean
  projection of every row onto the simplex.

Step sizes come from RMSprop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from .kstep import dual_pullback, dual_to_simplex, simplex_to_dual

__all__ = [
    "KernelKind",
    "KernelSpec",
    "MEDIAN",
    "NonFiniteError",
    "OptimizerState",
    "dual_to_simplex",
    "simplex_to_dual",
    "kernel_eval",
    "kernel_terms",
    "median_bandwidth",
    "rmsprop_step",
    "svgd_direction",
    "svgd_step",
    "pushforward_score",
    "msvgd_step",
    "msvgd_batch_step",
    "psvgd_step",
    "project_simplex",
    "write_particles_csv",
    "read_particles_csv",
]

MEDIAN = "median"
# |dual coordinate| cap; keeps every decoded entry above exp(-2 * DUAL_BOUND) > 0
DUAL_BOUND = 200.0


class NonFiniteError(FloatingPointError):
    def __init__(self, index: int, what: str = "score"):
        super().__init__(f"non-finite {what} at particle {index}")
        self.index = index


class KernelKind(str, Enum):
    RBF = "rbf"
    IMQ = "imq"


@dataclass(frozen=True)
class KernelSpec:
    """RBF ``exp(-r^2 / h)`` or inverse multiquadric ``(c^2 + r^2 / h)^beta``.

    ``bandwidth`` is a positive float or :data:`MEDIAN` for the median heuristic.
    """

    kind: KernelKind = KernelKind.IMQ
    bandwidth: float | str = 1.0
    c: float = 1.0
    beta: float = -0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.bandwidth != MEDIAN and not float(self.bandwidth) > 0:
            raise ValueError("bandwidth must be positive or 'median'")
        if self.kind is KernelKind.IMQ:
            if not self.c > 0:
                raise ValueError("IMQ offset c must be positive")
            if not -1 < self.beta < 0:
                raise ValueError("IMQ exponent beta must lie in (-1, 0)")

    def resolve(self, points: np.ndarray) -> float:
        if self.bandwidth == MEDIAN:
            return median_bandwidth(points)
        return float(self.bandwidth)


def median_bandwidth(points) -> float:
    """``med^2 / log(n + 1)`` over pairwise distances; 1 when undefined."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[0]
    if n < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    if med <= 0:
        return 1.0
    return med**2 / np.log(n + 1)


def _profile(spec: KernelSpec, sq: np.ndarray, h: float):
    """Kernel value and its derivative with respect to the squared distance."""
    if spec.kind is KernelKind.RBF:
        k = np.exp(-sq / h)
        return k, -k / h
    base = spec.c**2 + sq / h
    k = base**spec.beta
    return k, spec.beta * base ** (spec.beta - 1) / h


def kernel_eval(spec: KernelSpec, x, y, bandwidth: float | None = None):
    """Kernel value ``k(x, y)`` and its gradient in ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same dimension")
    h = spec.resolve(np.stack([x.reshape(-1), y.reshape(-1)])) if bandwidth is None else bandwidth
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    diff = x - y
    k, dk = _profile(spec, float(diff @ diff) if diff.ndim else float(diff * diff), h)
    return float(k), 2 * dk * diff


def kernel_terms(spec: KernelSpec, X: np.ndarray, bandwidth: float | None = None):
    """Gram matrix ``K[..., j, i] = k(x_j, x_i)`` and ``grad[..., j, i] = d k(x_j, x_i) / d x_j``.

    ``X`` has shape (..., n, d); the median heuristic is resolved per leading batch.
    """
    X = np.asarray(X, dtype=float)
    if bandwidth is not None:
        h = np.asarray(bandwidth, dtype=float)
    elif spec.bandwidth == MEDIAN:
        flat = X.reshape((-1,) + X.shape[-2:])
        h = np.array([median_bandwidth(x) for x in flat]).reshape(X.shape[:-2])
    else:
        h = np.asarray(float(spec.bandwidth))
    diff = X[..., :, None, :] - X[..., None, :, :]
    sq = np.einsum("...jid,...jid->...ji", diff, diff)
    K, dK = _profile(spec, sq, h[..., None, None])
    return K, 2 * dK[..., None] * diff


@dataclass(frozen=True)
class OptimizerState:
    """RMSprop accumulator ``v`` with decay ``rho``.

    ``decay`` shrinks the learning rate as ``lr / (1 + decay * t)``; zero keeps it
    constant.
    """

    v: np.ndarray | None = None
    rho: float = 0.9
    eps: float = 1e-8
    lr: float = 0.05
    decay: float = 0.0
    t: int = 0


def rmsprop_step(opt: OptimizerState, g) -> tuple[OptimizerState, np.ndarray]:
    g = np.asarray(g, dtype=float)
    v = np.zeros_like(g) if opt.v is None else opt.v
    v = opt.rho * v + (1 - opt.rho) * g * g
    lr = opt.lr / (1.0 + opt.decay * opt.t)
    step = lr * g / (np.sqrt(v) + opt.eps)
    return replace(opt, v=v, t=opt.t + 1), step


ScoreFn = Callable[[np.ndarray], np.ndarray]


def _scores(score: ScoreFn, X: np.ndarray) -> np.ndarray:
    S = np.empty_like(X)
    for i, x in enumerate(X):
        s = np.asarray(score(x), dtype=float)
        if not np.all(np.isfinite(s)):
            raise NonFiniteError(i)
        S[i] = s
    return S


def svgd_direction(X: np.ndarray, S: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """``phi(x_i) = mean_j [k(x_j, x_i) s(x_j) + grad_{x_j} k(x_j, x_i)]`` for all i.

    Broadcasts over leading batch dimensions of the (..., n, d) arrays.
    """
    n = X.shape[-2]
    K, gradK = kernel_terms(spec, X)
    return (np.swapaxes(K, -1, -2) @ S + gradK.sum(axis=-3)) / n


def _apply(X, phi, opt):
    opt, step = rmsprop_step(opt, phi)
    Xn = X + step
    bad = np.flatnonzero(~np.all(np.isfinite(Xn.reshape(-1, Xn.shape[-1])), axis=1))
    if len(bad):
        raise NonFiniteError(int(bad[0]), "update")
    return Xn, opt


def svgd_step(particles, score: ScoreFn, kernel: KernelSpec, opt: OptimizerState):
    """One synchronous SVGD update of an (n, d) particle array.

    ``score`` maps one point to the gradient of the target log-density there.
    Returns the new particles and optimizer state.
    """
    X = np.atleast_2d(np.asarray(particles, dtype=float))
    S = _scores(score, X)
    return _apply(X, svgd_direction(X, S, kernel), opt)


def pushforward_score(nu: np.ndarray, primal_grad: np.ndarray) -> np.ndarray:
    """Score in dual coordinates of a density given by its primal-entry gradient.

    ``nu`` has shape (rows, S - 1) and ``primal_grad`` (rows, S). Adds the gradient
    of ``log |det J| = sum_j log x_j``, which is ``1 - S * x_a`` per free coordinate.
    """
    X = dual_to_simplex(nu)
    n_states = X.shape[-1]
    return dual_pullback(primal_grad, X) + 1.0 - n_states * X[..., :-1]


def msvgd_step(particles, primal_score: ScoreFn, kernel: KernelSpec, opt: OptimizerState, n_states: int):
    """Mirror SVGD step for particles in flattened dual coordinates.

    Each particle is a (rows, ``n_states`` - 1) array flattened to a vector;
    ``primal_score`` maps the decoded (rows, ``n_states``) matrix to the gradient
    of the target log-density in entry coordinates.
    """
    X = np.atleast_2d(np.asarray(particles, dtype=float))
    m = n_states - 1

    def dual_score(x):
        nu = x.reshape(-1, m)
        return pushforward_score(nu, primal_score(dual_to_simplex(nu))).reshape(-1)

    Xn, opt = svgd_step(X, dual_score, kernel, opt)
    return np.clip(Xn, -DUAL_BOUND, DUAL_BOUND), opt


def msvgd_batch_step(particles, entry_grad, kernel: KernelSpec, opt: OptimizerState):
    """Mirror SVGD step for independent particle sets stacked on a leading axis.

    ``particles`` has shape (A, n, rows, S - 1); ``entry_grad`` maps the decoded
    (A, n, rows, S) matrices to their primal-entry log-density gradients in one call.
    """
    nu = np.asarray(particles, dtype=float)
    A, n = nu.shape[:2]
    X = dual_to_simplex(nu)
    G = np.asarray(entry_grad(X), dtype=float)
    score = pushforward_score(nu, G).reshape(A, n, -1)
    bad = np.flatnonzero(~np.all(np.isfinite(score.reshape(A * n, -1)), axis=1))
    if len(bad):
        raise NonFiniteError(int(bad[0]))
    flat = nu.reshape(A, n, -1)
    Xn, opt = _apply(flat, svgd_direction(flat, score, kernel), opt)
    return np.clip(Xn, -DUAL_BOUND, DUAL_BOUND).reshape(nu.shape), opt


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex along the last axis.

    Sort-and-threshold method: find the largest ``rho`` with
    ``u_rho - (sum_{j<=rho} u_j - 1) / rho > 0`` on the sorted vector ``u``.
    """
    v = np.asarray(v, dtype=float)
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, v.shape[-1] + 1)
    cond = u - css / ind > 0
    rho = v.shape[-1] - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, (rho - 1)[..., None], axis=-1) / rho[..., None]
    return np.maximum(v - theta, 0.0)


def psvgd_step(particles, score: ScoreFn, kernel: KernelSpec, opt: OptimizerState, n_states: int):
    """Projected SVGD: entry-coordinate update then per-row simplex projection."""
    Xn, opt = svgd_step(particles, score, kernel, opt)
    rows = project_simplex(Xn.reshape(Xn.shape[0], -1, n_states))
    return rows.reshape(Xn.shape), opt


def write_particles_csv(particles, path) -> None:
    X = np.atleast_2d(np.asarray(particles, dtype=float))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "coordinate", "value"])
        for i, x in enumerate(X):
            for c, val in enumerate(x):
                w.writerow([i, c, repr(float(val))])


def read_particles_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = [(int(r["particle"]), int(r["coordinate"]), float(r["value"])) for r in csv.DictReader(fh)]
    n = max(r[0] for r in rows) + 1
    d = max(r[1] for r in rows) + 1
    X = np.zeros((n, d))
    for i, c, val in rows:
        X[i, c] = val
    return X
