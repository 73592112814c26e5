"""Experiment harness: record ingestion, dynamics fitting, policy comparisons,
estimation sensitivity grids and the split-half evaluation."""

from __future__ import annotations

import csv
import datetime as dt
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .config import EnvSource, SimConfig
from .engine import History, build_environment, run_rb_stein
from .io import parse_date, write_csv
from .kstep import (
    KFamily,
    KStepCounts,
    Trajectory,
    UNLABELED,
    entry_gradient,
    extract_counts,
    fit_eta,
    split_long_gaps,
)
from .mdp import RngStream, cre_reward_table, sample_next
from .stein import KernelSpec, OptimizerState, dual_to_simplex, msvgd_batch_step, pushforward_score

POLICY_ORDER = ("random", "myopic", "ts-mcr")


# -- metrics -------------------------------------------------------------------------


def kld_rows(P_hat, P_true) -> float:
    """Mean over rows of ``KL(P_hat[i] || P_true[i])``; ``inf`` on a support violation."""
    A = np.asarray(P_hat, dtype=float)
    B = np.asarray(P_true, dtype=float)
    if A.shape != B.shape:
        raise ValueError("matrices must have matching shapes")
    pos = A > 0
    if np.any(pos & (B <= 0)):
        return math.inf
    terms = np.zeros_like(A)
    terms[pos] = A[pos] * np.log(A[pos] / B[pos])
    return float(terms.sum(axis=-1).mean())


def mae_eta(eta_hat, eta_true) -> float:
    a = np.asarray(eta_hat, dtype=float)
    b = np.asarray(eta_true, dtype=float)
    if a.shape != b.shape:
        raise ValueError("eta vectors must have matching shapes")
    return float(np.abs(a - b).mean())


@dataclass
class ResultTable:
    """Rows of condition labels, metric name, mean, standard error and replication count."""

    label_names: tuple
    rows: list = field(default_factory=list)

    def add(self, labels: Sequence, metric: str, values) -> None:
        v = np.asarray(values, dtype=float)
        n = len(v)
        se = float(v.std(ddof=1) / np.sqrt(n)) if n >= 2 else math.nan
        self.rows.append((tuple(labels), metric, float(v.mean()), se, n))

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (tuple(map(str, r[0])), r[1]))

    def lookup(self, labels: Sequence, metric: str):
        for lab, m, mean, se, n in self.rows:
            if tuple(lab) == tuple(labels) and m == metric:
                return mean, se, n
        raise KeyError((labels, metric))

    def csv_rows(self):
        for lab, m, mean, se, n in self.sorted_rows():
            yield (*lab, m, mean, se, n)

    @property
    def header(self):
        return (*self.label_names, "metric", "mean", "se", "n")


# -- records and ingestion ----------------------------------------------------------------


@dataclass(frozen=True)
class RawRecord:
    entity_id: str
    date: dt.date
    state: int | None  # None marks a logged interaction without a state


class IngestError(ValueError):
    pass


def ingest(
    records: Iterable[RawRecord],
    n_states: int,
    k_max: int,
    span: tuple[dt.date, dt.date] | None = None,
) -> list[Trajectory]:
    """One daily trajectory per entity: the max state logged on a day, unlabeled on
    days without a state, trimmed to the first and last observed day and cut at
    gaps longer than ``k_max`` steps. Output is sorted by entity id."""
    best: dict[str, dict[dt.date, int]] = {}
    for r in records:
        if span is not None and not span[0] <= r.date <= span[1]:
            raise IngestError(f"entity {r.entity_id}: date {r.date} outside the calendar span")
        if r.state is None:
            best.setdefault(r.entity_id, {})
            continue
        if not 0 <= r.state < n_states:
            raise IngestError(f"entity {r.entity_id}, date {r.date}: state {r.state} outside [0, {n_states})")
        days = best.setdefault(r.entity_id, {})
        days[r.date] = max(days.get(r.date, -1), int(r.state))
    out = []
    for eid in sorted(best):
        days = best[eid]
        if not days:
            continue
        first, last = min(days), max(days)
        states = np.full((last - first).days + 1, UNLABELED, dtype=np.int64)
        for d, s in days.items():
            states[(d - first).days] = s
        pieces = split_long_gaps(Trajectory(states, entity_id=eid), k_max)
        if len(pieces) > 1:
            pieces = [Trajectory(p.states, entity_id=f"{eid}/{n}") for n, p in enumerate(pieces)]
        out.extend(pieces)
    return out


def read_records_csv(path) -> list[RawRecord]:
    """``entity_id, date, state`` rows; an empty state marks a logged day without one."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        s = r["state"].strip()
        out.append(RawRecord(r["entity_id"], parse_date(r["date"]), int(s) if s else None))
    return out


def write_records_csv(records: Sequence[RawRecord], path) -> None:
    write_csv(
        path,
        ["entity_id", "date", "state"],
        ((r.entity_id, r.date.isoformat(), "" if r.state is None else r.state) for r in records),
    )


def gen_records(
    P,
    n_entities: int,
    n_days: int,
    p_missing: float,
    rng: np.random.Generator,
    p_duplicate: float = 0.1,
    start: dt.date = dt.date(2020, 1, 1),
) -> list[RawRecord]:
    """Synthetic daily interaction logs.

    ``P`` is one passive matrix shared by all entities or an (entities, S, S) stack.
    Each day an entity's state moves one step; the day is logged with probability
    ``1 - p_missing``, and a logged day carries an extra lower-or-equal state with
    probability ``p_duplicate`` (so the daily max recovers the true state).
    """
    P = np.asarray(P, dtype=float)
    if P.ndim == 2:
        P = np.broadcast_to(P, (n_entities,) + P.shape)
    S = P.shape[-1]
    out = []
    for e in range(n_entities):
        s = int(rng.integers(S))
        eid = f"e{e:04d}"
        for d in range(n_days):
            if d > 0:
                s = sample_next(P[e], s, rng)
            if rng.random() >= p_missing:
                day = start + dt.timedelta(days=d)
                out.append(RawRecord(eid, day, s))
                if rng.random() < p_duplicate:
                    out.append(RawRecord(eid, day, int(rng.integers(s + 1))))
    return out


def cre_matrices(ps, n_states: int) -> np.ndarray:
    ps = np.asarray(ps, dtype=float)
    q = (1 - ps) / (n_states - 1)
    P = q[:, None, None] * np.ones((len(ps), n_states, n_states))
    P[:, np.arange(n_states), np.arange(n_states)] = ps[:, None]
    return P


# -- fitting -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    P: np.ndarray
    eta: np.ndarray
    family: KFamily
    n_steps: int
    grad_norm: float
    converged: bool
    n_transitions: int


class NoTransitionsError(ValueError):
    pass


def msvgd_point_estimate(
    counts: np.ndarray,
    n_steps: int,
    lr: float = 0.05,
    decay: float = 0.0,
    grad_tol: float = 0.0,
    nu0=None,
    kernel: KernelSpec | None = None,
    prior_alpha: float = 1.0,
):
    """Single-particle mirror SVGD on the k-step posterior of dense counts (S, S, K).

    Rows carry a symmetric Dirichlet(``prior_alpha``) prior; 1 is flat.
    Returns the decoded matrix, the steps taken and the final dual-gradient norm.
    """
    S = counts.shape[0]
    kernel = kernel or KernelSpec()
    nu = np.zeros((1, 1, S, S - 1)) if nu0 is None else np.asarray(nu0, dtype=float).reshape(1, 1, S, S - 1)
    M = counts[None, None]
    opt = OptimizerState(lr=lr, decay=decay)
    gnorm = math.inf
    step = 0
    for step in range(1, n_steps + 1):
        nu, opt = msvgd_batch_step(nu, lambda X: entry_gradient(M, X) + (prior_alpha - 1) / X, kernel, opt)
        if grad_tol > 0 and step % 50 == 0:
            gnorm = _dual_grad_norm(counts, nu, prior_alpha)
            if gnorm <= grad_tol:
                break
    if grad_tol > 0 or not math.isfinite(gnorm):
        gnorm = _dual_grad_norm(counts, nu, prior_alpha)
    return dual_to_simplex(nu[0, 0]), step, gnorm


def _dual_grad_norm(counts, nu, prior_alpha: float = 1.0) -> float:
    X = dual_to_simplex(nu[0, 0])
    G = entry_gradient(counts, X) + (prior_alpha - 1) / X
    return float(np.linalg.norm(pushforward_score(nu[0, 0], G)))


def fit_dynamics(
    trajectories: Sequence[Trajectory],
    n_states: int,
    family: KFamily | str = KFamily.ZERO_TRUNCATED_POISSON,
    k_max: int = 50,
    max_steps: int = 5000,
    grad_tol: float = 1e-6,
    lr: float = 0.05,
    decay: float = 0.01,
) -> FitResult:
    """Pooled point estimate of a shared passive matrix and gap model from trajectories."""
    pieces = [p for t in trajectories for p in split_long_gaps(t, k_max)]
    counts = extract_counts(pieces, k_max, n_states)
    if counts.total == 0:
        raise NoTransitionsError("no observed transitions to fit")
    P, steps, gnorm = msvgd_point_estimate(counts.dense(), max_steps, lr=lr, decay=decay, grad_tol=grad_tol)
    model = fit_eta(counts, family)
    return FitResult(P, model.eta.copy(), model.family, steps, gnorm, gnorm <= grad_tol, counts.total)


# -- comparisons ------------------------------------------------------------------------------


def resolve_environment(config: SimConfig) -> tuple[SimConfig, dict]:
    """Turn a ``synthetic-fitted`` source into a ``fitted`` one by generating and fitting
    records; returns the resolved config and a description of the source."""
    src = config.env
    if src.kind != "synthetic-fitted":
        return config, {}
    S = config.n_states
    rng = RngStream(src.env_seed, (7,)).generator()
    lo = src.p_low if src.p_low is not None else 1.0 / S + 0.05
    ps = rng.uniform(lo, src.p_high, size=src.n_entities)
    recs = gen_records(cre_matrices(ps, S), src.n_entities, src.n_days, src.p_missing, rng)
    trajs = ingest(recs, S, config.k_max)
    fit = fit_dynamics(trajs, S, config.k_family, k_max=config.k_max)
    env = replace(src, kind="fitted", matrix=fit.P.tolist(), eta=fit.eta.tolist())
    return replace(config, env=env), {"fit": fit, "entity_p": ps}


def _run_job(args):
    config, policy, seed = args
    env = build_environment(config, seed)
    hist = run_rb_stein(config, env, policy, seed)
    return policy, seed, hist


def run_histories(config: SimConfig, policies=POLICY_ORDER, jobs: int = 1) -> dict:
    tasks = [(config, p, s) for p in policies for s in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_job, tasks))
    else:
        results = [_run_job(t) for t in tasks]
    return {(p, s): h for p, s, h in results}


def run_comparison(config: SimConfig, policies=POLICY_ORDER, jobs: int = 1):
    """Average and cumulative post-burn-in reward per policy across seeds.

    Returns the result table, per-step curve rows ``(t, policy, seed, reward)`` and
    the histories keyed by ``(policy, seed)``.
    """
    config, _ = resolve_environment(config)
    hists = run_histories(config, policies, jobs)
    table = ResultTable(("policy",))
    burn = config.burn
    for p in policies:
        hs = [hists[(p, s)] for s in config.seeds]
        table.add((p,), "avg_reward", [h.average_reward(burn) for h in hs])
        table.add((p,), "cum_reward", [h.cumulative_reward(burn) for h in hs])
    curves = [
        (t, p, s, r)
        for p in policies
        for s in config.seeds
        for t, r in enumerate(hists[(p, s)].step_reward)
    ]
    return table, curves, hists, config


def pooled_gap_test(a, b) -> tuple[float, float]:
    """Mean difference of two samples and its pooled standard error."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    return float(a.mean() - b.mean()), float(np.sqrt(sp2 * (1 / na + 1 / nb)))


def random_policy_reward(P0, budget: int, n_arms: int, reward=None, tau_max: int = 2000) -> float:
    """Closed-form expected per-step reward of uniform random selection on restart arms.

    Each arm is activated independently of its state with probability ``rho = M / N``,
    so at an activation the time since its last reset is geometric, and the state is
    distributed as ``e_0 P0^tau`` mixed over that geometric law.
    """
    P0 = np.asarray(P0, dtype=float)
    S = P0.shape[-1]
    r1 = (cre_reward_table(S) if reward is None else np.asarray(reward))[:, 1]
    rho = budget / n_arms
    b = np.eye(S)[0]
    acc = np.zeros(S)
    w = rho
    for _ in range(tau_max):
        acc += w * b
        b = b @ P0
        w *= 1 - rho
    return float(budget * (acc @ r1))


# -- sensitivity grids ----------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivityGrid:
    horizons: tuple = (50, 100, 200)
    k_levels: tuple = (1, 5, 10)
    n_states: tuple = (10,)
    n_svgd: int = 40
    reps: int = 30
    alpha: float = 5.0
    lr: float = 0.05
    prior_alpha: float = 5.0
    family: str = "poisson"
    seed: int = 0


def gap_eta(k_level: float) -> float:
    """Gap-model parameter whose mean gap is ``k_level`` (log of the mean gap)."""
    return math.log(k_level)


def sample_gapped_chain(P, n_records: int, k_level: float, rng: np.random.Generator) -> tuple[Trajectory, np.ndarray]:
    """One chain path observed ``n_records`` times with gaps ``1 + Poisson(k_level - 1)``.

    Returns the trajectory (unlabeled between records) and the gaps drawn.
    """
    P = np.asarray(P, dtype=float)
    S = P.shape[0]
    gaps = 1 + rng.poisson(k_level - 1, size=max(n_records - 1, 0))
    length = int(gaps.sum()) + 1
    states = np.full(length, UNLABELED, dtype=np.int64)
    s = int(rng.integers(S))
    pos = 0
    states[0] = s
    for g in gaps:
        for _ in range(g):
            s = sample_next(P, s, rng)
        pos += int(g)
        states[pos] = s
    return Trajectory(states), gaps


def _sensitivity_cell(args):
    grid, T, k, S, rep = args
    rng = RngStream(grid.seed, (T, k, S, rep)).generator()
    P_true = rng.dirichlet(np.full(S, grid.alpha), size=S)
    traj, gaps = sample_gapped_chain(P_true, T, k, rng)
    k_max = max(int(gaps.max()) if len(gaps) else 1, 1)
    counts = extract_counts([traj], k_max, S)
    P_hat, _, _ = msvgd_point_estimate(counts.dense(), grid.n_svgd, lr=grid.lr, prior_alpha=grid.prior_alpha)
    eta_hat = fit_eta(counts, grid.family).eta
    eta_true = np.full(S, gap_eta(k))
    return (T, k, S, rep), kld_rows(P_hat, P_true), mae_eta(eta_hat, eta_true)


def _sensitivity(grid: SensitivityGrid, jobs: int = 1):
    tasks = [(grid, T, k, S, r) for T, k, S in product(grid.horizons, grid.k_levels, grid.n_states) for r in range(grid.reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            res = list(ex.map(_sensitivity_cell, tasks))
    else:
        res = [_sensitivity_cell(t) for t in tasks]
    cells: dict = {}
    for (T, k, S, _), kld, mae in res:
        cells.setdefault((T, k, S), []).append((kld, mae))
    return cells


def sensitivity_tables(grid: SensitivityGrid, jobs: int = 1) -> tuple[ResultTable, ResultTable]:
    """KLD and MAE tables from one pass over the grid (both metrics share each fit)."""
    kld = ResultTable(("T", "k", "n_states"))
    mae = ResultTable(("T", "k", "n_states"))
    for key, vals in sorted(_sensitivity(grid, jobs).items()):
        kld.add(key, "kld", [v[0] for v in vals])
        mae.add(key, "mae", [v[1] for v in vals])
    return kld, mae


def sensitivity_kld(grid: SensitivityGrid, jobs: int = 1) -> ResultTable:
    return sensitivity_tables(grid, jobs)[0]


def sensitivity_mae(grid: SensitivityGrid, jobs: int = 1) -> ResultTable:
    return sensitivity_tables(grid, jobs)[1]


# -- split-half evaluation ----------------------------------------------------------------------

# Three-state passive chain that drifts upward between restarts, used by the
# split-half generator; with N = 10, M = 1 uniform random activation earns about 2.5.
REPLENISHING_3 = np.array(
    [
        [0.30, 0.45, 0.25],
        [0.05, 0.45, 0.50],
        [0.05, 0.15, 0.80],
    ]
)


def gen_split_trajectories(
    P, n_entities: int, n_days: int, p_missing: float, rng: np.random.Generator
) -> list[Trajectory]:
    """Equal-length daily trajectories on a shared calendar (unlabeled days kept)."""
    P = np.asarray(P, dtype=float)
    S = P.shape[0]
    out = []
    for e in range(n_entities):
        s = int(rng.integers(S))
        states = np.empty(n_days, dtype=np.int64)
        for d in range(n_days):
            if d > 0:
                s = sample_next(P, s, rng)
            states[d] = s
        mask = rng.random(n_days) < p_missing
        states[mask] = UNLABELED
        out.append(Trajectory(states, entity_id=f"e{e:04d}"))
    return out


@dataclass(frozen=True)
class SplitReport:
    fit: FitResult
    table: ResultTable
    data_reward: float
    random_closed_form: float
    horizon: int


def split_half_eval(config: SimConfig, trajectories: Sequence[Trajectory], jobs: int = 1):
    """Fit on the first half of the calendar, then run the policies for the second
    half's length on the fitted restart environment.

    Also reports the second half's observed per-entity reward with unlabeled days
    credited the maximum reward (an upward-biased benchmark).
    """
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise ValueError("split-half evaluation needs trajectories on a shared calendar")
    T = lengths.pop()
    if T < 2:
        raise ValueError("trajectories must span at least 2 steps")
    half = T // 2
    S = config.n_states
    first = [Trajectory(t.states[:half], entity_id=t.entity_id) for t in trajectories]
    fit = fit_dynamics(first, S, config.k_family, k_max=config.k_max)
    horizon = (T - half) - (T - half) % 2
    env = EnvSource(kind="fitted", matrix=fit.P.tolist(), eta=fit.eta.tolist())
    cfg = replace(config, env=env, horizon=horizon)
    table, curves, hists, _ = run_comparison(cfg, jobs=jobs)
    r1 = cre_reward_table(S)[:, 1]
    second = np.stack([t.states[half:] for t in trajectories])
    credited = np.where(second == UNLABELED, r1.max(), r1[np.maximum(second, 0)])
    report = SplitReport(fit, table, float(credited.mean()), random_policy_reward(fit.P, cfg.budget, cfg.n_arms), horizon)
    return report, curves, hists
