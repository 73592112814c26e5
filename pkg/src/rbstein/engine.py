"""Thompson sampling for restless bandits with Stein-particle posteriors.

Each arm's unknown passive dynamics carry a particle posterior. At the start of an
episode (dynamic-episode rule, :func:`tsde_should_restart`) one particle per arm
is drawn and the policy is rebuilt from the drawn matrices; the particles keep
being refined by mirror SVGD every ``batch`` steps.

Timing inside a step ``t``: the policy picks ``M`` arms from what it knows,
activated arms pay ``r(s_t, 1)`` and are reset, every arm then moves to ``s_{t+1}``.
Under partial observability only activated arms reveal ``s_t``, so the learner sees
reset-anchored, k-step transitions ``0 -> s`` where ``k`` is the number of passive
steps since the previous activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import SimConfig
from .kstep import KFamily, KStepCounts, KStepModel, SupportError, entry_gradient, fit_eta
from .mdp import RngStream, cre_reset, cre_reward_table, sample_next_many
from .policies import (
    ArmModel,
    WhittleTable,
    myopic_rank,
    reset_beliefs,
    reset_whittle_indices,
    select_random,
    select_whittle,
    whittle_table,
)
from .stein import KernelSpec, OptimizerState, dual_to_simplex, msvgd_batch_step, simplex_to_dual

HIDDEN, FULL, GAP, WITHHELD = 0, 1, 2, 3
KIND_NAMES = {HIDDEN: "hidden", FULL: "full", GAP: "gap", WITHHELD: "withheld"}

# stream ids of the independent random sources inside one replication
ENV_STREAM, OBS_STREAM, POLICY_STREAM, SAMPLE_STREAM, INIT_STREAM, BUILD_STREAM = range(6)


class EstimationError(RuntimeError):
    pass


class RestartEnvironment:
    """``N`` arms with per-arm passive matrices, a reset active action and reward ``r[s, a]``.

    All arms start in state 0. One uniform per arm is drawn every step whatever the
    actions, so two policies run with the same stream see common random numbers.
    """

    def __init__(self, P0, rng: RngStream, reward=None):
        self.P0 = np.array(P0, dtype=float)
        if self.P0.ndim != 3:
            raise ValueError("P0 must have shape (N, S, S)")
        N, S, _ = self.P0.shape
        self.P1 = np.broadcast_to(cre_reset(S).entries, self.P0.shape)
        self.reward = cre_reward_table(S) if reward is None else np.asarray(reward, dtype=float)
        self._rng = rng.generator()
        self.state = np.zeros(N, dtype=np.int64)

    @property
    def n_arms(self) -> int:
        return self.P0.shape[0]

    @property
    def n_states(self) -> int:
        return self.P0.shape[1]

    def step(self, active: np.ndarray) -> np.ndarray:
        """Pay rewards for the current states, then advance every arm."""
        u = self._rng.random(self.n_arms)
        a = active.astype(np.int64)
        r = self.reward[self.state, a]
        P = np.where(active[:, None, None], self.P1, self.P0)
        self.state = sample_next_many(P, self.state, u)
        return r


@dataclass(frozen=True)
class Observation:
    arm: int
    kind: int
    state: int = -1
    reward: float = 0.0
    k: int = 0


@dataclass
class GapProcess:
    """Bernoulli withholding of activation observations, resolved at the next activation."""

    p_gap: float
    k_max: int
    pending_since: np.ndarray  # time of the withheld activation, -1 if none

    @classmethod
    def new(cls, n_arms: int, p_gap: float, k_max: int) -> "GapProcess":
        return cls(p_gap, k_max, np.full(n_arms, -1, dtype=np.int64))


def observe(states, selection, t: int, gaps: GapProcess, rng: np.random.Generator, rewards=None) -> list[Observation]:
    """Observations of the activated arms at time ``t`` (passive arms are hidden).

    An arm with a withheld observation is always revealed at its next activation as
    a gap record carrying the elapsed steps; otherwise the observation is withheld
    with probability ``p_gap``.
    """
    states = np.asarray(states)
    out = []
    chosen = set(int(i) for i in selection)
    for i in range(len(states)):
        if i not in chosen:
            out.append(Observation(i, HIDDEN))
            continue
        r = float(rewards[i]) if rewards is not None else 0.0
        u = rng.random()
        if gaps.pending_since[i] >= 0:
            k = t - int(gaps.pending_since[i])
            gaps.pending_since[i] = -1
            out.append(Observation(i, GAP, int(states[i]), r, k))
        elif u < gaps.p_gap:
            gaps.pending_since[i] = t
            out.append(Observation(i, WITHHELD, -1, r, 0))
        else:
            out.append(Observation(i, FULL, int(states[i]), r, 1))
    return out


# -- episodes ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeState:
    index: int
    start: int
    prev_len: int
    snapshot: np.ndarray  # visit counts (N, S, 2) at the episode start


def tsde_should_restart(t: int, episode: EpisodeState, counts: np.ndarray) -> bool:
    if t - episode.start > episode.prev_len:
        return True
    snap = episode.snapshot
    if np.any((snap >= 1) & (counts > 2 * snap)):
        return True
    return bool(np.any((snap == 0) & (counts > 0)))


def next_episode(t: int, episode: EpisodeState, counts: np.ndarray) -> EpisodeState:
    return EpisodeState(episode.index + 1, t, t - episode.start, counts.copy())


# -- posteriors -------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmPosterior:
    particles: np.ndarray  # (n, rows, S - 1) dual coordinates
    kmodel: KStepModel
    sampled_params: np.ndarray

    def sampled_matrix(self) -> np.ndarray:
        return dual_to_simplex(self.sampled_params)


@dataclass
class PosteriorBank:
    """Particle posteriors of all arms stacked for batched updates."""

    particles: np.ndarray  # (N, n, S, S - 1)
    eta: np.ndarray  # (N, S)
    family: KFamily
    sampled: np.ndarray  # (N, S, S - 1)
    v: np.ndarray | None = None
    dirty: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dirty is None:
            self.dirty = np.zeros(self.particles.shape[0], dtype=bool)

    @classmethod
    def prior(cls, n_arms: int, n_states: int, n_particles: int, noise: float, family, rng: np.random.Generator, init: str = "prior"):
        """Initial particles: rows drawn from the flat Dirichlet prior (``init="prior"``)
        or the uniform matrix's dual image plus Gaussian noise of scale ``noise``."""
        shape = (n_arms, n_particles, n_states, n_states - 1)
        if init == "prior":
            rows = rng.dirichlet(np.ones(n_states), size=shape[:3])
            nu = simplex_to_dual(np.maximum(rows, 1e-12))
        elif init == "noise":
            nu = noise * rng.standard_normal(shape)
        else:
            raise ValueError(f"unknown particle initialisation {init!r}")
        eta0 = 0.0
        return cls(nu, np.full((n_arms, n_states), eta0), KFamily(family), nu[:, 0].copy())

    def __len__(self):
        return self.particles.shape[0]

    def __getitem__(self, i: int) -> ArmPosterior:
        return ArmPosterior(self.particles[i].copy(), KStepModel(self.family, self.eta[i]), self.sampled[i].copy())

    def matrices(self) -> np.ndarray:
        return dual_to_simplex(self.sampled)


def sample_posterior(post: ArmPosterior, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw among the particles; a single particle is returned without a draw."""
    n = post.particles.shape[0]
    if n == 1:
        return post.particles[0].copy()
    return post.particles[rng.integers(n)].copy()


def resample_all(bank: PosteriorBank, rng: np.random.Generator) -> None:
    for i in range(len(bank)):
        bank.sampled[i] = sample_posterior(bank[i], rng)


def update_posteriors(
    bank: PosteriorBank,
    counts: np.ndarray,
    t: int,
    batch: int,
    n_steps: int,
    kernel: KernelSpec,
    lr: float,
) -> PosteriorBank:
    """Run ``n_steps`` mirror-SVGD steps for every arm with new data, on the ``batch``
    schedule (after steps ``t`` with ``(t + 1) % batch == 0``), and refit gap models.

    ``counts`` is the dense (N, S, S, k_max) array of reset-anchored transitions.
    """
    if (t + 1) % batch != 0 or not bank.dirty.any():
        return bank
    idx = np.flatnonzero(bank.dirty)
    M = counts[idx][:, None]  # broadcast over particles
    nu = bank.particles[idx]
    n = nu.shape[1]
    if bank.v is None:
        bank.v = np.zeros((len(bank), n, nu.shape[2] * nu.shape[3]))
    opt = OptimizerState(v=bank.v[idx], lr=lr)
    try:
        for _ in range(n_steps):
            nu, opt = msvgd_batch_step(nu, lambda X: entry_gradient(M, X), kernel, opt)
    except (SupportError, FloatingPointError) as e:
        bad = _find_bad_arm(idx, counts, bank, kernel, lr)
        raise EstimationError(f"posterior update failed at t={t} for arm {bad}: {e}") from e
    bank.particles[idx] = nu
    bank.v[idx] = opt.v
    for i in idx:
        kc = KStepCounts.from_dense(counts[i])
        if kc.total:
            bank.eta[i] = fit_eta(kc, bank.family).eta
    bank.dirty[idx] = False
    return bank


def _find_bad_arm(idx, counts, bank, kernel, lr):
    for i in idx:
        try:
            msvgd_batch_step(bank.particles[i : i + 1], lambda X: entry_gradient(counts[i][None, None], X), kernel, OptimizerState(lr=lr))
        except (SupportError, FloatingPointError):
            return int(i)
    return int(idx[0])


# -- learner bookkeeping ------------------------------------------------------------------


@dataclass
class Learner:
    """Reset-anchored transition counts and the TSDE visit counts."""

    counts: np.ndarray  # (N, S, S, k_max)
    visits: np.ndarray  # (N, S, 2)
    anchor_state: np.ndarray
    anchor_time: np.ndarray
    dropped: int = 0

    @classmethod
    def new(cls, N: int, S: int, k_max: int) -> "Learner":
        return cls(
            np.zeros((N, S, S, k_max)),
            np.zeros((N, S, 2), dtype=np.int64),
            np.zeros(N, dtype=np.int64),
            np.zeros(N, dtype=np.int64),
        )

    def record(self, arm: int, state: int, t: int) -> bool:
        """Log an observed state; returns True when a transition was counted."""
        k = t - int(self.anchor_time[arm])
        counted = False
        if 1 <= k <= self.counts.shape[-1]:
            self.counts[arm, self.anchor_state[arm], state, k - 1] += 1
            counted = True
        elif k > self.counts.shape[-1]:
            self.dropped += 1
        self.anchor_state[arm] = state
        self.anchor_time[arm] = t
        return counted

    def reset(self, arm: int, t: int) -> None:
        """Activation at ``t``: the arm is known to be in state 0 at ``t + 1``."""
        self.anchor_state[arm] = 0
        self.anchor_time[arm] = t + 1


# -- history ------------------------------------------------------------------------------


@dataclass
class History:
    selections: np.ndarray  # (T, M)
    rewards: np.ndarray  # (T, N)
    episode_start: np.ndarray  # (T,)
    obs_kind: np.ndarray  # (T, N)
    obs_state: np.ndarray
    obs_k: np.ndarray
    visits: np.ndarray | None = None  # final TSDE visit counts
    posterior_P: np.ndarray | None = None  # (N, S, S) particle-mean matrices at the end

    @classmethod
    def empty(cls, T: int, N: int, M: int) -> "History":
        return cls(
            np.zeros((T, M), dtype=np.int64),
            np.zeros((T, N)),
            np.zeros(T, dtype=bool),
            np.zeros((T, N), dtype=np.int8),
            np.full((T, N), -1, dtype=np.int64),
            np.zeros((T, N), dtype=np.int64),
        )

    @property
    def step_reward(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def average_reward(self, burn: int) -> float:
        return float(self.step_reward[burn:].mean())

    def cumulative_reward(self, burn: int) -> float:
        return float(self.step_reward[burn:].sum())

    def records(self):
        for t in range(len(self.episode_start)):
            seen = np.flatnonzero(self.obs_kind[t] != HIDDEN)
            yield {
                "t": t,
                "selection": self.selections[t].tolist(),
                "reward": float(self.step_reward[t]),
                "episode_start": bool(self.episode_start[t]),
                "observations": [
                    {
                        "arm": int(i),
                        "kind": KIND_NAMES[int(self.obs_kind[t, i])],
                        "state": int(self.obs_state[t, i]),
                        "k": int(self.obs_k[t, i]),
                    }
                    for i in seen
                ],
            }


# -- main loop ------------------------------------------------------------------------------


def build_environment(config: SimConfig, seed: int, P0=None) -> RestartEnvironment:
    """Environment for one replication; ``P0`` overrides the configured source."""
    N, S = config.n_arms, config.n_states
    if P0 is None:
        src = config.env
        if src.kind == "synthetic":
            lo = src.p_low if src.p_low is not None else 1.0 / S + 0.05
            rng = RngStream(seed, (BUILD_STREAM,)).generator()
            ps = rng.uniform(lo, src.p_high, size=N)
            q = (1 - ps) / (S - 1)
            P0 = q[:, None, None] * np.ones((N, S, S))
            P0[:, np.arange(S), np.arange(S)] = ps[:, None]
        else:
            if src.matrix is None:
                raise ValueError("environment matrix missing; fit it first")
            P0 = np.asarray(src.matrix, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    if P0.ndim == 2:
        P0 = np.broadcast_to(P0, (N,) + P0.shape).copy()
    if P0.shape != (N, S, S):
        raise ValueError(f"passive matrices have shape {P0.shape}, expected {(N, S, S)}")
    return RestartEnvironment(P0, RngStream(seed, (ENV_STREAM,)))


def run_rb_stein(config: SimConfig, env: RestartEnvironment, policy: str | None = None, seed: int = 0) -> History:
    """Simulate ``config.horizon`` steps of one policy on ``env``."""
    policy = policy or config.policy
    N, S, M, T = env.n_arms, env.n_states, config.budget, config.horizon
    partial = config.observability == "partial"
    learns = config.estimate and (policy == "ts-mcr" or (policy == "myopic" and config.myopic_dynamics == "estimated"))
    kernel = KernelSpec(config.kernel, config.bandwidth)
    obs_rng = RngStream(seed, (OBS_STREAM,)).generator()
    pol_rng = RngStream(seed, (POLICY_STREAM,)).generator()
    smp_rng = RngStream(seed, (SAMPLE_STREAM,)).generator()
    bank = PosteriorBank.prior(
        N, S, config.n_particles, config.init_noise, config.k_family, RngStream(seed, (INIT_STREAM,)).generator(), config.init
    )
    learner = Learner.new(N, S, config.k_max)
    gaps = GapProcess.new(N, config.p_gap, config.k_max)
    hist = History.empty(T, N, M)
    reward = env.reward
    tau_max = config.tau_max
    # steps since each arm was last reset; arms start in state 0
    tau = np.zeros(N, dtype=np.int64)
    episode = EpisodeState(0, 0, 0, learner.visits.copy())
    table = beliefs = arms = None

    def rebuild():
        if learns:
            resample_all(bank, smp_rng)
            P = bank.matrices()
        else:
            P = env.P0
        arms_ = [ArmModel(P[i], env.P1[i], reward) for i in range(N)] if policy != "random" else []
        if policy == "ts-mcr":
            if partial:
                tbl = WhittleTable(reset_whittle_indices(P, reward, tau_max))
            else:
                tbl = whittle_table(arms_)
        else:
            tbl = None
        bel = reset_beliefs(P, tau_max) if policy == "myopic" and partial else None
        return tbl, bel, arms_

    for t in range(T):
        if t == 0 or tsde_should_restart(t, episode, learner.visits):
            if t > 0:
                episode = next_episode(t, episode, learner.visits)
            hist.episode_start[t] = True
            if learns or arms is None:
                table, beliefs, arms = rebuild()

        if policy == "random":
            sel = select_random(N, M, pol_rng)
        elif policy == "myopic":
            if partial:
                prev = beliefs[np.arange(N), np.minimum(np.maximum(tau - 1, 0), tau_max)]
                sel = myopic_rank(prev, arms, M, actions=(tau == 0).astype(np.int64))
            else:
                sel = myopic_rank(np.eye(S)[env.state], arms, M, predict=False)
        else:
            sel = select_whittle(table, np.minimum(tau, tau_max) if partial else env.state, M)

        active = np.zeros(N, dtype=bool)
        active[sel] = True
        states_now = env.state.copy()
        r = env.step(active)
        hist.selections[t] = sel
        hist.rewards[t] = r

        if partial:
            obs = observe(states_now, sel, t, gaps, obs_rng, r)
        else:
            obs = _observe_full(states_now, active, t, gaps, obs_rng, r)
        for o in obs:
            hist.obs_kind[t, o.arm] = o.kind
            hist.obs_state[t, o.arm] = o.state
            hist.obs_k[t, o.arm] = o.k
            if o.kind in (FULL, GAP):
                learner.visits[o.arm, o.state, int(active[o.arm])] += 1
                if learns and learner.record(o.arm, o.state, t):
                    bank.dirty[o.arm] = True
        for i in sel:
            learner.reset(int(i), t)
        tau = np.where(active, 0, tau + 1)

        if learns and config.n_svgd > 0:
            update_posteriors(bank, learner.counts, t, config.batch, config.n_svgd, kernel, config.lr)
    hist.visits = learner.visits
    hist.posterior_P = dual_to_simplex(bank.particles).mean(axis=1) if learns else env.P0.copy()
    hist.counts = learner.counts
    return hist


def _observe_full(states, active, t, gaps: GapProcess, rng, rewards) -> list[Observation]:
    """Every arm's state is seen by the policy; ``p_gap`` thins what the learner records."""
    u = rng.random(len(states))
    out = []
    for i, s in enumerate(states):
        if u[i] < gaps.p_gap:
            out.append(Observation(i, WITHHELD, -1, float(rewards[i]), 0))
        else:
            out.append(Observation(i, FULL, int(s), float(rewards[i]), 1))
    return out
