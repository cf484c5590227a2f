"""R-Max: optimistic model-based learning of a tabular MDP.

Pairs seen fewer than ``m_known`` times are modelled as a jump to an extra
absorbing state (index ``n_states``) paying ``r_max``; known pairs use the
empirical successor frequencies and mean reward. Statistics keep
accumulating after a pair becomes known.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .mdp import Mdp, value_iteration


@dataclass(frozen=True)
class KnownPair:
    state: int
    action: int
    successors: dict  # next state -> probability
    reward: float
    visits: float = 0.0


class RmaxLearner:
    def __init__(self, n_states: int, n_actions: int, r_max: float = 100.0, m_known: int = 10,
                 replan_every: int = 20, gamma: float = 0.95, terminals: Iterable[int] = (),
                 epsilon: float = 1e-3, converge_after: int = 3):
        if n_states < 1 or n_actions < 1:
            raise ValueError("state and action sets must be nonempty")
        if r_max <= 0:
            raise ValueError("r_max must be positive (it bounds every reward from above)")
        if m_known < 1 or replan_every < 1:
            raise ValueError("m_known and replan_every must be at least 1")
        self.n_states = n_states
        self.n_actions = n_actions
        self.r_max = float(r_max)
        self.m_known = m_known
        self.replan_every = replan_every
        self.gamma = gamma
        self.epsilon = epsilon
        self.converge_after = converge_after
        self.terminals = np.zeros(n_states + 1, dtype=bool)
        self.terminals[list(terminals)] = True
        self.terminals[n_states] = True
        n_pairs = n_states * n_actions
        self.visits = np.zeros(n_pairs)
        self.reward_sum = np.zeros(n_pairs)
        self._slots = 4
        self.succ = np.full((n_pairs, self._slots), -1, dtype=np.int64)
        self.count = np.zeros((n_pairs, self._slots))
        self.policy = None
        self.value = None
        self.staleness = 0
        self.replans = 0
        self._stable = 0

    @property
    def fictitious_state(self) -> int:
        return self.n_states

    # -- statistics ---------------------------------------------------------------
    def known(self, s: int, a: int) -> bool:
        return self.visits[s * self.n_actions + a] >= self.m_known

    def known_mask(self) -> np.ndarray:
        return (self.visits >= self.m_known).reshape(self.n_states, self.n_actions)

    def observe(self, s: int, a: int, s_next: int, r: float, weight: float = 1.0):
        row = s * self.n_actions + a
        slots = self.succ[row]
        hit = np.flatnonzero(slots == s_next)
        if hit.size:
            k = hit[0]
        else:
            free = np.flatnonzero(slots < 0)
            if free.size == 0:
                self._grow()
                slots = self.succ[row]
                free = np.flatnonzero(slots < 0)
            k = free[0]
            self.succ[row, k] = s_next
        self.count[row, k] += weight
        self.visits[row] += weight
        self.reward_sum[row] += weight * r

    def _grow(self):
        extra = self._slots
        self.succ = np.hstack([self.succ, np.full((self.succ.shape[0], extra), -1, dtype=np.int64)])
        self.count = np.hstack([self.count, np.zeros((self.count.shape[0], extra))])
        self._slots += extra

    # -- induced model ------------------------------------------------------------
    def induced_mdp(self) -> Mdp:
        S, A = self.n_states, self.n_actions
        known = self.visits >= self.m_known
        succ = np.where(self.succ >= 0, self.succ, self.n_states)
        prob = np.zeros_like(self.count)
        kv = self.visits[known]
        prob[known] = self.count[known] / kv[:, None]
        succ[~known] = self.n_states
        prob[~known] = 0.0
        prob[~known, 0] = 1.0
        reward = np.full(S * A, self.r_max)
        reward[known] = self.reward_sum[known] / kv
        K = succ.shape[1]
        succ = np.vstack([succ, np.full((A, K), self.n_states)]).reshape(S + 1, A, K)
        prob = np.vstack([prob, np.eye(1, K).repeat(A, axis=0)]).reshape(S + 1, A, K)
        reward = np.concatenate([reward, np.zeros(A)]).reshape(S + 1, A)
        return Mdp.from_successors(succ, prob, reward, terminals=self.terminals, gamma=self.gamma)

    def replan(self):
        mdp = self.induced_mdp()
        V, policy = value_iteration(mdp, self.epsilon, v0=self.value, check_proper=False)
        if self.policy is not None and np.array_equal(policy, self.policy):
            self._stable += 1
        else:
            self._stable = 0
        self.value, self.policy = V, policy
        self.staleness = 0
        self.replans += 1

    @property
    def converged(self) -> bool:
        """Policy unchanged across the last ``converge_after`` consecutive replans."""
        return self._stable >= self.converge_after - 1 and self.replans >= self.converge_after

    def act(self, s: int) -> int:
        if self.policy is None or self.staleness >= self.replan_every:
            self.replan()
        self.staleness += 1
        a = int(self.policy[s])
        return a if a >= 0 else 0

    # -- export / import ----------------------------------------------------------
    def export_model(self) -> list:
        out = []
        A = self.n_actions
        for row in np.flatnonzero(self.visits >= self.m_known):
            s, a = divmod(int(row), A)
            n = self.visits[row]
            dist = {int(t): float(c / n) for t, c in zip(self.succ[row], self.count[row]) if t >= 0 and c > 0}
            out.append(KnownPair(s, a, dist, float(self.reward_sum[row] / n), float(n)))
        return out

    def exact_frequencies(self, s: int, a: int) -> dict:
        """Successor frequencies as Fractions (integer counts only)."""
        row = s * self.n_actions + a
        n = int(round(self.visits[row]))
        return {int(t): Fraction(int(round(c)), n)
                for t, c in zip(self.succ[row], self.count[row]) if t >= 0 and c > 0}

    def preload(self, pairs: Iterable[KnownPair], reward_fn=None, visits: float | None = None):
        """Seed statistics from an exported model (e.g. from another task).

        ``reward_fn(s, a, successors)`` recomputes the mean reward for the new
        task; by default the exported reward is kept. Each pair is loaded with
        ``visits`` pseudo-observations (default: m_known), so it starts known.
        """
        w = float(self.m_known if visits is None else visits)
        for p in pairs:
            r = p.reward if reward_fn is None else reward_fn(p.state, p.action, p.successors)
            for t, q in p.successors.items():
                if q > 0:
                    self.observe(p.state, p.action, t, r, weight=w * q)
        self.policy = None


@dataclass
class EpisodeStats:
    returns: np.ndarray
    lengths: np.ndarray
    reached: np.ndarray


def run_episodes(learner: RmaxLearner, env, n_episodes: int, fast: bool = True) -> EpisodeStats:
    """Run ``n_episodes`` of act/step/observe on a NavEnv-like environment.

    The step-cap penalty is reported in the episode return but not fed to the
    learner (it belongs to the episode, not to the last state-action pair).
    ``fast`` uses the compiled loop, which consumes the same uniform stream as
    ``env.step`` and gives the same trajectories.
    """
    if fast:
        return _run_fast(learner, env, n_episodes)
    returns, lengths, reached = [], [], []
    for _ in range(n_episodes):
        s = env.reset()
        total, done = 0.0, False
        while not done:
            a = learner.act(s)
            s2, r, done = env.step(a)
            learner.observe(s, a, s2, r + env.r_max if env.truncated else r)
            total += r
            s = s2
        returns.append(total)
        lengths.append(env.steps)
        reached.append(s in env.goals)
    return EpisodeStats(np.array(returns), np.array(lengths), np.array(reached))


def _run_fast(learner: RmaxLearner, env, n_episodes: int) -> EpisodeStats:
    from ._fast import run_episodes as kernel

    dyn = env.dyn
    S, A, K = dyn.succ.shape
    if (learner.n_states, learner.n_actions) != (S, A):
        raise ValueError("learner and environment disagree on state/action counts")
    while learner._slots < K:
        learner._grow()
    goal = np.zeros(S, dtype=bool)
    goal[list(env.goals)] = True
    policy = np.zeros(S + 1, dtype=np.int64) if learner.policy is None else learner.policy.copy()
    V = np.zeros(S + 1) if learner.value is None else learner.value.copy()
    counters = np.array([learner.staleness, learner.replans, learner._stable,
                         int(learner.policy is not None), 0], dtype=np.int64)
    uniforms = env.rng.random(n_episodes * env.step_cap)
    returns, lengths, reached = kernel(
        dyn.succ, dyn.cum, env.start, goal, env.gmap.lost, env.step_cap, env.step_cost, env.r_max,
        n_episodes, uniforms, learner.succ, learner.count, learner.visits, learner.reward_sum,
        learner.m_known, learner.r_max, learner.gamma, learner.epsilon, learner.terminals,
        V, policy, counters, learner.replan_every, 100_000)
    if counters[4] < 0:
        raise RuntimeError("compiled episode loop failed (slot overflow or no VI convergence)")
    learner.staleness, learner.replans, learner._stable = (int(x) for x in counters[:3])
    learner.policy, learner.value = policy, V
    return EpisodeStats(returns, lengths, reached)


def transfer_reward(step_cost: float, bonus: float, goal_cells) -> callable:
    """Reward function for preloaded pairs in a new task: step cost plus the
    goal bonus weighted by the probability of entering a goal cell."""
    goals = set(goal_cells)

    def fn(s, a, successors):
        return step_cost + bonus * sum(p for t, p in successors.items() if t in goals)

    return fn


# ---------------------------------------------------------------------------
# dump file: one line per known pair, "s a reward s1:p1 s2:p2 ..."

def write_dump(pairs: Iterable[KnownPair], path) -> None:
    with open(path, "w") as fh:
        fh.write("# state action mean_reward successor:probability ...\n")
        for p in pairs:
            succ = " ".join(f"{t}:{q!r}" for t, q in sorted(p.successors.items()))
            fh.write(f"{p.state} {p.action} {p.reward!r} {succ}\n")


def read_dump(path) -> list:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                s, a, r = int(parts[0]), int(parts[1]), float(parts[2])
                succ = {int(t): float(q) for t, q in (x.split(":") for x in parts[3:])}
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{n}: malformed record") from exc
            if not math.isclose(sum(succ.values()), 1.0, abs_tol=1e-9):
                raise ValueError(f"{path}:{n}: successor probabilities do not sum to 1")
            out.append(KnownPair(s, a, succ, r))
    return out
