"""Finite MDPs and exact dynamic-programming solvers.

Transitions are stored as one sparse row per (state, action) pair, row index
``s * n_actions + a``. Terminal states are absorbing and have value 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-9


class MdpError(ValueError):
    pass


@dataclass(frozen=True)
class Mdp:
    transition: sp.csr_matrix  # (S*A, S)
    reward: np.ndarray  # (S, A)
    terminals: np.ndarray  # bool (S,)
    gamma: float = 0.95
    state_labels: tuple | None = field(default=None, compare=False)
    action_labels: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        S, A = self.reward.shape
        if self.transition.shape != (S * A, S):
            raise MdpError(f"transition shape {self.transition.shape} != {(S * A, S)}")
        if not 0.0 < self.gamma <= 1.0:
            raise MdpError("gamma must lie in (0, 1]")
        rows = np.asarray(self.transition.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(rows - 1.0) > ROW_TOL)
        if bad.size:
            s, a = divmod(int(bad[0]), A)
            raise MdpError(f"transition row for state {s}, action {a} sums to {rows[bad[0]]:.12g}")
        if self.transition.nnz and self.transition.data.min() < -ROW_TOL:
            raise MdpError("negative transition probability")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    # -- construction -------------------------------------------------------------
    @classmethod
    def from_dense(cls, T, R, terminals=(), gamma=0.95, **labels) -> "Mdp":
        T = np.asarray(T, dtype=float)
        S, A, _ = T.shape
        term = _terminal_mask(terminals, S)
        T = T.copy()
        R = np.array(R, dtype=float, copy=True)
        T[term] = 0.0
        for s in np.flatnonzero(term):
            T[s, :, s] = 1.0
        R[term] = 0.0
        return cls(sp.csr_matrix(T.reshape(S * A, S)), R, term, gamma, **labels)

    @classmethod
    def from_successors(cls, succ, prob, R, terminals=(), gamma=0.95, **labels) -> "Mdp":
        """Build from padded successor lists: ``succ`` and ``prob`` are (S, A, K)."""
        succ = np.asarray(succ, dtype=np.int64)
        prob = np.asarray(prob, dtype=float)
        S, A, K = succ.shape
        term = _terminal_mask(terminals, S)
        succ = succ.copy()
        prob = prob.copy()
        R = np.array(R, dtype=float, copy=True)
        ts = np.flatnonzero(term)
        succ[ts] = ts[:, None, None]
        prob[ts] = 0.0
        prob[ts, :, 0] = 1.0
        R[term] = 0.0
        rows = np.repeat(np.arange(S * A), K)
        T = sp.csr_matrix((prob.ravel(), (rows, succ.ravel())), shape=(S * A, S))
        T.eliminate_zeros()
        return cls(T, R, term, gamma, **labels)

    def dense(self) -> np.ndarray:
        return self.transition.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def policy_matrix(self, policy) -> sp.csr_matrix:
        """(S, S) transition matrix of ``policy``; rows of terminal states are zero."""
        return _absorbing_policy_matrix(self, policy, np.zeros(self.n_states, dtype=bool))

    def q_values(self, V) -> np.ndarray:
        S, A = self.n_states, self.n_actions
        Q = self.reward + self.gamma * (self.transition @ V).reshape(S, A)
        Q[self.terminals] = 0.0
        return Q


def _scatter_rows(P, rows, S):
    P = P.tocoo()
    return sp.csr_matrix((P.data, (rows[P.row], P.col)), shape=(S, S))


def _terminal_mask(terminals, S) -> np.ndarray:
    t = np.asarray(terminals)
    if t.dtype == bool and t.shape == (S,):
        return t.copy()
    mask = np.zeros(S, dtype=bool)
    if t.size:
        mask[t.astype(np.int64)] = True
    return mask


# ---------------------------------------------------------------------------
# solvers

def greedy_policy(mdp: Mdp, Q) -> np.ndarray:
    """argmax with lowest-index tie breaking, tolerant to rounding noise."""
    best = Q.max(axis=1, keepdims=True)
    tol = 1e-9 * np.maximum(1.0, np.abs(best))
    policy = np.argmax(Q >= best - tol, axis=1).astype(np.int64)
    policy[mdp.terminals] = -1
    return policy


def can_avoid_terminals(mdp: Mdp) -> np.ndarray:
    """States from which some policy avoids every terminal forever (mask)."""
    S, A = mdp.n_states, mdp.n_actions
    avoid = ~mdp.terminals
    T = mdp.transition.tocsr()
    while True:
        # (s, a) stays inside the set iff all its probability mass lands there
        inside = np.asarray(T @ avoid.astype(float)).reshape(S, A) >= 1.0 - 1e-12
        keep = avoid & inside.any(axis=1)
        if np.array_equal(keep, avoid):
            return keep
        avoid = keep


def value_iteration(mdp: Mdp, epsilon: float = 1e-6, v0=None, max_iter: int = 100_000,
                    check_proper: bool = True):
    """Return (V, policy) with max-norm Bellman residual of V below ``epsilon``.

    With gamma = 1 every policy must reach a terminal; this is verified up
    front unless ``check_proper`` is False.
    """
    if epsilon <= 0:
        raise MdpError("epsilon must be positive")
    if mdp.gamma >= 1.0 and check_proper and can_avoid_terminals(mdp).any():
        raise MdpError("gamma = 1 requires every policy to reach a terminal state")
    V = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=float, copy=True)
    V[mdp.terminals] = 0.0
    for _ in range(max_iter):
        Q = mdp.q_values(V)
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V), initial=0.0) < epsilon:
            return V, greedy_policy(mdp, Q)
        V = V_new
    raise MdpError(f"value iteration did not converge within {max_iter} sweeps")


def policy_success_probability(mdp: Mdp, policy, start: int, success_terminals, step_cap: int) -> float:
    """Probability of entering ``success_terminals`` within ``step_cap`` steps,
    by forward propagation of the state distribution."""
    if step_cap < 1:
        raise MdpError("step_cap must be at least 1")
    S = mdp.n_states
    if not 0 <= start < S:
        raise MdpError(f"start state {start} out of range")
    success = _terminal_mask(success_terminals, S)
    if success[start]:
        return 1.0
    P = _absorbing_policy_matrix(mdp, policy, success)
    PT = P.T.tocsr()
    dist = np.zeros(S)
    dist[start] = 1.0
    total = 0.0
    for _ in range(step_cap):
        dist = PT @ dist
        total += dist[success].sum()
        dist[success] = 0.0
        if dist.sum() < 1e-15:
            break
    return float(min(1.0, total))


def success_probabilities(mdp: Mdp, policy, success_terminals, step_cap: int) -> np.ndarray:
    """Same quantity as policy_success_probability for every start state at
    once, computed backwards: h_k = P h_{k-1} with h = 1 on success states."""
    S = mdp.n_states
    success = _terminal_mask(success_terminals, S)
    P = _absorbing_policy_matrix(mdp, policy, success)
    h = success.astype(float)
    for _ in range(step_cap):
        h = P @ h
        h[success] = 1.0
    return h


def _absorbing_policy_matrix(mdp: Mdp, policy, success):
    policy = np.array(policy, dtype=np.int64, copy=True)
    stop = mdp.terminals | success
    live = ~stop
    if np.any(policy[live] < 0) or np.any(policy[live] >= mdp.n_actions):
        raise MdpError("policy must choose a valid action in every non-terminal state")
    rows = np.flatnonzero(live) * mdp.n_actions + policy[live]
    return _scatter_rows(mdp.transition[rows], np.flatnonzero(live), mdp.n_states)


def evaluate_policy(mdp: Mdp, policy, start: int | None = None, tol: float = 1e-9,
                    max_iter: int = 1_000_000):
    """Expected discounted return of ``policy`` by fixpoint iteration.

    Returns the value at ``start``, or the whole value vector when start is None.
    """
    S = mdp.n_states
    policy = np.asarray(policy, dtype=np.int64)
    live = ~mdp.terminals
    P = _absorbing_policy_matrix(mdp, policy, np.zeros(S, dtype=bool))
    r = np.zeros(S)
    r[live] = mdp.reward[np.flatnonzero(live), policy[live]]
    if mdp.gamma >= 1.0:
        # the policy must reach a terminal from every state
        reach = mdp.terminals.astype(float)
        for _ in range(S + 1):
            reach = np.maximum(reach, (P @ reach > 0).astype(float))
        if np.any(reach[live] == 0):
            raise MdpError("policy evaluation diverges: some states never reach a terminal")
    V = np.zeros(S)
    for _ in range(max_iter):
        V_new = r + mdp.gamma * (P @ V)
        if np.max(np.abs(V_new - V), initial=0.0) < tol:
            V = V_new
            break
        V = V_new
    else:
        raise MdpError("policy evaluation did not converge")
    return V if start is None else float(V[start])
