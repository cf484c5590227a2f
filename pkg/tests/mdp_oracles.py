"""Reference computations for MDP tests: backward expectimax and Monte Carlo rollouts."""
import numpy as np


def random_mdp_arrays(rng, n_states, n_actions, n_terminal=0, sparsity=0.5):
    T = rng.random((n_states, n_actions, n_states))
    T *= rng.random(T.shape) < sparsity
    for s in range(n_states):
        for a in range(n_actions):
            if T[s, a].sum() == 0:
                T[s, a, rng.integers(n_states)] = 1.0
    T /= T.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    terminals = rng.choice(n_states, size=n_terminal, replace=False) if n_terminal else np.array([], int)
    return T, R, terminals


def expectimax(T, R, terminals, gamma, horizon):
    """Finite-horizon optimal values by explicit backward induction."""
    S, A, _ = T.shape
    term = set(int(t) for t in terminals)
    V = [0.0] * S
    for _ in range(horizon):
        new = []
        for s in range(S):
            if s in term:
                new.append(0.0)
                continue
            best = -np.inf
            for a in range(A):
                q = R[s, a]
                for s2 in range(S):
                    p = T[s, a, s2]
                    if p:
                        q += gamma * p * V[s2]
                best = max(best, q)
            new.append(best)
        V = new
    return np.array(V)


def rollout_success(T, policy, start, success, terminals, step_cap, n, rng):
    """Fraction of ``n`` sampled episodes that enter ``success`` within the cap."""
    S = T.shape[0]
    cum = np.cumsum(T, axis=2)
    state = np.full(n, start)
    done = np.zeros(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    stop = np.zeros(S, dtype=bool)
    stop[list(success)] = True
    stop[list(terminals)] = True
    succ = np.zeros(S, dtype=bool)
    succ[list(success)] = True
    for _ in range(step_cap):
        live = ~done
        if not live.any():
            break
        s = state[live]
        u = rng.random(s.size)
        nxt = (cum[s, policy[s]] < u[:, None]).sum(axis=1)
        nxt = np.minimum(nxt, S - 1)
        state[live] = nxt
        hit[live] |= succ[nxt]
        done[live] |= stop[nxt]
    return hit.mean()


def rollout_return(T, R, policy, start, terminals, gamma, n, rng, horizon):
    S = T.shape[0]
    cum = np.cumsum(T, axis=2)
    term = np.zeros(S, dtype=bool)
    term[list(terminals)] = True
    state = np.full(n, start)
    ret = np.zeros(n)
    disc = 1.0
    alive = ~term[state]
    for _ in range(horizon):
        if not alive.any():
            break
        s = state[alive]
        a = policy[s]
        ret[alive] += disc * R[s, a]
        u = rng.random(s.size)
        nxt = np.minimum((cum[s, a] < u[:, None]).sum(axis=1), S - 1)
        state[alive] = nxt
        alive_idx = np.flatnonzero(alive)
        alive[alive_idx[term[nxt]]] = False
        disc *= gamma
    return ret
