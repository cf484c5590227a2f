"""Compiled inner loops for R-Max episodes on padded successor arrays.

These mirror RmaxLearner.act/observe/replan and NavEnv.step exactly (same
value-iteration stopping rule, same tie tolerance, same uniform stream); the
pure-Python versions remain the reference and are compared in the tests.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _replan(lsucc, lcount, visits, rsum, m_known, r_max, gamma, eps, terminals, V, policy,
            n_states, n_actions, max_iter):
    S1 = n_states + 1
    Q = np.zeros((S1, n_actions))
    Vn = np.zeros(S1)
    K = lsucc.shape[1]
    n_rows = n_states * n_actions
    # per-replan model: empirical probabilities and mean rewards of known pairs
    P = np.zeros((n_rows, K))
    Rm = np.empty(n_rows)
    known = np.zeros(n_rows, dtype=np.bool_)
    for row in range(n_rows):
        n = visits[row]
        if n >= m_known:
            known[row] = True
            Rm[row] = rsum[row] / n
            for k in range(K):
                if lsucc[row, k] >= 0:
                    P[row, k] = lcount[row, k] / n
        else:
            Rm[row] = r_max
    for _ in range(max_iter):
        delta = 0.0
        for s in range(S1):
            if terminals[s]:
                for a in range(n_actions):
                    Q[s, a] = 0.0
                Vn[s] = 0.0
                continue
            best = -np.inf
            for a in range(n_actions):
                row = s * n_actions + a
                if known[row]:
                    acc = 0.0
                    for k in range(K):
                        if P[row, k] != 0.0:
                            acc += P[row, k] * V[lsucc[row, k]]
                    q = Rm[row] + gamma * acc
                else:
                    q = r_max + gamma * V[n_states]
                Q[s, a] = q
                if q > best:
                    best = q
            Vn[s] = best
        for s in range(S1):
            d = abs(Vn[s] - V[s])
            if d > delta:
                delta = d
        if delta < eps:
            for s in range(S1):
                if terminals[s]:
                    policy[s] = -1
                    continue
                best = Q[s, 0]
                for a in range(1, n_actions):
                    if Q[s, a] > best:
                        best = Q[s, a]
                tol = 1e-9 * max(1.0, abs(best))
                for a in range(n_actions):
                    if Q[s, a] >= best - tol:
                        policy[s] = a
                        break
            return True
        for s in range(S1):
            V[s] = Vn[s]
    return False


@njit(cache=True)
def run_episodes(tsucc, tcum, start, goal, lost, step_cap, step_cost, env_r_max, n_episodes,
                 uniforms, lsucc, lcount, visits, rsum, m_known, r_max, gamma, eps, terminals,
                 V, policy, counters, replan_every, max_iter):
    """counters = [staleness, replans, stable, has_policy, uniforms_used].

    Returns per-episode (return, length, reached_goal). Returns -1 in
    counters[4] if the successor slots overflowed or VI failed to converge."""
    n_actions = tsucc.shape[1]
    n_states = tsucc.shape[0]
    K = lsucc.shape[1]
    Kt = tsucc.shape[2]
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes, dtype=np.int64)
    reached = np.zeros(n_episodes, dtype=np.bool_)
    old = np.empty_like(policy)
    u_i = counters[4]
    for ep in range(n_episodes):
        s = start
        total = 0.0
        steps = 0
        while True:
            # act
            if counters[3] == 0 or counters[0] >= replan_every:
                for i in range(policy.shape[0]):
                    old[i] = policy[i]
                if not _replan(lsucc, lcount, visits, rsum, m_known, r_max, gamma, eps, terminals,
                               V, policy, n_states, n_actions, max_iter):
                    counters[4] = -1
                    return returns, lengths, reached
                same = counters[3] == 1
                if same:
                    for i in range(policy.shape[0]):
                        if old[i] != policy[i]:
                            same = False
                            break
                counters[2] = counters[2] + 1 if same else 0
                counters[3] = 1
                counters[0] = 0
                counters[1] += 1
            counters[0] += 1
            a = policy[s]
            if a < 0:
                a = 0
            # step
            u = uniforms[u_i]
            u_i += 1
            k = 0
            while k < Kt - 1 and tcum[s, a, k] <= u:
                k += 1
            nxt = tsucc[s, a, k]
            steps += 1
            r = step_cost
            done = False
            learn_r = r
            if goal[nxt]:
                r += env_r_max
                learn_r = r
                done = True
            elif nxt == lost:
                r -= env_r_max
                learn_r = r
                done = True
            elif steps >= step_cap:
                r -= env_r_max  # the cap penalty is not a property of (s, a)
                done = True
            # observe
            row = s * n_actions + a
            slot = -1
            for j in range(K):
                if lsucc[row, j] == nxt:
                    slot = j
                    break
            if slot < 0:
                for j in range(K):
                    if lsucc[row, j] < 0:
                        slot = j
                        lsucc[row, j] = nxt
                        break
            if slot < 0:
                counters[4] = -1
                return returns, lengths, reached
            lcount[row, slot] += 1.0
            visits[row] += 1.0
            rsum[row] += learn_r
            total += r
            s = nxt
            if done:
                break
        returns[ep] = total
        lengths[ep] = steps
        reached[ep] = goal[s]
    counters[4] = u_i
    return returns, lengths, reached


@njit(cache=True)
def serve_and_mass(Bp, LM, room_start, M, c):
    """Best serve value and belief mass at every (belief, multiset) node.

    Node belief is Bp[i] * LM[j] (unnormalized), requests ordered so that
    room g owns columns room_start[g]:room_start[g+1]. Serve utility is
    M[room(r), room(a)] + c[a] * [r == a]."""
    n, R = Bp.shape
    mm = LM.shape[0]
    nr = M.shape[0]
    serve = np.empty((n, mm))
    mass = np.empty((n, mm))
    x = np.empty(nr)
    bon = np.empty(nr)
    for i in range(n):
        b = Bp[i]
        for j in range(mm):
            lm = LM[j]
            tot = 0.0
            for g in range(nr):
                xs = 0.0
                bb = -np.inf
                for r in range(room_start[g], room_start[g + 1]):
                    w = b[r] * lm[r]
                    xs += w
                    v = w * c[r]
                    if v > bb:
                        bb = v
                x[g] = xs
                bon[g] = bb
                tot += xs
            best = -np.inf
            for a in range(nr):
                val = bon[a]
                for g in range(nr):
                    val += x[g] * M[g, a]
                if val > best:
                    best = val
            serve[i, j] = best
            mass[i, j] = tot
    return serve, mass


@njit(cache=True)
def question_values(V, child, pair_q, costs, mass):
    """q[i, m, k] = -costs[k] * mass[i, m] + sum of V[i, child[m, j]] over answers j of k."""
    n, mk = mass.shape
    nq = costs.shape[0]
    q = np.empty((n, mk, nq))
    for i in range(n):
        for m in range(mk):
            for k in range(nq):
                q[i, m, k] = -costs[k] * mass[i, m]
            for j in range(child.shape[1]):
                q[i, m, pair_q[j]] += V[i, child[m, j]]
    return q
