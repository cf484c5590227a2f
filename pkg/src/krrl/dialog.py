"""Belief-space dialog manager for service requests (item, room, person).

Actions, in index order: one general question per dimension, one confirm
question per (dimension, value), then one serve action per request. Questions
never change the request; a serve ends the dialog and the request is
fulfilled with the probability given by the serve-success table
``td[request, serve]``. Every delivery earns the bonus if it fulfils the
request and the penalty otherwise, so a misidentified request costs one
failed delivery plus the redelivery outcome.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ._fast import question_values, serve_and_mass
from .kb import joint

DIMENSIONS = ("item", "room", "person")


class DialogError(ValueError):
    pass


@dataclass(frozen=True)
class RequestSpace:
    items: tuple = ("coke", "coffee", "soda")
    rooms: tuple = ("room1", "room2", "room3", "room4", "room5")
    persons: tuple = ("john", "bob")

    @property
    def values(self) -> tuple:
        return (self.items, self.rooms, self.persons)

    @property
    def requests(self) -> list:
        return list(itertools.product(self.items, self.rooms, self.persons))

    def __len__(self):
        return len(self.items) * len(self.rooms) * len(self.persons)

    def index(self, request) -> int:
        return self.requests.index(tuple(request))

    def codes(self) -> np.ndarray:
        """(n_requests, 3) value index of each request per dimension."""
        return np.array([[self.values[d].index(v) for d, v in enumerate(r)] for r in self.requests])


@dataclass(frozen=True)
class Action:
    kind: str  # "ask", "confirm" or "serve"
    dim: int | None = None
    value: object = None  # confirm value, or the request tuple for serve

    def __str__(self):
        if self.kind == "ask":
            return f"ask_{DIMENSIONS[self.dim]}"
        if self.kind == "confirm":
            return f"confirm_{DIMENSIONS[self.dim]}={self.value}"
        return "serve(" + ",".join(self.value) + ")"


@dataclass(frozen=True)
class ObservationModel:
    p_correct: float = 0.8
    confirm_flip: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.p_correct <= 1.0:
            raise DialogError("p_correct must lie in (0, 1]")
        if not 0.0 <= self.confirm_flip <= 1.0:
            raise DialogError("confirm_flip must lie in [0, 1]")


@dataclass(frozen=True)
class DialogPomdp:
    space: RequestSpace
    td: np.ndarray  # (n_requests, n_requests) serve success probability
    om: ObservationModel = field(default_factory=ObservationModel)
    ask_cost: float = 2.0
    confirm_cost: float = 1.5
    bonus: float = 80.0
    penalty: float = 80.0
    turn_cap: int = 20
    depth: int = 3
    misdelivery_penalty: bool = True  # the wrong first delivery is itself a failed delivery

    def __post_init__(self):
        n = len(self.space)
        td = np.asarray(self.td, dtype=float)
        if td.shape != (n, n):
            raise DialogError(f"serve-success table must be {n}x{n}, got {td.shape}")
        if np.any(td < 0) or np.any(td > 1):
            raise DialogError("serve-success entries must lie in [0, 1]")
        for name in ("ask_cost", "confirm_cost", "bonus", "penalty"):
            if getattr(self, name) < 0:
                raise DialogError(f"{name} is a magnitude and must be nonnegative")
        for d, vals in enumerate(self.space.values):
            k = len(vals)
            if k > 1 and self.om.p_correct <= 1.0 / k:
                raise DialogError(f"p_correct must exceed 1/{k} for {DIMENSIONS[d]} questions")
        object.__setattr__(self, "td", td)
        object.__setattr__(self, "_tables", _Tables.build(self))

    @property
    def actions(self) -> list:
        return self._tables.actions

    @property
    def n_questions(self) -> int:
        return self._tables.n_questions

    def serve_utility(self) -> np.ndarray:
        """(request, serve) expected delivery reward: bonus*T - penalty*(1 - T),
        minus one penalty off the diagonal for the failed first delivery."""
        u = self.bonus * self.td - self.penalty * (1.0 - self.td)
        if self.misdelivery_penalty:
            u = u - self.penalty * (1.0 - np.eye(len(self.td)))
        return u

    def question_cost(self, action_index: int) -> float:
        return float(self._tables.costs[action_index])

    def answers(self, action_index: int) -> tuple:
        return self._tables.answers[action_index]

    def likelihood(self, action_index: int, answer) -> np.ndarray:
        """P(answer | request, question) for every request."""
        t = self._tables
        try:
            j = t.answers[action_index].index(answer)
        except ValueError:
            raise DialogError(f"{answer!r} is not an answer to {t.actions[action_index]}") from None
        return t.lik[t.pair_start[action_index] + j]


@dataclass
class _Tables:
    actions: list
    n_questions: int
    costs: np.ndarray  # per question
    answers: list  # per question: tuple of possible answers
    lik: np.ndarray  # (n_pairs, n_requests)
    pair_q: np.ndarray  # question index of each (question, answer) pair
    pair_start: list

    @classmethod
    def build(cls, pomdp: DialogPomdp) -> "_Tables":
        space, om = pomdp.space, pomdp.om
        codes = space.codes()
        actions, costs, answers, rows, pair_q, pair_start = [], [], [], [], [], []
        for d, vals in enumerate(space.values):
            actions.append(Action("ask", d))
        for d, vals in enumerate(space.values):
            for v in vals:
                actions.append(Action("confirm", d, v))
        nq = len(actions)
        for qi, act in enumerate(actions):
            pair_start.append(len(rows))
            vals = space.values[act.dim]
            k = len(vals)
            if act.kind == "ask":
                costs.append(pomdp.ask_cost)
                answers.append(tuple(vals))
                right = om.p_correct if k > 1 else 1.0  # a single value is always named
                wrong = (1.0 - om.p_correct) / (k - 1) if k > 1 else 0.0
                for j in range(k):
                    rows.append(np.where(codes[:, act.dim] == j, right, wrong))
                    pair_q.append(qi)
            else:
                costs.append(pomdp.confirm_cost)
                answers.append(("yes", "no"))
                match = codes[:, act.dim] == vals.index(act.value)
                f = om.confirm_flip
                rows.append(np.where(match, 1.0 - f, f))
                rows.append(np.where(match, f, 1.0 - f))
                pair_q += [qi, qi]
        for r in space.requests:
            actions.append(Action("serve", None, r))
        lik = np.array(rows)
        pair_q = np.array(pair_q)
        return cls(actions, nq, np.array(costs), answers, lik, pair_q, pair_start)


# ---------------------------------------------------------------------------
# beliefs

def uniform_belief(space: RequestSpace) -> np.ndarray:
    return np.full(len(space), 1.0 / len(space))


def init_belief(gp, space: RequestSpace, attrs=("item", "room", "person"), evidence=()) -> np.ndarray:
    """Joint KB query over the three request attributes, in request order."""
    for a in attrs:
        if a not in gp.attr_index:
            raise DialogError(f"knowledge base has no attribute {a!r}")
    dist = joint(gp, list(attrs), evidence)
    b = np.array([dist.get(r, 0.0) for r in space.requests], dtype=float)
    if b.sum() <= 0:
        raise DialogError("knowledge base gives zero mass to every request")
    return b / b.sum()


def belief_update(b, pomdp: DialogPomdp, action_index: int, answer) -> np.ndarray:
    if action_index >= pomdp.n_questions:
        raise DialogError("only question actions produce observations")
    post = np.asarray(b, dtype=float) * pomdp.likelihood(action_index, answer)
    z = post.sum()
    if z <= 0:
        raise DialogError(f"answer {answer!r} has zero probability under the belief")
    return post / z


def belief_entropy(b) -> float:
    """Shannon entropy in bits (0 log 0 = 0)."""
    b = np.asarray(b, dtype=float)
    nz = b[b > 0]
    return float(-(nz * np.log2(nz)).sum()) + 0.0


# ---------------------------------------------------------------------------
# planning

class _Lookahead:
    """Depth-limited expectimax over question sequences.

    A posterior depends only on the multiset of (question, answer) pairs seen,
    so nodes are multisets rather than ordered histories. Values are computed
    bottom-up on unnormalized beliefs; the value function is homogeneous in
    the belief mass, so no renormalization is needed.
    """

    def __init__(self, pomdp: DialogPomdp, depth: int):
        t = pomdp._tables
        n_pairs, R = t.lik.shape
        self.depth = depth
        self.levels = [[()]]
        self.lik = [np.ones((1, R))]
        self.child = []
        for k in range(depth):
            nxt = sorted({tuple(sorted(m + (j,))) for m in self.levels[k] for j in range(n_pairs)})
            pos = {m: i for i, m in enumerate(nxt)}
            self.child.append(np.array([[pos[tuple(sorted(m + (j,)))] for j in range(n_pairs)]
                                        for m in self.levels[k]]))
            self.levels.append(nxt)
            self.lik.append(np.array([np.prod(t.lik[list(m)], axis=0) for m in nxt]))
        self.U = pomdp.serve_utility()
        self.pair_q = t.pair_q.astype(np.int64)
        self.costs = t.costs
        # requests reordered room-major so each room's serves are contiguous
        self.perm = np.argsort(pomdp.space.codes()[:, 1], kind="stable")
        self.lik = [L[:, self.perm] for L in self.lik]
        self.rooms = _room_structure(self.U, pomdp.space)
        if self.rooms is not None:
            E, M, c = self.rooms
            counts = np.bincount(pomdp.space.codes()[:, 1], minlength=M.shape[0])
            self.room_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            self.M = np.ascontiguousarray(M)
            self.c = c[self.perm]
        self.Up = self.U[np.ix_(self.perm, self.perm)]

    def _serve_mass(self, Bp, k):
        """(best serve value, mass) at every depth-k node."""
        if self.rooms is not None:
            return serve_and_mass(Bp, self.lik[k], self.room_start, self.M, self.c)
        W = Bp[:, None, :] * self.lik[k][None]
        return (W @ self.Up).max(axis=2), W.sum(axis=2)

    def root_values(self, B) -> np.ndarray:
        """(n, n_questions + n_serves) action values at the root."""
        B = np.asarray(B, dtype=float)
        Bp = B[:, self.perm]
        V = None
        for k in range(self.depth, 0, -1):
            serve, mass = self._serve_mass(Bp, k)
            if V is None:
                V = serve
                continue
            q = question_values(V, self.child[k], self.pair_q, self.costs, mass)
            V = np.maximum(serve, q.max(axis=2))
        serve = B @ self.U
        if V is None:
            return np.concatenate([np.full((len(B), len(self.costs)), -np.inf), serve], axis=1)
        q = question_values(V, self.child[0], self.pair_q, self.costs, B.sum(axis=1, keepdims=True))[:, 0]
        return np.concatenate([q, serve], axis=1)


def _room_structure(U, space: RequestSpace):
    """Factor U as M[room(r), room(a)] plus a diagonal bonus, if it has that form.

    Holds for serve-success tables built from navigation success between
    rooms; it cuts the serve maximization from R*R to R*n_rooms work."""
    codes = space.codes()
    room = codes[:, 1]
    nr = len(space.rooms)
    E = np.zeros((len(U), nr))
    E[np.arange(len(U)), room] = 1.0
    M = np.full((nr, nr), np.nan)
    off = ~np.eye(len(U), dtype=bool)
    for i in range(nr):
        for j in range(nr):
            block = U[np.ix_(room == i, room == j)][off[np.ix_(room == i, room == j)]]
            if len(block) == 0 or np.ptp(block) > 1e-12:
                return None
            M[i, j] = block[0]
    if not np.allclose(E @ M @ E.T - np.diag(np.diag(E @ M @ E.T)), U - np.diag(np.diag(U)), atol=1e-12, rtol=0):
        return None
    c = np.diag(U) - M[room, room]
    return E, M, c


def _lookahead(pomdp: DialogPomdp, depth: int) -> _Lookahead:
    cache = pomdp.__dict__.setdefault("_lookahead_cache", {})
    if depth not in cache:
        cache[depth] = _Lookahead(pomdp, depth)
    return cache[depth]


def action_values(b, pomdp: DialogPomdp, depth: int | None = None) -> np.ndarray:
    """Q-value of every action at belief b with ``depth`` questions of lookahead."""
    depth = pomdp.depth if depth is None else depth
    return _lookahead(pomdp, max(depth, 0)).root_values(np.asarray(b, dtype=float)[None, :])[0]


def _argmax_rows(Q) -> np.ndarray:
    best = Q.max(axis=1, keepdims=True)
    return np.argmax(Q >= best - 1e-9 * np.maximum(1.0, np.abs(best)), axis=1)


def plan_dialog_action(b, pomdp: DialogPomdp, turns_used: int = 0) -> int:
    """Index into pomdp.actions. The final allowed turn serves the most
    likely request; otherwise lookahead is limited by the remaining turns."""
    if turns_used < 0 or turns_used > pomdp.turn_cap:
        raise DialogError(f"turns_used must lie in [0, {pomdp.turn_cap}]")
    remaining = pomdp.turn_cap - 1 - turns_used
    if remaining <= 0:
        return pomdp.n_questions + int(np.argmax(b))
    return int(plan_batch(np.asarray(b, dtype=float)[None, :], pomdp, min(pomdp.depth, remaining))[0])


def _bounds(B, pomdp: DialogPomdp):
    """Depth-1 values plus masks of beliefs already settled as ask / serve.

    A depth-1 question value is a lower bound on any deeper one, and no
    question sequence beats serving after perfect information."""
    nq = pomdp.n_questions
    Q1 = _lookahead(pomdp, 1).root_values(B)
    serve_best = Q1[:, nq:].max(axis=1)
    margin = 1e-9 * np.maximum(1.0, np.abs(serve_best))
    ask = Q1[:, :nq].max(axis=1) > serve_best + margin
    perfect = (B * pomdp.serve_utility().max(axis=1)).sum(axis=1) - pomdp._tables.costs.min()
    serve = serve_best > perfect + margin
    return Q1, ask, serve


def plan_batch(B, pomdp: DialogPomdp, depth: int | None = None, chunk: int = 32) -> np.ndarray:
    """Turn-0 action index for each row of B."""
    depth = pomdp.depth if depth is None else depth
    B = np.atleast_2d(np.asarray(B, dtype=float))
    out = np.empty(len(B), dtype=np.int64)
    if depth <= 1:
        return _argmax_rows(_lookahead(pomdp, max(depth, 0)).root_values(B))
    Q1, _, serve = _bounds(B, pomdp)
    out[serve] = _argmax_rows(Q1[serve])
    # when a question is known to win, which one still needs the full tree
    todo = np.flatnonzero(~serve)
    look = _lookahead(pomdp, depth)
    for i in range(0, len(todo), chunk):
        idx = todo[i:i + chunk]
        out[idx] = _argmax_rows(look.root_values(B[idx]))
    return out


def serves_chosen(B, pomdp: DialogPomdp, depth: int | None = None, chunk: int = 32) -> np.ndarray:
    """True where the turn-0 action is a serve. Cheaper than plan_batch
    since beliefs where some question already beats serving are settled."""
    depth = pomdp.depth if depth is None else depth
    B = np.atleast_2d(np.asarray(B, dtype=float))
    nq = pomdp.n_questions
    if depth <= 1:
        return plan_batch(B, pomdp, depth) >= nq
    _, ask, serve = _bounds(B, pomdp)
    result = serve.copy()
    todo = np.flatnonzero(~ask & ~serve)
    look = _lookahead(pomdp, depth)
    for i in range(0, len(todo), chunk):
        idx = todo[i:i + chunk]
        result[idx] = _argmax_rows(look.root_values(B[idx])) >= nq
    return result


def qa_cost_distribution(pomdp: DialogPomdp, b0, true_request, prune: float = 1e-6,
                         cache: dict | None = None):
    """Exact distribution of a dialog's QA cost for one true request.

    The planner is deterministic and the belief depends only on the multiset
    of (question, answer) pairs, so dialog paths are merged by multiset.
    Paths with probability below ``prune`` are dropped and reported.
    ``cache`` maps multisets to planned actions; it may be shared between
    calls with the same POMDP and initial belief.

    Returns ({cost: prob}, dropped mass).
    """
    t = pomdp._tables
    b0 = np.asarray(b0, dtype=float)
    r = pomdp.space.index(true_request)
    cache = {} if cache is None else cache
    front = {(): 1.0}
    done: dict = {}
    dropped = 0.0
    for turn in range(pomdp.turn_cap):
        if not front:
            break
        todo = [k for k in front if k not in cache]
        if todo:
            remaining = pomdp.turn_cap - 1 - turn
            if remaining <= 0:
                acts = [pomdp.n_questions] * len(todo)
            else:
                B = np.array([b0 * np.prod(t.lik[list(k)], axis=0) for k in todo])
                acts = plan_batch(B / B.sum(axis=1, keepdims=True), pomdp, min(pomdp.depth, remaining))
            cache.update(zip(todo, (int(a) for a in acts)))
        nxt: dict = {}
        for k, p in front.items():
            a = cache[k]
            if a >= pomdp.n_questions:
                cost = round(float(sum(t.costs[t.pair_q[j]] for j in k)), 9)
                done[cost] = done.get(cost, 0.0) + p
                continue
            for j in range(t.pair_start[a], t.pair_start[a] + len(t.answers[a])):
                q = p * t.lik[j, r]
                if q < prune:
                    dropped += q
                    continue
                key = tuple(sorted(k + (j,)))
                nxt[key] = nxt.get(key, 0.0) + q
        front = nxt
    return dict(sorted(done.items())), dropped


# ---------------------------------------------------------------------------
# simulated user and dialog episodes

def simulate_user(true_request, action: Action, om: ObservationModel, space: RequestSpace, rng):
    if action.kind == "serve":
        raise DialogError("the simulated user only answers questions")
    truth = true_request[action.dim]
    if action.kind == "ask":
        if rng.random() < om.p_correct:
            return truth
        wrong = [v for v in space.values[action.dim] if v != truth]
        return wrong[int(rng.integers(len(wrong)))] if wrong else truth
    correct = "yes" if truth == action.value else "no"
    if rng.random() < om.confirm_flip:
        return "no" if correct == "yes" else "yes"
    return correct


@dataclass
class DialogOutcome:
    request: tuple
    served: tuple
    turns: int
    qa_cost: float
    fulfilled: bool
    reward: float
    entropy: float  # belief entropy when the serve action was chosen
    transcript: list


def run_dialog(pomdp: DialogPomdp, b0, true_request, rng, td_true=None, outcome_u: float | None = None
               ) -> DialogOutcome:
    """One dialog: questions until a serve; the serve succeeds with probability
    ``td_true[request, serve]`` (defaults to the planner's own table).

    ``outcome_u`` fixes the uniform draw that decides the outcome, so paired
    runs can share it; by default it comes from ``rng`` after the dialog."""
    td_true = pomdp.td if td_true is None else td_true
    b = np.array(b0, dtype=float)
    qa = 0.0
    transcript = []
    turns = 0
    while True:
        a = plan_dialog_action(b, pomdp, turns)
        turns += 1
        if a >= pomdp.n_questions:
            served = pomdp.actions[a].value
            break
        act = pomdp.actions[a]
        ans = simulate_user(true_request, act, pomdp.om, pomdp.space, rng)
        qa += pomdp.question_cost(a)
        b = belief_update(b, pomdp, a, ans)
        transcript.append((str(act), ans))
    p = td_true[pomdp.space.index(true_request), pomdp.space.index(served)]
    u = rng.random() if outcome_u is None else outcome_u
    ok = bool(u < p)
    reward = (pomdp.bonus if ok else -pomdp.penalty) - qa
    if pomdp.misdelivery_penalty and tuple(served) != tuple(true_request):
        reward -= pomdp.penalty
    return DialogOutcome(tuple(true_request), served, turns, qa, ok, reward, belief_entropy(b), transcript)


def belief_bars(b, space: RequestSpace, width: int = 30) -> str:
    """Per-dimension marginal bars, for the interactive REPL."""
    b = np.asarray(b)
    codes = space.codes()
    lines = []
    for d, vals in enumerate(space.values):
        marg = np.bincount(codes[:, d], weights=b, minlength=len(vals))
        for v, p in zip(vals, marg):
            lines.append(f"{DIMENSIONS[d]:>6} {v:<7} {'#' * int(round(p * width)):<{width}} {p:.3f}")
    return "\n".join(lines)
