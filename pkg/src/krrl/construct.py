"""Task-oriented model construction from the knowledge base.

Navigation dynamics live in the KB as ground pr-atoms over
``curr_cell``/``act_move``/``next_cell`` conditioned on exogenous attributes
(e.g. ``time``). For a task, the endogenous variables are kept and the
exogenous ones are conditioned on (when observed) or marginalized under the
KB prior. Navigation success probabilities between the shop and rooms feed
the serve-success table of the dialog model.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dialog import DialogPomdp, ObservationModel, RequestSpace
from .kb import KBError, marginal
from .kb.syntax import format_prob
from .mdp import Mdp, policy_success_probability, value_iteration
from .nav import ACTIONS, GridMap, Dynamics

ROW_TOL = 1e-9


class ConstructError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tasks and variable split

def _nav_guidance(variables, task):
    return [v for v in ("curr_cell",) if v in variables]


def _delivery_guidance(variables, task):
    return [v for v in ("item", "room", "person", "curr_cell") if v in variables]


def _dialog_guidance(variables, task):
    return [v for v in ("item", "room", "person") if v in variables]


GUIDANCE = {"navigation": _nav_guidance, "delivery": _delivery_guidance, "dialog": _dialog_guidance}
ACTION_GUIDANCE = {
    "navigation": lambda task: list(ACTIONS),
    "dialog": lambda task: ["ask", "confirm", "serve"],
    "delivery": lambda task: ["ask", "confirm", "serve"] + list(ACTIONS),
}


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # navigation | dialog | delivery
    goal: str | None = None  # e.g. "room2" for navigation
    f_v: Callable | None = None  # (variables, task) -> endogenous variables
    f_a: Callable | None = None  # task -> actions

    def endogenous(self, variables) -> list:
        f = self.f_v or GUIDANCE.get(self.kind)
        if f is None:
            raise ConstructError(f"no variable guidance for task kind {self.kind!r}")
        return list(f(variables, self))

    def actions(self) -> list:
        f = self.f_a or ACTION_GUIDANCE.get(self.kind)
        acts = list(f(self)) if f else []
        if not acts:
            raise ConstructError("task has an empty action set")
        return acts

    def __str__(self):
        return f"{self.kind}:{self.goal}" if self.goal else self.kind


@dataclass(frozen=True)
class VariableSplit:
    endogenous: tuple
    exogenous: tuple


def split_variables(all_vars: Sequence[str], task: TaskSpec) -> VariableSplit:
    """Endogenous variables from the task guidance; everything else is exogenous.
    ``next_*`` and action variables are plumbing and are not split."""
    state_vars = [v for v in all_vars if not v.startswith(("next_", "act_"))]
    endo = task.endogenous(state_vars)
    unknown = [v for v in endo if v not in state_vars]
    if unknown:
        raise ConstructError(f"guidance names undeclared variables: {unknown}")
    if not endo:
        raise ConstructError(f"task {task} has no endogenous variables")
    exo = tuple(v for v in state_vars if v not in endo)
    return VariableSplit(tuple(endo), exo)


# ---------------------------------------------------------------------------
# navigation KB text

def transition_kb(n_states: int, models: dict, exo: dict | None = None, prior: dict | None = None,
                  digits: int = 12) -> str:
    """KB source for navigation dynamics.

    ``models`` maps a tuple of exogenous values (ordered as ``exo``) to a
    (S, 4, S) transition array. ``exo`` is {variable: values}; ``prior`` is
    {variable: {value: prob}} (uniform when absent).
    """
    exo = dict(exo or {})
    lines = [f"cell = {{0..{n_states - 1}}}.",
             "move = {" + ", ".join(ACTIONS) + "}."]
    for var, vals in exo.items():
        lines.append(f"{var}_val = {{" + ", ".join(vals) + "}.")
    for var in exo:
        lines.append(f"#random {var} : {var}_val.")
    lines += ["#random curr_cell : cell.", "#random act_move : move.", "#random next_cell : cell."]
    for var, dist in (prior or {}).items():
        for v, p in dist.items():
            lines.append(f"pr({var}={v}) = {format_prob(p)}.")
    names = list(exo)
    for setting, T in models.items():
        setting = tuple(setting)
        cond_exo = "".join(f", {n}={v}" for n, v in zip(names, setting))
        for s in range(T.shape[0]):
            for a, m in enumerate(ACTIONS):
                row = T[s, a]
                nz = np.flatnonzero(row)
                probs = np.round(row[nz], digits)
                probs[-1] = max(0.0, 1.0 - probs[:-1].sum()) if len(probs) else 0.0
                for t, p in zip(nz, probs):
                    lines.append(f"pr(next_cell={t} | curr_cell={s}, act_move={m}{cond_exo}) = {format_prob(p)}.")
    return "\n".join(lines) + "\n"


def known_pairs_from_kb(program) -> list:
    """Learned navigation pairs stored as unconditional-on-exogenous pr-atoms
    ``pr(next_cell=t | curr_cell=s, act_move=m)``. Reward is left at 0; the
    caller recomputes it for its own task."""
    from .rmax import KnownPair

    rows: dict = {}
    for atom in program.pr_atoms:
        if atom.attr.name != "next_cell":
            continue
        cond = {}
        for lit in atom.condition:
            body = lit.body
            if lit.negated or not hasattr(body, "attr"):
                break
            cond[body.attr.name] = body.value
        else:
            if set(cond) != {"curr_cell", "act_move"}:
                continue
            key = (int(cond["curr_cell"]), ACTIONS.index(str(cond["act_move"])))
            rows.setdefault(key, {})[int(atom.value)] = atom.prob
    return [KnownPair(s, a, succ, 0.0) for (s, a), succ in sorted(rows.items())]


def kb_entries(pairs) -> list:
    """update_pr_atoms entries for exported known pairs."""
    out = []
    for p in pairs:
        for t, q in sorted(p.successors.items()):
            out.append(("next_cell", int(t), f"curr_cell={p.state}, act_move={ACTIONS[p.action]}", float(q)))
    return out


def construct_model(gp, split: VariableSplit, actions=ACTIONS, evidence=(), states=None) -> np.ndarray:
    """Transition table over the endogenous cell variable by KB queries:
    T[v, a, v'] = P(next_cell=v' | curr_cell=v, act_move=a, evidence)."""
    if "curr_cell" not in split.endogenous:
        raise ConstructError("navigation construction needs curr_cell as endogenous variable")
    n = len(gp.attribute("curr_cell").values)
    states = range(n) if states is None else states
    T = np.zeros((n, len(actions), n))
    ev = list(evidence) if not isinstance(evidence, str) else [evidence]
    for s in states:
        for a, m in enumerate(actions):
            try:
                dist = marginal(gp, "next_cell", ev + [f"curr_cell={s}", f"act_move={m}"])
            except KBError as exc:
                raise ConstructError(f"KB query failed for cell {s}, move {m}: {exc}") from exc
            for t, p in dist.items():
                T[s, a, int(t)] = p
            total = T[s, a].sum()
            if abs(total - 1.0) > ROW_TOL:
                raise ConstructError(f"row for cell {s}, move {m} sums to {total}")
    return T


def merge_models(models, prior) -> np.ndarray:
    """Mixture of transition tables weighted by a prior over settings."""
    models = [np.asarray(m, dtype=float) for m in models]
    prior = np.asarray(prior, dtype=float)
    if not models:
        raise ConstructError("nothing to merge")
    if len(prior) != len(models):
        raise ConstructError("prior and model list differ in length")
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
        raise ConstructError("prior must be a probability vector")
    shape = models[0].shape
    if any(m.shape != shape for m in models):
        raise ConstructError("models do not share state/action spaces")
    out = np.zeros(shape)
    for w, m in zip(prior, models):
        if w:
            out += w * m
    if np.count_nonzero(prior) > 1:
        sums = out.sum(axis=-1, keepdims=True)
        out = np.divide(out, sums, out=out, where=sums > 0)
    return out


class BaseModelStore:
    """One transition table per joint exogenous setting, built once from the KB.

    Any uncertainty over settings is served by merging stored tables, so
    ``|values|**n_vars`` KB constructions cover every subset of settings."""

    def __init__(self, exo: dict, models: dict):
        self.exo = dict(exo)
        self.settings = exogenous_settings(self.exo)
        missing = [s for s in self.settings if tuple(s) not in models]
        if missing:
            raise ConstructError(f"no base model for settings {missing}")
        self.models = {tuple(s): np.asarray(models[tuple(s)], dtype=float) for s in self.settings}
        self.used = set()

    @classmethod
    def from_kb(cls, gp, split: VariableSplit, exo: dict, actions=ACTIONS, states=None) -> "BaseModelStore":
        models = {}
        for setting in exogenous_settings(exo):
            ev = [f"{v}={x}" for v, x in zip(exo, setting)]
            models[tuple(setting)] = construct_model(gp, split, actions, ev, states)
        return cls(exo, models)

    def __len__(self):
        return len(self.models)

    def merged(self, subset, prior=None) -> np.ndarray:
        """Merge over a nonempty subset of settings (uniform prior by default)."""
        subset = [tuple(s) for s in subset]
        if not subset:
            raise ConstructError("uncertainty set must be nonempty")
        for s in subset:
            if s not in self.models:
                raise ConstructError(f"unknown setting {s}")
        w = np.full(len(subset), 1.0 / len(subset)) if prior is None else np.asarray(prior, float)
        self.used.update(subset)
        return merge_models([self.models[s] for s in subset], w)


# ---------------------------------------------------------------------------
# navigation success probabilities

def model_dynamics(T: np.ndarray, k: int = 8) -> Dynamics:
    """Padded successor arrays from a dense (S, A, S) table."""
    S, A, _ = T.shape
    k = max(k, int((T > 0).sum(axis=2).max()))
    order = np.argsort(-T, axis=2, kind="stable")[:, :, :k]
    prob = np.take_along_axis(T, order, axis=2)
    cum = np.cumsum(prob, axis=2)
    cum /= np.where(cum[..., -1:] > 0, cum[..., -1:], 1.0)
    return Dynamics(order.astype(np.int64), prob, cum)


def nav_policy(T: np.ndarray, goals, lost: int | None = None, step_cost=-1.0, r_max=100.0):
    """Optimal undiscounted policy toward ``goals`` in a (S, A, S) model.
    LOST (if given) is terminal with penalty -r_max."""
    S = T.shape[0]
    goal = np.zeros(S, dtype=bool)
    goal[list(goals)] = True
    R = step_cost + r_max * T[:, :, goal].sum(axis=2)
    term = goal.copy()
    if lost is not None:
        R -= r_max * T[:, :, lost]
        term[lost] = True
    mdp = Mdp.from_dense(T, R, terminals=term, gamma=1.0)
    _, pi = value_iteration(mdp, 1e-6, check_proper=False)
    return mdp, pi


@dataclass
class PnTable:
    """P^N between the shop and every room, for one navigation model.

    Shop-to-room tasks end on entering any cell of the room; room-to-shop
    tasks start at the room's door cell."""

    values: dict = field(default_factory=dict)  # (start, goal) -> prob; names "shop"/"roomN"
    policies: dict = field(default_factory=dict)

    def __call__(self, start: str, goal: str) -> float:
        try:
            return self.values[(start, goal)]
        except KeyError:
            raise ConstructError(f"no navigation success probability for {start} -> {goal}") from None

    @classmethod
    def from_model(cls, gmap: GridMap, T: np.ndarray, step_cap: int = 200, keep_policies=False) -> "PnTable":
        out = cls()
        lost = gmap.lost if T.shape[0] == gmap.n_states else None
        for room, cells in gmap.rooms.items():
            mdp, pi = nav_policy(T, cells, lost)
            out.values[("shop", room)] = policy_success_probability(mdp, pi, gmap.shop, cells, step_cap)
            if keep_policies:
                out.policies[("shop", room)] = pi
        mdp, pi = nav_policy(T, [gmap.shop], lost)
        for room in gmap.rooms:
            out.values[(room, "shop")] = policy_success_probability(
                mdp, pi, gmap.doors[room], [gmap.shop], step_cap)
        if keep_policies:
            out.policies[("any", "shop")] = pi
        return out

    @classmethod
    def evaluate(cls, gmap: GridMap, policy_model: np.ndarray, true_model: np.ndarray,
                 step_cap: int = 200) -> "PnTable":
        """Success of policies planned in ``policy_model`` when executed in ``true_model``."""
        plan = cls.from_model(gmap, policy_model, step_cap, keep_policies=True)
        true = cls()
        lost = gmap.lost if true_model.shape[0] == gmap.n_states else None
        for room, cells in gmap.rooms.items():
            mdp, _ = nav_policy(true_model, cells, lost)
            true.values[("shop", room)] = policy_success_probability(
                mdp, plan.policies[("shop", room)], gmap.shop, cells, step_cap)
        mdp, _ = nav_policy(true_model, [gmap.shop], lost)
        for room in gmap.rooms:
            true.values[(room, "shop")] = policy_success_probability(
                mdp, plan.policies[("any", "shop")], gmap.doors[room], [gmap.shop], step_cap)
        return true


def true_model(gmap: GridMap, br: dict, p_base=0.8, trap=0.1) -> np.ndarray:
    """Dense (S, 4, S) array of the true navigation dynamics."""
    from .nav import dynamics

    dyn = dynamics(gmap, br, p_base, trap)
    S, A, K = dyn.succ.shape
    T = np.zeros((S, A, S))
    np.add.at(T, (np.arange(S)[:, None, None], np.arange(A)[None, :, None], dyn.succ), dyn.prob)
    return T


# ---------------------------------------------------------------------------
# dialog-navigation coupling

def misidentified_goal(request, serve) -> str:
    """The room the robot first travels to: the served room when the rooms
    differ, otherwise the requested room itself."""
    return serve[1] if serve[1] != request[1] else request[1]


def delivery_success(pn, request, serve, shop: str = "shop") -> float:
    """Probability of fulfilling ``request`` after serving ``serve``.

    Aligned: one trip shop -> goal. Misaligned in any dimension: trip to the
    misidentified room, back to the shop, then the correct delivery."""
    goal = request[1]
    if tuple(request) == tuple(serve):
        return pn(shop, goal)
    mi = misidentified_goal(request, serve)
    return pn(shop, mi) * pn(mi, shop) * pn(shop, goal)


def serve_success_table(pn, space: RequestSpace) -> np.ndarray:
    reqs = space.requests
    for room in space.rooms:
        pn("shop", room), pn(room, "shop")
    return np.array([[delivery_success(pn, r, a) for a in reqs] for r in reqs])


def build_delivery_pomdp(pn, space: RequestSpace | None = None, om: ObservationModel | None = None,
                         **costs) -> DialogPomdp:
    space = space or RequestSpace()
    return DialogPomdp(space, serve_success_table(pn, space), om or ObservationModel(), **costs)


# ---------------------------------------------------------------------------
# task selection

def select_task(rooms: Sequence[str], history: Sequence[str]) -> TaskSpec:
    """Least-practiced navigation goal first; ties go to the lowest room."""
    if not rooms:
        raise ConstructError("no candidate tasks")
    counts = {r: 0 for r in rooms}
    for h in history:
        if h in counts:
            counts[h] += 1
    room = min(rooms, key=lambda r: (counts[r], list(rooms).index(r)))
    return TaskSpec("navigation", room)


def exogenous_settings(exo: dict) -> list:
    """All joint settings of the exogenous variables, as value tuples."""
    return list(itertools.product(*exo.values()))
