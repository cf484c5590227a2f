"""Exact inference over a GroundProgram by pruned depth-first enumeration.

Only the attributes that can influence a query are visited: the ancestors of
the target and evidence, plus any constraint whose support shares ancestors
with them. Attributes are assigned in topological order; derived atoms are
fired as soon as everything they depend on is assigned, and evidence and
constraints are checked at the same point so dead branches are cut early.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .grounding import GLit, GroundProgram, attr_key
from .syntax import Atom, Cmp, Eq, KBError, Literal, Var, parse_literals

DEFAULT_WORLD_CAP = 10**6
_DIST_CACHE_LIMIT = 500_000


@dataclass(frozen=True)
class WorldSet:
    attributes: tuple  # ground attribute keys
    worlds: tuple  # ((value, ...), probability)

    def __len__(self) -> int:
        return len(self.worlds)

    def __iter__(self):
        return iter(self.worlds)

    def as_dicts(self):
        return [(dict(zip(self.attributes, vals)), p) for vals, p in self.worlds]

    def probability(self, key: str, value) -> float:
        i = self.attributes.index(key)
        return math.fsum(p for vals, p in self.worlds if vals[i] == value)


# ---------------------------------------------------------------------------
# literal evaluation

def _holds(lit: GLit, assign, derived) -> bool:
    if lit.kind == "eq":
        return (assign[lit.ref] == lit.value) != lit.negated
    return (lit.ref in derived) != lit.negated


def _all(lits, assign, derived) -> bool:
    for lit in lits:
        if lit.kind == "eq":
            if (assign[lit.ref] == lit.value) == lit.negated:
                return False
        elif (lit.ref in derived) == lit.negated:
            return False
    return True


def _fire(groups, assign, derived):
    d = set(derived)
    for group in groups:
        changed = True
        while changed:
            changed = False
            for rule in group:
                if rule.head not in d and _all(rule.body, assign, d):
                    d.add(rule.head)
                    changed = True
    return d


# ---------------------------------------------------------------------------
# per-program indexes, built lazily and cached on the (immutable) program

class _Index:
    def __init__(self, gp: GroundProgram):
        n = len(gp.attributes)
        self.anc = [None] * n
        for i in gp.order:
            acc = {i}
            for p in gp.parents[i]:
                acc |= self.anc[p]
            self.anc[i] = frozenset(acc)
        self.rules_by_head = {}
        for r in gp.rules:
            self.rules_by_head.setdefault(r.head, []).append(r)
        self.con_deps = []
        for body in gp.constraints:
            deps = set()
            for lit in body:
                deps |= gp.lit_deps(lit)
            anc = set()
            for d in deps:
                anc |= self.anc[d]
            self.con_deps.append((frozenset(deps), frozenset(anc)))
        # atoms read when computing the distribution of each attribute
        self.cond_atoms = []
        self.parents_sorted = []
        for i, a in enumerate(gp.attributes):
            atoms = {l.ref for l in a.condition if l.kind == "atom"}
            for g in gp.pr_by_attr[i]:
                atoms |= {l.ref for l in g.condition if l.kind == "atom"}
            self.cond_atoms.append(frozenset(atoms))
            self.parents_sorted.append(tuple(sorted(gp.parents[i])))
        # pr-atoms indexed by their first positive attribute test, for fast lookup
        self.pr_index = []
        for i in range(n):
            keyed, loose = {}, []
            for g in gp.pr_by_attr[i]:
                first = next((l for l in sorted(g.condition) if l.kind == "eq" and not l.negated), None)
                if first is None:
                    loose.append(g)
                else:
                    keyed.setdefault((first.ref, first.value), []).append(g)
            self.pr_index.append((keyed, loose))
        self.plans = {}
        self.dist = {}


def _index(gp: GroundProgram) -> _Index:
    idx = gp._cache.get("index")
    if idx is None:
        idx = _Index(gp)
        gp._cache["index"] = idx
    return idx


def _distribution(gp: GroundProgram, ix: _Index, i: int, assign, derived):
    key = (i, tuple(assign[p] for p in ix.parents_sorted[i]),
           frozenset(a for a in ix.cond_atoms[i] if a in derived) if ix.cond_atoms[i] else None)
    hit = ix.dist.get(key)
    if hit is not None:
        return hit
    attr = gp.attributes[i]
    if attr.condition and not _all(attr.condition, assign, derived):
        out = ((None, 1.0),)
    else:
        out = _compute_distribution(gp, ix, i, assign, derived)
    if len(ix.dist) > _DIST_CACHE_LIMIT:
        ix.dist.clear()
    ix.dist[key] = out
    return out


def _compute_distribution(gp, ix, i, assign, derived):
    attr = gp.attributes[i]
    keyed, loose = ix.pr_index[i]
    candidates = list(loose)
    for (ref, value), group in keyed.items():
        if assign[ref] == value:
            candidates.extend(group)
    applicable = [g for g in candidates if _all(g.condition, assign, derived)]
    if len(applicable) > 1:
        # a pr-atom is superseded by an applicable one with a strictly larger condition
        applicable = [g for g in applicable
                      if not any(g.condition < h.condition for h in applicable)]
    probs = {}
    for g in applicable:
        prev = probs.get(g.value)
        if prev is not None and abs(prev - g.prob) > 1e-12:
            raise KBError(f"conflicting pr-atoms for {attr.key}={g.value} in one world")
        probs[g.value] = g.prob
    total = math.fsum(probs.values())
    if total > 1.0 + 1e-9:
        raise KBError(f"probability mass {total:.6g} > 1 for {attr.key} in one world")
    rest = [v for v in attr.values if v not in probs]
    if rest:
        share = max(0.0, 1.0 - total) / len(rest)
        return tuple((v, probs[v] if v in probs else share) for v in attr.values)
    if total <= 0.0:
        raise KBError(f"all values of {attr.key} have probability zero")
    return tuple((v, probs[v] / total) for v in attr.values)


# ---------------------------------------------------------------------------
# query plans

@dataclass
class _Plan:
    order: tuple
    pos: dict
    rules_at: dict  # level -> list of stratum groups
    checks_at: dict  # level -> list of constraint bodies
    children: frozenset  # attributes that are read by something in the plan


def _plan(gp: GroundProgram, ix: _Index, attrs: frozenset, atoms: frozenset, all_constraints=False) -> _Plan:
    key = (attrs, atoms, all_constraints)
    cached = ix.plans.get(key)
    if cached is not None:
        return cached
    relevant = set()
    for a in attrs:
        relevant |= ix.anc[a]
    for a in atoms:
        for d in gp.atom_deps[a]:
            relevant |= ix.anc[d]
    used = []
    pending = list(range(len(gp.constraints)))
    changed = True
    while changed:
        changed = False
        keep = []
        for c in pending:
            deps, anc = ix.con_deps[c]
            if all_constraints or anc & relevant or not deps:
                used.append(c)
                for d in deps:
                    relevant |= ix.anc[d]
                changed = True
            else:
                keep.append(c)
        pending = keep
    order = tuple(i for i in gp.order if i in relevant)
    pos = {i: k for k, i in enumerate(order)}

    needed = set(atoms)
    for i in order:
        needed |= ix.cond_atoms[i]
    for c in used:
        needed |= {l.ref for l in gp.constraints[c] if l.kind == "atom"}
    stack = list(needed)
    while stack:
        a = stack.pop()
        for r in ix.rules_by_head.get(a, ()):
            for l in r.body:
                if l.kind == "atom" and l.ref not in needed:
                    needed.add(l.ref)
                    stack.append(l.ref)

    def level(deps):
        return max((pos[d] for d in deps), default=-1)

    rules_at = {}
    for a in needed:
        for r in ix.rules_by_head.get(a, ()):
            lv = level(gp.atom_deps[r.head])
            rules_at.setdefault(lv, []).append(r)
    strata = gp.strata
    for lv, rules in rules_at.items():
        groups = {}
        for r in rules:
            groups.setdefault(strata.get(gp.atoms[r.head].pred, 0), []).append(r)
        rules_at[lv] = [groups[s] for s in sorted(groups)]
    checks_at = {}
    children = set()
    for c in used:
        deps, _ = ix.con_deps[c]
        checks_at.setdefault(level(deps), []).append(gp.constraints[c])
        children |= deps
    for a in needed:
        children |= gp.atom_deps[a]
    for i in order:
        children |= gp.parents[i]
    plan = _Plan(order, pos, rules_at, checks_at, frozenset(children))
    ix.plans[key] = plan
    return plan


def _search(gp, ix, plan: _Plan, order, evidence, leaf):
    """Enumerate consistent partial worlds over ``order``; call ``leaf`` with
    each complete assignment. Returns the total weight."""
    assign = [None] * len(gp.attributes)
    ev_at = {}
    for lit in evidence:
        deps = gp.lit_deps(lit)
        lv = max((plan.pos[d] for d in deps), default=-1)
        ev_at.setdefault(lv, []).append(lit)
    allowed = {}
    for lit in evidence:
        if lit.kind == "eq" and not lit.negated:
            allowed.setdefault(lit.ref, set()).add(lit.value)
    n = len(order)
    total = 0.0

    def ok(level, derived):
        for body in plan.checks_at.get(level, ()):
            if _all(body, assign, derived):
                return False
        for lit in ev_at.get(level, ()):
            if not _holds(lit, assign, derived):
                return False
        return True

    derived = set()
    if -1 in plan.rules_at:
        derived = _fire(plan.rules_at[-1], assign, derived)
    if not ok(-1, derived):
        return 0.0

    def rec(k, derived, w):
        nonlocal total
        if k == n:
            total += w
            leaf(assign, derived, w)
            return
        i = order[k]
        lv = plan.pos[i]
        dist = _distribution(gp, ix, i, assign, derived)
        allow = allowed.get(i)
        rules = plan.rules_at.get(lv)
        for v, p in dist:
            if p <= 0.0 or (allow is not None and v not in allow):
                continue
            assign[i] = v
            d = _fire(rules, assign, derived) if rules else derived
            if ok(lv, d):
                rec(k + 1, d, w * p)
        assign[i] = None

    rec(0, derived, 1.0)
    return total


# ---------------------------------------------------------------------------
# literal compilation for queries

_TRUE = object()
_FALSE = object()


def _to_literals(gp: GroundProgram, lits) -> tuple:
    if lits is None:
        return ()
    if isinstance(lits, str):
        names = {a.name for a in gp.attributes}
        return parse_literals(lits, names)
    if isinstance(lits, Literal):
        return (lits,)
    out = []
    for lit in lits:
        out.extend(_to_literals(gp, lit))
    return tuple(out)


def _compile(gp: GroundProgram, lit: Literal):
    core = lit.body
    if isinstance(core, Eq):
        if any(isinstance(a, Var) for a in core.attr.args) or isinstance(core.value, Var):
            raise KBError(f"query literal {lit} is not ground")
        key = attr_key(core.attr.name, core.attr.args)
        if key not in gp.attr_index:
            raise KBError(f"unknown ground attribute {key!r}")
        i = gp.attr_index[key]
        if core.value not in gp.attributes[i].values:
            return _TRUE if lit.negated else _FALSE
        return GLit("eq", i, core.value, lit.negated)
    if isinstance(core, Cmp):
        if isinstance(core.left, Var) or isinstance(core.right, Var):
            raise KBError(f"query literal {lit} is not ground")
        val = (core.left == core.right) if core.op == "=" else (core.left != core.right)
        return _TRUE if val != lit.negated else _FALSE
    if any(isinstance(a, Var) for a in core.args):
        raise KBError(f"query literal {lit} is not ground")
    if core in gp.atom_index:
        return GLit("atom", gp.atom_index[core], None, lit.negated)
    if core.pred in gp.sorts and len(core.args) == 1:
        val = core.args[0] in gp.sorts[core.pred]
    else:
        val = core in gp.static_atoms
    return _TRUE if val != lit.negated else _FALSE


def _compile_all(gp, lits):
    out = []
    for lit in _to_literals(gp, lits):
        c = _compile(gp, lit)
        if c is _FALSE:
            return None
        if c is not _TRUE:
            out.append(c)
    return tuple(dict.fromkeys(out))


def _support(gp, lits):
    attrs, atoms = set(), set()
    for lit in lits:
        if lit.kind == "eq":
            attrs.add(lit.ref)
        else:
            atoms.add(lit.ref)
    return attrs, atoms


# ---------------------------------------------------------------------------
# public operations

def enumerate_worlds(gp: GroundProgram, cap: int = DEFAULT_WORLD_CAP) -> WorldSet:
    """All worlds consistent with the rules and constraints, with probabilities."""
    count = 1
    for a in gp.attributes:
        count *= len(a.values) + (1 if a.conditional else 0)
        if count > cap:
            raise KBError(f"more than {cap} joint assignments; raise the world cap to enumerate")
    ix = _index(gp)
    plan = _plan(gp, ix, frozenset(range(len(gp.attributes))), frozenset(), all_constraints=True)
    found = []

    def leaf(assign, derived, w):
        found.append((tuple(assign), w))

    z = _search(gp, ix, plan, plan.order, (), leaf)
    if z <= 0.0 or not found:
        raise KBError("program has no consistent world")
    worlds = tuple((vals, w / z) for vals, w in found)
    return WorldSet(gp.attribute_keys, worlds)


def query(gp: GroundProgram, target, evidence: Iterable = ()) -> float:
    """P(target | evidence); ``target`` may be a literal, a list of literals
    (conjunction) or source text such as ``"curr_room(bob)=room2"``."""
    ev = _compile_all(gp, evidence)
    if ev is None:
        raise KBError("evidence has zero probability")
    tgt = _compile_all(gp, target)
    ix = _index(gp)
    t_attrs, t_atoms = _support(gp, tgt or ())
    e_attrs, e_atoms = _support(gp, ev)
    plan = _plan(gp, ix, frozenset(t_attrs | e_attrs), frozenset(t_atoms | e_atoms))
    hit = 0.0

    def leaf(assign, derived, w):
        nonlocal hit
        if tgt and _all(tgt, assign, derived):
            hit += w

    z = _search(gp, ix, plan, plan.order, ev, leaf)
    if z <= 0.0:
        raise KBError("evidence has zero probability")
    if tgt is None:
        return 0.0
    if not tgt:
        return 1.0
    return min(1.0, hit / z)


def marginal(gp: GroundProgram, attribute: str, evidence: Iterable = ()) -> dict:
    """Distribution of one ground attribute given evidence, as {value: prob}.
    Conditional attributes include the key ``None`` for "inactive"."""
    return {k[0]: p for k, p in joint(gp, [attribute], evidence).items()}


def joint(gp: GroundProgram, attributes, evidence: Iterable = ()) -> dict:
    """Joint distribution of several ground attributes given evidence,
    keyed by value tuples (zero-probability combinations are omitted)."""
    ev = _compile_all(gp, evidence)
    if ev is None:
        raise KBError("evidence has zero probability")
    ix = _index(gp)
    idxs = []
    for key in attributes:
        if key not in gp.attr_index:
            raise KBError(f"unknown ground attribute {key!r}")
        idxs.append(gp.attr_index[key])
    e_attrs, e_atoms = _support(gp, ev)
    plan = _plan(gp, ix, frozenset(idxs) | frozenset(e_attrs), frozenset(e_atoms))
    # a target nothing else reads can be summed out at the leaves
    sink = None
    last = idxs[-1]
    if last not in plan.children and last not in e_attrs and idxs.count(last) == 1:
        sink = last
    order = tuple(i for i in plan.order if i != sink)
    acc = {}

    if sink is None:
        def leaf(assign, derived, w):
            k = tuple(assign[i] for i in idxs)
            acc[k] = acc.get(k, 0.0) + w
    else:
        head = idxs[:-1]

        def leaf(assign, derived, w):
            prefix = tuple(assign[i] for i in head)
            for v, p in _distribution(gp, ix, sink, assign, derived):
                if p > 0.0:
                    k = prefix + (v,)
                    acc[k] = acc.get(k, 0.0) + w * p

    z = _search(gp, ix, plan, order, ev, leaf)
    if z <= 0.0:
        raise KBError("evidence has zero probability")
    return {k: v / z for k, v in acc.items()}
