"""Grounding: instantiate a Program over its sorts.

Predicates whose definitions never touch a random attribute are *static*;
their model is computed once here and static literals are simplified away,
so ground rules, constraints and pr-atoms only mention attribute literals and
dynamic atoms. Variables are bound by joining positive static atoms first and
then by enumerating the sort inferred from attribute positions.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

from .syntax import (
    Atom, AttrTerm, Cmp, Eq, KBError, KBValidationError, Literal, Program, Var,
)

DEFAULT_ATOM_CAP = 10**6


class GroundingError(KBError):
    pass


class GLit(NamedTuple):
    """Compiled ground literal: ``kind`` is 'eq' (ref = attribute index) or
    'atom' (ref = dynamic atom id)."""

    kind: str
    ref: int
    value: object
    negated: bool


@dataclass(frozen=True)
class GroundAttribute:
    key: str
    name: str
    args: tuple
    values: tuple
    condition: tuple = ()  # GLits; attribute is inactive (value None) unless all hold

    @property
    def conditional(self) -> bool:
        return bool(self.condition)


@dataclass(frozen=True)
class GroundRule:
    head: int
    body: tuple


@dataclass(frozen=True)
class GroundPrAtom:
    attr: int
    value: object
    condition: frozenset
    prob: float
    explicit: bool
    order: int


@dataclass(frozen=True)
class GroundProgram:
    sorts: dict
    attributes: tuple
    rules: tuple
    constraints: tuple  # bodies (tuples of GLit); a constraint is violated when its body holds
    pr_atoms: tuple
    atoms: tuple  # dynamic atom id -> Atom
    static_atoms: frozenset
    strata: dict  # predicate -> stratum
    order: tuple  # topological order of attribute indices
    parents: tuple  # attribute index -> frozenset of parent indices
    atom_deps: tuple  # dynamic atom id -> frozenset of attribute indices
    size: int
    attr_index: dict = field(repr=False)
    atom_index: dict = field(repr=False)
    pr_by_attr: tuple = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def attribute_keys(self) -> tuple:
        return tuple(a.key for a in self.attributes)

    def attribute(self, key: str) -> GroundAttribute:
        try:
            return self.attributes[self.attr_index[key]]
        except KeyError:
            raise KBError(f"unknown ground attribute {key!r}") from None

    def lit_deps(self, lit: GLit) -> frozenset:
        if lit.kind == "eq":
            return frozenset((lit.ref,))
        return self.atom_deps[lit.ref]


def attr_key(name: str, args: tuple) -> str:
    if not args:
        return name
    return f"{name}({','.join(map(str, args))})"


def _sub(term, binding):
    if isinstance(term, Var):
        return binding[term.name]
    return term


def _vars(terms) -> list:
    return [t.name for t in terms if isinstance(t, Var)]


def _lit_vars(lit: Literal) -> list:
    core = lit.body
    if isinstance(core, Atom):
        return _vars(core.args)
    if isinstance(core, Eq):
        return _vars(core.attr.args + (core.value,))
    return _vars((core.left, core.right))


class _Grounder:
    def __init__(self, program: Program, atom_cap: int):
        self.program = program
        self.cap = atom_cap
        self.sorts = program.sorts
        self.decls = {d.name: d for d in program.attributes}
        self.work = 0
        self.static: dict = defaultdict(set)
        for name, values in self.sorts.items():
            self.static[name] = {(v,) for v in values}

    def tick(self, n: int = 1):
        self.work += n
        if self.work > self.cap:
            raise GroundingError(f"grounding exceeds the cap of {self.cap} ground atoms/instances")

    # -- predicate classification -------------------------------------------------
    def classify(self):
        rules = [r for r in self.program.rules if r.head is not None]
        for r in rules:
            if r.head.pred in self.sorts:
                raise GroundingError(f"rule head {r.head} redefines sort {r.head.pred!r}")
        dynamic = set()
        changed = True
        while changed:
            changed = False
            for r in rules:
                if r.head.pred in dynamic:
                    continue
                for lit in r.body:
                    if isinstance(lit.body, Eq) or (isinstance(lit.body, Atom) and lit.body.pred in dynamic):
                        dynamic.add(r.head.pred)
                        changed = True
                        break
        self.dynamic = dynamic

        preds = {r.head.pred for r in rules}
        strata = {p: 0 for p in preds}
        limit = len(preds) + 1
        changed = True
        while changed:
            changed = False
            for r in rules:
                h = r.head.pred
                for lit in r.body:
                    if not isinstance(lit.body, Atom) or lit.body.pred not in strata:
                        continue
                    need = strata[lit.body.pred] + (1 if lit.negated else 0)
                    if strata[h] < need:
                        strata[h] = need
                        changed = True
                        if need > limit:
                            raise GroundingError(
                                f"negation through recursion involving {h!r} is not stratified")
        self.strata = strata
        self.rules = rules

    # -- variable binding --------------------------------------------------------
    def var_sorts(self, lits, extra_terms=()) -> dict:
        sorts = {}

        def note(var, sort):
            if isinstance(var, Var):
                sorts.setdefault(var.name, sort)

        def attr_term(term: AttrTerm):
            decl = self.decls[term.name]
            for a, s in zip(term.args, decl.params):
                note(a, s)

        for lit in lits:
            core = lit.body
            if isinstance(core, Eq):
                attr_term(core.attr)
                note(core.value, self.decls[core.attr.name].range_sort)
            elif isinstance(core, Atom) and core.pred in self.sorts and len(core.args) == 1 and not lit.negated:
                note(core.args[0], core.pred)
        for term in extra_terms:
            if isinstance(term, tuple):
                attr_term(term[0])
                note(term[1], self.decls[term[0].name].range_sort)
        return sorts

    def bindings(self, lits, needed_vars, sort_hints):
        """Yield variable bindings that satisfy the positive static atoms."""
        joins = [l for l in lits if isinstance(l.body, Atom) and not l.negated and self.is_static(l.body.pred)]
        partial = [{}]
        for lit in joins:
            atom = lit.body
            facts = self.static.get(atom.pred, ())
            nxt = []
            for b in partial:
                for tup in facts:
                    if len(tup) != len(atom.args):
                        continue
                    nb = b
                    ok = True
                    for arg, val in zip(atom.args, tup):
                        if isinstance(arg, Var):
                            cur = nb.get(arg.name, _MISSING)
                            if cur is _MISSING:
                                if nb is b:
                                    nb = dict(b)
                                nb[arg.name] = val
                            elif cur != val:
                                ok = False
                                break
                        elif arg != val:
                            ok = False
                            break
                    if ok:
                        nxt.append(nb)
                self.tick(len(facts))
            partial = nxt
            if not partial:
                return
        for b in partial:
            free = [v for v in needed_vars if v not in b]
            if not free:
                yield b
                continue
            domains = []
            for v in free:
                if v not in sort_hints:
                    raise GroundingError(f"cannot infer the sort of variable {v}")
                domains.append(self.sorts[sort_hints[v]])
            for combo in itertools.product(*domains):
                self.tick()
                nb = dict(b)
                nb.update(zip(free, combo))
                yield nb

    def is_static(self, pred: str) -> bool:
        return pred not in self.dynamic

    # -- static model --------------------------------------------------------------
    def static_model(self):
        static_rules = [r for r in self.rules if r.head.pred not in self.dynamic]
        by_stratum = defaultdict(list)
        for r in static_rules:
            by_stratum[self.strata[r.head.pred]].append(r)
        for s in sorted(by_stratum):
            group = by_stratum[s]
            changed = True
            while changed:
                changed = False
                for r in group:
                    needed = set()
                    for lit in r.body:
                        needed.update(_lit_vars(lit))
                    needed.update(_vars(r.head.args))
                    hints = self.var_sorts(r.body)
                    for b in self.bindings(r.body, sorted(needed), hints):
                        if all(self.static_truth(l, b) for l in r.body):
                            tup = tuple(_sub(a, b) for a in r.head.args)
                            if tup not in self.static[r.head.pred]:
                                self.static[r.head.pred].add(tup)
                                self.tick()
                                changed = True

    def static_truth(self, lit: Literal, b) -> bool:
        core = lit.body
        if isinstance(core, Atom):
            val = tuple(_sub(a, b) for a in core.args) in self.static.get(core.pred, ())
        else:
            left, right = _sub(core.left, b), _sub(core.right, b)
            val = (left == right) if core.op == "=" else (left != right)
        return val != lit.negated

    # -- compile ground literals -------------------------------------------------
    def compile(self, lits, b):
        """Return a tuple of GLits, or None when the instance is statically false."""
        out = []
        for lit in lits:
            core = lit.body
            if isinstance(core, Cmp) or (isinstance(core, Atom) and self.is_static(core.pred)):
                if not self.static_truth(lit, b):
                    return None
                continue
            if isinstance(core, Eq):
                key = attr_key(core.attr.name, tuple(_sub(a, b) for a in core.attr.args))
                idx = self.attr_index.get(key)
                value = _sub(core.value, b)
                if idx is None or value not in self.attr_values[idx]:
                    if lit.negated:
                        continue
                    return None
                out.append(GLit("eq", idx, value, lit.negated))
            else:
                atom = Atom(core.pred, tuple(_sub(a, b) for a in core.args))
                out.append(GLit("atom", self.atom_id(atom), None, lit.negated))
        return tuple(dict.fromkeys(out))

    def atom_id(self, atom: Atom) -> int:
        idx = self.atom_index.get(atom)
        if idx is None:
            idx = len(self.atoms)
            self.atom_index[atom] = idx
            self.atoms.append(atom)
            self.tick()
        return idx

    # -- main --------------------------------------------------------------------
    def run(self) -> GroundProgram:
        self.classify()
        self.static_model()

        attributes = []
        self.attr_index = {}
        self.attr_values = []
        self.atoms = []
        self.atom_index = {}
        for decl in self.program.attributes:
            values = self.sorts[decl.range_sort]
            for args in itertools.product(*(self.sorts[p] for p in decl.params)):
                key = attr_key(decl.name, args)
                self.attr_index[key] = len(attributes)
                self.attr_values.append(frozenset(values))
                attributes.append((decl, key, args, values))
                self.tick(len(values))

        ground_attrs = []
        for decl, key, args, values in attributes:
            cond = ()
            if decl.condition:
                free = sorted({v for lit in decl.condition for v in _lit_vars(lit)})
                if free:
                    raise GroundingError(
                        f"activation condition of {decl.name} must be ground, found {free}")
                compiled = self.compile(decl.condition, {})
                if compiled is None:
                    # statically false: never active; an underivable atom encodes that
                    compiled = (GLit("atom", self.atom_id(Atom("never_active")), None, False),)
                cond = compiled
            ground_attrs.append(GroundAttribute(key, decl.name, args, tuple(values), cond))

        rules = []
        constraints = []
        for r in self.rules:
            if r.head.pred not in self.dynamic:
                continue
            needed = set(_vars(r.head.args))
            for lit in r.body:
                needed.update(_lit_vars(lit))
            hints = self.var_sorts(r.body)
            for b in self.bindings(r.body, sorted(needed), hints):
                body = self.compile(r.body, b)
                if body is None:
                    continue
                head = self.atom_id(Atom(r.head.pred, tuple(_sub(a, b) for a in r.head.args)))
                rules.append(GroundRule(head, body))
        for r in self.program.rules:
            if r.head is not None:
                continue
            needed = set()
            for lit in r.body:
                needed.update(_lit_vars(lit))
            hints = self.var_sorts(r.body)
            for b in self.bindings(r.body, sorted(needed), hints):
                body = self.compile(r.body, b)
                if body is None:
                    continue
                if not body:
                    raise GroundingError(f"constraint {r} is violated unconditionally")
                constraints.append(body)
        for fact in self.program.facts:
            key = attr_key(fact.attr.name, fact.attr.args)
            idx = self.attr_index[key]
            constraints.append((GLit("eq", idx, fact.value, True),))

        pr_atoms = []
        for order, pa in enumerate(self.program.pr_atoms):
            head_terms = pa.attr.args + (pa.value,)
            needed = set(_vars(head_terms))
            for lit in pa.condition:
                needed.update(_lit_vars(lit))
            explicit = not needed
            hints = self.var_sorts(pa.condition, extra_terms=[(pa.attr, pa.value)])
            for b in self.bindings(pa.condition, sorted(needed), hints):
                key = attr_key(pa.attr.name, tuple(_sub(a, b) for a in pa.attr.args))
                idx = self.attr_index.get(key)
                value = _sub(pa.value, b)
                if idx is None or value not in self.attr_values[idx]:
                    continue
                cond = self.compile(pa.condition, b)
                if cond is None:
                    continue
                pr_atoms.append(GroundPrAtom(idx, value, frozenset(cond), pa.prob, explicit, order))
                self.tick()
        pr_atoms = _resolve_overrides(pr_atoms)

        mass = defaultdict(float)
        for g in pr_atoms:
            mass[(g.attr, g.condition)] += g.prob
        for (idx, cond), total in mass.items():
            if total > 1.0 + 1e-9:
                raise KBValidationError(
                    f"probability mass {total:.6g} > 1 for {ground_attrs[idx].key} under one condition")

        n_atoms = len(self.atoms)
        atom_deps = [set() for _ in range(n_atoms)]
        changed = True
        while changed:
            changed = False
            for r in rules:
                acc = atom_deps[r.head]
                before = len(acc)
                for lit in r.body:
                    if lit.kind == "eq":
                        acc.add(lit.ref)
                    else:
                        acc |= atom_deps[lit.ref]
                if len(acc) != before:
                    changed = True
        atom_deps = tuple(frozenset(d) for d in atom_deps)

        def deps(lits):
            out = set()
            for lit in lits:
                out |= {lit.ref} if lit.kind == "eq" else atom_deps[lit.ref]
            return out

        parents = [set() for _ in ground_attrs]
        for i, a in enumerate(ground_attrs):
            parents[i] |= deps(a.condition)
        pr_by_attr = [[] for _ in ground_attrs]
        for g in pr_atoms:
            parents[g.attr] |= deps(g.condition)
            pr_by_attr[g.attr].append(g)
        order = _topological(parents, ground_attrs)

        static_count = sum(len(v) for k, v in self.static.items() if k not in self.sorts)
        size = sum(len(a.values) for a in ground_attrs) + static_count + n_atoms
        if size > self.cap:
            raise GroundingError(f"ground program has {size} atoms, above the cap of {self.cap}")

        static_atoms = frozenset(
            Atom(p, t) for p, ts in self.static.items() if p not in self.sorts for t in ts)
        return GroundProgram(
            sorts=dict(self.sorts),
            attributes=tuple(ground_attrs),
            rules=tuple(dict.fromkeys(rules)),
            constraints=tuple(dict.fromkeys(constraints)),
            pr_atoms=tuple(pr_atoms),
            atoms=tuple(self.atoms),
            static_atoms=static_atoms,
            strata={p: s for p, s in self.strata.items() if p in self.dynamic},
            order=order,
            parents=tuple(frozenset(p) for p in parents),
            atom_deps=atom_deps,
            size=size,
            attr_index=dict(self.attr_index),
            atom_index=dict(self.atom_index),
            pr_by_attr=tuple(tuple(p) for p in pr_by_attr),
        )


_MISSING = object()


def _resolve_overrides(pr_atoms):
    """Explicit (variable-free) pr-atoms replace schematic instances that share
    attribute and condition; among duplicates the later statement wins."""
    groups = defaultdict(list)
    for g in pr_atoms:
        groups[(g.attr, g.condition)].append(g)
    out = []
    for key, items in groups.items():
        if any(g.explicit for g in items):
            items = [g for g in items if g.explicit]
        by_value = {}
        for g in sorted(items, key=lambda g: g.order):
            by_value[g.value] = g
        out.extend(by_value.values())
    out.sort(key=lambda g: (g.order, g.attr))
    return out


def _topological(parents, attrs) -> tuple:
    n = len(parents)
    children = [[] for _ in range(n)]
    indeg = [0] * n
    for i, ps in enumerate(parents):
        for p in ps:
            if p == i:
                raise KBValidationError(f"cyclic attribute dependency: {attrs[i].key} -> {attrs[i].key}")
            children[p].append(i)
            indeg[i] += 1
    import heapq
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != n:
        stuck = [attrs[i].key for i in range(n) if indeg[i] > 0]
        raise KBValidationError(f"cyclic attribute dependency among {stuck}")
    return tuple(order)


def ground(program: Program, atom_cap: int = DEFAULT_ATOM_CAP) -> GroundProgram:
    """Instantiate every rule, constraint and pr-atom of ``program`` over its sorts."""
    return _Grounder(program, atom_cap).run()
