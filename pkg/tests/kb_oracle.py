"""Naive reference semantics for KB programs, used only by the tests.

Works straight off the parsed Program: enumerate every joint assignment of
every ground attribute, compute the rule model by brute-force substitution
over all constants, and multiply per-attribute probabilities. Nothing here is
shared with the grounder or the inference engine.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from krrl.kb.syntax import Atom, Cmp, Eq, Var


def _key(name, args):
    return name if not args else f"{name}({','.join(map(str, args))})"


def ground_keys(program):
    out = []
    for d in program.attributes:
        for args in itertools.product(*(program.sorts[p] for p in d.params)):
            out.append((_key(d.name, args), d, args))
    return out


def _vars_in(lits, extra=()):
    names = []
    def add(t):
        if isinstance(t, Var) and t.name not in names:
            names.append(t.name)
    for t in extra:
        add(t)
    for lit in lits:
        c = lit.body
        if isinstance(c, Atom):
            for t in c.args:
                add(t)
        elif isinstance(c, Eq):
            for t in c.attr.args + (c.value,):
                add(t)
        else:
            add(c.left)
            add(c.right)
    return names


def _s(t, b):
    return b[t.name] if isinstance(t, Var) else t


def _ground_lit(lit, b, sorts):
    """Substitute a binding; returns ('const', bool) or ('eq'|'atom', key, value, negated)."""
    c = lit.body
    if isinstance(c, Eq):
        key = _key(c.attr.name, tuple(_s(a, b) for a in c.attr.args))
        return ("eq", key, _s(c.value, b), lit.negated)
    if isinstance(c, Cmp):
        l, r = _s(c.left, b), _s(c.right, b)
        return ("const", ((l == r) if c.op == "=" else (l != r)) != lit.negated)
    args = tuple(_s(a, b) for a in c.args)
    if c.pred in sorts and len(args) == 1:
        return ("const", (args[0] in sorts[c.pred]) != lit.negated)
    return ("atom", (c.pred, args), None, lit.negated)


def _true(g, world, model):
    if g[0] == "const":
        return g[1]
    if g[0] == "eq":
        val = world.get(g[1], _ABSENT) == g[2]
    else:
        val = g[1] in model
    return val != g[3]


_ABSENT = object()


def _simplify(lits):
    """Drop true constants; None if any constant is false."""
    out = []
    for g in lits:
        if g[0] == "const":
            if not g[1]:
                return None
            continue
        out.append(g)
    return out


def _strata(program):
    rules = [r for r in program.rules if r.head is not None]
    preds = {r.head.pred for r in rules}
    st = {p: 0 for p in preds}
    for _ in range(len(preds) + 2):
        for r in rules:
            for lit in r.body:
                if isinstance(lit.body, Atom) and lit.body.pred in st:
                    need = st[lit.body.pred] + (1 if lit.negated else 0)
                    st[r.head.pred] = max(st[r.head.pred], need)
    return st


class NaiveKB:
    def __init__(self, program):
        self.p = program
        sorts = program.sorts
        self.universe = sorted({v for vals in sorts.values() for v in vals}, key=str)
        self.keys = ground_keys(program)
        strata = _strata(program)
        # every substitution of every statement over the whole universe of constants
        self.layers = {}
        for r in program.rules:
            if r.head is None:
                continue
            for b in self.bindings(_vars_in(r.body, r.head.args)):
                body = _simplify([_ground_lit(l, b, sorts) for l in r.body])
                if body is None:
                    continue
                head = (r.head.pred, tuple(_s(a, b) for a in r.head.args))
                self.layers.setdefault(strata[r.head.pred], []).append((head, body))
        self.constraints = []
        for r in program.rules:
            if r.head is None:
                for b in self.bindings(_vars_in(r.body)):
                    body = _simplify([_ground_lit(l, b, sorts) for l in r.body])
                    if body is not None:
                        self.constraints.append(body)
        for f in program.facts:
            self.constraints.append([("eq", _key(f.attr.name, f.attr.args), f.value, True)])
        self.pr = {}
        for pa in program.pr_atoms:
            for b in self.bindings(_vars_in(pa.condition, pa.attr.args + (pa.value,))):
                key = _key(pa.attr.name, tuple(_s(a, b) for a in pa.attr.args))
                cond = _simplify([_ground_lit(l, b, sorts) for l in pa.condition])
                if cond is None:
                    continue
                text = frozenset(_ground_text(l, b) for l in pa.condition)
                self.pr.setdefault(key, []).append((_s(pa.value, b), cond, text, pa.prob))
        self.active = {d.name: [_ground_lit(l, {}, sorts) for l in d.condition]
                       for d in program.attributes}

    def bindings(self, names):
        for combo in itertools.product(self.universe, repeat=len(names)):
            yield dict(zip(names, combo))

    def model(self, world):
        model = set()
        for s in sorted(self.layers):
            grew = True
            while grew:
                grew = False
                for head, body in self.layers[s]:
                    if head not in model and all(_true(g, world, model) for g in body):
                        model.add(head)
                        grew = True
        return model

    def attr_prob(self, key, decl, world, model):
        value = world[key]
        active = all(_true(g, world, model) for g in self.active[decl.name])
        if not active:
            return 1.0 if value is None else 0.0
        if value is None:
            return 0.0
        values = self.p.sorts[decl.range_sort]
        applicable = [(v, text, p) for v, cond, text, p in self.pr.get(key, ())
                      if v in values and all(_true(g, world, model) for g in cond)]
        kept = [a for a in applicable if not any(a[1] < o[1] for o in applicable)]
        probs = {}
        for v, _, p in kept:
            probs[v] = p
        total = sum(probs.values())
        rest = [v for v in values if v not in probs]
        if rest:
            return probs.get(value, (1.0 - total) / len(rest))
        return probs[value] / total

    def worlds(self):
        """Return {assignment tuple: (probability, world, model)} over consistent worlds."""
        domains = []
        for key, decl, args in self.keys:
            vals = list(self.p.sorts[decl.range_sort])
            if decl.condition:
                vals.append(None)
            domains.append(vals)
        out = {}
        for combo in itertools.product(*domains):
            world = {k[0]: v for k, v in zip(self.keys, combo)}
            model = self.model(world)
            if any(all(_true(g, world, model) for g in body) for body in self.constraints):
                continue
            w = 1.0
            for key, decl, args in self.keys:
                w *= self.attr_prob(key, decl, world, model)
                if w == 0.0:
                    break
            if w > 0.0:
                out[combo] = (w, world, model)
        z = math.fsum(w for w, _, _ in out.values())
        return {k: (w / z, world, model) for k, (w, world, model) in out.items()}

    def query(self, target, evidence, worlds=None):
        """Return (P(target and evidence), P(evidence)) by filtering worlds."""
        ws = self.worlds() if worlds is None else worlds
        sorts = self.p.sorts
        tg = [_ground_lit(l, {}, sorts) for l in target]
        ev = [_ground_lit(l, {}, sorts) for l in evidence]
        num = den = 0.0
        for p, world, model in ws.values():
            if all(_true(g, world, model) for g in ev):
                den += p
                if all(_true(g, world, model) for g in tg):
                    num += p
        return num, den


def _ground_text(lit, b):
    c = lit.body
    if isinstance(c, Eq):
        s = f"{_key(c.attr.name, tuple(_s(a, b) for a in c.attr.args))}={_s(c.value, b)}"
    elif isinstance(c, Cmp):
        s = f"{_s(c.left, b)}{c.op}{_s(c.right, b)}"
    else:
        s = f"{c.pred}({','.join(str(_s(a, b)) for a in c.args)})"
    return ("not " if lit.negated else "") + s


# ---------------------------------------------------------------------------
# random acyclic programs

def random_program(rng: np.random.Generator, max_worlds: int = 4096) -> str:
    """Source text of a random acyclic program with at most ``max_worlds``
    joint assignments (counting "inactive" as a value)."""
    lines = ["bin = {t, f}.", "tri = {x, y, z}.", "idx = {0, 1}."]
    ranges = {"bin": ("t", "f"), "tri": ("x", "y", "z")}
    nodes = []  # ("attr", key, name, range, conditional) / ("pred", name)
    worlds = 1
    n_attr = 0
    for step in range(14):
        if rng.random() < 0.3 and nodes:
            # derived 0-ary predicate over earlier nodes
            name = f"d{step}"
            body = _random_body(rng, nodes, ranges, allow_var=True)
            if body is None:
                continue
            lines.append(f"{name} :- {body}.")
            if rng.random() < 0.3:
                body2 = _random_body(rng, nodes, ranges)
                if body2:
                    lines.append(f"{name} :- {body2}.")
            nodes.append(("pred", name))
            continue
        rng_name = "bin" if rng.random() < 0.6 else "tri"
        k = len(ranges[rng_name])
        param = rng.random() < 0.2
        conditional = rng.random() < 0.2 and bool(nodes)
        per = (k + (1 if conditional else 0))
        cost = per ** (2 if param else 1)
        if worlds * cost > max_worlds:
            continue
        worlds *= cost
        name = f"a{n_attr}"
        n_attr += 1
        cond = ""
        if conditional:
            c = _random_lits(rng, nodes, ranges, 1, ground_only=True)
            cond = f" if {c}"
        head = f"{name}(idx)" if param else name
        lines.append(f"#random {head} : {rng_name}{cond}.")
        keys = [f"{name}(0)", f"{name}(1)"] if param else [name]
        lines.extend(_random_pr(rng, name, param, rng_name, ranges, nodes))
        for key in keys:
            nodes.append(("attr", key, name, rng_name, conditional))
    if rng.random() < 0.4 and nodes:
        body = _random_body(rng, nodes, ranges)
        if body:
            lines.append(f":- {body}.")
    return "\n".join(lines) + "\n"


def _lit_for(rng, node, ranges, negate_ok=True):
    if node[0] == "pred":
        return ("not " if negate_ok and rng.random() < 0.3 else "") + node[1]
    _, key, name, rg, _ = node
    v = ranges[rg][rng.integers(len(ranges[rg]))]
    op = "!=" if negate_ok and rng.random() < 0.25 else "="
    return f"{key}{op}{v}"


def _random_lits(rng, nodes, ranges, n, ground_only=False):
    idx = rng.choice(len(nodes), size=min(n, len(nodes)), replace=False)
    return ", ".join(_lit_for(rng, nodes[i], ranges) for i in sorted(idx))


def _random_body(rng, nodes, ranges, allow_var=False):
    attrs = [n for n in nodes if n[0] == "attr"]
    if allow_var and attrs and rng.random() < 0.3:
        # a variable shared between two attribute tests with the same range
        a = attrs[rng.integers(len(attrs))]
        same = [b for b in attrs if b[3] == a[3] and b[1] != a[1]]
        if same:
            b = same[rng.integers(len(same))]
            return f"{a[1]}=V, {b[1]}=V"
    n = int(rng.integers(1, 3))
    return _random_lits(rng, nodes, ranges, n)


def _random_pr(rng, name, param, rg, ranges, nodes):
    values = ranges[rg]
    out = []
    head = f"{name}(I)" if param else name
    if rng.random() < 0.5:
        # unconditional default, superseded by any more specific applicable pr-atom
        v = values[rng.integers(len(values))]
        out.append(f"pr({head}={v}) = {rng.uniform(0.05, 0.95):.3f}.")
    family = rng.random()
    attrs = [n for n in nodes if n[0] == "attr"]
    preds = [n for n in nodes if n[0] == "pred"]
    if family < 0.5 and attrs:
        k = int(rng.integers(1, min(2, len(attrs)) + 1))
        parents = [attrs[i] for i in sorted(rng.choice(len(attrs), size=k, replace=False))]
        for combo in itertools.product(*(ranges[p[3]] for p in parents)):
            if rng.random() < 0.3:
                continue
            cond = ", ".join(f"{p[1]}={v}" for p, v in zip(parents, combo))
            out.extend(_mass(rng, head, values, cond))
    elif family < 0.75 and preds:
        p = preds[rng.integers(len(preds))][1]
        out.extend(_mass(rng, head, values, p))
        out.extend(_mass(rng, head, values, f"not {p}"))
    elif attrs and any(a[3] == rg for a in attrs):
        src = [a for a in attrs if a[3] == rg]
        a = src[rng.integers(len(src))]
        out.append(f"pr({head}=V | {a[1]}=V) = {rng.uniform(0.1, 0.9):.3f}.")
    return out


def _mass(rng, head, values, cond):
    k = int(rng.integers(1, len(values) + 1))
    chosen = [values[i] for i in sorted(rng.choice(len(values), size=k, replace=False))]
    w = rng.dirichlet(np.ones(k + 1))
    scale = 1.0 if rng.random() < 0.3 else 0.999
    probs = w[:k] / w[:k].sum() * scale if k == len(values) else w[:k]
    lines = []
    for v, p in zip(chosen, probs):
        p = math.floor(float(p) * 1e4) / 1e4
        lines.append(f"pr({head}={v} | {cond}) = {p}.")
    return lines
