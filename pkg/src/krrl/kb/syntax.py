"""Surface syntax of the knowledge-base language.

A program is a sequence of statements, each terminated by ``.``::

    time = {morning, noon}.                 % sort declaration
    cell = {0..8, lost}.                    % integer ranges are allowed
    #random curr_cell : cell.               % random attribute
    #random curr_room(person) : room.       % attribute with parameters
    #random bonus : level if vip.           % conditionally active attribute
    leftof(0, 1).                           % fact
    curr_cell = 3.                          % attribute fact (forces a value)
    busy(C) :- curr_cell = C, hall(C).      % rule
    :- curr_cell = 0, act_move = left.      % integrity constraint
    pr(next_cell = C1 | curr_cell = C, leftof(C, C1), act_move = right) = 8/10.

Variables start with an uppercase letter or ``_``. ``not`` is default negation
and ``a != v`` is shorthand for ``not a = v`` when ``a`` is an attribute.
"""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Union


class KBError(Exception):
    """Base class for knowledge-base errors."""


class KBSyntaxError(KBError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class KBValidationError(KBError):
    pass


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


Term = Union[Var, str, int]


@dataclass(frozen=True)
class AttrTerm:
    """An attribute instance such as ``curr_room(P)``."""

    name: str
    args: tuple = ()

    def __str__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Atom:
    pred: str
    args: tuple = ()

    def __str__(self) -> str:
        if not self.args:
            return self.pred
        return f"{self.pred}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Eq:
    attr: AttrTerm
    value: Term

    def __str__(self) -> str:
        return f"{self.attr}={self.value}"


@dataclass(frozen=True)
class Cmp:
    """Built-in comparison between two terms."""

    op: str
    left: Term
    right: Term

    def __str__(self) -> str:
        return f"{self.left}{self.op}{self.right}"


@dataclass(frozen=True)
class Literal:
    body: Union[Atom, Eq, Cmp]
    negated: bool = False

    def __str__(self) -> str:
        return f"not {self.body}" if self.negated else str(self.body)


@dataclass(frozen=True)
class AttributeDecl:
    name: str
    params: tuple  # sort names
    range_sort: str
    condition: tuple = ()  # literals

    def __str__(self) -> str:
        head = self.name if not self.params else f"{self.name}({', '.join(self.params)})"
        text = f"#random {head} : {self.range_sort}"
        if self.condition:
            text += " if " + ", ".join(map(str, self.condition))
        return text + "."


@dataclass(frozen=True)
class Rule:
    """``head :- body.``; ``head`` is None for integrity constraints."""

    head: Atom | None
    body: tuple = ()

    def __str__(self) -> str:
        body = ", ".join(map(str, self.body))
        if self.head is None:
            return f":- {body}."
        if not self.body:
            return f"{self.head}."
        return f"{self.head} :- {body}."


@dataclass(frozen=True)
class PrAtom:
    attr: AttrTerm
    value: Term
    condition: tuple
    prob: float

    def __str__(self) -> str:
        cond = f" | {', '.join(map(str, self.condition))}" if self.condition else ""
        return f"pr({self.attr}={self.value}{cond}) = {format_prob(self.prob)}."

    def key(self) -> tuple:
        return (self.attr, self.value, frozenset(self.condition))


@dataclass(frozen=True)
class Program:
    sorts: dict = field(default_factory=dict)  # name -> tuple of values
    attributes: tuple = ()
    facts: tuple = ()  # ground literals (Atom or Eq)
    rules: tuple = ()
    pr_atoms: tuple = ()

    @property
    def attribute_names(self) -> dict:
        return {a.name: a for a in self.attributes}

    def __str__(self) -> str:
        return pretty(self)


def format_prob(p: float) -> str:
    # shortest round-tripping digits, but never in exponent notation
    text = format(Decimal(repr(float(p))), "f")
    return text if "." in text else text + ".0"


def format_value(v) -> str:
    return str(v)


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_SPEC = [
    ("COMMENT", r"%[^\n]*"),
    ("WS", r"[ \t\r]+"),
    ("NL", r"\n"),
    ("RANDOM", r"\#random\b"),
    ("NUMBER", r"\d+\.\d+|\d+"),
    ("IF", r":-"),
    ("NEQ", r"!="),
    ("RANGE", r"\.\."),
    ("VAR", r"[A-Z_][A-Za-z0-9_]*"),
    ("IDENT", r"[a-z][A-Za-z0-9_]*"),
    ("PUNCT", r"[{}(),.|=/:]"),
    ("ERROR", r"."),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{name}>{rx})" for name, rx in _TOKEN_SPEC))


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, line_start = 1, 0
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        col = m.start() - line_start + 1
        if kind == "NL":
            line += 1
            line_start = m.end()
            continue
        if kind in ("WS", "COMMENT"):
            continue
        if kind == "ERROR":
            raise KBSyntaxError(f"unexpected character {m.group()!r}", line, col)
        tokens.append(Token(kind, m.group(), line, col))
    tokens.append(Token("EOF", "", line, len(text) - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# parser

@dataclass(frozen=True)
class _RawEq:
    """``lhs = rhs`` before we know whether lhs names an attribute."""

    name: str
    args: tuple
    op: str
    value: Term


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0

    # helpers
    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: Token | None = None):
        tok = tok or self.peek()
        raise KBSyntaxError(message, tok.line, tok.col)

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if tok.text != text or tok.kind in ("IDENT", "VAR", "NUMBER"):
            self.error(f"expected {text!r}, found {tok.text or 'end of input'!r}")
        return self.next()

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok.text == text and tok.kind not in ("IDENT", "VAR", "NUMBER")

    # grammar
    def statements(self):
        out = []
        while self.peek().kind != "EOF":
            out.append(self.statement())
        return out

    def statement(self):
        tok = self.peek()
        start = (tok.line, tok.col)
        if tok.kind == "RANDOM":
            stmt = self.random_decl()
        elif tok.kind == "IF":
            self.next()
            body = self.body()
            stmt = ("constraint", body)
        elif tok.kind == "IDENT" and tok.text == "pr" and self.peek(1).text == "(":
            stmt = self.pr_atom()
        elif tok.kind == "IDENT" and self.peek(1).text == "=" and self.peek(2).text == "{":
            stmt = self.sort_decl()
        elif tok.kind == "IDENT":
            head = self.literal_core()
            if self.at(":-"):
                self.next()
                stmt = ("rule", head, self.body())
            else:
                stmt = ("fact", head)
        else:
            self.error(f"unexpected {tok.text!r} at start of statement")
        self.expect(".")
        return stmt, start

    def sort_decl(self):
        name = self.next().text
        self.expect("=")
        self.expect("{")
        values = []
        if not self.at("}"):
            while True:
                tok = self.next()
                if tok.kind == "NUMBER" and "." not in tok.text:
                    lo = int(tok.text)
                    if self.peek().kind == "RANGE":
                        self.next()
                        hi_tok = self.next()
                        if hi_tok.kind != "NUMBER" or "." in hi_tok.text:
                            self.error("expected integer range bound", hi_tok)
                        hi = int(hi_tok.text)
                        if hi < lo:
                            self.error("empty integer range", hi_tok)
                        values.extend(range(lo, hi + 1))
                    else:
                        values.append(lo)
                elif tok.kind == "IDENT":
                    values.append(tok.text)
                else:
                    self.error(f"bad sort value {tok.text!r}", tok)
                if self.at(","):
                    self.next()
                    continue
                break
        self.expect("}")
        if len(set(values)) != len(values):
            self.error(f"duplicate value in sort {name!r}")
        return ("sort", name, tuple(values))

    def random_decl(self):
        self.next()
        tok = self.next()
        if tok.kind != "IDENT":
            self.error("expected attribute name", tok)
        params = ()
        if self.at("("):
            self.next()
            names = [self.ident()]
            while self.at(","):
                self.next()
                names.append(self.ident())
            self.expect(")")
            params = tuple(names)
        self.expect(":")
        range_sort = self.ident()
        condition = ()
        if self.peek().kind == "IDENT" and self.peek().text == "if":
            self.next()
            condition = self.body()
        return ("random", tok.text, params, range_sort, condition)

    def pr_atom(self):
        self.next()
        self.expect("(")
        head = self.literal_core()
        if not isinstance(head, _RawEq) or head.op != "=":
            self.error("pr-atom head must have the form attr=value")
        condition = ()
        if self.at("|"):
            self.next()
            condition = self.body()
        self.expect(")")
        self.expect("=")
        tok = self.peek()
        prob = self.number()
        if self.at("/"):
            self.next()
            den = self.number()
            if den == 0:
                self.error("zero denominator", tok)
            prob = Fraction(prob) / Fraction(den)
        return ("pr", head, condition, float(prob), (tok.line, tok.col))

    def number(self):
        tok = self.next()
        if tok.kind != "NUMBER":
            self.error(f"expected number, found {tok.text!r}", tok)
        return Fraction(tok.text)

    def ident(self) -> str:
        tok = self.next()
        if tok.kind != "IDENT":
            self.error(f"expected identifier, found {tok.text!r}", tok)
        return tok.text

    def body(self):
        lits = [self.body_literal()]
        while self.at(","):
            self.next()
            lits.append(self.body_literal())
        return tuple(lits)

    def body_literal(self):
        negated = False
        if self.peek().kind == "IDENT" and self.peek().text == "not":
            self.next()
            negated = True
        return (self.literal_core(), negated)

    def term(self) -> Term:
        tok = self.next()
        if tok.kind == "VAR":
            return Var(tok.text)
        if tok.kind == "NUMBER" and "." not in tok.text:
            return int(tok.text)
        if tok.kind == "IDENT":
            return tok.text
        self.error(f"expected term, found {tok.text!r}", tok)

    def literal_core(self):
        tok = self.peek()
        if tok.kind in ("VAR", "NUMBER"):
            left = self.term()
            op = self.next()
            if op.text not in ("=", "!="):
                self.error("expected '=' or '!=' in comparison", op)
            return Cmp(op.text, left, self.term())
        name = self.ident()
        args = ()
        if self.at("("):
            self.next()
            items = [self.term()]
            while self.at(","):
                self.next()
                items.append(self.term())
            self.expect(")")
            args = tuple(items)
        if self.at("=") or self.peek().kind == "NEQ":
            op = self.next().text
            return _RawEq(name, args, op, self.term())
        return Atom(name, args)


def _resolve(raw, attr_names, where) -> Literal:
    core, negated = raw
    if isinstance(core, _RawEq):
        if core.name in attr_names:
            lit = Eq(AttrTerm(core.name, core.args), core.value)
            return Literal(lit, negated != (core.op == "!="))
        if core.args:
            raise KBValidationError(f"{where}: unknown attribute {core.name!r}")
        return Literal(Cmp(core.op, core.name, core.value), negated)
    return Literal(core, negated)


def parse_program(text: str) -> Program:
    """Parse and validate a knowledge-base source string."""
    parser = _Parser(text)
    stmts = parser.statements()

    sorts: dict = {}
    attributes = []
    for stmt, (line, col) in stmts:
        if stmt[0] == "sort":
            if stmt[1] in sorts:
                raise KBSyntaxError(f"sort {stmt[1]!r} declared twice", line, col)
            sorts[stmt[1]] = stmt[2]
        elif stmt[0] == "random":
            attributes.append((stmt, line, col))
    attr_names = {s[1] for s, _, _ in attributes}

    decls = []
    facts, rules, pr_atoms = [], [], []
    for (stmt, line, col) in attributes:
        _, name, params, range_sort, cond = stmt
        where = f"line {line}"
        decls.append(AttributeDecl(name, params, range_sort,
                                   tuple(_resolve(r, attr_names, where) for r in cond)))
    for stmt, (line, col) in stmts:
        where = f"line {line}"
        kind = stmt[0]
        if kind == "constraint":
            rules.append(Rule(None, tuple(_resolve(r, attr_names, where) for r in stmt[1])))
        elif kind == "rule":
            head = _resolve((stmt[1], False), attr_names, where)
            if not isinstance(head.body, Atom):
                raise KBValidationError(f"{where}: rule heads must be predicate atoms")
            rules.append(Rule(head.body, tuple(_resolve(r, attr_names, where) for r in stmt[2])))
        elif kind == "fact":
            lit = _resolve((stmt[1], False), attr_names, where)
            if isinstance(lit.body, Cmp) or lit.negated:
                raise KBValidationError(f"{where}: facts must be atoms or attr=value")
            if any(isinstance(t, Var) for t in _terms_of(lit.body)):
                raise KBValidationError(f"{where}: facts must be ground")
            if isinstance(lit.body, Atom):
                rules.append(Rule(lit.body, ()))
            else:
                facts.append(lit.body)
        elif kind == "pr":
            _, head, cond, prob, (pl, pc) = stmt
            if head.name not in attr_names:
                raise KBValidationError(f"{where}: unknown attribute {head.name!r} in pr-atom")
            if not 0.0 <= prob <= 1.0:
                raise KBValidationError(f"line {pl}, column {pc}: probability {prob} out of range [0, 1]")
            pr_atoms.append(PrAtom(AttrTerm(head.name, head.args), head.value,
                                   tuple(_resolve(r, attr_names, where) for r in cond), prob))

    program = Program(sorts=sorts, attributes=tuple(decls), facts=tuple(facts),
                      rules=tuple(rules), pr_atoms=tuple(pr_atoms))
    validate(program)
    return program


def parse_literal(text: str, attr_names: Iterable[str]) -> Literal:
    """Parse a single (possibly negated) literal such as ``not curr_cell=3``."""
    lits = parse_literals(text, attr_names)
    if len(lits) != 1:
        raise KBValidationError(f"expected exactly one literal in {text!r}")
    return lits[0]


def parse_literals(text: str, attr_names: Iterable[str]) -> tuple:
    text = text.strip()
    if not text:
        return ()
    parser = _Parser(text)
    body = parser.body()
    if parser.peek().kind != "EOF":
        parser.error("trailing input after literal list")
    names = set(attr_names)
    return tuple(_resolve(r, names, "query") for r in body)


# ---------------------------------------------------------------------------
# validation

def _terms_of(core) -> tuple:
    if isinstance(core, Atom):
        return core.args
    if isinstance(core, Eq):
        return core.attr.args + (core.value,)
    return (core.left, core.right)


def literal_attr_names(lit: Literal) -> set:
    return {lit.body.attr.name} if isinstance(lit.body, Eq) else set()


def validate(program: Program) -> None:
    """Check the structural invariants of a program; raise KBValidationError."""
    sorts = program.sorts
    attrs = {}
    for decl in program.attributes:
        if decl.name in attrs:
            raise KBValidationError(f"attribute {decl.name!r} declared twice")
        if decl.range_sort not in sorts:
            raise KBValidationError(f"attribute {decl.name!r}: undeclared sort {decl.range_sort!r}")
        for p in decl.params:
            if p not in sorts:
                raise KBValidationError(f"attribute {decl.name!r}: undeclared sort {p!r}")
        attrs[decl.name] = decl

    def check_lit(lit: Literal, where: str):
        core = lit.body
        if isinstance(core, Eq):
            decl = attrs.get(core.attr.name)
            if decl is None:
                raise KBValidationError(f"{where}: unknown attribute {core.attr.name!r}")
            _check_attr_term(core.attr, decl, sorts, where)
            if not isinstance(core.value, Var) and core.value not in sorts[decl.range_sort]:
                raise KBValidationError(
                    f"{where}: value {core.value!r} not in sort {decl.range_sort!r}")

    for fact in program.facts:
        check_lit(Literal(fact), "fact")
    for rule in program.rules:
        for lit in rule.body:
            check_lit(lit, f"rule {rule}")
    for decl in program.attributes:
        for lit in decl.condition:
            check_lit(lit, f"declaration of {decl.name}")

    mass = defaultdict(float)
    for pa in program.pr_atoms:
        where = f"pr-atom {pa}"
        if not 0.0 <= pa.prob <= 1.0:
            raise KBValidationError(f"{where}: probability out of range [0, 1]")
        check_lit(Literal(Eq(pa.attr, pa.value)), where)
        for lit in pa.condition:
            check_lit(lit, where)
        mass[(pa.attr, frozenset(pa.condition))] += pa.prob
    for (attr, cond), total in mass.items():
        if total > 1.0 + 1e-9:
            shown = ", ".join(sorted(map(str, cond)))
            raise KBValidationError(
                f"probability mass {total:.6g} > 1 for {attr} given {{{shown}}}")

    _check_acyclic(program)


def _check_attr_term(term: AttrTerm, decl: AttributeDecl, sorts, where):
    if len(term.args) != len(decl.params):
        raise KBValidationError(
            f"{where}: attribute {decl.name!r} expects {len(decl.params)} argument(s)")
    for arg, sort in zip(term.args, decl.params):
        if not isinstance(arg, Var) and arg not in sorts[sort]:
            raise KBValidationError(f"{where}: {arg!r} not in sort {sort!r}")


def _check_acyclic(program: Program) -> None:
    """Attribute-level dependency check through pr-atoms, conditions and rules."""
    pred_deps: dict = defaultdict(set)
    pred_uses: dict = defaultdict(set)
    for rule in program.rules:
        if rule.head is None:
            continue
        for lit in rule.body:
            if isinstance(lit.body, Eq):
                pred_deps[rule.head.pred].add(lit.body.attr.name)
            elif isinstance(lit.body, Atom):
                pred_uses[rule.head.pred].add(lit.body.pred)
    # transitive closure over predicates
    changed = True
    while changed:
        changed = False
        for p, used in pred_uses.items():
            for q in used:
                extra = pred_deps.get(q, set()) - pred_deps[p]
                if extra:
                    pred_deps[p] |= extra
                    changed = True

    def deps_of(lits) -> set:
        out = set()
        for lit in lits:
            if isinstance(lit.body, Eq):
                out.add(lit.body.attr.name)
            elif isinstance(lit.body, Atom):
                out |= pred_deps.get(lit.body.pred, set())
        return out

    graph = {d.name: set() for d in program.attributes}
    for d in program.attributes:
        graph[d.name] |= deps_of(d.condition)
    for pa in program.pr_atoms:
        graph[pa.attr.name] |= deps_of(pa.condition)
    try:
        tuple(TopologicalSorter(graph).static_order())
    except CycleError as exc:
        cycle = " -> ".join(exc.args[1])
        raise KBValidationError(f"cyclic attribute dependency: {cycle}") from None


# ---------------------------------------------------------------------------
# printing

def _format_sort_values(values) -> str:
    parts = []
    i = 0
    vals = list(values)
    while i < len(vals):
        v = vals[i]
        if isinstance(v, int) and not isinstance(v, bool):
            j = i
            while j + 1 < len(vals) and isinstance(vals[j + 1], int) and vals[j + 1] == vals[j] + 1:
                j += 1
            if j - i >= 2:
                parts.append(f"{v}..{vals[j]}")
                i = j + 1
                continue
        parts.append(str(v))
        i += 1
    return ", ".join(parts)


def pretty(program: Program) -> str:
    lines = [f"{name} = {{{_format_sort_values(vals)}}}." for name, vals in program.sorts.items()]
    lines += [str(d) for d in program.attributes]
    lines += [f"{f}." for f in program.facts]
    lines += [str(r) for r in program.rules]
    lines += [str(p) for p in program.pr_atoms]
    return "\n".join(lines) + "\n"


def with_pr_atoms(program: Program, pr_atoms: Iterable[PrAtom]) -> Program:
    new = replace(program, pr_atoms=tuple(pr_atoms))
    validate(new)
    return new
