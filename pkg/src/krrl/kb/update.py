"""Write learned probabilities back into a Program."""
from __future__ import annotations

from typing import Iterable

from .syntax import (
    AttrTerm, KBValidationError, Literal, PrAtom, Program, parse_literal, parse_literals,
    with_pr_atoms,
)


def _as_term(attr, names) -> AttrTerm:
    if isinstance(attr, AttrTerm):
        return attr
    if isinstance(attr, tuple):
        return AttrTerm(attr[0], tuple(attr[1:]))
    lit = parse_literal(f"{attr}=x_", names) if "(" in str(attr) else None
    if lit is not None:
        return lit.body.attr
    return AttrTerm(str(attr), ())


def _as_condition(cond, names) -> tuple:
    if cond is None:
        return ()
    if isinstance(cond, str):
        return parse_literals(cond, names)
    out = []
    for c in cond:
        out.extend(parse_literals(c, names) if isinstance(c, str) else [c])
    return tuple(out)


def update_pr_atoms(program: Program, learned: Iterable) -> Program:
    """Replace (or append) pr-atoms with learned probabilities.

    Each entry is ``(attribute, value, condition, probability)``; the attribute
    can be a name, ``"name(arg,...)"`` or an AttrTerm, the condition a literal
    sequence or source text. A pr-atom is replaced when attribute, value and
    condition (as a set) match exactly; otherwise the entry is appended.
    """
    learned = list(learned)
    if not learned:
        return program
    names = program.attribute_names
    pr = list(program.pr_atoms)
    where = {p.key(): k for k, p in enumerate(pr)}
    for entry in learned:
        attr, value, cond, prob = entry
        term = _as_term(attr, names)
        if term.name not in names:
            raise KBValidationError(f"unknown attribute {term.name!r}")
        condition = _as_condition(cond, names)
        if not all(isinstance(c, Literal) for c in condition):
            raise KBValidationError("condition must consist of literals")
        prob = float(prob)
        if not 0.0 <= prob <= 1.0:
            raise KBValidationError(f"probability {prob} out of range [0, 1]")
        atom = PrAtom(term, value, condition, prob)
        k = where.get(atom.key())
        if k is None:
            where[atom.key()] = len(pr)
            pr.append(atom)
        else:
            pr[k] = PrAtom(pr[k].attr, pr[k].value, pr[k].condition, prob)
    return with_pr_atoms(program, pr)
