"""Declarative probabilistic knowledge base: parsing, grounding, exact inference."""
from .grounding import GroundProgram, GroundingError, attr_key, ground
from .inference import WorldSet, enumerate_worlds, joint, marginal, query
from .syntax import (
    Atom, AttrTerm, Cmp, Eq, KBError, KBSyntaxError, KBValidationError, Literal, PrAtom,
    Program, Rule, Var, parse_literal, parse_literals, parse_program, pretty,
)
from .update import update_pr_atoms

__all__ = [
    "Atom", "AttrTerm", "Cmp", "Eq", "GroundProgram", "GroundingError", "KBError",
    "KBSyntaxError", "KBValidationError", "Literal", "PrAtom", "Program", "Rule", "Var",
    "WorldSet", "attr_key", "enumerate_worlds", "ground", "joint", "marginal",
    "parse_literal", "parse_literals", "parse_program", "pretty", "query", "update_pr_atoms",
]
