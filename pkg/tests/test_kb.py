import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kb_oracle import NaiveKB, random_program
from krrl.kb import (
    KBError, KBSyntaxError, KBValidationError, enumerate_worlds, ground, joint, marginal,
    parse_literals, parse_program, pretty, query, update_pr_atoms,
)

NAV = """
cell = {0..8}.
move = {left, right}.
#random curr_cell : cell.
#random act_move : move.
#random next_cell : cell.
leftof(0, 1). leftof(1, 2). leftof(3, 4). leftof(4, 5). leftof(6, 7). leftof(7, 8).
pr(next_cell=C1 | curr_cell=C, leftof(C, C1), act_move=right) = 8/10.
pr(next_cell=C | curr_cell=C, leftof(C, C1), act_move=right) = 2/10.
"""


# -- parsing ----------------------------------------------------------------------

def test_minimal_program():
    p = parse_program("time={morning,noon}. #random t: time.")
    assert len(p.sorts) == 1 and len(p.attributes) == 1 and not p.pr_atoms


def test_fraction_pr_atom():
    p = parse_program(NAV)
    assert p.pr_atoms[0].prob == pytest.approx(0.8)


def test_probability_out_of_range():
    with pytest.raises(KBValidationError, match="out of range"):
        parse_program("time={morning,noon}. #random t: time. pr(t=morning)=1.5.")


def test_syntax_error_has_position():
    with pytest.raises(KBSyntaxError) as err:
        parse_program("s = {a, b}.\n#random x : s\npr(x=a) = 0.5.")
    assert err.value.line == 3


def test_undeclared_sort():
    with pytest.raises(KBValidationError, match="undeclared sort"):
        parse_program("s={a}. #random x : nope.")


def test_cyclic_dependency():
    src = "s={a,b}. #random x : s. #random y : s. pr(x=a | y=a)=0.5. pr(y=a | x=a)=0.5."
    with pytest.raises(KBValidationError, match="cyclic"):
        parse_program(src)


def test_cycle_through_rules():
    src = "s={a,b}. #random x : s. #random y : s. q :- y=a. pr(x=a | q)=0.5. pr(y=b | x=b)=0.3."
    with pytest.raises(KBValidationError, match="cyclic"):
        parse_program(src)


def test_mass_over_one_rejected():
    with pytest.raises(KBValidationError, match="mass"):
        parse_program("s={a,b,c}. #random x : s. pr(x=a)=0.6. pr(x=b)=0.6.")


def test_comments_and_ranges():
    p = parse_program("% header\ncell = {0..3, lost}. % trailing\n#random c : cell.")
    assert p.sorts["cell"] == (0, 1, 2, 3, "lost")


@pytest.mark.parametrize("seed", range(25))
def test_round_trip_random(seed):
    p = parse_program(random_program(np.random.default_rng(seed)))
    assert parse_program(pretty(p)) == p


def test_round_trip_nav():
    p = parse_program(NAV)
    assert parse_program(pretty(p)) == p


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_round_trip_probability(p):
    q = update_pr_atoms(parse_program("s={a,b}. #random x : s."), [("x", "a", (), p)])
    again = parse_program(pretty(q))
    assert again == q and again.pr_atoms[0].prob == p


# -- grounding --------------------------------------------------------------------

def test_ground_value_atoms_per_sort():
    gp = ground(parse_program("room={r1,r2,r3,r4,r5}. #random loc : room."))
    assert len(gp.attributes) == 1 and len(gp.attributes[0].values) == 5


def test_rule_grounding_count():
    gp = ground(parse_program("cell={0..8}. #random c : cell. at(C) :- c=C."))
    assert len(gp.rules) == 9


def test_parameterised_attribute():
    gp = ground(parse_program("p={john,bob}. room={r1,r2}. #random at(p) : room."))
    assert gp.attribute_keys == ("at(john)", "at(bob)")


def test_atom_cap():
    with pytest.raises(KBError, match="cap"):
        ground(parse_program("n={0..100}. #random a(n, n) : n."))
    with pytest.raises(KBError, match="cap"):
        ground(parse_program("n={0..9}. #random a(n) : n."), atom_cap=50)


def test_unstratified_negation():
    src = "s={a,b}. #random x : s. p :- x=a, not q. q :- not p."
    with pytest.raises(KBError):
        ground(parse_program(src))


def test_static_rules_are_evaluated():
    src = """n={0..4}. #random x : n.
    succ(0,1). succ(1,2). succ(3,4).
    reach(A,B) :- succ(A,B).
    reach(A,C) :- reach(A,B), succ(B,C).
    far(X) :- n(X), not reach(X, 4), X != 4.
    pr(x=X | far(X)) = 0.0.
    """
    gp = ground(parse_program(src))
    assert gp.rules == ()
    m = marginal(gp, "x")
    assert m.get(0, 0.0) == 0.0 and m[3] == pytest.approx(0.5) and m[4] == pytest.approx(0.5)


# -- worlds and queries -----------------------------------------------------------

def test_uniform_worlds():
    ws = enumerate_worlds(ground(parse_program("room={r1,r2,r3,r4,r5}. #random loc : room.")))
    assert len(ws) == 5 and all(p == pytest.approx(0.2) for _, p in ws)


def test_residual_split():
    ws = enumerate_worlds(ground(parse_program("v={a,b,c}. #random x : v. pr(x=a)=0.7.")))
    got = {vals[0]: p for vals, p in ws}
    assert got == pytest.approx({"a": 0.7, "b": 0.15, "c": 0.15})


def test_two_independent_binaries():
    src = "b={t,f}. #random x : b. #random y : b. pr(x=t)=0.8."
    prog = parse_program(src)
    got = {vals: p for vals, p in enumerate_worlds(ground(prog))}
    oracle = {k: v[0] for k, v in NaiveKB(prog).worlds().items()}
    assert got.keys() == oracle.keys()
    for k in got:
        assert got[k] == pytest.approx(oracle[k], abs=1e-12)
    assert sorted(got.values()) == pytest.approx([0.1, 0.1, 0.4, 0.4])


def test_contradiction():
    with pytest.raises(KBError, match="no consistent world"):
        enumerate_worlds(ground(parse_program("b={t,f}. #random x : b. :- x=t. :- x=f.")))


def test_world_cap():
    src = "n={0..99}. #random a : n. #random b : n. #random c : n. #random d : n."
    with pytest.raises(KBError, match="joint assignments"):
        enumerate_worlds(ground(parse_program(src)))


def test_simple_queries():
    gp = ground(parse_program("room={r1,r2,r3,r4,r5}. #random loc : room."))
    assert query(gp, "loc=r3") == pytest.approx(0.2)
    assert query(gp, "loc=r3", "loc=r3") == pytest.approx(1.0)
    with pytest.raises(KBError, match="zero probability"):
        query(gp, "loc=r1", "loc=r2, loc=r3")


def test_unknown_attribute_in_query():
    gp = ground(parse_program("room={r1,r2}. #random loc : room."))
    with pytest.raises(KBError):
        query(gp, "loc(bob)=r1")


def test_nav_transition_marginal():
    gp = ground(parse_program(NAV))
    m = marginal(gp, "next_cell", "curr_cell=1, act_move=right")
    assert m[2] == pytest.approx(0.8) and m[1] == pytest.approx(0.2)
    assert math.fsum(m.values()) == pytest.approx(1.0)
    # no rule for the right wall: uniform
    m = marginal(gp, "next_cell", "curr_cell=2, act_move=right")
    assert m[5] == pytest.approx(1 / 9)


def test_conditional_attribute():
    src = """b={t,f}. lvl={lo,hi}.
    #random vip : b. #random bonus : lvl if vip=t.
    pr(vip=t)=0.3. pr(bonus=hi)=0.9."""
    gp = ground(parse_program(src))
    m = marginal(gp, "bonus")
    assert m[None] == pytest.approx(0.7) and m["hi"] == pytest.approx(0.27)
    assert query(gp, "vip=t", "bonus=hi") == pytest.approx(1.0)


def test_explicit_pr_overrides_schematic():
    base = parse_program(NAV)
    upd = update_pr_atoms(base, [("next_cell", 2, "curr_cell=1, act_move=right", 0.73)])
    gp = ground(upd)
    assert query(gp, "next_cell=2", "curr_cell=1, act_move=right") == pytest.approx(0.73)
    # other transitions keep their schematic probabilities
    assert query(gp, "next_cell=5", "curr_cell=4, act_move=right") == pytest.approx(0.8)


def test_more_specific_condition_wins():
    src = """b={t,f}. v={a,b,c}. #random x : b. #random y : v.
    pr(y=a) = 0.5. pr(y=a | x=t) = 0.9."""
    gp = ground(parse_program(src))
    assert query(gp, "y=a", "x=t") == pytest.approx(0.9)
    assert query(gp, "y=a", "x=f") == pytest.approx(0.5)


def test_joint_matches_products():
    gp = ground(parse_program(NAV))
    j = joint(gp, ["curr_cell", "next_cell"], "act_move=right")
    assert math.fsum(j.values()) == pytest.approx(1.0)
    assert j[(0, 1)] == pytest.approx(0.8 / 9)


def test_negated_evidence_and_derived_atoms():
    src = """b={t,f}. #random x : b. #random y : b.
    both :- x=t, y=t.
    pr(x=t)=0.6. pr(y=t)=0.5."""
    prog = parse_program(src)
    gp = ground(prog)
    names = {"x", "y"}
    lits = parse_literals("not both", names)
    num, den = NaiveKB(prog).query(parse_literals("x=t", names), lits)
    assert query(gp, "x=t", lits) == pytest.approx(num / den, abs=1e-12)
    assert query(gp, "both") == pytest.approx(0.3)


def oracle_check(seed, n_queries=4):
    rng = np.random.default_rng(seed)
    prog = parse_program(random_program(rng))
    gp = ground(prog)
    oracle = NaiveKB(prog)
    worlds = oracle.worlds()
    if not worlds:
        with pytest.raises(KBError):
            enumerate_worlds(gp)
        return 0.0
    ws = enumerate_worlds(gp)
    assert math.fsum(p for _, p in ws) == pytest.approx(1.0, abs=1e-9)
    worst = 0.0
    for vals, p in ws:
        worst = max(worst, abs(worlds[vals][0] - p))
    assert len(ws) == len(worlds)
    names = {a.name for a in prog.attributes}
    for _ in range(n_queries):
        a = gp.attributes[rng.integers(len(gp.attributes))]
        b = gp.attributes[rng.integers(len(gp.attributes))]
        target = parse_literals(f"{a.key}={a.values[rng.integers(len(a.values))]}", names)
        op = "=" if rng.random() < 0.5 else "!="
        evidence = parse_literals(f"{b.key}{op}{b.values[rng.integers(len(b.values))]}", names)
        num, den = oracle.query(target, evidence, worlds)
        if den == 0.0:
            with pytest.raises(KBError):
                query(gp, target, evidence)
            continue
        worst = max(worst, abs(query(gp, target, evidence) - num / den))
    return worst


@pytest.mark.parametrize("seed", range(1000, 1030))
def test_random_programs_match_oracle(seed):
    assert oracle_check(seed) < 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=10**9))
def test_world_probabilities_sum_to_one(seed):
    gp = ground(parse_program(random_program(np.random.default_rng(seed))))
    try:
        ws = enumerate_worlds(gp)
    except KBError:
        return
    assert abs(math.fsum(p for _, p in ws) - 1.0) < 1e-9


# -- updates ----------------------------------------------------------------------

def test_update_empty_is_identity():
    p = parse_program(NAV)
    assert update_pr_atoms(p, []) == p


def test_update_replaces_matching_atom():
    p = parse_program("s={a,b,c}. b2={t,f}. #random x : s. #random y : b2. pr(x=a | y=t) = 0.8.")
    q = update_pr_atoms(p, [("x", "a", "y=t", 0.73)])
    assert len(q.pr_atoms) == 1 and q.pr_atoms[0].prob == 0.73
    assert q.rules == p.rules and q.sorts == p.sorts
    assert query(ground(q), "x=a", "y=t") == pytest.approx(0.73)


def test_update_mass_error():
    p = parse_program("s={a,b,c}. #random x : s. pr(x=a) = 0.6.")
    with pytest.raises(KBValidationError, match="mass"):
        update_pr_atoms(p, [("x", "b", (), 0.6)])


def test_update_unknown_attribute():
    p = parse_program("s={a,b}. #random x : s.")
    with pytest.raises(KBValidationError, match="unknown attribute"):
        update_pr_atoms(p, [("z", "a", (), 0.5)])


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0), st.sampled_from(["a", "b", "c"]))
def test_update_then_query_reproduces(prob, value):
    p = parse_program("s={a,b,c}. b2={t,f}. #random y : b2. #random x : s.")
    q = update_pr_atoms(p, [("x", value, "y=f", prob)])
    assert query(ground(q), f"x={value}", "y=f") == pytest.approx(prob, abs=1e-12)
