import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krrl.construct import PnTable, build_delivery_pomdp, true_model
from krrl.dialog import (
    DialogError, DialogPomdp, ObservationModel, RequestSpace, action_values, belief_entropy,
    belief_update, plan_batch, plan_dialog_action, qa_cost_distribution, run_dialog, serves_chosen,
    simulate_user, uniform_belief,
)
from krrl.nav import load_map

import dialog_oracle

SMALL = RequestSpace(items=("coke", "coffee"), rooms=("room1", "room2"), persons=("john", "bob"))


def room_td(space, rng):
    """Serve-success table with the room structure of real delivery tables."""
    nr = len(space.rooms)
    go, back = rng.uniform(0.5, 1.0, nr), rng.uniform(0.5, 1.0, nr)
    td = np.empty((len(space), len(space)))
    for i, r in enumerate(space.requests):
        for j, a in enumerate(space.requests):
            g = space.rooms.index(r[1])
            m = space.rooms.index(a[1])
            td[i, j] = go[g] if r == a else go[m] * back[m] * go[g]
    return td


@pytest.fixture(scope="module")
def fig4_pomdp():
    g = load_map("fig4")
    return build_delivery_pomdp(PnTable.from_model(g, true_model(g, g.blocking(0.3))))


beliefs = st.lists(st.floats(0.01, 1.0), min_size=len(SMALL), max_size=len(SMALL)).map(
    lambda xs: np.array(xs) / sum(xs))


# ---------------------------------------------------------------------------
# belief updates and the simulated user

def test_ask_update_by_hand():
    P = DialogPomdp(SMALL, room_td(SMALL, np.random.default_rng(0)))
    b = belief_update(uniform_belief(SMALL), P, 0, "coke")  # ask_item
    coke = np.array([r[0] == "coke" for r in SMALL.requests])
    np.testing.assert_allclose(b[coke], 0.8 / 4)
    np.testing.assert_allclose(b[~coke], 0.2 / 4)


def test_confirm_update_by_hand():
    P = DialogPomdp(SMALL, room_td(SMALL, np.random.default_rng(0)))
    qi = [str(a) for a in P.actions].index("confirm_room=room2")
    b = belief_update(uniform_belief(SMALL), P, qi, "no")
    r2 = np.array([r[1] == "room2" for r in SMALL.requests])
    np.testing.assert_allclose(b[r2], 0.1 / 4)
    np.testing.assert_allclose(b[~r2], 0.9 / 4)


def test_update_rejects_bad_answers():
    P = DialogPomdp(SMALL, room_td(SMALL, np.random.default_rng(0)))
    with pytest.raises(DialogError):
        belief_update(uniform_belief(SMALL), P, 0, "tea")
    with pytest.raises(DialogError, match="only question"):
        belief_update(uniform_belief(SMALL), P, P.n_questions, "yes")
    b = np.zeros(len(SMALL))
    b[0] = 1.0
    P1 = DialogPomdp(SMALL, P.td, ObservationModel(p_correct=1.0, confirm_flip=0.0))
    with pytest.raises(DialogError, match="zero probability"):
        belief_update(b, P1, 0, "coffee")


def test_bad_models_rejected():
    with pytest.raises(DialogError, match="p_correct"):
        ObservationModel(p_correct=0.0)
    with pytest.raises(DialogError, match="must exceed"):
        DialogPomdp(RequestSpace(), np.eye(30), ObservationModel(p_correct=0.3))
    with pytest.raises(DialogError, match="30x30"):
        DialogPomdp(RequestSpace(), np.eye(4))
    with pytest.raises(DialogError, match="nonnegative"):
        DialogPomdp(SMALL, np.eye(8), ask_cost=-1.0)


@given(beliefs, st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=2, max_size=4),
       st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_updates_commute(b, pairs, rnd):
    P = DialogPomdp(SMALL, room_td(SMALL, np.random.default_rng(0)))
    steps = [(q, P.answers(q)[k % len(P.answers(q))]) for q, k in pairs]
    shuffled = list(steps)
    rnd.shuffle(shuffled)
    b1, b2 = b, b
    for q, a in steps:
        b1 = belief_update(b1, P, q, a)
    for q, a in shuffled:
        b2 = belief_update(b2, P, q, a)
    np.testing.assert_allclose(b1, b2, atol=1e-12)


@given(beliefs, st.integers(0, 8))
@settings(max_examples=60, deadline=None)
def test_expected_entropy_never_increases(b, q):
    P = DialogPomdp(SMALL, room_td(SMALL, np.random.default_rng(0)))
    expected = 0.0
    for a in P.answers(q):
        pa = float(b @ P.likelihood(q, a))
        expected += pa * belief_entropy(belief_update(b, P, q, a))
    assert expected <= belief_entropy(b) + 1e-12


def test_entropy_values():
    assert belief_entropy(uniform_belief(RequestSpace())) == pytest.approx(math.log2(30))
    assert belief_entropy([1.0, 0.0, 0.0]) == 0.0


def test_simulated_user_rates():
    rng = np.random.default_rng(1)
    space = RequestSpace()
    P = DialogPomdp(space, np.eye(30))
    req = ("coffee", "room3", "bob")
    ask_room = P.actions[1]
    confirm_wrong = next(a for a in P.actions if str(a) == "confirm_item=coke")
    n = 100_000
    room_ok = sum(simulate_user(req, ask_room, P.om, space, rng) == "room3" for _ in range(n)) / n
    yes = sum(simulate_user(req, confirm_wrong, P.om, space, rng) == "yes" for _ in range(n)) / n
    assert abs(room_ok - 0.8) < 0.005
    assert abs(yes - 0.1) < 0.005
    with pytest.raises(DialogError):
        simulate_user(req, P.actions[-1], P.om, space, rng)


# ---------------------------------------------------------------------------
# planner vs brute force

@pytest.mark.parametrize("structured", [True, False])
@pytest.mark.parametrize("depth", [1, 2, 3])
def test_action_values_match_brute_force(structured, depth):
    rng = np.random.default_rng(10 * depth + structured)
    td = room_td(SMALL, rng) if structured else rng.uniform(0.2, 1.0, (8, 8))
    P = DialogPomdp(SMALL, td)
    for _ in range(3 if depth < 3 else 2):
        b = rng.dirichlet(np.ones(len(SMALL)) * 0.5)
        want = dialog_oracle.action_values(b, SMALL.values, td, depth)
        got = action_values(b, P, depth)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-9)


def test_plan_batch_agrees_with_values():
    rng = np.random.default_rng(3)
    P = DialogPomdp(SMALL, room_td(SMALL, rng))
    B = rng.dirichlet(np.ones(8) * 0.3, size=200)
    acts = plan_batch(B, P)
    serve = serves_chosen(B, P)
    for b, a, s in zip(B, acts, serve):
        Q = action_values(b, P)
        assert Q[a] >= Q.max() - 1e-9 * max(1.0, abs(Q.max()))
        assert s == (a >= P.n_questions)


def test_uniform_belief_asks(fig4_pomdp):
    a = plan_dialog_action(uniform_belief(fig4_pomdp.space), fig4_pomdp)
    assert a < fig4_pomdp.n_questions


def test_confident_belief_serve_depends_on_room(fig4_pomdp):
    # b = 0.9 on one request: serve where navigation is reliable, confirm
    # the room where a wrong trip is expensive
    P = fig4_pomdp
    got = {}
    for room in P.space.rooms:
        b = np.full(30, 0.1 / 29)
        b[P.space.index(("coke", room, "john"))] = 0.9
        got[room] = str(P.actions[plan_dialog_action(b, P)])
    assert got["room1"] == "serve(coke,room1,john)"
    assert got["room3"] == "serve(coke,room3,john)"
    assert got["room4"] == "serve(coke,room4,john)"
    assert got["room2"] == "confirm_room=room2"
    assert got["room5"] == "confirm_room=room5"


def test_last_turn_serves_most_likely(fig4_pomdp):
    b = uniform_belief(fig4_pomdp.space).copy()
    b[7] += 0.01
    b /= b.sum()
    a = plan_dialog_action(b, fig4_pomdp, fig4_pomdp.turn_cap - 1)
    assert a == fig4_pomdp.n_questions + 7
    with pytest.raises(DialogError):
        plan_dialog_action(b, fig4_pomdp, fig4_pomdp.turn_cap + 1)


def test_costs_dominate_bonus_serves_immediately():
    P = DialogPomdp(SMALL, room_td(SMALL, np.random.default_rng(0)), ask_cost=500.0, confirm_cost=500.0)
    assert plan_dialog_action(uniform_belief(SMALL), P) >= P.n_questions


# ---------------------------------------------------------------------------
# dialogs

def test_dialog_reward_accounting():
    rng = np.random.default_rng(5)
    P = DialogPomdp(SMALL, room_td(SMALL, rng))
    for req in SMALL.requests:
        o = run_dialog(P, uniform_belief(SMALL), req, rng)
        assert o.turns == len(o.transcript) + 1 <= P.turn_cap
        base = 80.0 if o.fulfilled else -80.0
        extra = 0.0 if o.served == req else -80.0
        assert o.reward == pytest.approx(base + extra - o.qa_cost)


def test_qa_cost_distribution_matches_simulation():
    rng = np.random.default_rng(11)
    P = DialogPomdp(SMALL, room_td(SMALL, rng))
    b0 = uniform_belief(SMALL)
    req = ("coffee", "room2", "bob")
    dist, dropped = qa_cost_distribution(P, b0, req, prune=0.0)
    assert dropped == 0.0
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
    n = 4000
    costs = [run_dialog(P, b0, req, rng).qa_cost for _ in range(n)]
    for c, p in dist.items():
        freq = np.mean(np.isclose(costs, c))
        assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / n) + 1e-3, (c, p, freq)
