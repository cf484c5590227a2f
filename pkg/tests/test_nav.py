from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krrl.mdp import policy_success_probability, value_iteration
from krrl.nav import (
    ACTIONS, MapError, NavEnv, exact_transition, load_map, nav_mdp, parse_map, true_transition,
)

CORRIDOR = """\
br a morning 0.5
br a noon 0.1
#######
#S.a.1#
#.....#
#######
"""


def test_small_map_valid():
    m = parse_map("S..\n...\n..1\n")
    assert m.rooms == {"room1": (8,)} and m.shop == 0
    assert m.n_states == 10 and m.lost == 9


def test_two_shops_rejected():
    with pytest.raises(MapError, match="exactly one shop"):
        parse_map("S.S\n..1\n")


def test_unreachable_room_rejected():
    with pytest.raises(MapError, match="not reachable"):
        parse_map("S.#1\n..#.\n")


def test_bad_header_and_chars():
    with pytest.raises(MapError, match="unexpected characters"):
        parse_map("S.x\n..1\n")
    with pytest.raises(MapError, match="blocking rate"):
        parse_map("br a morning 1.5\nSa1\n")
    with pytest.raises(MapError, match="unknown area"):
        parse_map("br b morning 0.5\nSa1\n")


def test_disconnected_area_rejected():
    with pytest.raises(MapError, match="not connected"):
        parse_map("Sa.a\n...1\n")


def test_bundled_maps():
    m = load_map("fig4")
    assert (m.width, m.height) == (30, 30)
    assert len(m.rooms) == 5 and len(m.areas) == 4
    assert set(m.times) == {"morning", "noon", "afternoon"}
    big = load_map("fig4_50")
    assert (big.width, big.height) == (50, 50) and len(big.rooms) == 5 and len(big.areas) == 4


def test_room4_closest_room5_deep():
    m = load_map("fig4")
    dist = m.bfs(m.shop)
    closest = min(m.rooms, key=lambda r: min(dist[list(m.rooms[r])]))
    assert closest == "room4"
    assert len(m.areas["c"]) > max(len(m.areas[k]) for k in "abd")


def test_blocking_settings():
    m = parse_map(CORRIDOR)
    assert m.blocking("morning") == {"a": 0.5}
    assert m.blocking(0.3) == {"a": 0.3}
    assert m.blocking() == {"a": 0.0}
    with pytest.raises(MapError):
        m.blocking("evening")


def test_free_move_distribution():
    m = parse_map(CORRIDOR)
    s = m.index[(2, 3)]
    d = exact_transition(m, {}, s, "right")
    assert d[m.index[(2, 4)]] == Fraction(4, 5)
    # residual 0.2: stay, lateral up (1,3) is a blocking cell, lateral down is a wall
    assert sum(d.values()) == 1


def test_blocking_target_attenuated():
    m = parse_map(CORRIDOR)
    s = m.index[(1, 2)]
    d = true_transition(m, {"a": 0.5}, s, "right", trap=0.1)
    assert d[m.index[(1, 3)]] == pytest.approx(0.4)
    assert d[m.lost] == pytest.approx(0.04)
    assert sum(d.values()) == pytest.approx(1.0)


def test_no_trap_recovers_plain_split():
    m = parse_map(CORRIDOR)
    s = m.index[(1, 2)]
    d = exact_transition(m, {"a": "1/2"}, s, "right", trap=0)
    assert m.lost not in d
    assert d[m.index[(1, 3)]] == Fraction(2, 5)
    assert d[m.index[(2, 2)]] == Fraction(1, 5)  # one lateral, one wall -> stay
    assert d[s] == Fraction(2, 5)


def test_wall_move_stays():
    m = parse_map(CORRIDOR)
    s = m.index[(1, 1)]
    assert true_transition(m, {}, s, "up") == {s: 1}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(ACTIONS), st.fractions(0, 1), st.fractions(0, 1))
def test_distributions_sum_to_one_exactly(cell_seed, move, br, trap):
    m = load_map("fig4")
    cell = cell_seed % m.n_states
    br_tab = {a: br for a in m.areas}
    d = true_transition(m, br_tab, cell, move, Fraction(4, 5), trap)
    assert sum(d.values()) == 1
    assert all(v > 0 for v in d.values())


def test_deterministic_variant():
    m = parse_map(CORRIDOR)
    env = NavEnv(m, {}, m.shop, m.rooms["room1"], p_base=1.0, seed=3)
    env.reset()
    cells = [env.step("right")[0] for _ in range(4)]
    assert cells == [m.index[(1, c)] for c in (2, 3, 4, 5)]
    assert env.done and not env.truncated


def test_sampling_matches_distribution():
    m = parse_map(CORRIDOR)
    env = NavEnv(m, {"a": 0.5}, m.shop, m.rooms["room1"], seed=11)
    s = m.index[(2, 3)]
    a = ACTIONS.index("up")
    n = 100_000
    draws = np.array([env.sample_next(s, a) for _ in range(n)])
    for t, p in true_transition(m, {"a": 0.5}, s, "up").items():
        assert abs((draws == t).mean() - p) < 0.01


def test_seed_determinism():
    m = load_map("fig4")
    rng = np.random.default_rng(0)
    moves = rng.integers(0, 4, size=150)

    def trajectory(seed):
        env = NavEnv(m, m.blocking(0.5), m.shop, m.rooms["room5"], seed=seed)
        env.reset()
        out = []
        for a in moves:
            if env.done:
                break
            out.append(env.step(int(a)))
        return out

    assert trajectory(7) == trajectory(7)
    assert trajectory(7) != trajectory(8)


def test_step_cap_and_finished_episode():
    m = parse_map(CORRIDOR)
    env = NavEnv(m, {}, m.shop, m.rooms["room1"], step_cap=3, seed=0)
    env.reset()
    rewards = [env.step("left")[1] for _ in range(3)]
    assert rewards == [-1.0, -1.0, -101.0] and env.truncated
    with pytest.raises(RuntimeError):
        env.step("left")


def test_clone_has_own_generator():
    m = parse_map(CORRIDOR)
    env = NavEnv(m, {"a": 0.3}, m.shop, m.rooms["room1"], seed=1)
    a, b = env.clone(5), env.clone(5)
    assert [a.sample_next(0, 3) for _ in range(50)] == [b.sample_next(0, 3) for _ in range(50)]


@pytest.mark.parametrize("room", ["room1", "room2", "room5"])
def test_success_monotone_in_blocking_rate(room):
    m = load_map("fig4")
    goals = m.rooms[room]
    probs = []
    for br in (0.0, 0.1, 0.3, 0.5, 0.7):
        mdp = nav_mdp(m, m.blocking(br), goals, gamma=1.0)
        _, pi = value_iteration(mdp, 1e-6, check_proper=False)
        probs.append(policy_success_probability(mdp, pi, m.shop, goals, 200))
    assert all(x >= y for x, y in zip(probs, probs[1:]))


def test_render_marks():
    m = parse_map(CORRIDOR)
    out = m.render({m.shop: "@"})
    assert out.splitlines()[1].startswith("#@") and "1 rooms" in out
