"""Grid-world navigation with rooms, a shop and blocking areas.

Map files are rectangular character grids::

    br a morning 0.8        # header: blocking rate of area a at time "morning"
    #######
    #S..a1#
    #######

``.`` free, ``#`` wall, ``S`` shop, ``1``-``5`` room cells, ``a``-``d``
blocking-area cells. Every non-wall cell is a navigation state; one extra
absorbing state ``LOST`` models the robot getting irrecoverably stuck.

Moving into a blocking-area cell succeeds with probability
``p_base * (1 - br)``; a fraction ``trap`` of the blocked mass
(``trap * p_base * br``) sends the robot to LOST. The remaining mass is split
evenly over staying put and the two lateral neighbours; laterals into a
wall become "stay", and a lateral slip into a blocking area is itself
blocked with probability br (that share also stays).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import numpy as np

from .mdp import Mdp

ACTIONS = ("up", "down", "left", "right")
DELTAS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
LATERALS = {"up": ("left", "right"), "down": ("right", "left"),
            "left": ("down", "up"), "right": ("up", "down")}
ROOM_CHARS = "12345"
AREA_CHARS = "abcd"


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class GridMap:
    grid: tuple  # rows of characters
    br_table: dict = field(default_factory=dict)  # time -> {area: br}
    name: str = "map"

    def __post_init__(self):
        cells = [(r, c) for r, row in enumerate(self.grid) for c, ch in enumerate(row) if ch != "#"]
        object.__setattr__(self, "cells", tuple(cells))
        object.__setattr__(self, "index", {rc: i for i, rc in enumerate(cells)})
        rooms, areas = {}, {}
        shop = []
        for i, (r, c) in enumerate(cells):
            ch = self.grid[r][c]
            if ch == "S":
                shop.append(i)
            elif ch in ROOM_CHARS:
                rooms.setdefault(f"room{ch}", []).append(i)
            elif ch in AREA_CHARS:
                areas.setdefault(ch, []).append(i)
            elif ch != ".":
                raise MapError(f"unknown map character {ch!r} at row {r}, column {c}")
        if len(shop) != 1:
            raise MapError(f"map must contain exactly one shop, found {len(shop)}")
        object.__setattr__(self, "shop", shop[0])
        object.__setattr__(self, "rooms", {k: tuple(v) for k, v in sorted(rooms.items())})
        object.__setattr__(self, "areas", {k: tuple(v) for k, v in sorted(areas.items())})
        area_of = np.full(len(cells), "", dtype=object)
        for k, v in self.areas.items():
            area_of[list(v)] = k
        object.__setattr__(self, "area_of", tuple(area_of))
        self._validate()
        dist = self.bfs(self.shop)
        doors = {}
        for name, members in self.rooms.items():
            doors[name] = min(members, key=lambda i: (dist[i], i))
        object.__setattr__(self, "doors", doors)

    @property
    def height(self) -> int:
        return len(self.grid)

    @property
    def width(self) -> int:
        return len(self.grid[0])

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def lost(self) -> int:
        """Index of the absorbing LOST state."""
        return len(self.cells)

    @property
    def n_states(self) -> int:
        return len(self.cells) + 1

    @property
    def times(self) -> tuple:
        return tuple(self.br_table)

    def neighbour(self, i: int, move: str):
        r, c = self.cells[i]
        dr, dc = DELTAS[move]
        return self.index.get((r + dr, c + dc))

    def bfs(self, start: int) -> np.ndarray:
        dist = np.full(self.n_cells, np.inf)
        dist[start] = 0
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for m in ACTIONS:
                j = self.neighbour(i, m)
                if j is not None and dist[j] == np.inf:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    def _connected(self, members) -> bool:
        members = set(members)
        start = next(iter(members))
        seen = {start}
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for m in ACTIONS:
                j = self.neighbour(i, m)
                if j in members and j not in seen:
                    seen.add(j)
                    queue.append(j)
        return seen == members

    def _validate(self):
        widths = {len(row) for row in self.grid}
        if len(widths) != 1:
            raise MapError("map rows must all have the same width")
        for kind, groups in (("room", self.rooms), ("blocking area", self.areas)):
            for name, members in groups.items():
                if not self._connected(members):
                    raise MapError(f"{kind} {name} is not connected")
        dist = self.bfs(self.shop)
        for name, members in self.rooms.items():
            if not np.isfinite(dist[list(members)]).any():
                raise MapError(f"{name} is not reachable from the shop")
        for time, table in self.br_table.items():
            for area, v in table.items():
                if area not in self.areas:
                    raise MapError(f"blocking rate given for unknown area {area!r}")
                if not 0.0 <= v <= 1.0:
                    raise MapError(f"blocking rate {v} for area {area} outside [0, 1]")

    def blocking(self, setting=None) -> dict:
        """Blocking rates per area: a time name from the header, a number
        applied to every area, or an explicit {area: br} dict."""
        if setting is None:
            return {a: 0.0 for a in self.areas}
        if isinstance(setting, dict):
            out = {a: 0.0 for a in self.areas}
            out.update(setting)
            return out
        if isinstance(setting, str):
            if setting not in self.br_table:
                raise MapError(f"no blocking table for time {setting!r}")
            return self.blocking(self.br_table[setting])
        return {a: setting for a in self.areas}

    def render(self, marks: dict | None = None) -> str:
        rows = [list(r) for r in self.grid]
        for i, ch in (marks or {}).items():
            r, c = self.cells[i]
            rows[r][c] = ch
        lines = ["".join(r) for r in rows]
        summary = (f"{self.width}x{self.height}, {len(self.rooms)} rooms, "
                   f"{len(self.areas)} blocking areas, shop at {self.cells[self.shop]}")
        return "\n".join(lines + [summary])


def parse_map(text: str, name: str = "map") -> GridMap:
    br_table: dict = {}
    grid = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip()
        if not line:
            continue
        if line.startswith("br "):
            parts = line.split()
            if len(parts) != 4:
                raise MapError(f"line {n}: expected 'br <area> <time> <value>'")
            try:
                value = float(parts[3])
            except ValueError:
                raise MapError(f"line {n}: bad blocking rate {parts[3]!r}") from None
            br_table.setdefault(parts[2], {})[parts[1]] = value
            continue
        bad = set(line) - set(".#S" + ROOM_CHARS + AREA_CHARS)
        if bad:
            raise MapError(f"line {n}: unexpected characters {sorted(bad)}")
        grid.append(line)
    if not grid:
        raise MapError("empty map")
    return GridMap(tuple(grid), br_table, name)


def load_map(path_or_name: str) -> GridMap:
    """Load a map file, or one of the bundled maps by name (``fig4``, ``fig4_50``)."""
    if "/" not in path_or_name and not path_or_name.endswith(".map"):
        text = resources.files("krrl.data").joinpath(f"{path_or_name}.map").read_text()
        return parse_map(text, path_or_name)
    with open(path_or_name) as fh:
        return parse_map(fh.read(), path_or_name)


# ---------------------------------------------------------------------------
# dynamics

def true_transition(gmap: GridMap, br: dict, cell: int, move: str, p_base=0.8, trap=0.1) -> dict:
    """Distribution over next states (cell indices, or gmap.lost)."""
    if cell == gmap.lost:
        return {gmap.lost: 1}
    target = gmap.neighbour(cell, move)
    if target is None:
        return {cell: 1}
    out = {}
    area = gmap.area_of[target]
    if area:
        b = br.get(area, 0)
        p = p_base * (1 - b)
        lost = trap * p_base * b
    else:
        p, lost = p_base, 0
    residual = 1 - p - lost
    out[target] = p
    if lost:
        out[gmap.lost] = lost
    share = residual / 3
    out[cell] = out.get(cell, 0) + share
    for side in LATERALS[move]:
        dest = gmap.neighbour(cell, side)
        if dest is None:
            out[cell] += share
            continue
        # slipping sideways into a blocking area is impeded like a direct move
        b = br.get(gmap.area_of[dest], 0) if gmap.area_of[dest] else 0
        out[dest] = out.get(dest, 0) + share * (1 - b)
        out[cell] += share * b
    return {k: v for k, v in out.items() if v != 0}


def exact_transition(gmap: GridMap, br: dict, cell: int, move: str, p_base="4/5", trap="1/10") -> dict:
    """true_transition in rational arithmetic (sums to exactly 1)."""
    br = {k: Fraction(str(v)) for k, v in br.items()}
    return true_transition(gmap, br, cell, move, Fraction(p_base), Fraction(trap))


@dataclass(frozen=True)
class Dynamics:
    """Padded successor arrays of the true dynamics: shape (n_states, 4, K)."""

    succ: np.ndarray
    prob: np.ndarray
    cum: np.ndarray


def dynamics(gmap: GridMap, br: dict, p_base=0.8, trap=0.1) -> Dynamics:
    S, A, K = gmap.n_states, len(ACTIONS), 5
    succ = np.zeros((S, A, K), dtype=np.int64)
    prob = np.zeros((S, A, K))
    for s in range(S):
        for a, m in enumerate(ACTIONS):
            dist = true_transition(gmap, br, s, m, p_base, trap)
            for k, (t, p) in enumerate(sorted(dist.items())):
                succ[s, a, k] = t
                prob[s, a, k] = p
            succ[s, a, len(dist):] = succ[s, a, 0]
    cum = np.cumsum(prob, axis=2)
    cum /= cum[..., -1:]
    return Dynamics(succ, prob, cum)


def nav_mdp(gmap: GridMap, br: dict, goals, p_base=0.8, trap=0.1, step_cost=-1.0,
            r_max=100.0, gamma=0.95, dyn: Dynamics | None = None) -> Mdp:
    """True navigation MDP toward ``goals``; goal cells and LOST are terminal.
    Expected reward: step cost, +r_max on entering a goal, -r_max on getting lost."""
    dyn = dyn or dynamics(gmap, br, p_base, trap)
    goal_mask = np.zeros(gmap.n_states, dtype=bool)
    goal_mask[list(goals)] = True
    reward = step_cost + r_max * (dyn.prob * goal_mask[dyn.succ]).sum(axis=2)
    lost_mask = np.zeros(gmap.n_states, dtype=bool)
    lost_mask[gmap.lost] = True
    reward -= r_max * (dyn.prob * lost_mask[dyn.succ]).sum(axis=2)
    terminals = goal_mask | lost_mask
    return Mdp.from_successors(dyn.succ, dyn.prob, reward, terminals=terminals, gamma=gamma)


class NavEnv:
    """Episodic navigation task: start cell to any goal cell, seeded sampling.

    Rewards: ``step_cost`` per step, plus ``r_max`` on reaching a goal and
    ``-r_max`` on getting lost or on exhausting the step cap (``truncated``).
    """

    def __init__(self, gmap: GridMap, br: dict, start: int, goals, p_base=0.8, trap=0.1,
                 step_cap=200, step_cost=-1.0, r_max=100.0, seed=None, dyn: Dynamics | None = None):
        self.gmap = gmap
        self.br = dict(br)
        self.start = start
        self.goals = frozenset(goals)
        self.step_cap = step_cap
        self.step_cost = step_cost
        self.r_max = r_max
        self.dyn = dyn or dynamics(gmap, br, p_base, trap)
        self.rng = np.random.default_rng(seed)
        self.cell = None
        self.steps = 0
        self.done = True
        self.truncated = False

    def clone(self, seed) -> "NavEnv":
        env = object.__new__(NavEnv)
        env.__dict__.update(self.__dict__)
        env.rng = np.random.default_rng(seed)
        env.done = True
        return env

    def reset(self, start: int | None = None) -> int:
        self.cell = self.start if start is None else start
        self.steps = 0
        self.done = False
        self.truncated = False
        return self.cell

    def sample_next(self, cell: int, a: int) -> int:
        u = self.rng.random()
        k = int(np.searchsorted(self.dyn.cum[cell, a], u, side="right"))
        return int(self.dyn.succ[cell, a, k])

    def step(self, a):
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        if isinstance(a, str):
            a = ACTIONS.index(a)
        nxt = self.sample_next(self.cell, a)
        self.cell = nxt
        self.steps += 1
        reward = self.step_cost
        if nxt in self.goals:
            reward += self.r_max
            self.done = True
        elif nxt == self.gmap.lost:
            reward -= self.r_max
            self.done = True
        elif self.steps >= self.step_cap:
            reward -= self.r_max
            self.done = True
            self.truncated = True
        return nxt, reward, self.done
