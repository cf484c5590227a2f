"""Experiment drivers: learning loop, transfer, delivery, entropy, merge, CDF,
and the model-count identity. Each driver takes an ExperimentConfig and is
deterministic given it (all randomness flows from ``config.seed``)."""
from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from ..construct import (
    BaseModelStore, PnTable, TaskSpec, build_delivery_pomdp, kb_entries, known_pairs_from_kb,
    merge_models, nav_policy, select_task, split_variables, transition_kb, true_model,
)
from ..dialog import (
    DialogPomdp, ObservationModel, RequestSpace, belief_entropy, init_belief, qa_cost_distribution,
    run_dialog, serves_chosen, uniform_belief,
)
from ..kb import ground, parse_program, pretty, update_pr_atoms
from ..nav import ACTIONS, GridMap, NavEnv, load_map, parse_map
from ..rmax import RmaxLearner, run_episodes, transfer_reward
from .config import ExperimentConfig


def _rng(cfg: ExperimentConfig, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *keys]))


def _ss(cfg: ExperimentConfig, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.seed, *keys])


def write_csv(rows: list, path) -> Path:
    """Rows are dicts (or dataclasses); columns follow the first row."""
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# learning loop

@dataclass
class LearnResult:
    program: object  # kb Program with learned pr-atoms
    history: list  # goal rooms, in order practiced
    episodes: list  # EpisodeStats per task
    known: list  # number of known pairs exported per task

    @property
    def kb_text(self) -> str:
        return pretty(self.program)


def run_learning_loop(cfg: ExperimentConfig, program=None, gmap: GridMap | None = None,
                      interrupt_after: int | None = None) -> LearnResult:
    """Select a task, build its model from the KB, learn with R-Max, write the
    known pairs back to the KB; repeat for ``cfg.learn.tasks`` tasks.

    ``interrupt_after`` stops the current (last) task after that many
    episodes; whatever is known by then still lands in the KB."""
    lc, ln = cfg.learn, cfg.learner
    gmap = gmap or load_map(lc.map)
    if program is None:
        program = parse_program(transition_kb(gmap.n_states, {}))
    br = gmap.blocking(lc.br)
    rooms = sorted(gmap.rooms)
    history, episodes, known = [], [], []
    for k in range(lc.tasks):
        task = select_task(rooms, history)
        split_variables([a.name for a in program.attributes], task)  # endogenous: curr_cell
        goals = gmap.rooms[task.goal]
        learner = RmaxLearner(gmap.n_states, len(ACTIONS), r_max=ln.r_max, m_known=ln.m_known,
                              replan_every=ln.replan_every, gamma=ln.gamma,
                              terminals=list(goals) + [gmap.lost], epsilon=ln.epsilon)
        learner.preload(known_pairs_from_kb(program), transfer_reward(-1.0, ln.r_max, goals))
        env = NavEnv(gmap, br, gmap.shop, goals, step_cap=lc.step_cap, seed=_ss(cfg, 1, k))
        n = lc.episodes_per_task
        last = k == lc.tasks - 1
        if interrupt_after is not None and last:
            n = min(n, interrupt_after)
        episodes.append(run_episodes(learner, env, n))
        pairs = learner.export_model()
        known.append(len(pairs))
        program = update_pr_atoms(program, kb_entries(pairs))
        history.append(task.goal)
    return LearnResult(program, history, episodes, known)


# ---------------------------------------------------------------------------
# transfer

def episodes_to_level(returns, window=10, level=0.9) -> int:
    """First episode (index of the smoothed curve) reaching ``level`` of the way
    from the curve minimum to its asymptote (mean of the last fifth)."""
    r = np.asarray(returns, dtype=float)
    sm = np.convolve(r, np.ones(window) / window, mode="valid")
    asym = sm[-max(1, len(sm) // 5):].mean()
    lo = sm.min()
    thr = lo + level * (asym - lo)
    return int(np.argmax(sm >= thr - 1e-12))


@dataclass
class TransferResult:
    map: str
    without: np.ndarray  # (seeds, episodes) returns
    with_: np.ndarray
    e_without: np.ndarray  # episodes to level, per seed
    e_with: np.ndarray
    p_value: float

    @property
    def gap(self) -> float:
        return float(self.e_without.mean() - self.e_with.mean())

    def curves(self, window=10) -> list:
        k = np.ones(window) / window
        a = np.convolve(self.without.mean(0), k, mode="valid")
        b = np.convolve(self.with_.mean(0), k, mode="valid")
        return [{"map": self.map, "episode": i + window - 1, "without": float(x), "with": float(y)}
                for i, (x, y) in enumerate(zip(a, b))]


def transfer_once(gmap: GridMap, cfg: ExperimentConfig, seed_ss, step_cap: int, n_target: int,
                  extract: bool = True):
    """One seed: learn source task, then the target task with and without the
    exported known pairs. Both target runs share the environment seed."""
    tc, ln = cfg.transfer, cfg.learner
    br = gmap.blocking(tc.br)
    src_goal, tgt_goal = gmap.rooms[tc.source], gmap.rooms[tc.target]
    kw = dict(r_max=ln.r_max, m_known=tc.m_known, replan_every=ln.replan_every, gamma=ln.gamma,
              epsilon=tc.epsilon)
    s_src, s_tgt = seed_ss.spawn(2)
    src = RmaxLearner(gmap.n_states, 4, terminals=list(src_goal) + [gmap.lost], **kw)
    run_episodes(src, NavEnv(gmap, br, gmap.shop, src_goal, step_cap=step_cap, seed=s_src), tc.source_episodes)
    pairs = src.export_model() if extract else []
    out = []
    for pre in (False, True):
        L = RmaxLearner(gmap.n_states, 4, terminals=list(tgt_goal) + [gmap.lost], **kw)
        if pre:
            L.preload(pairs, transfer_reward(-1.0, ln.r_max, tgt_goal))
        env = NavEnv(gmap, br, gmap.shop, tgt_goal, step_cap=step_cap, seed=s_tgt)
        out.append(run_episodes(L, env, n_target).returns)
    return out


def run_transfer_experiment(cfg: ExperimentConfig) -> list:
    tc = cfg.transfer
    results = []
    for mi, (name, cap, n_target) in enumerate(zip(tc.maps, tc.step_caps, tc.target_episodes)):
        gmap = load_map(name)
        wo, wi = [], []
        for seed in range(tc.seeds):
            a, b = transfer_once(gmap, cfg, _ss(cfg, 2, mi, seed), cap, n_target)
            wo.append(a)
            wi.append(b)
        wo, wi = np.array(wo), np.array(wi)
        e0 = np.array([episodes_to_level(r, tc.window, tc.level) for r in wo])
        e1 = np.array([episodes_to_level(r, tc.window, tc.level) for r in wi])
        p = float(stats.ttest_rel(e1, e0, alternative="less").pvalue) if tc.seeds > 1 else float("nan")
        results.append(TransferResult(name, wo, wi, e0, e1, p))
    return results


def check_transfer(results) -> list:
    out = []
    for r in results:
        out.append(Check(f"transfer faster on {r.map}", bool(r.e_with.mean() < r.e_without.mean() and r.p_value < 0.05),
                         f"episodes to 90%: {r.e_without.mean():.1f} -> {r.e_with.mean():.1f}, p={r.p_value:.2g}"))
    if len(results) >= 2:
        out.append(Check("transfer gap grows with map size", results[-1].gap > results[0].gap,
                         f"gap {results[0].gap:.1f} ({results[0].map}) vs {results[-1].gap:.1f} ({results[-1].map})"))
    return out


# ---------------------------------------------------------------------------
# delivery

@dataclass
class TrialRecord:
    trial: int
    br: float
    variant: str  # krr | static
    request: str
    served: str
    reward: float
    fulfilled: int
    qa_cost: float
    entropy: float
    turns: int


def load_kb(name: str):
    """Bundled KB by name (without extension) or a path."""
    p = Path(name)
    if p.exists():
        text = p.read_text()
    else:
        text = resources.files("krrl.data").joinpath(f"{name}.kb").read_text()
    return ground(parse_program(text))


def dialog_pomdp(pn: PnTable, cfg: ExperimentConfig, space: RequestSpace | None = None) -> DialogPomdp:
    dc = cfg.dialog
    om = ObservationModel(dc.p_correct, dc.confirm_flip)
    return build_delivery_pomdp(pn, space, om, ask_cost=dc.ask_cost, confirm_cost=dc.confirm_cost,
                                bonus=dc.bonus, penalty=dc.penalty, turn_cap=dc.turn_cap, depth=dc.depth)


@dataclass
class DeliverySummary:
    br: float
    variant: str
    reward: float
    fulfilled: float
    qa_cost: float
    n: int


def run_delivery_experiment(cfg: ExperimentConfig, gmap: GridMap | None = None):
    """KRR-RL plans with the model of the current blocking rate; the static
    agent plans with the br=static_br model and executes its (outdated)
    navigation policies in the current world. Trials are paired: both agents
    see the same request, user-answer stream and outcome draw.

    Returns (records, summaries, p_values by br)."""
    dc = cfg.delivery
    gmap = gmap or load_map(dc.map)
    space = RequestSpace()
    b0 = init_belief(load_kb(dc.kb), space)
    T_static = true_model(gmap, gmap.blocking(dc.static_br))
    static = dialog_pomdp(PnTable.from_model(gmap, T_static), cfg, space)
    records, summaries, pvals = [], [], {}
    for bi, br in enumerate(dc.brs):
        T = true_model(gmap, gmap.blocking(br))
        krr = dialog_pomdp(PnTable.from_model(gmap, T), cfg, space)
        static_true_td = dialog_pomdp(PnTable.evaluate(gmap, T_static, T), cfg, space).td
        agents = (("krr", krr, krr.td), ("static", static, static_true_td))
        by_variant = {name: [] for name, _, _ in agents}
        for trial in range(dc.trials):
            s_req, s_user = _ss(cfg, 3, bi, trial).spawn(2)
            g = np.random.default_rng(s_req)
            request = space.requests[int(g.choice(len(space), p=b0))]
            u = float(g.random())
            for name, pomdp, td in agents:
                o = run_dialog(pomdp, b0, request, np.random.default_rng(s_user), td, outcome_u=u)
                rec = TrialRecord(trial, br, name, ",".join(request), ",".join(o.served), o.reward,
                                  int(o.fulfilled), o.qa_cost, o.entropy, o.turns)
                records.append(rec)
                by_variant[name].append(rec)
        for name, recs in by_variant.items():
            summaries.append(DeliverySummary(br, name, float(np.mean([r.reward for r in recs])),
                                             float(np.mean([r.fulfilled for r in recs])),
                                             float(np.mean([r.qa_cost for r in recs])), len(recs)))
        k = np.array([r.reward for r in by_variant["krr"]])
        s = np.array([r.reward for r in by_variant["static"]])
        pvals[br] = float(stats.ttest_rel(k, s, alternative="greater").pvalue) if len(k) > 1 else float("nan")
    return records, summaries, pvals


def check_delivery(summaries, pvals) -> list:
    out = []
    by = {(s.br, s.variant): s for s in summaries}
    for br in sorted({s.br for s in summaries}):
        k, st = by[(br, "krr")], by[(br, "static")]
        ok = k.reward > st.reward and k.fulfilled >= st.fulfilled and k.qa_cost <= st.qa_cost + 0.5 and pvals[br] < 0.05
        out.append(Check(f"delivery br={br}", bool(ok),
                         f"reward {k.reward:.2f} vs {st.reward:.2f} (p={pvals[br]:.3g}), "
                         f"fulfilled {k.fulfilled:.3f} vs {st.fulfilled:.3f}, QA {k.qa_cost:.2f} vs {st.qa_cost:.2f}"))
    return out


def reward_identity(records, pomdp_bonus=80.0, penalty=80.0) -> bool:
    """reward = delivery outcome(s) - QA cost, exactly, for every record."""
    for r in records:
        outcome = pomdp_bonus if r.fulfilled else -penalty
        extra = -penalty if r.served != r.request else 0.0
        if r.reward != outcome + extra - r.qa_cost:
            return False
    return True


# ---------------------------------------------------------------------------
# entropy study

def sample_beliefs(n: int, size: int, rng, sampler="peaked", eps_max=0.3, alpha=1.0) -> np.ndarray:
    """Random beliefs over ``size`` requests.

    ``dirichlet``: symmetric Dirichlet(alpha). ``peaked``: a uniformly chosen
    request keeps mass 1 - eps, eps ~ U(0, eps_max), and the rest is spread by
    a Dirichlet(alpha) draw (so the planner sees beliefs it would serve on)."""
    if sampler == "dirichlet":
        return rng.dirichlet(np.full(size, alpha), n)
    eps = rng.uniform(0.0, eps_max, n)
    B = rng.dirichlet(np.full(size, alpha), n) * eps[:, None]
    B[np.arange(n), rng.integers(size, size=n)] += 1.0 - eps
    return B


@dataclass
class EntropyCell:
    room: str
    br: float
    count: int
    mean: float
    std: float
    max: float


def run_entropy_study(cfg: ExperimentConfig, gmap: GridMap | None = None) -> list:
    ec = cfg.entropy
    gmap = gmap or load_map(ec.map)
    space = RequestSpace()
    rooms = np.array([r[1] for r in space.requests])
    B = sample_beliefs(ec.beliefs, len(space), _rng(cfg, 4), ec.sampler, ec.eps_max, ec.alpha)
    H = np.array([belief_entropy(b) for b in B])
    cells = []
    for br in ec.brs:
        pomdp = dialog_pomdp(PnTable.from_model(gmap, true_model(gmap, gmap.blocking(br))), cfg, space)
        serve = serves_chosen(B, pomdp)
        # serve values are the same at every depth; ties go to the lowest index
        target = rooms[np.argmax(B @ pomdp.serve_utility(), axis=1)]
        for room in ec.rooms:
            h = H[serve & (target == room)]
            cells.append(EntropyCell(room, br, len(h), float(h.mean()) if len(h) else float("nan"),
                                     float(h.std()) if len(h) else float("nan"),
                                     float(h.max()) if len(h) else float("nan")))
    return cells


def check_entropy(cells) -> list:
    by = {(c.room, c.br): c.mean for c in cells}
    rooms = list(dict.fromkeys(c.room for c in cells))
    brs = sorted({c.br for c in cells})
    out = []
    for room in rooms:
        m = [by[(room, b)] for b in brs]
        out.append(Check(f"entropy decreasing in br ({room})", all(x > y for x, y in zip(m, m[1:])),
                         " > ".join(f"{x:.4f}" for x in m)))
    order = [r for r in ("room5", "room2", "room1") if r in rooms]
    for b in brs:
        m = [by[(r, b)] for r in order]
        out.append(Check(f"entropy room order at br={b}", all(x <= y for x, y in zip(m, m[1:])),
                         " <= ".join(f"{r} {x:.4f}" for r, x in zip(order, m))))
    return out


# ---------------------------------------------------------------------------
# adaptive merging

@dataclass
class MergeResult:
    settings: list
    merged_success: np.ndarray  # per trial, 0/1
    baseline_success: np.ndarray
    merged_cost: np.ndarray  # steps per trial
    baseline_cost: np.ndarray
    point_mass_error: float  # max |merge([s]) - model_s| over settings

    def box(self) -> list:
        rows = []
        for name, c in (("merged", self.merged_cost), ("baseline", self.baseline_cost)):
            q = np.percentile(c, [0, 25, 50, 75, 100])
            rows.append(dict(agent=name, min=q[0], q1=q[1], median=q[2], q3=q[3], max=q[4],
                             success=float((self.merged_success if name == "merged" else self.baseline_success).mean())))
        return rows


def setting_models(gmap: GridMap, via_kb: bool = True) -> BaseModelStore:
    """One navigation model per time of day, optionally routed through the KB."""
    exo = {"time": list(gmap.times)}
    models = {(t,): true_model(gmap, gmap.blocking(t)) for t in gmap.times}
    if not via_kb:
        return BaseModelStore(exo, models)
    gp = ground(parse_program(transition_kb(gmap.n_states, models, exo)))
    split = split_variables(list(gp.attr_index), TaskSpec("navigation"))
    return BaseModelStore.from_kb(gp, split, exo)


def _rollout(env: NavEnv, policy) -> tuple:
    s = env.reset()
    while not env.done:
        s, _, _ = env.step(int(max(policy[s], 0)))
    return int(s in env.goals), env.steps


def run_merge_experiment(cfg: ExperimentConfig, gmap: GridMap | None = None) -> MergeResult:
    mc = cfg.merge
    gmap = gmap or load_map(mc.map)
    store = setting_models(gmap, mc.via_kb)
    settings = store.settings
    goals = gmap.rooms[mc.goal]
    own = {s: nav_policy(store.models[s], goals, gmap.lost)[1] for s in settings}
    merged_pi = {}
    envs = {s: NavEnv(gmap, gmap.blocking(s[0]), gmap.shop, goals, seed=0) for s in settings}
    rng = _rng(cfg, 5)
    ms, bs, mcost, bcost = [], [], [], []
    for trial in range(mc.trials):
        pair = tuple(sorted(rng.choice(len(settings), 2, replace=False)))
        true = settings[pair[rng.integers(2)]]
        if pair not in merged_pi:
            merged_pi[pair] = nav_policy(store.merged([settings[i] for i in pair]), goals, gmap.lost)[1]
        pick = settings[pair[rng.integers(2)]]
        s_m, s_b = _ss(cfg, 5, trial).spawn(2)
        ok, n = _rollout(envs[true].clone(s_m), merged_pi[pair])
        ms.append(ok)
        mcost.append(n)
        ok, n = _rollout(envs[true].clone(s_b), own[pick])
        bs.append(ok)
        bcost.append(n)
    err = max(float(np.abs(store.merged([s], [1.0]) - store.models[s]).max()) for s in settings)
    return MergeResult(settings, np.array(ms), np.array(bs), np.array(mcost), np.array(bcost), err)


def check_merge(r: MergeResult) -> list:
    gap = r.merged_success.mean() - r.baseline_success.mean()
    return [Check("merged beats random policy choice by 20pp", bool(gap >= 0.20),
                  f"{r.merged_success.mean():.3f} vs {r.baseline_success.mean():.3f}"),
            Check("point-mass prior reproduces the setting model", r.point_mass_error <= 1e-12,
                  f"max error {r.point_mass_error:.2g}")]


# ---------------------------------------------------------------------------
# model-count identity

TWO_AREA_MAP = """\
#########
#S.a.b.1#
#.......#
#########
"""


def run_model_count_check(n_values: int = 2, tol: float = 1e-9) -> list:
    """Two exogenous variables with ``n_values`` values each, one per blocking
    area. Every nonempty set of settings is served by merging the stored base
    models; KB marginal construction is compared where the set is an event."""
    gmap = parse_map(TWO_AREA_MAP)
    levels = np.linspace(0.1, 0.9, n_values)
    vals = [f"v{i}" for i in range(n_values)]
    exo = {"ea": vals, "eb": vals}
    truth = {(x, y): true_model(gmap, {"a": levels[i], "b": levels[j]})
             for (i, x), (j, y) in itertools.product(enumerate(vals), repeat=2)}
    gp = ground(parse_program(transition_kb(gmap.n_states, truth, exo)))
    split = split_variables(list(gp.attr_index), TaskSpec("navigation"))
    store = BaseModelStore.from_kb(gp, split, exo)
    out = [Check("base models stored", len(store) == n_values ** 2, f"{len(store)} base models")]
    worst_row, worst_kb, n_sets = 0.0, 0.0, 0
    from ..construct import construct_model

    for k in range(1, len(store.settings) + 1):
        for subset in itertools.combinations(store.settings, k):
            M = store.merged(subset)
            n_sets += 1
            worst_row = max(worst_row, float(np.abs(M.sum(axis=2) - 1.0).max()))
            # events expressible as evidence on one variable or none
            for d, name in enumerate(exo):
                for v in vals:
                    if set(subset) == {s for s in store.settings if s[d] == v}:
                        T = construct_model(gp, split, evidence=[f"{name}={v}"])
                        worst_kb = max(worst_kb, float(np.abs(T - M).max()))
            if len(subset) == len(store.settings):
                worst_kb = max(worst_kb, float(np.abs(construct_model(gp, split) - M).max()))
    out.append(Check("every uncertainty set served by stored models",
                     store.used <= set(store.models) and len(store.models) == n_values ** 2,
                     f"{n_sets} sets, {len(store.used)} distinct base models used"))
    out.append(Check("merged rows sum to 1", worst_row <= tol, f"max deviation {worst_row:.2g}"))
    out.append(Check("merge equals KB marginalization", worst_kb <= tol, f"max deviation {worst_kb:.2g}"))
    return out


# ---------------------------------------------------------------------------
# dialog-completion CDFs

@dataclass
class CdfCurve:
    room: str
    br: float
    grid: np.ndarray
    cdf: np.ndarray
    dropped: float  # probability mass of pruned dialog paths
    mean_cost: float


def run_cdf_report(cfg: ExperimentConfig, gmap: GridMap | None = None) -> list:
    """Exact QA-cost distributions for requests to each room (uniform over
    item and person, uniform initial belief), turned into CDFs on a grid."""
    cc = cfg.cdf
    gmap = gmap or load_map(cc.map)
    space = RequestSpace()
    b0 = uniform_belief(space)
    top = cfg.dialog.turn_cap * max(cfg.dialog.ask_cost, cfg.dialog.confirm_cost)
    grid = np.arange(0.0, top + cc.grid_step / 2, cc.grid_step)
    curves = []
    for br in cc.brs:
        pomdp = dialog_pomdp(PnTable.from_model(gmap, true_model(gmap, gmap.blocking(br))), cfg, space)
        cache: dict = {}
        for room in cc.rooms:
            cdf = np.zeros(len(grid))
            dropped = mean = 0.0
            reqs = [r for r in space.requests if r[1] == room]
            for req in reqs:
                dist, d = qa_cost_distribution(pomdp, b0, req, cc.prune, cache)
                dropped += d / len(reqs)
                for c, p in dist.items():
                    cdf += p / len(reqs) * (grid >= c - 1e-9)
                    mean += c * p / len(reqs)
            curves.append(CdfCurve(room, br, grid, cdf, dropped, mean))
    return curves


def check_cdf(curves) -> list:
    by = {(c.room, c.br): c for c in curves}
    out = [Check("CDFs monotone and bounded",
                 all(np.all(np.diff(c.cdf) >= -1e-12) and c.cdf[-1] <= 1 + 1e-12 for c in curves),
                 f"max dropped mass {max(c.dropped for c in curves):.3g}")]
    brs = sorted({c.br for c in curves})
    if ("room2", brs[0]) in by and ("room2", brs[-1]) in by and len(brs) > 1:
        lo, hi = by[("room2", brs[0])], by[("room2", brs[-1])]
        d = float((hi.cdf - lo.cdf).max())
        out.append(Check(f"room2 CDF at br={brs[-1]} below br={brs[0]}", d <= 1e-12, f"max excess {d:.3g}"))
    for br in brs:
        if ("room4", br) in by and ("room2", br) in by:
            d = float((by[("room2", br)].cdf - by[("room4", br)].cdf).max())
            out.append(Check(f"room4 completes at lower QA cost than room2 (br={br})", d <= 1e-12,
                             f"max excess {d:.3g}"))
    return out
