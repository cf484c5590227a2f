"""Command-line entry point: ``krrl <command> [options]``.

Exit codes: 0 success, 2 configuration/input error, 3 failed check (--check).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..construct import PnTable, true_model
from ..dialog import (
    DialogError, RequestSpace, belief_bars, belief_update, init_belief, plan_dialog_action, run_dialog,
)
from ..kb import KBError, ground, parse_program, pretty, query
from ..nav import MapError, load_map
from . import experiments as ex
from .config import ConfigError, load_config, make_config, to_dict

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


def _config(args):
    if args.config:
        cfg = load_config(args.config, args.profile)
    else:
        cfg = make_config(args.profile or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    return cfg.validate()


def _out(cfg) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _report(checks, args) -> int:
    for c in checks:
        print(c.line())
    if args.check and not all(c.ok for c in checks):
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands

def cmd_kb(args, cfg):
    text = Path(args.file).read_text()
    prog = parse_program(text)
    gp = ground(prog)
    if args.action == "check":
        print(f"ok: {len(prog.sorts)} sorts, {len(gp.attr_index)} ground attributes, {len(prog.pr_atoms)} pr-atoms")
    elif args.action == "query":
        if not args.target:
            raise ConfigError("kb query needs a target literal")
        print(f"{query(gp, args.target, args.given or []):.12g}")
    else:
        print(pretty(prog), end="")
    return EXIT_OK


def cmd_nav(args, cfg):
    gmap = load_map(args.map)
    print(gmap.render())
    if args.br is not None:
        pn = PnTable.from_model(gmap, true_model(gmap, gmap.blocking(args.br)))
        for (a, b), p in sorted(pn.values.items()):
            print(f"P({a} -> {b}) = {p:.4f}")
    return EXIT_OK


def cmd_construct(args, cfg):
    gmap = load_map(args.map)
    store = ex.setting_models(gmap, via_kb=True)
    if args.prior:
        prior = json.loads(args.prior)
        subset = [(k,) for k in prior]
        T = store.merged(subset, [prior[k] for k in prior])
    elif args.given:
        T = store.merged([(args.given,)])
    else:
        T = store.merged(store.settings)
    path = _out(cfg) / "transition.csv"
    rows = [dict(cell=s, move=m, next=int(t), prob=float(T[s, a, t]))
            for s in range(T.shape[0]) for a, m in enumerate(("up", "down", "left", "right"))
            for t in np.flatnonzero(T[s, a])]
    ex.write_csv(rows, path)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_learn(args, cfg):
    res = ex.run_learning_loop(cfg, interrupt_after=args.interrupt_after)
    out = _out(cfg)
    (out / "learned.kb").write_text(res.kb_text)
    for goal, st, k in zip(res.history, res.episodes, res.known):
        print(f"task {goal}: {len(st.returns)} episodes, last-10 mean return {st.returns[-10:].mean():.1f}, "
              f"{k} known pairs")
    print(f"wrote {out / 'learned.kb'}")
    return EXIT_OK


def cmd_transfer(args, cfg):
    results = ex.run_transfer_experiment(cfg)
    rows = [row for r in results for row in r.curves(cfg.transfer.window)]
    ex.write_csv(rows, _out(cfg) / "transfer_curves.csv")
    ex.write_csv([dict(map=r.map, seed=i, without=int(a), with_extraction=int(b))
                  for r in results for i, (a, b) in enumerate(zip(r.e_without, r.e_with))],
                 _out(cfg) / "transfer_episodes.csv")
    return _report(ex.check_transfer(results), args)


def cmd_delivery(args, cfg):
    records, summaries, pvals = ex.run_delivery_experiment(cfg)
    ex.write_csv(records, _out(cfg) / "delivery_trials.csv")
    ex.write_csv(summaries, _out(cfg) / "delivery_summary.csv")
    for s in summaries:
        print(f"br={s.br} {s.variant:>6}: reward {s.reward:8.2f} fulfilled {s.fulfilled:.3f} QA {s.qa_cost:.2f}")
    return _report(ex.check_delivery(summaries, pvals), args)


def cmd_entropy(args, cfg):
    cells = ex.run_entropy_study(cfg)
    ex.write_csv(cells, _out(cfg) / "entropy.csv")
    for c in cells:
        print(f"{c.room} br={c.br}: n={c.count} mean {c.mean:.4f} std {c.std:.4f} max {c.max:.4f}")
    return _report(ex.check_entropy(cells), args)


def cmd_merge(args, cfg):
    r = ex.run_merge_experiment(cfg)
    ex.write_csv(r.box(), _out(cfg) / "merge_box.csv")
    return _report(ex.check_merge(r), args)


def cmd_cdf(args, cfg):
    curves = ex.run_cdf_report(cfg)
    rows = [dict(room=c.room, br=c.br, qa_cost=float(x), completion=float(y))
            for c in curves for x, y in zip(c.grid, c.cdf)]
    ex.write_csv(rows, _out(cfg) / "cdf.csv")
    for c in curves:
        print(f"{c.room} br={c.br}: mean QA {c.mean_cost:.2f}, dropped mass {c.dropped:.3g}")
    return _report(ex.check_cdf(curves), args)


def cmd_modelcount(args, cfg):
    return _report(ex.run_model_count_check(), args)


def cmd_dialog(args, cfg):
    gmap = load_map(cfg.delivery.map)
    br = cfg.delivery.static_br if args.br is None else args.br
    space = RequestSpace()
    pomdp = ex.dialog_pomdp(PnTable.from_model(gmap, true_model(gmap, gmap.blocking(br))), cfg, space)
    b0 = init_belief(ex.load_kb(cfg.delivery.kb), space)
    if args.interactive:
        return _repl(pomdp, b0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9]))
    w = sys.stdout
    w.write("trial,request,served,reward,fulfilled,qa_cost,turns\n")
    for i in range(args.trials):
        req = space.requests[int(rng.choice(len(space), p=b0))]
        o = run_dialog(pomdp, b0, req, rng)
        w.write(f"{i},{'/'.join(req)},{'/'.join(o.served)},{o.reward!r},{int(o.fulfilled)},{o.qa_cost!r},{o.turns}\n")
    return EXIT_OK


def _repl(pomdp, b0) -> int:
    b, turns = b0.copy(), 0
    print("Answer the robot's questions; 'quit' leaves.")
    while True:
        print(belief_bars(b, pomdp.space))
        a = plan_dialog_action(b, pomdp, turns)
        turns += 1
        act = pomdp.actions[a]
        if act.kind == "serve":
            print(f"robot: I will deliver {act.value[0]} to {act.value[2]} in {act.value[1]}.")
            return EXIT_OK
        if act.kind == "ask":
            prompt = f"robot: which {('item', 'room', 'person')[act.dim]} is it? "
        else:
            prompt = f"robot: is it {act.value}? (yes/no) "
        while True:
            try:
                ans = input(prompt).strip()
            except EOFError:
                return EXIT_OK
            if ans == "quit":
                return EXIT_OK
            if ans in pomdp.answers(a):
                break
            print(f"  please answer one of: {', '.join(pomdp.answers(a))}")
        b = belief_update(b, pomdp, a, ans)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--profile", choices=["desk", "paper"], help="trial-count profile")
    common.add_argument("--out", help="output directory for CSV files")
    common.add_argument("--check", action="store_true", help="exit 3 if an acceptance check fails")

    p = argparse.ArgumentParser(prog="krrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kb", parents=[common], help="check, print or query a knowledge base")
    k.add_argument("action", choices=["check", "print", "query"])
    k.add_argument("file")
    k.add_argument("target", nargs="?")
    k.add_argument("--given", nargs="*", help="evidence literals")

    n = sub.add_parser("nav", parents=[common], help="render a map, optionally with success probabilities")
    n.add_argument("map", nargs="?", default="fig4")
    n.add_argument("--br", type=float)

    c = sub.add_parser("construct", parents=[common], help="emit a constructed or merged transition table")
    c.add_argument("--map", default="fig4")
    c.add_argument("--given", help="time of day, e.g. noon")
    c.add_argument("--prior", help='JSON prior over times, e.g. \'{"morning": 0.5, "noon": 0.5}\'')

    le = sub.add_parser("learn", parents=[common], help="run the task-selection/learning loop")
    le.add_argument("--interrupt-after", type=int, help="stop the last task after this many episodes")

    for name, helptext in (("transfer", "transfer experiment"), ("delivery", "delivery experiment"),
                           ("entropy", "entropy study"), ("merge", "adaptive merging experiment"),
                           ("cdf", "dialog-completion CDFs"), ("modelcount", "model-count identity")):
        sub.add_parser(name, parents=[common], help=helptext)

    d = sub.add_parser("dialog", parents=[common], help="interactive or simulated dialogs")
    mode = d.add_mutually_exclusive_group(required=True)
    mode.add_argument("--interactive", action="store_true")
    mode.add_argument("--simulate", action="store_true")
    d.add_argument("--trials", type=int, default=10)
    d.add_argument("--br", type=float)
    return p


COMMANDS = {
    "kb": cmd_kb, "nav": cmd_nav, "construct": cmd_construct, "learn": cmd_learn,
    "transfer": cmd_transfer, "delivery": cmd_delivery, "entropy": cmd_entropy, "merge": cmd_merge,
    "cdf": cmd_cdf, "modelcount": cmd_modelcount, "dialog": cmd_dialog,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if getattr(args, "trials", 1) < 1:
            raise ConfigError("--trials must be at least 1")
        t0 = time.time()
        code = COMMANDS[args.command](args, cfg)
        if args.command not in ("dialog", "kb"):
            (Path(cfg.out) / "config.json").parent.mkdir(parents=True, exist_ok=True)
            (Path(cfg.out) / "config.json").write_text(json.dumps(to_dict(cfg), indent=2) + "\n")
            print(f"[{args.command}] {time.time() - t0:.1f}s", file=sys.stderr)
        return code
    except (ConfigError, MapError, KBError, DialogError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
