"""Command line entry point: ``costate-lab <command> ...``."""

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import analysis as an
from . import grpo
from . import harness as hz
from . import readiness as rd
from . import rollout as ro
from . import svg
from . import transformer as tf
from . import verify as vf
from .rng import stream


def _num(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(buf.getvalue())


def _dump(args, tape):
    if args.dump_tape:
        tape.dump(args.dump_tape)


def _check_table(rows, args):
    width = max(len(f"{r.item}/{r.check}") for r in rows)
    for r in rows:
        print(f"{r.item + '/' + r.check:<{width}}  {r.value:12.4g} < {r.threshold:<8g} {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in rows)
    print(f"{sum(r.passed for r in rows)}/{len(rows)} checks passed")
    if args.csv:
        _write_csv(args.csv, ["suite", "item", "check", "value", "threshold", "passed"],
                   [[r.suite, r.item, r.check, _num(r.value), _num(r.threshold), int(r.passed)] for r in rows])
    return 0 if ok else 1


# ----------------------------------------------------------------- verify


def cmd_verify_continuous(args):
    envs = vf.ENVS if args.env is None else (args.env,)
    rows = vf.continuous_checks(envs, args.samples, args.seed)
    if args.dump_tape:
        env, pol, th = ro.make_env(envs[0], seed=args.seed)
        _dump(args, ro.rollout(env, pol, th, rng=stream(args.seed, "dump"), n=1).tape)
    return _check_table(rows, args)


def cmd_verify_bridge(args):
    return _check_table(vf.bridge_checks(args.n, args.seed), args)


# ------------------------------------------------------------------ model


def cmd_model_inspect(args):
    ck = tf.load_checkpoint(args.ckpt)
    cfg = ck.config
    print(f"checkpoint {args.ckpt}")
    for k, v in vars(cfg).items():
        print(f"  {k} = {v}")
    print(f"pretrain_step {ck.pretrain_step}")
    print(f"parameters {ck.params.size}  global norm {np.linalg.norm(ck.params):.6g}")
    for name, arr in ck.arrays().items():
        print(f"  {name:<16} {str(arr.shape):<16} norm {np.linalg.norm(arr):.6g}")
    if args.dump_tape:
        tr = tf.forward(ck, [0], 1, rng=stream(0, "dump"))
        _dump(args, tr.tape)
    return 0


# --------------------------------------------------------------------- rl


def cmd_rl_run(args):
    ck = tf.load_checkpoint(args.ckpt)
    task = hz.CopyTask()
    cfg = grpo.GrpoConfig(eps=args.eps, beta=args.beta, group_size=args.group, lr=args.lr, steps=args.steps,
                          prompts_per_step=args.prompts)

    def prompt_fn(k):
        return hz.gen_copy_prompts(cfg.prompts_per_step, stream(args.seed, "rl-prompts", k), task)[0]

    def reward_fn(i, q, c):
        return float(int(c[0]) == task.label_of(q))

    res = grpo.run(ck, prompt_fn, reward_fn, cfg, stream(args.seed, "rl"), 1)
    tf.save_checkpoint(res.checkpoint, args.out)
    rows = [[k + 1] + [_num(getattr(st, f)) for f in STAT_FIELDS] for k, st in enumerate(res.stats)]
    if args.csv:
        _write_csv(args.csv, ["step"] + list(STAT_FIELDS), rows)
    last = res.stats[-1]
    print(f"{args.steps} GRPO steps; final mean reward {last.mean_reward:.4f}; saved {args.out}")
    return 0


STAT_FIELDS = ("mean_reward", "mean_abs_adv", "clip_fraction", "grad_norm", "kl", "loss")


# ---------------------------------------------------------------- analyze


def _gap_records(ck, n, seed, tag, probe, C=1.0):
    task = hz.CopyTask()
    prompts, _ = hz.gen_copy_prompts(n, stream(seed, "gap", tag), task)
    out = []
    first = None
    for i, q in enumerate(prompts):
        tr = tf.forward(ck, list(q), task.continuation, rng=stream(seed, "gap", tag, i))
        first = first or tr
        out += [(i, an.sampling_gap_bound(tr, t, probe, C, seed)) for t in tr.action_positions[:-1]]
    return out, first


def cmd_analyze_gap(args):
    ck = tf.load_checkpoint(args.ckpt)
    probe = an.CostateProbe(layer=None if args.layer < 0 else args.layer, tau=args.tau)
    V = ck.config.vocab_size
    C = args.C
    if C is None:
        cal, _ = _gap_records(ck, args.trajectories, args.seed, "calibration", probe)
        C = an.fit_C([r for _, r in cal], V)
    recs, first = _gap_records(ck, args.trajectories, args.seed, "audit", probe, C)
    _dump(args, first.tape)
    rows = [[i, r.t, _num(r.entropy), _num(r.gap), _num(r.bound), int(r.violation)] for i, r in recs]
    _write_csv(args.csv, ["trajectory", "t", "entropy", "gap", "bound", "violation"], rows)
    rate = float(np.mean([r.violation for _, r in recs])) if recs else 0.0
    print(f"C = {C:.6g} ({'given' if args.C is not None else 'calibration fit'}); "
          f"{len(recs)} positions; violation rate {rate:.4f}")
    if args.svg:
        H = [r.entropy for _, r in recs]
        hmax = max(H + [1e-12])
        grid = np.linspace(0.0, hmax, 64)
        p = svg.Panel("sampling gap vs entropy", "H_t (nats)", "||Df - J_attn||")
        p.add_scatter("measured", H, [r.gap for _, r in recs])
        p.add_line("C sqrt(H / log|V|)", grid, C * np.sqrt(grid / math.log(V)))
        p.text = [f"C = {C:.4g}", f"violations {rate:.3f}"]
        svg.write(args.svg, [p], "Sampling gap audit")
    return 0


# ------------------------------------------------------------------ score


def cmd_score(args):
    snaps = hz.load_snapshots(args.ckpt_dir)
    if not snaps:
        print(f"no .ckpt files in {args.ckpt_dir}", file=sys.stderr)
        return 2
    budgets = tuple(int(b) for b in args.budgets.split(",")) if args.budgets else (10,)
    sweep = replace(hz.SweepConfig(), seed=args.seed, alpha=args.alpha, score_group=args.group,
                    score_prompts=args.samples, budgets=budgets, seeds_per_cell=max(args.rl_seeds, 1),
                    eval_prompts=args.eval_prompts, model=snaps[0].config)
    eval_set = hz.gen_copy_prompts(sweep.eval_prompts, stream(sweep.seed, "eval"), sweep.task)
    triples = [(c.pretrain_step, c, float(hz.label_probs(c, *eval_set).mean())) for c in snaps]
    reports = hz.score_snapshots(triples, sweep)
    if args.rl_seeds > 0:
        table, _ = hz.rl_sweep(snaps, sweep, eval_set)
        reports = [r.with_gains(table[r.step]) for r in reports]
    else:
        reports = [replace(r, r_after={K: math.nan for K in budgets}, mean_gain=math.nan) for r in reports]
    text = hz.reports_to_csv(reports, list(budgets))
    with open(args.csv, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    best = rd.best_switch_point(reports)
    print(f"{len(reports)} checkpoints scored; best switch point: step {best.step} (P_gap {best.p_gap:.4g})")
    if args.svg:
        steps = [r.step for r in reports]
        p1 = svg.Panel("impact score", "pretrain step", "P_gap").add_line("P_gap", steps, [r.p_gap for r in reports])
        p2 = svg.Panel("gain vs impact score", "P_gap", "mean gain")
        p2.add_scatter("checkpoints", [r.p_gap for r in reports], [r.mean_gain for r in reports])
        svg.write(args.svg, [p1, p2], "Readiness report")
    return 0


# ------------------------------------------------------------------ sweep


def cmd_sweep(args):
    sweep = hz.SweepConfig.from_file(args.config) if args.config else hz.SweepConfig()
    _, suite = hz.run_sweep(sweep, args.out, log=print if args.verbose else None)
    print("\n".join(hz.summary_lines(suite)))
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="costate-lab")
    p.add_argument("--dump-tape", metavar="PATH", help="write one representative tape (id, op, input ids per line)")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify").add_subparsers(dest="what", required=True)
    c = v.add_parser("continuous")
    c.add_argument("--env", choices=vf.ENVS)
    c.add_argument("--samples", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--csv")
    c.set_defaults(fn=cmd_verify_continuous)
    b = v.add_parser("bridge")
    b.add_argument("--n", type=int, default=100_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv")
    b.set_defaults(fn=cmd_verify_bridge)

    m = sub.add_parser("model").add_subparsers(dest="what", required=True)
    i = m.add_parser("inspect")
    i.add_argument("ckpt")
    i.set_defaults(fn=cmd_model_inspect)

    r = sub.add_parser("rl").add_subparsers(dest="what", required=True)
    rr = r.add_parser("run")
    rr.add_argument("--ckpt", required=True)
    rr.add_argument("--steps", type=int, default=10)
    rr.add_argument("--group", type=int, default=8)
    rr.add_argument("--eps", type=float, default=0.2)
    rr.add_argument("--beta", type=float, default=0.0)
    rr.add_argument("--lr", type=float, default=1e-3)
    rr.add_argument("--prompts", type=int, default=8, help="prompts per step")
    rr.add_argument("--seed", type=int, default=0)
    rr.add_argument("--out", required=True)
    rr.add_argument("--csv")
    rr.set_defaults(fn=cmd_rl_run)

    a = sub.add_parser("analyze").add_subparsers(dest="what", required=True)
    g = a.add_parser("gap")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--trajectories", type=int, default=100)
    g.add_argument("--tau", type=float, default=1.0)
    g.add_argument("--layer", type=int, default=-1, help="anchor layer; -1 means L-1")
    g.add_argument("--C", type=float, help="bound constant; default fits it on a separate calibration set")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--csv", required=True)
    g.add_argument("--svg")
    g.set_defaults(fn=cmd_analyze_gap)

    s = sub.add_parser("score")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--group", type=int, default=8)
    s.add_argument("--samples", type=int, default=128, help="scoring prompts per checkpoint")
    s.add_argument("--budgets", default="10,20,25,30", help="comma separated GRPO budgets")
    s.add_argument("--rl-seeds", type=int, default=3, help="GRPO seeds per checkpoint; 0 skips RL")
    s.add_argument("--eval-prompts", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", required=True)
    s.add_argument("--svg")
    s.set_defaults(fn=cmd_score)

    w = sub.add_parser("sweep")
    w.add_argument("--config")
    w.add_argument("--out", required=True)
    w.add_argument("-v", "--verbose", action="store_true")
    w.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
