"""Toy-scale readiness sweep: label-copy task, pretraining snapshots, GRPO budgets, report."""

import csv
import io
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import autodiff as ad
from . import grpo as _grpo
from . import readiness as rd
from . import svg
from . import transformer as tf
from .rng import stream

# ------------------------------------------------------------------ task


@dataclass(frozen=True)
class CopyTask:
    """Fillers, one label at ``label_slot``, a query marker at the last prompt slot."""

    prompt_len: int = 8
    label_slot: int = 2
    n_fillers: int = 12
    n_labels: int = 4
    marker: int = 0
    continuation: int = 4  # label repeats after the marker in pretraining sequences

    def __post_init__(self):
        if not 0 <= self.label_slot < self.prompt_len - 1:
            raise ValueError("label slot must precede the marker slot")
        if not 0 <= self.marker < self.n_fillers:
            raise ValueError("marker must be a filler id")

    @property
    def labels(self):
        return np.arange(self.n_fillers, self.n_fillers + self.n_labels)

    @property
    def vocab_size(self):
        return self.n_fillers + self.n_labels

    @property
    def answer_pos(self):
        """Position whose logits produce the answer."""
        return self.prompt_len - 1

    def label_of(self, prompt):
        return int(prompt[self.label_slot])


def gen_copy_prompts(n, rng, task=CopyTask()):
    """n prompts and their labels; deterministic given ``rng``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = rng.integers(0, task.n_fillers, size=(n, task.prompt_len))
    y = task.labels[rng.integers(0, task.n_labels, size=n)]
    p[:, task.label_slot] = y
    p[:, -1] = task.marker
    return p, y


def pretrain_batch(n, rng, task=CopyTask(), copy_frac=0.7):
    """Mixture of copy sequences (prompt + repeated label) and pure random fillers."""
    L = task.prompt_len + task.continuation
    seq = rng.integers(0, task.n_fillers, size=(n, L))
    is_copy = rng.random(n) < copy_frac
    m = int(is_copy.sum())
    if m:
        p, y = gen_copy_prompts(m, rng, task)
        seq[is_copy] = np.concatenate([p, np.repeat(y[:, None], task.continuation, axis=1)], axis=1)
    return seq


def label_probs(ckpt, prompts, labels, restrict=False):
    """Exact p(y*|q) at the answer position; ``restrict`` renormalises over the label tokens."""
    z = tf.forward_batch(tf.bind(ckpt), ckpt.config, np.asarray(prompts)).logits.data[:, -1]
    if restrict:
        lab = np.unique(labels) if np.size(labels) else labels
        z = np.where(np.isin(np.arange(z.shape[1]), lab), z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(prompts)), np.asarray(labels)]


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class SweepConfig:
    seed: int = 0
    pretrain_steps: int = 570
    snapshot_interval: int = 30
    batch_size: int = 16
    pretrain_lr: float = 3e-4
    copy_frac: float = 0.7
    budgets: tuple = (10, 20, 25, 30)
    seeds_per_cell: int = 3
    eval_prompts: int = 256
    score_prompts: int = 128
    alpha: float = 1.0
    score_group: int = 8
    estimator: str = "group"
    advantage: str = "centered"
    layer: int = -1  # -1: L - 1
    headroom: str = "exact"
    workers: int = 1
    grpo: _grpo.GrpoConfig = field(default_factory=lambda: _grpo.GrpoConfig(lr=1e-3, group_size=8, prompts_per_step=8))
    model: tf.ModelConfig = field(default_factory=tf.ModelConfig)
    task: CopyTask = field(default_factory=CopyTask)

    def __post_init__(self):
        if not self.budgets:
            raise ValueError("budgets must be nonempty")
        if self.snapshot_interval < 1 or self.pretrain_steps % self.snapshot_interval:
            raise ValueError("snapshot interval must divide pretrain steps")
        if self.model.vocab_size < self.task.vocab_size:
            raise ValueError("model vocabulary smaller than the task vocabulary")
        if self.task.prompt_len + self.task.continuation > self.model.max_seq_len:
            raise ValueError("pretraining sequences exceed max_seq_len")

    @property
    def snapshot_steps(self):
        return list(range(0, self.pretrain_steps + 1, self.snapshot_interval))

    def score_config(self):
        return rd.ScoreConfig(alpha=self.alpha, group=self.score_group, layer=None if self.layer < 0 else self.layer,
                              advantage=self.advantage, estimator=self.estimator, headroom=self.headroom)

    # --------------------------------------------------------- text form

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("grpo", "model", "task"):
                for g in fields(v):
                    lines.append(f"{f.name}.{g.name}={_fmt(getattr(v, g.name))}")
            else:
                lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        flat, nested = {}, {"grpo": {}, "model": {}, "task": {}}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if "." in k:
                head, sub = k.split(".", 1)
                if head not in nested:
                    raise ValueError(f"unknown section {head!r}")
                nested[head][sub] = v
            else:
                flat[k] = v
        base = cls()
        kw = {}
        types = {f.name: f for f in fields(cls)}
        for k, v in flat.items():
            if k not in types or k in nested:
                raise ValueError(f"unknown key {k!r}")
            kw[k] = _parse(v, getattr(base, k))
        for head, vals in nested.items():
            if vals:
                sub = getattr(base, head)
                names = {g.name for g in fields(sub)}
                bad = set(vals) - names
                if bad:
                    raise ValueError(f"unknown keys {sorted(bad)} in {head}")
                kw[head] = replace(sub, **{n: _parse(x, getattr(sub, n)) for n, x in vals.items()})
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s, like):
    if isinstance(like, bool):
        return s.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(s)
    if isinstance(like, float):
        return float(s)
    if isinstance(like, tuple):
        return tuple(int(x) for x in s.split(",") if x.strip())
    return s


# ------------------------------------------------------------------ pretraining


class PretrainDiverged(RuntimeError):
    pass


def _adam(params, g, state, lr, b1=0.9, b2=0.999, eps=1e-8):
    m, v, t = state
    t += 1
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return params - lr * mh / (np.sqrt(vh) + eps), (m, v, t)


def lm_loss_grad(ckpt, tokens):
    """Mean next-token cross-entropy over the batch and its gradient."""
    with ad.Tape() as tp:
        P = tf.bind(ckpt, tp)
        lp, _ = tf.sequence_logprobs(P, ckpt.config, tokens)
        loss = -lp.mean()
        g = tf.flat_grad(tp.backward(loss), P, ckpt.config)
    return float(loss.data), g


def pretrain(sweep, out_dir=None, eval_set=None, log=None):
    """Train from a fresh init, snapshotting every interval; returns [(step, checkpoint, r_before)]."""
    rng = stream(sweep.seed, "init")
    ckpt = tf.init_checkpoint(sweep.model, rng)
    if eval_set is None:
        eval_set = gen_copy_prompts(sweep.eval_prompts, stream(sweep.seed, "eval"), sweep.task)
    state = (np.zeros_like(ckpt.params), np.zeros_like(ckpt.params), 0)
    snaps = []
    params = ckpt.params
    for step in range(sweep.pretrain_steps + 1):
        if step % sweep.snapshot_interval == 0:
            ck = ckpt.with_params(params, step)
            ck.rng_state = {"seed": sweep.seed, "stream": "pretrain", "step": step}
            rb = float(label_probs(ck, *eval_set).mean())
            snaps.append((step, ck, rb))
            if out_dir is not None:
                tf.save_checkpoint(ck, os.path.join(out_dir, f"step_{step:06d}.ckpt"))
            if log:
                log(f"pretrain step {step}: R_before {rb:.4f}")
        if step == sweep.pretrain_steps:
            break
        batch = pretrain_batch(sweep.batch_size, stream(sweep.seed, "pretrain", step), sweep.task, sweep.copy_frac)
        try:
            loss, g = lm_loss_grad(ckpt.with_params(params), batch)
        except ad.NonFiniteError as e:
            raise PretrainDiverged(f"seed {sweep.seed} step {step}: {e}") from e
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise PretrainDiverged(f"seed {sweep.seed} step {step}: loss {loss}")
        params, state = _adam(params, g, state, sweep.pretrain_lr)
    return snaps


# ------------------------------------------------------------------ RL sweep


@dataclass
class CellResult:
    step: int
    seed: int
    r_after: dict
    error: str = ""


def _run_cell(args):
    ckpt, s, sweep, eval_set = args
    step = ckpt.pretrain_step
    task = sweep.task
    cfg = replace(sweep.grpo, steps=max(sweep.budgets))
    budgets = set(sweep.budgets)
    r_after = {}

    def prompt_fn(k):
        return gen_copy_prompts(cfg.prompts_per_step, stream(sweep.seed, "rl-prompts", step, s, k), task)[0]

    def reward_fn(i, q, c):
        return float(int(c[0]) == task.label_of(q))

    def cb(k, cur, st):
        if k + 1 in budgets:
            r_after[k + 1] = float(label_probs(cur, *eval_set).mean())

    try:
        _grpo.run(ckpt, prompt_fn, reward_fn, cfg, stream(sweep.seed, "rl", step, s), 1, callback=cb)
        return CellResult(step, s, r_after)
    except Exception as e:  # per-cell failure is recorded, the sweep goes on
        return CellResult(step, s, {K: float("nan") for K in sweep.budgets}, f"{type(e).__name__}: {e}")


def rl_sweep(checkpoints, sweep, eval_set=None):
    """R_after per (checkpoint, budget), averaged over seeds; budgets share one run per seed.

    A run of max(budgets) steps visits every smaller budget on the way with the
    same seed, so reading R_after at step K equals a separate K-step run.
    """
    if eval_set is None:
        eval_set = gen_copy_prompts(sweep.eval_prompts, stream(sweep.seed, "eval"), sweep.task)
    cells = [(ck, s, sweep, eval_set) for ck in checkpoints for s in range(sweep.seeds_per_cell)]
    if sweep.workers > 1:
        with ProcessPoolExecutor(sweep.workers) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    results.sort(key=lambda r: (r.step, r.seed))
    table = {}
    for ck in checkpoints:
        rows = [r for r in results if r.step == ck.pretrain_step]
        table[ck.pretrain_step] = {K: float(np.mean([r.r_after[K] for r in rows])) for K in sweep.budgets}
    return table, results


# ------------------------------------------------------------------ report

COLUMNS = ["step", "sigma", "lambda_m", "s_m", "h_alpha", "p_gap", "r_before"]


def report_columns(budgets):
    return COLUMNS + [f"r_after_K{K}" for K in budgets] + ["mean_gain"]


def _num(x):
    return repr(float(x))


def reports_to_csv(reports, budgets):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_columns(budgets))
    for r in reports:
        w.writerow([r.step] + [_num(v) for v in (r.sigma, r.lambda_m, r.s_m, r.h_alpha, r.p_gap, r.r_before)]
                   + [_num(r.r_after[K]) for K in budgets] + [_num(r.mean_gain)])
    return buf.getvalue()


def reports_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    head = rows[0]
    budgets = [int(h[len("r_after_K"):]) for h in head if h.startswith("r_after_K")]
    out = []
    for row in rows[1:]:
        d = dict(zip(head, row))
        r_after = {K: float(d[f"r_after_K{K}"]) for K in budgets}
        out.append(rd.ReadinessReport(int(d["step"]), float(d["sigma"]), float(d["lambda_m"]), float(d["s_m"]),
                                      float(d["h_alpha"]), float(d["p_gap"]), float(d["r_before"]), r_after,
                                      float(d["mean_gain"])))
    return out, budgets


def render_figures(csv_text, fig_dir, null_seed=0):
    """All report figures as a pure function of the report CSV."""
    reports, budgets = reports_from_csv(csv_text)
    os.makedirs(fig_dir, exist_ok=True)
    steps = [r.step for r in reports]
    pg = np.array([r.p_gap for r in reports])
    gain = np.array([r.mean_gain for r in reports])
    suite = rd.correlation_suite(reports, stream(null_seed, "null"))
    a, b = suite.slope, suite.intercept
    pred = a * pg + b
    lo, hi = (float(pg.min()), float(pg.max())) if len(pg) else (0.0, 1.0)
    p1 = svg.Panel("real vs predicted gain", "affine(P_gap)", "mean gain")
    p1.add_scatter("checkpoints", pred, gain).add_line("y = x", [a * lo + b, a * hi + b], [a * lo + b, a * hi + b])
    p1.text = [f"gain = {a:.4g} P_gap + {b:.4g}"]
    svg.write(os.path.join(fig_dir, "predicted_vs_real.svg"), [p1], "Predicted vs real RL gain")

    comp = [
        svg.Panel("signal", "pretrain step", "value").add_line("Sigma", steps, [r.sigma for r in reports])
        .add_line("Lambda_m", steps, [r.lambda_m for r in reports]),
        svg.Panel("headroom", "pretrain step", "H_alpha").add_line("H_alpha", steps, [r.h_alpha for r in reports]),
        svg.Panel("impact score", "pretrain step", "P_gap").add_line("P_gap", steps, list(pg)),
        svg.Panel("reward", "pretrain step", "R").add_line("R_before", steps, [r.r_before for r in reports]),
    ]
    for K in budgets:
        comp[3].add_line(f"R_after K={K}", steps, [r.r_after[K] for r in reports])
    svg.write(os.path.join(fig_dir, "components.svg"), comp, "Readiness components across checkpoints")

    p3 = svg.Panel("combined predictor", "z(R_before) + z(P_gap)", "z(mean R_after)")
    p3.add_scatter("checkpoints", suite.z_combined, suite.z_after)
    svg.write(os.path.join(fig_dir, "zscores.svg"), [p3], "Z-scores: combined predictor vs post-RL reward")

    p4 = svg.Panel("Spearman summary")
    p4.text = summary_lines(suite)
    svg.write(os.path.join(fig_dir, "summary.svg"), [p4], "Correlation summary")
    return suite


def summary_lines(suite):
    return [
        f"checkpoints: {suite.n}{'  (low sample)' if suite.low_sample else ''}",
        f"Spearman(P_gap, mean gain)            = {suite.rho_pgap_gain:.4f}",
        f"  shuffle-null 95th percentile         = {suite.null_pgap_q95:.4f}",
        f"Spearman(z(R_b)+z(P_gap), z(R_after)) = {suite.rho_combined:.4f}",
        f"  shuffle-null 95th percentile         = {suite.null_combined_q95:.4f}",
        f"null share with |rho| < 0.5            = {suite.null_abs_below_half:.3f}",
        f"affine: slope {suite.slope:.4g}, intercept {suite.intercept:.4g}; through-origin kappa {suite.kappa:.4g}",
    ]


def full_report(out_dir, reports, budgets, null_seed=0):
    """Write report.csv and figures/*.svg; figures are regenerated from the CSV text alone."""
    os.makedirs(out_dir, exist_ok=True)
    text = reports_to_csv(reports, budgets)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return render_figures(text, os.path.join(out_dir, "figures"), null_seed)


# ------------------------------------------------------------------ end to end


def score_snapshots(snaps, sweep, score_set=None):
    if score_set is None:
        score_set = gen_copy_prompts(sweep.score_prompts, stream(sweep.seed, "score-prompts"), sweep.task)
    out = []
    for step, ck, rb in snaps:
        rep = rd.score_checkpoint(ck, *score_set, sweep.score_config(), stream(sweep.seed, "score", step))
        rep.r_before = rb
        out.append(rep)
    return out


def run_sweep(sweep, out_dir, log=None):
    ck_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ck_dir, exist_ok=True)
    eval_set = gen_copy_prompts(sweep.eval_prompts, stream(sweep.seed, "eval"), sweep.task)
    snaps = pretrain(sweep, ck_dir, eval_set, log)
    reports = score_snapshots(snaps, sweep)
    table, cells = rl_sweep([ck for _, ck, _ in snaps], sweep, eval_set)
    reports = [r.with_gains(table[r.step]) for r in reports]
    suite = full_report(out_dir, reports, list(sweep.budgets), sweep.seed)
    write_manifest(out_dir, sweep, cells)
    return reports, suite


def write_manifest(out_dir, sweep, cells):
    lines = [
        f"costate_lab {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
        f"master_seed {sweep.seed}",
        "streams: init, pretrain/<step>, eval, score-prompts, score/<step>, rl/<step>/<seed>, rl-prompts/<step>/<seed>/<k>, null",
        "failed cells: " + (", ".join(f"{c.step}/{c.seed} {c.error}" for c in cells if c.error) or "none"),
        "",
        "# config",
        sweep.to_text(),
    ]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))


def load_snapshots(ckpt_dir):
    names = sorted(n for n in os.listdir(ckpt_dir) if n.endswith(".ckpt"))
    return [tf.load_checkpoint(os.path.join(ckpt_dir, n)) for n in names]


def _stderr(msg):
    print(msg, file=sys.stderr)
