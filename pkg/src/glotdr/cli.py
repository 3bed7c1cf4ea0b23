"""Batch experiment runner.

Subcommands: train, sweep, selftest, attack-eval.  Configuration is a flat
key=value text file with dotted section prefixes; every run writes a CSV
with the fixed header run_id,seed,scenario,preset,epoch,metric,value and
values rendered to 6 significant digits, so repeated runs with the same
config and seed produce byte-identical output.  GLOT_THREADS caps sweep
parallelism.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as gdata
from . import diffcore, glot, svgd, train, transport

PRESETS = ("erm", "pgd_at", "trades", "lot", "got", "glot")
CSV_HEADER = "run_id,seed,scenario,preset,epoch,metric,value"


# ---------------------------------------------------------------------------
# configuration

def _t_int(lo=None, hi=None):
    def cast(s):
        v = int(s)
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}")
        return v
    return cast


def _t_float(lo=None, strict_lo=None):
    def cast(s):
        v = float(s)
        if not np.isfinite(v):
            raise ValueError("must be finite")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}")
        if strict_lo is not None and v <= strict_lo:
            raise ValueError(f"must be > {strict_lo}")
        return v
    return cast


def _t_choice(*opts):
    def cast(s):
        if s not in opts:
            raise ValueError(f"must be one of {', '.join(opts)}")
        return s
    return cast


def _t_bool(s):
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ValueError("must be a boolean (0/1/true/false)")


def _t_int_list(s):
    if s == "":
        return ()
    return tuple(int(tok) for tok in s.split(","))


def _t_norm(s):
    if s == "inf":
        return np.inf
    v = float(s)
    if v < 1:
        raise ValueError("norm order must be >= 1 or inf")
    return v


def _t_bandwidth(s):
    if s == "median_heuristic":
        return s
    v = float(s)
    if v <= 0:
        raise ValueError("bandwidth must be positive or median_heuristic")
    return v


def _t_opt_float(s):
    return None if s == "" else _t_float(strict_lo=0.0)(s)


def _t_str(s):
    return s


# key -> (default string, caster).  Defaults follow the published
# hyperparameters where they are stated (gamma_pred 0.5, lam 0.1, 15 SVGD
# iterations at step 2e-3, 30-epoch ramp-up, momentum 0.9 with 5e-4 weight
# decay, 8/255 attack with 200 steps of 2/255, 512-wide potential net).
CONFIG_KEYS = [
    ("run.scenario", "da", _t_choice(*train.SCENARIOS)),
    ("run.preset", "glot", _t_choice(*PRESETS)),
    ("run.epochs", "30", _t_int(lo=1)),
    ("run.seed", "0", _t_int(lo=0)),
    ("run.out", "runs", _t_str),
    ("run.batch_source", "32", _t_int(lo=1)),
    ("run.batch_target", "32", _t_int(lo=1)),
    ("data.name", "two_moons", _t_choice("two_moons", "blobs", "idx")),
    ("data.n", "200", _t_int(lo=2)),
    ("data.noise", "0.1", _t_float(lo=0.0)),
    ("data.angle", "30.0", _t_float()),
    ("data.trans_x", "0.0", _t_float()),
    ("data.trans_y", "0.0", _t_float()),
    ("data.labeled", "20", _t_int(lo=1)),
    ("data.domains", "4", _t_int(lo=2)),
    ("data.classes", "3", _t_int(lo=2)),
    ("data.shift", "0.5", _t_float(lo=0.0)),
    ("data.per_class", "50", _t_int(lo=1)),
    ("data.dim", "2", _t_int(lo=2)),
    ("data.sep", "2.0", _t_float(strict_lo=0.0)),
    ("data.blob_noise", "0.5", _t_float(strict_lo=0.0)),
    ("data.corruption", "none", _t_choice("none", *gdata.CORRUPTIONS)),
    ("data.severity", "1", _t_int(lo=1, hi=5)),
    ("data.idx_train_images", "", _t_str),
    ("data.idx_train_labels", "", _t_str),
    ("data.idx_eval_images", "", _t_str),
    ("data.idx_eval_labels", "", _t_str),
    ("net.hidden", "16,16", _t_int_list),
    ("opt.kind", "sgd_momentum", _t_choice("sgd_momentum", "adam")),
    ("opt.lr", "0.1", _t_float(strict_lo=0.0)),
    ("opt.momentum", "0.9", _t_float(lo=0.0)),
    ("opt.weight_decay", "0.0005", _t_float(lo=0.0)),
    ("opt.schedule", "constant", _t_choice("constant", "cosine_annealing",
                                           "step_decay")),
    ("opt.decay_epochs", "100,105", _t_int_list),
    ("opt.decay_rate", "0.1", _t_float(strict_lo=0.0)),
    ("opt.rampup", "30", _t_int(lo=0)),
    ("risk.alpha", "1.0", _t_float(lo=0.0)),
    ("risk.beta", "0.1", _t_float(lo=0.0)),
    ("risk.gamma_pred", "0.5", _t_float(lo=0.0)),
    ("local.n_source", "2", _t_int(lo=0)),
    ("local.n_target", "2", _t_int(lo=0)),
    ("local.iters", "15", _t_int(lo=0)),
    ("local.step", "0.002", _t_float(strict_lo=0.0)),
    ("local.radius", "0.1", _t_float(lo=0.0)),
    ("local.norm", "inf", _t_norm),
    ("local.space", "input", _t_choice("input", "latent")),
    ("local.lam", "0.1", _t_float(strict_lo=0.0)),
    ("local.bandwidth", "median_heuristic", _t_bandwidth),
    ("local.init_noise", "", _t_opt_float),
    ("global.estimator", "sinkhorn", _t_choice("sinkhorn", "potential")),
    ("global.eps_ot", "0.01", _t_float(strict_lo=0.0)),
    ("global.tol", "1e-6", _t_float(strict_lo=0.0)),
    ("global.max_iter", "5000", _t_int(lo=1)),
    ("global.potential_hidden", "512", _t_int(lo=1)),
    ("global.potential_lr", "0.001", _t_float(strict_lo=0.0)),
    ("attack.eps", repr(8.0 / 255.0), _t_float(lo=0.0)),
    ("attack.k", "200", _t_int(lo=0)),
    ("attack.step", repr(2.0 / 255.0), _t_float(strict_lo=0.0)),
    ("attack.clamp01", "0", _t_bool),
    ("trades.trade", "1.0", _t_float(lo=0.0)),
    ("dg.append_epochs", "", _t_int_list),
]
_CASTERS = {k: c for k, _, c in CONFIG_KEYS}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def get(self, key):
        return self.values[key]

    def set(self, key, raw):
        if key not in _CASTERS:
            raise ValueError(f"unknown config key: {key}")
        try:
            self.values[key] = _CASTERS[key](raw)
        except ValueError as e:
            raise ValueError(f"bad value for {key}: {e}") from None


def default_config():
    cfg = ExperimentConfig()
    for key, default, _ in CONFIG_KEYS:
        cfg.set(key, default)
    return cfg


def parse_config(text):
    """Flat key = value lines; '#' starts a comment; unknown keys rejected."""
    cfg = default_config()
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {ln}: expected key = value")
        key, _, raw = body.partition("=")
        try:
            cfg.set(key.strip(), raw.strip())
        except ValueError as e:
            raise ValueError(f"line {ln}: {e}") from None
    return cfg


def _render(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return "inf" if np.isinf(v) else repr(v)
    return str(v)


def serialize_config(cfg):
    lines = [f"{key} = {_render(cfg.values[key])}" for key, _, _ in CONFIG_KEYS]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# building runs from a config

def build_task(cfg, seed):
    name = cfg.get("data.name")
    scenario = cfg.get("run.scenario")
    if name == "two_moons":
        if scenario not in ("da", "ssl"):
            raise ValueError("two_moons supports the da and ssl scenarios")
        n = cfg.get("data.n")
        noise = cfg.get("data.noise")
        if scenario == "da":
            src, tgt = gdata.two_moons_shift(
                n, noise, cfg.get("data.angle"),
                (cfg.get("data.trans_x"), cfg.get("data.trans_y")), seed)
            task = train.TaskData([src], tgt,
                                  target=gdata.DomainDataset(tgt.x,
                                                             domain_id=1))
        else:
            base, _ = gdata.two_moons_shift(n, noise, 0.0, (0.0, 0.0), seed)
            labeled, unlabeled = gdata.ssl_split(base, cfg.get("data.labeled"),
                                                 seed)
            hold, _ = gdata.two_moons_shift(n, noise, 0.0, (0.0, 0.0),
                                            seed + 99991)
            task = train.TaskData([labeled], hold, target=unlabeled)
    elif name == "blobs":
        if scenario not in ("dg", "aml"):
            raise ValueError("blobs supports the dg and aml scenarios")
        K = cfg.get("data.domains") if scenario == "dg" else 2
        shift = cfg.get("data.shift") if scenario == "dg" else 0.0
        doms = gdata.gaussian_blob_domains(
            K, cfg.get("data.classes"), shift, seed,
            n_per_class=cfg.get("data.per_class"), dim=cfg.get("data.dim"),
            sep=cfg.get("data.sep"), noise=cfg.get("data.blob_noise"))
        task = train.TaskData(doms[:-1], doms[-1], target=None)
    else:   # idx files: single labeled domain + labeled eval set
        if scenario != "aml":
            raise ValueError("idx data supports the aml scenario")
        paths = [cfg.get(f"data.idx_{part}")
                 for part in ("train_images", "train_labels",
                              "eval_images", "eval_labels")]
        if any(p == "" for p in paths):
            raise ValueError("idx data needs all four data.idx_* paths")
        xs, ys, xe, ye = (gdata.read_idx(p) for p in paths)
        task = train.TaskData(
            [gdata.DomainDataset(xs.reshape(xs.shape[0], -1), ys)],
            gdata.DomainDataset(xe.reshape(xe.shape[0], -1), ye),
            target=None)
    kind = cfg.get("data.corruption")
    if kind != "none":
        ev = task.eval_set
        cx = gdata.corrupt(ev.x, kind, cfg.get("data.severity"), seed + 17)
        task = train.TaskData(task.sources,
                              gdata.DomainDataset(cx, ev.y,
                                                  domain_id=ev.domain_id),
                              target=task.target)
    return task


def build_train_config(cfg, preset, seed):
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    scenario = cfg.get("run.scenario")
    alpha = cfg.get("risk.alpha")
    beta = cfg.get("risk.beta")
    n_source = cfg.get("local.n_source")
    n_target = cfg.get("local.n_target")
    if preset == "lot":
        beta = 0.0
    elif preset == "got":
        alpha = 0.0
        # the adversarial global term is built from particles, so the
        # global-only variant keeps drawing them in that scenario
        if scenario != "aml":
            n_source = 0
            n_target = 0
    schedule = diffcore.ScheduleSpec(
        kind=cfg.get("opt.schedule"), total_epochs=cfg.get("run.epochs"),
        rampup_length=max(1, cfg.get("opt.rampup")),
        decay_epochs=cfg.get("opt.decay_epochs"),
        decay_rate=cfg.get("opt.decay_rate"))
    return train.TrainConfig(
        scenario=scenario,
        epochs=cfg.get("run.epochs"),
        batch_source=cfg.get("run.batch_source"),
        batch_target=cfg.get("run.batch_target"),
        hidden=tuple(cfg.get("net.hidden")),
        optimizer=cfg.get("opt.kind"),
        lr=cfg.get("opt.lr"),
        momentum=cfg.get("opt.momentum"),
        weight_decay=cfg.get("opt.weight_decay"),
        schedule=schedule,
        rampup_length=cfg.get("opt.rampup"),
        weights=glot.RiskWeights(alpha=alpha, beta=beta,
                                 gamma_pred=cfg.get("risk.gamma_pred")),
        particles=glot.ParticleConfig(
            n_source=n_source, n_target=n_target,
            iters=cfg.get("local.iters"), step=cfg.get("local.step"),
            radius=cfg.get("local.radius"), norm=cfg.get("local.norm"),
            space=cfg.get("local.space"),
            init_noise=cfg.get("local.init_noise"),
            bandwidth=cfg.get("local.bandwidth"), lam=cfg.get("local.lam"),
            alpha=alpha),
        ot=transport.SinkhornConfig(eps_ot=cfg.get("global.eps_ot"),
                                    tol=cfg.get("global.tol"),
                                    max_iter=cfg.get("global.max_iter")),
        global_estimator=cfg.get("global.estimator"),
        potential_hidden=cfg.get("global.potential_hidden"),
        potential_lr=cfg.get("global.potential_lr"),
        attack=train.AttackConfig(eps=cfg.get("attack.eps"),
                                  k=cfg.get("attack.k"),
                                  step=cfg.get("attack.step"),
                                  clamp01=cfg.get("attack.clamp01")),
        trade=cfg.get("trades.trade"),
        dg_append_epochs=cfg.get("dg.append_epochs"),
        seed=seed)


_TRAINERS = {"erm": train.train_erm, "pgd_at": train.train_pgd_at,
             "trades": train.train_trades, "lot": train.train_glot,
             "got": train.train_glot, "glot": train.train_glot}


def run_id_of(scenario, preset, seed, grid=None):
    rid = f"{scenario}-{preset}-s{seed}"
    if grid:
        for k in sorted(grid):
            rid += f"-{k.rsplit('.', 1)[-1]}={grid[k]}"
    return rid


def run_experiment(cfg, preset, seed, grid=None):
    """Train one preset and return (run_id, rows, net, task); rows follow
    the CSV schema minus formatting."""
    tcfg = build_train_config(cfg, preset, seed)
    task = build_task(cfg, seed)
    net, trace = _TRAINERS[preset](tcfg, task)
    scenario = cfg.get("run.scenario")
    rid = run_id_of(scenario, preset, seed, grid)
    rows = [(rid, seed, scenario, preset, e, m, v) for e, m, v in trace.rows]
    return rid, rows, net, task


def format_rows(rows):
    lines = [CSV_HEADER]
    for rid, seed, scenario, preset, epoch, metric, value in rows:
        lines.append(f"{rid},{seed},{scenario},{preset},{epoch},{metric},"
                     f"{value:.6g}")
    return "\n".join(lines) + "\n"


def write_csv(path, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_rows(rows))


def parse_rows(text):
    lines = text.strip().split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    out = []
    for line in lines[1:]:
        rid, seed, scenario, preset, epoch, metric, value = line.split(",")
        out.append((rid, int(seed), scenario, preset, int(epoch), metric,
                    float(value)))
    return out


def _check_finite(rows):
    for row in rows:
        if not np.isfinite(row[6]):
            return False
    return True


# ---------------------------------------------------------------------------
# SVG learning curves (plain polylines; the CSV is the contract)

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def write_svg(path, title, series):
    """series: ordered dict name -> list of (x, y)."""
    W, H, PAD = 640, 360, 45
    pts_all = [p for pts in series.values() for p in pts]
    if not pts_all:
        return
    xs = [p[0] for p in pts_all]
    ys = [p[1] for p in pts_all]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    # widen degenerate ranges; an absolute +1 can round away at magnitudes
    # beyond 2**53, leaving a zero span
    if x1 <= x0:
        x1 = x0 + max(1.0, abs(x0) * 1e-6)
    if y1 <= y0:
        y1 = y0 + max(1.0, abs(y0) * 1e-6)

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def sy(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" '
             f'height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W // 2}" y="18" text-anchor="middle" '
             f'font-size="14">{title}</text>',
             f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" '
             f'y2="{H - PAD}" stroke="black"/>',
             f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" '
             f'stroke="black"/>',
             f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">'
             f'{x0:.6g}</text>',
             f'<text x="{W - PAD}" y="{H - PAD + 16}" text-anchor="end" '
             f'font-size="10">{x1:.6g}</text>',
             f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" '
             f'font-size="10">{y0:.6g}</text>',
             f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" '
             f'font-size="10">{y1:.6g}</text>']
    for i, (name, pts) in enumerate(series.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{W - PAD + 4}" '
                     f'y="{PAD + 14 * i + 10}" font-size="10" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def _load_config(args):
    cfg = default_config()
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
    for pair in args.set or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        cfg.set(key.strip(), raw.strip())
    if args.seed is not None:
        cfg.set("run.seed", str(args.seed))
    if args.out is not None:
        cfg.set("run.out", args.out)
    return cfg


def cmd_train(args):
    try:
        cfg = _load_config(args)
        rid, rows, net, task = run_experiment(cfg, cfg.get("run.preset"),
                                              cfg.get("run.seed"))
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 1
    if not _check_finite(rows):
        print("error: non-finite loss encountered", file=sys.stderr)
        return 1
    outdir = cfg.get("run.out")
    os.makedirs(outdir, exist_ok=True)
    write_csv(os.path.join(outdir, "metrics.csv"), rows)
    final_epoch = cfg.get("run.epochs") - 1
    summary = [r for r in rows if r[4] == final_epoch and
               r[5].startswith("acc")]
    write_csv(os.path.join(outdir, "summary.csv"), summary)
    metrics = sorted({r[5] for r in rows})
    for m in metrics:
        pts = [(r[4], r[6]) for r in rows if r[5] == m]
        write_svg(os.path.join(outdir, f"curve_{m}.svg"), m, {m: pts})
    with open(os.path.join(outdir, "config.txt"), "w", newline="\n") as fh:
        fh.write(serialize_config(cfg))
    for r in summary:
        print(f"{r[0]} {r[5]} = {r[6]:.6g}")
    return 0


def _sweep_worker(payload):
    raw_values, preset, seed, grid = payload
    cfg = default_config()
    for k, raw in raw_values.items():
        cfg.set(k, raw)
    for k, raw in grid.items():
        cfg.set(k, raw)
    rid, rows, _, _ = run_experiment(cfg, preset, seed, grid=grid)
    return rid, rows


def _grid_combos(specs):
    combos = [{}]
    for key, raws in specs:
        combos = [{**c, key: raw} for c in combos for raw in raws]
    return combos


def _max_workers(n_jobs):
    raw = os.environ.get("GLOT_THREADS", "")
    if raw:
        cap = int(raw)
        if cap < 1:
            raise ValueError("GLOT_THREADS must be a positive integer")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


def cmd_sweep(args):
    try:
        cfg = _load_config(args)
        presets = args.presets.split(",") if args.presets \
            else [cfg.get("run.preset")]
        for p in presets:
            if p not in PRESETS:
                raise ValueError(f"unknown preset {p!r}")
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
            else [cfg.get("run.seed")]
        specs = []
        for g in args.grid or []:
            if "=" not in g:
                raise ValueError(f"--grid expects key=v1,v2,..., got {g!r}")
            key, _, raws = g.partition("=")
            key = key.strip()
            vals = [v.strip() for v in raws.split(",") if v.strip()]
            if key not in _CASTERS:
                raise ValueError(f"unknown config key: {key}")
            if not vals:
                raise ValueError(f"empty grid for {key}")
            specs.append((key, vals))
        combos = _grid_combos(specs)
        jobs = [(dict(zip([k for k, _, _ in CONFIG_KEYS],
                          [_render(cfg.values[k]) for k, _, _ in CONFIG_KEYS])),
                 preset, seed, grid)
                for preset in presets for seed in seeds for grid in combos]
        workers = _max_workers(len(jobs))
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    results = {}
    try:
        if workers == 1:
            for job in jobs:
                rid, rows = _sweep_worker(job)
                results[rid] = rows
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for rid, rows in pool.map(_sweep_worker, jobs):
                    results[rid] = rows
    except FloatingPointError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 1
    merged = []
    for rid in sorted(results):
        merged.extend(results[rid])
    if not _check_finite(merged):
        print("error: non-finite loss encountered", file=sys.stderr)
        return 1
    outdir = cfg.get("run.out")
    os.makedirs(outdir, exist_ok=True)
    write_csv(os.path.join(outdir, "sweep.csv"), merged)
    final_epoch = cfg.get("run.epochs") - 1
    for rid in sorted(results):
        accs = [r for r in results[rid] if r[4] == final_epoch and
                r[5].startswith("acc")]
        line = " ".join(f"{r[5]}={r[6]:.6g}" for r in accs)
        print(f"{rid} {line}")
    return 0


# ---------------------------------------------------------------------------
# selftest suites

def _st_gibbs():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(2, 21))
        lam = float(np.exp(rng.uniform(np.log(0.1), np.log(100.0))))
        r = rng.uniform(-1.0, 1.0, m)
        q = glot.gibbs_conditional_oracle(None, r, lam)
        q2 = glot.gibbs_simplex_oracle(r, lam)
        worst = max(worst, float(np.abs(q - q2).sum()) / 2.0)
    return worst <= 1e-6, f"max TV {worst:.2e} (tol 1e-6)"


def _st_ot():
    rng = np.random.default_rng(12)
    cfgs = transport.SinkhornConfig(eps_ot=1e-3, tol=1e-12, max_iter=200000)
    worst_rel, worst_dual = 0.0, 0.0
    for _ in range(10):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(2, 6))
        C = rng.uniform(0.0, 1.0, (n, m))
        a = rng.dirichlet(np.ones(n))
        b = rng.dirichlet(np.ones(m))
        _, exact = transport.exact_ot_small(a, b, C)
        _, ent = transport.sinkhorn(a, b, C, cfgs)
        worst_rel = max(worst_rel, abs(ent - exact) / max(abs(exact), 1e-12))
        sd, _ = transport.maximize_semidual(a, b, C, 1e-3)
        worst_dual = max(worst_dual, abs(sd - ent))
    ok = worst_rel <= 0.01 and worst_dual <= 1e-4
    return ok, f"rel gap {worst_rel:.2e} (tol 1e-2), dual gap " \
               f"{worst_dual:.2e} (tol 1e-4)"


def _st_svgd():
    rng = np.random.default_rng(13)

    def score(x):
        return -x

    cfg = svgd.SvgdConfig(n=200, iters=500, step=0.05, init_noise=3.0)
    ball = svgd.BallSpec(center=np.zeros(1), radius=np.inf)
    pts = svgd.projected_svgd(score, ball, cfg, rng)
    mean = float(pts.particles.mean())
    var = float(pts.particles.var())
    ball2 = svgd.BallSpec(center=np.zeros(1), radius=0.1)
    pts2 = svgd.projected_svgd(score, ball2, cfg, rng)
    inside = float(np.max(np.abs(pts2.particles)))
    ok = abs(mean) <= 0.05 and abs(var - 1.0) <= 0.1 and inside <= 0.1
    return ok, f"mean {mean:+.3f} (tol .05), var {var:.3f} (tol .1), " \
               f"max |x| {inside:.3f} (ball 0.1)"


def _st_grads():
    rng = np.random.default_rng(14)
    worst = 0.0
    net = diffcore.init_dense_net([3, 8, 4], 1, rng)
    x = rng.standard_normal(3)

    def ce_val():
        return diffcore.cross_entropy(diffcore.forward(net, x)[2], 1)

    cache = diffcore.forward_cache(net, x)
    g, _ = diffcore.backprop(net, cache,
                             dprobs=diffcore.cross_entropy_grad(
                                 cache.probs, np.array([1])))
    worst = max(worst, diffcore.finite_diff_check(
        ce_val, diffcore.param_arrays(net), g, h=1e-6))

    anchor = rng.standard_normal(3)
    spec = glot.LocalDensitySpec(anchor=anchor, lam=0.5, alpha=2.0,
                                 ball=svgd.BallSpec(center=anchor, radius=1.0),
                                 net=net, label=0)
    xt = anchor + 0.3 * rng.standard_normal(3)
    _, dx = glot.local_log_density(spec, xt)
    h = 1e-6
    fd = np.zeros_like(xt)
    for i in range(xt.size):
        e = np.zeros_like(xt)
        e[i] = h
        up = glot.local_log_density(spec, xt + e)[0]
        dn = glot.local_log_density(spec, xt - e)[0]
        fd[i] = (up - dn) / (2 * h)
    rel = float(np.max(np.abs(fd - dx) / np.maximum(np.abs(fd), 1e-8)))
    worst = max(worst, rel)

    pot = transport.init_potential_net(3, rng, hidden=8)
    sp = rng.standard_normal((4, 3))
    sq = rng.standard_normal((5, 3))
    _, pg, _, _ = transport.dual_potential_estimate(pot, sp, sq, 0.1)

    def pot_val():
        return transport.dual_potential_estimate(pot, sp, sq, 0.1)[0]

    worst = max(worst, diffcore.finite_diff_check(
        pot_val, diffcore.param_arrays(pot), pg, h=1e-6))
    return worst <= 1e-4, f"max rel err {worst:.2e} (tol 1e-4)"


def _st_qlimit():
    rng = np.random.default_rng(15)
    ok = True
    detail = ""
    for _ in range(5):
        m = int(rng.integers(3, 8))
        d = rng.uniform(0.2, 2.0, m)
        # keep the worst atom heavy so the finite-q mean closes within 1%:
        # the q-mean lower bound is w_max^(1/q) * sup
        w = rng.uniform(0.1, 1.0, m)
        w[np.argmax(d)] = 0.0
        w *= (1.0 - rng.uniform(0.6, 0.9)) / max(w.sum(), 1e-12)
        w[np.argmax(d)] = 1.0 - w.sum()
        sup = float(d.max())
        qs = [1, 2, 4, 8, 16, 32, 64]
        vals = [glot.coupling_sup_cost(w, d, q) for q in qs]
        mono = all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
        rel = abs(vals[-1] - sup) / sup
        if not (mono and rel <= 0.01):
            ok = False
        detail = f"q=64 rel gap {rel:.2e} (tol 1e-2), monotone {mono}"
    return ok, detail


SELFTEST_SUITES = [
    ("gibbs_closed_form_vs_ascent", _st_gibbs),
    ("sinkhorn_vs_exact_and_semidual", _st_ot),
    ("svgd_moments_and_ball", _st_svgd),
    ("gradient_finite_difference", _st_grads),
    ("sup_cost_large_q_limit", _st_qlimit),
]


def cmd_selftest(args):
    suites = list(SELFTEST_SUITES)
    if getattr(args, "force_fail", False):
        suites.append(("forced_failure", lambda: (False, "forced by flag")))
    all_ok = True
    width = max(len(name) for name, _ in suites)
    for name, fn in suites:
        try:
            ok, detail = fn()
        except Exception as e:   # a crashed suite is a failed suite
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        all_ok = all_ok and ok
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    print(f"selftest: {'all suites passed' if all_ok else 'FAILURES above'}")
    return 0 if all_ok else 1


def cmd_attack_eval(args):
    try:
        cfg = _load_config(args)
        eps_list = [float(tok) for tok in args.eps.split(",")] if args.eps \
            else [cfg.get("attack.eps")]
        for e in eps_list:
            if e < 0:
                raise ValueError("eps must be >= 0")
        rid, rows, net, task = run_experiment(cfg, cfg.get("run.preset"),
                                              cfg.get("run.seed"))
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 1
    if not _check_finite(rows):
        print("error: non-finite loss encountered", file=sys.stderr)
        return 1
    scenario = cfg.get("run.scenario")
    preset = cfg.get("run.preset")
    seed = cfg.get("run.seed")
    final = cfg.get("run.epochs") - 1
    out_rows = [(rid, seed, scenario, preset, final, "acc_natural",
                 train.evaluate(net, task.eval_set))]
    for e in eps_list:
        atk = train.AttackConfig(eps=e, k=cfg.get("attack.k"),
                                 step=cfg.get("attack.step"),
                                 clamp01=cfg.get("attack.clamp01"))
        acc = train.evaluate_robust(net, task.eval_set, atk)
        out_rows.append((rid, seed, scenario, preset, final,
                         f"acc_robust_eps{e:g}", acc))
    outdir = cfg.get("run.out")
    os.makedirs(outdir, exist_ok=True)
    write_csv(os.path.join(outdir, "attack.csv"), out_rows)
    for r in out_rows:
        print(f"{r[0]} {r[5]} = {r[6]:.6g}")
    return 0


# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", default=None, help="config file path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="run seed")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="glotdr",
        description="Global-local transport-robust training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    _add_common(p_train)

    p_sweep = sub.add_parser("sweep", help="run a preset/seed/parameter grid")
    _add_common(p_sweep)
    p_sweep.add_argument("--presets", default=None,
                         help="comma-separated presets")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_sweep.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                         help="config key with value list (repeatable)")

    p_self = sub.add_parser("selftest", help="run the oracle suites")
    p_self.add_argument("--force-fail", action="store_true",
                        help=argparse.SUPPRESS)

    p_atk = sub.add_parser("attack-eval",
                           help="train, then evaluate robustness at given eps")
    _add_common(p_atk)
    p_atk.add_argument("--eps", default=None,
                       help="comma-separated attack radii")

    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "sweep": cmd_sweep,
                "selftest": cmd_selftest, "attack-eval": cmd_attack_eval}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
