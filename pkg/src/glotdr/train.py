"""Training harnesses: the full global-local robust loop for the four
scenarios (domain adaptation, semi-supervised, multi-domain generalization,
adversarial robustness), plain/adversarial baselines, a PGD attack, and
evaluation helpers.

Determinism contract: a run is a pure function of (config, data, seed).  The
reduced configuration alpha=beta=0, n=0 consumes exactly the same RNG stream
as plain CE training and performs the same float operations in the same
order, so its trace is bit-identical to the baseline's.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore, glot, transport


@dataclass
class AttackConfig:
    eps: float = 8.0 / 255.0
    k: int = 200
    step: float = 2.0 / 255.0
    clamp01: bool = False     # project iterates to [0,1] (image data)

    def __post_init__(self):
        if self.eps < 0 or self.k < 0 or not self.step > 0:
            raise ValueError("attack needs eps >= 0, k >= 0, step > 0")


@dataclass
class MetricsTrace:
    rows: list = field(default_factory=list)   # (epoch, metric, value)

    def add(self, epoch, metric, value):
        self.rows.append((int(epoch), str(metric), float(value)))

    def series(self, metric):
        return [(e, v) for e, m, v in self.rows if m == metric]

    def last(self, metric):
        vals = self.series(metric)
        if not vals:
            raise KeyError(metric)
        return vals[-1][1]

    def metric_names(self):
        return sorted({m for _, m, _ in self.rows})


@dataclass
class TaskData:
    """What a scenario trains on: labeled source domains, an optional
    unlabeled target batch pool, and a labeled evaluation set."""
    sources: list
    eval_set: object
    target: object = None


SCENARIOS = ("da", "ssl", "dg", "aml")


@dataclass
class TrainConfig:
    scenario: str = "da"
    epochs: int = 30
    batch_source: int = 32
    batch_target: int = 32
    hidden: tuple = (16, 16)          # feature stack widths; last = latent dim
    optimizer: str = "sgd_momentum"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: diffcore.ScheduleSpec = field(
        default_factory=lambda: diffcore.ScheduleSpec(kind="constant"))
    rampup_length: int = 0            # >0 ramps alpha/beta over early epochs
    weights: glot.RiskWeights = field(default_factory=glot.RiskWeights)
    particles: glot.ParticleConfig = field(default_factory=glot.ParticleConfig)
    ot: transport.SinkhornConfig = field(
        default_factory=transport.SinkhornConfig)
    global_estimator: str = "sinkhorn"   # "sinkhorn" | "potential"
    potential_hidden: int = 64
    potential_lr: float = 1e-3
    attack: AttackConfig = field(default_factory=AttackConfig)
    trade: float = 1.0                # TRADES trade-off
    dg_append_epochs: tuple = ()      # optional: fold particles into the data
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.global_estimator not in ("sinkhorn", "potential"):
            raise ValueError("global_estimator must be sinkhorn or potential")


def _check_data(cfg, data):
    for ds in data.sources:
        if ds.y is None:
            raise ValueError("source domains must be labeled")
    if cfg.scenario == "dg":
        if data.target is not None:
            raise ValueError("generalization runs train without target inputs")
        if len(data.sources) < 2:
            raise ValueError("generalization needs at least 2 source domains")
    if cfg.scenario == "aml" and len(data.sources) != 1:
        raise ValueError("adversarial runs use a single labeled domain")
    if cfg.scenario in ("da", "ssl") and data.target is None:
        raise ValueError(f"{cfg.scenario} runs need target inputs")
    if data.eval_set.y is None:
        raise ValueError("evaluation set must be labeled")


def _n_classes(data):
    return int(max(ds.y.max() for ds in data.sources)) + 1


def _init_run(cfg, data):
    _check_data(cfg, data)
    M = _n_classes(data)
    d = data.sources[0].x.shape[1]
    rng = np.random.default_rng(cfg.seed)
    net = diffcore.init_dense_net([d, *cfg.hidden, M], len(cfg.hidden), rng)
    opt = diffcore.init_optimizer(net, cfg.optimizer, lr=cfg.lr,
                                  momentum=cfg.momentum,
                                  weight_decay=cfg.weight_decay)
    return net, opt, rng, M


def _epoch_perms(rng, data, use_target):
    perms = [rng.permutation(ds.size) for ds in data.sources]
    tperm = None
    if use_target and data.target is not None and data.target.size:
        tperm = rng.permutation(data.target.size)
    return perms, tperm


def _chunk(perm, t, bs):
    idx = np.arange(t * bs, (t + 1) * bs) % perm.shape[0]
    return perm[idx]


def _use_target(cfg, data):
    if cfg.scenario not in ("da", "ssl") or data.target is None \
            or data.target.size == 0:
        return False
    w, p = cfg.weights, cfg.particles
    return w.beta != 0.0 or (w.alpha != 0.0 and p.n_target > 0)


def _ramp(cfg, epoch):
    if cfg.rampup_length <= 0:
        return 1.0
    spec = diffcore.ScheduleSpec(kind="exp_rampup", total_epochs=cfg.epochs,
                                 rampup_length=cfg.rampup_length)
    return diffcore.schedule_factor(spec, epoch)


def _eval_epoch(trace, epoch, cfg, net, data):
    trace.add(epoch, "acc_eval", evaluate(net, data.eval_set))
    if cfg.scenario == "aml":
        trace.add(epoch, "acc_robust",
                  evaluate_robust(net, data.eval_set, cfg.attack))


# ---------------------------------------------------------------------------
# evaluation and attacks

def evaluate(net, dataset):
    """Argmax accuracy; argmax ties resolve to the lowest class index."""
    if dataset.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = diffcore.forward(net, dataset.x)[2]
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == dataset.y))


def evaluate_robust(net, dataset, atk):
    """Accuracy after attacking every point."""
    if dataset.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    adv = pgd_attack(net, dataset.x, dataset.y, atk)
    probs = diffcore.forward(net, adv)[2]
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == dataset.y))


def pgd_attack(net, x, y, atk):
    """Sign-gradient ascent on the classification loss, projected to the
    L_inf ball of radius eps around x (and to [0,1] when clamp01 is set).

    Returns, per sample, the worst iterate by loss — including the clean
    point, so attacking never lowers the loss and robust accuracy is at most
    natural accuracy.  Deterministic: no random start.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if atk.eps == 0.0 or atk.k == 0:
        return x.copy()
    best = x.copy()
    best_loss = diffcore.cross_entropy_batch(diffcore.forward(net, x)[2], y)
    adv = x.copy()
    for _ in range(atk.k):
        cache = diffcore.forward_cache(net, adv)
        dprobs = diffcore.cross_entropy_grad(cache.probs, y)
        dx = diffcore.backprop(net, cache, dprobs=dprobs)[1]
        adv = adv + atk.step * np.sign(dx)
        adv = np.clip(adv, x - atk.eps, x + atk.eps)
        if atk.clamp01:
            adv = np.clip(adv, 0.0, 1.0)
        loss = diffcore.cross_entropy_batch(diffcore.forward(net, adv)[2], y)
        gain = loss > best_loss
        best[gain] = adv[gain]
        best_loss[gain] = loss[gain]
    return best


def _kl_attack(net, x, atk, rng):
    """Divergence-seeking attack: maximize KL(pred(adv) || pred(clean)).
    Needs a small random start — the objective's gradient vanishes at the
    clean point.
    """
    x = np.asarray(x, dtype=np.float64)
    p_clean = diffcore.forward(net, x)[2]
    adv = x + 1e-3 * rng.standard_normal(x.shape)
    adv = np.clip(adv, x - atk.eps, x + atk.eps)
    if atk.clamp01:
        adv = np.clip(adv, 0.0, 1.0)
    f = diffcore.PROB_FLOOR
    for _ in range(atk.k):
        cache = diffcore.forward_cache(net, adv)
        lr = np.log(cache.probs + f) - np.log(p_clean + f)
        dprobs = lr + cache.probs / (cache.probs + f)
        dx = diffcore.backprop(net, cache, dprobs=dprobs)[1]
        adv = adv + atk.step * np.sign(dx)
        adv = np.clip(adv, x - atk.eps, x + atk.eps)
        if atk.clamp01:
            adv = np.clip(adv, 0.0, 1.0)
    return adv


# ---------------------------------------------------------------------------
# baselines

def train_erm(cfg, data):
    """Plain cross-entropy minimization over the pooled source batches."""
    net, opt, rng, M = _init_run(cfg, data)
    trace = MetricsTrace()
    for epoch in range(cfg.epochs):
        perms, _ = _epoch_perms(rng, data, use_target=False)
        steps = max(1, -(-data.sources[0].size // cfg.batch_source))
        lr_f = diffcore.schedule_factor(cfg.schedule, epoch)
        ce_sum = 0.0
        for t in range(steps):
            grads = diffcore.zero_grads(net)
            n_total = cfg.batch_source * len(data.sources)
            for ds, perm in zip(data.sources, perms):
                idx = _chunk(perm, t, cfg.batch_source)
                cache = diffcore.forward_cache(net, ds.x[idx])
                yb = ds.y[idx]
                ce_sum += float(
                    diffcore.cross_entropy_batch(cache.probs, yb).sum()) / n_total
                dprobs = diffcore.cross_entropy_grad(cache.probs, yb) / n_total
                g, _ = diffcore.backprop(net, cache, dprobs=dprobs)
                diffcore.add_grads(grads, g)
            diffcore.apply_update(net, grads, opt, lr_factor=lr_f)
        trace.add(epoch, "loss_ce", ce_sum / steps)
        trace.add(epoch, "loss_local", 0.0)
        trace.add(epoch, "loss_global", 0.0)
        trace.add(epoch, "lr", cfg.lr * lr_f)
        _eval_epoch(trace, epoch, cfg, net, data)
    return net, trace


def train_pgd_at(cfg, data):
    """Adversarial training: plain CE on attacked inputs.  With eps=0 the
    attack is the identity and the trajectory equals plain training."""
    net, opt, rng, M = _init_run(cfg, data)
    trace = MetricsTrace()
    for epoch in range(cfg.epochs):
        perms, _ = _epoch_perms(rng, data, use_target=False)
        steps = max(1, -(-data.sources[0].size // cfg.batch_source))
        lr_f = diffcore.schedule_factor(cfg.schedule, epoch)
        ce_sum = 0.0
        for t in range(steps):
            grads = diffcore.zero_grads(net)
            n_total = cfg.batch_source * len(data.sources)
            for ds, perm in zip(data.sources, perms):
                idx = _chunk(perm, t, cfg.batch_source)
                xb = ds.x[idx]
                yb = ds.y[idx]
                if cfg.attack.eps != 0.0 and cfg.attack.k != 0:
                    xb = pgd_attack(net, xb, yb, cfg.attack)
                cache = diffcore.forward_cache(net, xb)
                ce_sum += float(
                    diffcore.cross_entropy_batch(cache.probs, yb).sum()) / n_total
                dprobs = diffcore.cross_entropy_grad(cache.probs, yb) / n_total
                g, _ = diffcore.backprop(net, cache, dprobs=dprobs)
                diffcore.add_grads(grads, g)
            diffcore.apply_update(net, grads, opt, lr_factor=lr_f)
        trace.add(epoch, "loss_ce", ce_sum / steps)
        trace.add(epoch, "loss_local", 0.0)
        trace.add(epoch, "loss_global", 0.0)
        trace.add(epoch, "lr", cfg.lr * lr_f)
        _eval_epoch(trace, epoch, cfg, net, data)
    return net, trace


def train_trades(cfg, data):
    """CE on clean inputs plus cfg.trade times the divergence between
    predictions at attacked and clean inputs.  trade=0 skips the attack
    entirely (and its RNG draws), reducing to plain training."""
    net, opt, rng, M = _init_run(cfg, data)
    trace = MetricsTrace()
    f = diffcore.PROB_FLOOR
    for epoch in range(cfg.epochs):
        perms, _ = _epoch_perms(rng, data, use_target=False)
        steps = max(1, -(-data.sources[0].size // cfg.batch_source))
        lr_f = diffcore.schedule_factor(cfg.schedule, epoch)
        ce_sum = 0.0
        kl_sum = 0.0
        for t in range(steps):
            grads = diffcore.zero_grads(net)
            n_total = cfg.batch_source * len(data.sources)
            for ds, perm in zip(data.sources, perms):
                idx = _chunk(perm, t, cfg.batch_source)
                xb = ds.x[idx]
                yb = ds.y[idx]
                cache = diffcore.forward_cache(net, xb)
                ce_sum += float(
                    diffcore.cross_entropy_batch(cache.probs, yb).sum()) / n_total
                dprobs = diffcore.cross_entropy_grad(cache.probs, yb) / n_total
                if cfg.trade != 0.0:
                    adv = _kl_attack(net, xb, cfg.attack, rng)
                    acache = diffcore.forward_cache(net, adv)
                    pa, pc = acache.probs, cache.probs
                    lr_term = np.log(pa + f) - np.log(pc + f)
                    kl_sum += cfg.trade * float(
                        np.sum(pa * lr_term)) / n_total
                    dadv = cfg.trade * (lr_term + pa / (pa + f)) / n_total
                    dclean = cfg.trade * (-pa / (pc + f)) / n_total
                    g, _ = diffcore.backprop(net, acache, dprobs=dadv)
                    diffcore.add_grads(grads, g)
                    dprobs = dprobs + dclean
                g, _ = diffcore.backprop(net, cache, dprobs=dprobs)
                diffcore.add_grads(grads, g)
            diffcore.apply_update(net, grads, opt, lr_factor=lr_f)
        trace.add(epoch, "loss_ce", ce_sum / steps)
        trace.add(epoch, "loss_local", kl_sum / steps)
        trace.add(epoch, "loss_global", 0.0)
        trace.add(epoch, "lr", cfg.lr * lr_f)
        _eval_epoch(trace, epoch, cfg, net, data)
    return net, trace


# ---------------------------------------------------------------------------
# the full loop

def _head_offset(net):
    return 2 * len(net.feature_layers)


def _add_head_grads(grads, head_grads, off):
    for i, g in enumerate(head_grads):
        if g is not None:
            grads[off + i] += g


def _concat_cost_fn(gamma_pred, feat_dim, gate=None):
    """Composite transport cost over concatenated [features, probs] vectors
    for the potential estimator; returns (C, dC_dq, dC_dp) per call."""
    def fn(xq, yp):
        fq, pq = xq[:, :feat_dim], xq[:, feat_dim:]
        fp, pp = yp[:, :feat_dim], yp[:, feat_dim:]
        fdiff = fq[:, None, :] - fp[None, :, :]
        C = np.einsum("qik,qik->qi", fdiff, fdiff)
        dq_f, dp_f = 2.0 * fdiff, -2.0 * fdiff
        if gamma_pred != 0.0:
            pdiff = pq[:, None, :] - pp[None, :, :]
            C = C + gamma_pred * np.abs(pdiff).sum(axis=-1)
            sgn = np.sign(pdiff)
            dq_p, dp_p = gamma_pred * sgn, -gamma_pred * sgn
        else:
            dq_p = np.zeros(fdiff.shape[:2] + (pq.shape[1],))
            dp_p = np.zeros_like(dq_p)
        dq = np.concatenate([dq_f, dq_p], axis=-1)
        dp = np.concatenate([dp_f, dp_p], axis=-1)
        if gate is not None:
            C = C * gate
            dq = dq * gate[:, :, None]
            dp = dp * gate[:, :, None]
        return C, dq, dp
    return fn


class _PotentialEstimator:
    """Carries the trainable OT potential and its optimizer; each call
    returns the current value estimate + input gradients, then takes one
    ascent step on the potential's own parameters."""

    def __init__(self, cfg, net, M, rng):
        dim = net.latent_dim + M
        self.pot = transport.init_potential_net(dim, rng,
                                                hidden=cfg.potential_hidden)
        self.opt = diffcore.init_optimizer(self.pot, "adam",
                                           lr=cfg.potential_lr)
        self.eps = cfg.ot.eps_ot
        self.feat_dim = net.latent_dim

    def __call__(self, feat_p, prob_p, feat_q, prob_q, gamma_pred, gate=None):
        up = np.concatenate([feat_p, prob_p], axis=1)
        uq = np.concatenate([feat_q, prob_q], axis=1)
        cost_fn = _concat_cost_fn(gamma_pred, self.feat_dim, gate=gate)
        value, pot_grads, dp, dq = transport.dual_potential_estimate(
            self.pot, up, uq, self.eps, cost_fn=cost_fn)
        diffcore.apply_update(
            self.pot, [-g for g in pot_grads], self.opt)
        fd = self.feat_dim
        return (value, dp[:, :fd], dp[:, fd:], dq[:, :fd], dq[:, fd:])


def train_glot(cfg, data):
    """Full loop: per step, draw particles from the local densities with the
    network frozen, then take one descent step on the assembled risk with
    the particles frozen; the global term uses the scenario's regularizer.
    """
    net, opt, rng, M = _init_run(cfg, data)
    if cfg.global_estimator == "potential" and cfg.scenario == "dg":
        raise ValueError("the potential estimator does not cover the "
                         "per-class mixture objective; use sinkhorn")
    use_target = _use_target(cfg, data)
    pot = None
    if cfg.global_estimator == "potential" and cfg.weights.beta != 0.0:
        pot = _PotentialEstimator(cfg, net, M, rng)
    trace = MetricsTrace()
    sources = list(data.sources)
    for epoch in range(cfg.epochs):
        if cfg.dg_append_epochs and epoch in cfg.dg_append_epochs:
            sources = _append_particles(cfg, net, sources, rng)
        perms, tperm = _epoch_perms(rng, TaskData(sources, data.eval_set,
                                                  data.target), use_target)
        steps = max(1, -(-sources[0].size // cfg.batch_source))
        lr_f = diffcore.schedule_factor(cfg.schedule, epoch)
        tau = _ramp(cfg, epoch)
        alpha = cfg.weights.alpha * tau
        beta = cfg.weights.beta * tau
        sums = {"loss_ce": 0.0, "loss_local": 0.0, "loss_global": 0.0}
        for t in range(steps):
            xs = []
            ys = []
            for ds, perm in zip(sources, perms):
                idx = _chunk(perm, t, cfg.batch_source)
                xs.append(ds.x[idx])
                ys.append(ds.y[idx])
            xt = None
            if use_target:
                tidx = _chunk(tperm, t, cfg.batch_target)
                xt = data.target.x[tidx]
            batch = glot.AnchorBatch(xs, ys, xt)
            ce, loc, glo = _glot_step(cfg, net, opt, batch, rng, alpha, beta,
                                      lr_f, pot)
            sums["loss_ce"] += ce
            sums["loss_local"] += loc
            sums["loss_global"] += glo
        for name in ("loss_ce", "loss_local", "loss_global"):
            trace.add(epoch, name, sums[name] / steps)
        trace.add(epoch, "lr", cfg.lr * lr_f)
        _eval_epoch(trace, epoch, cfg, net, data)
    return net, trace


def _append_particles(cfg, net, sources, rng):
    """Optional dataset-growing mode: draw one particle cloud over each full
    source domain and append it (with copied labels) to that domain."""
    if cfg.particles.space != "input":
        raise ValueError("appending particles to the dataset requires "
                         "input-space perturbations")
    out = []
    for ds in sources:
        batch = glot.AnchorBatch([ds.x], [ds.y], None)
        pb = glot.sample_particles(batch, cfg.particles, net, rng)
        parts = pb.source[0][:, 1:]
        n = parts.shape[1]
        if n == 0:
            out.append(ds)
            continue
        newx = np.concatenate([ds.x, parts.reshape(-1, ds.x.shape[1])])
        newy = np.concatenate([ds.y, np.repeat(ds.y, n)])
        out.append(type(ds)(newx, newy, domain_id=ds.domain_id))
    return out


def _glot_step(cfg, net, opt, batch, rng, alpha, beta, lr_f, pot):
    """One alternation: frozen-net particle draw, then one parameter update
    on the risk.  Returns the step's (ce, local, global) contributions."""
    pcfg = cfg.particles
    n_s = pcfg.n_source
    n_t = pcfg.n_target if batch.target_x is not None else 0
    want_parts = (n_s > 0 or (n_t > 0 and batch.target_x is not None))
    if want_parts:
        sample_cfg = glot.ParticleConfig(
            n_source=n_s, n_target=n_t, iters=pcfg.iters, step=pcfg.step,
            radius=pcfg.radius, norm=pcfg.norm, space=pcfg.space,
            init_noise=pcfg.init_noise, bandwidth=pcfg.bandwidth,
            lam=pcfg.lam, alpha=alpha)
        perturbed = glot.sample_particles(batch, sample_cfg, net, rng)
    else:
        perturbed = None
    ce, loc, glo, grads = risk_grads(cfg, net, batch, perturbed, alpha, beta,
                                     pot=pot)
    diffcore.apply_update(net, grads, opt, lr_factor=lr_f)
    return ce, loc, glo


def risk_grads(cfg, net, batch, perturbed, alpha, beta, pot=None):
    """Assemble the composite risk's value and parameter gradients for one
    minibatch with the particle cloud held fixed.  Returns the (ce, local,
    global) contributions and the gradient list; the particle positions are
    treated as constants, and the global term's plan (or potential) is
    likewise frozen, so the gradients are exact at the inner optima.
    """
    w = cfg.weights
    n_s = perturbed.source[0].shape[1] - 1 if perturbed is not None else 0
    n_t = 0
    if perturbed is not None and perturbed.target is not None:
        n_t = perturbed.target.shape[1] - 1

    latent = cfg.particles.space == "latent" and perturbed is not None
    head = net.head_view()
    off = _head_offset(net)
    grads = diffcore.zero_grads(net)
    N_S = batch.n_source
    ce_val = 0.0
    loc_val = 0.0
    glo_val = 0.0

    src_caches = [diffcore.forward_cache(net, x) for x in batch.source_x]
    src_dprobs = [np.zeros_like(c.probs) for c in src_caches]
    src_dfeats = [np.zeros_like(c.features) for c in src_caches]
    tgt_cache = None
    tgt_dprobs = tgt_dfeat = None
    if batch.target_x is not None:
        tgt_cache = diffcore.forward_cache(net, batch.target_x)
        tgt_dprobs = np.zeros_like(tgt_cache.probs)
        tgt_dfeat = np.zeros_like(tgt_cache.features)

    # classification at the anchors
    for k, (cache, y) in enumerate(zip(src_caches, batch.source_y)):
        ce_val += float(
            diffcore.cross_entropy_batch(cache.probs, y).sum()) / N_S
        src_dprobs[k] += diffcore.cross_entropy_grad(cache.probs, y) / N_S

    # local terms + particle classification
    part_probs = []     # per domain: (B, n, M) probs of j>=1 slots
    part_caches = []
    if perturbed is not None and n_s > 0:
        for k, (tilde, y) in enumerate(zip(perturbed.source,
                                           perturbed.source_labels)):
            B = tilde.shape[0]
            flat = tilde[:, 1:].reshape(B * n_s, -1)
            pnet = head if latent else net
            cache = diffcore.forward_cache(pnet, flat)
            part_caches.append(cache)
            part_probs.append(cache.probs.reshape(B, n_s, -1))
            rep = np.repeat(y, n_s)
            scale = 1.0 / (N_S * n_s)
            ce_val += float(
                diffcore.cross_entropy_batch(cache.probs, rep).sum()) * scale
            dpart = diffcore.cross_entropy_grad(cache.probs, rep) * scale
            pa = np.repeat(src_caches[k].probs, n_s, axis=0)
            if alpha != 0.0:
                s = diffcore.symmetric_kl_batch(pa, cache.probs)
                loc_val += alpha * float(s.sum()) * scale
                dpa, dpp = diffcore.symmetric_kl_grad(pa, cache.probs)
                dpart += alpha * scale * dpp
                src_dprobs[k] += alpha * scale * np.add.reduceat(
                    dpa, np.arange(0, B * n_s, n_s), axis=0)
            if latent:
                hg = diffcore.backprop(head, cache, dprobs=dpart)[0]
                _add_head_grads(grads, hg, off)
            else:
                g = diffcore.backprop(net, cache, dprobs=dpart)[0]
                diffcore.add_grads(grads, g)
    if perturbed is not None and perturbed.target is not None \
            and n_t > 0 and alpha != 0.0:
        tilde = perturbed.target
        B = tilde.shape[0]
        flat = tilde[:, 1:].reshape(B * n_t, -1)
        pnet = head if latent else net
        cache = diffcore.forward_cache(pnet, flat)
        pa = np.repeat(tgt_cache.probs, n_t, axis=0)
        s = diffcore.symmetric_kl_batch(pa, cache.probs)
        scale = 1.0 / (B * n_t)
        loc_val += alpha * float(s.sum()) * scale
        dpa, dpp = diffcore.symmetric_kl_grad(pa, cache.probs)
        tgt_dprobs += alpha * scale * np.add.reduceat(
            dpa, np.arange(0, B * n_t, n_t), axis=0)
        if latent:
            hg = diffcore.backprop(head, cache, dprobs=alpha * scale * dpp)[0]
            _add_head_grads(grads, hg, off)
        else:
            g = diffcore.backprop(net, cache, dprobs=alpha * scale * dpp)[0]
            diffcore.add_grads(grads, g)

    # global term
    if beta != 0.0:
        if cfg.scenario in ("da", "ssl"):
            sf = np.concatenate([c.features for c in src_caches])
            sp = np.concatenate([c.probs for c in src_caches])
            if pot is not None:
                gval, dsf, dsp, dtf, dtp = pot(sf, sp, tgt_cache.features,
                                               tgt_cache.probs, w.gamma_pred)
            else:
                gval, dsf, dsp, dtf, dtp = glot.global_da_ssl_grads(
                    sf, sp, tgt_cache.features, tgt_cache.probs,
                    w.gamma_pred, cfg.ot)
            glo_val += beta * gval
            lo = 0
            for k, c in enumerate(src_caches):
                hi = lo + c.probs.shape[0]
                src_dfeats[k] += beta * dsf[lo:hi]
                src_dprobs[k] += beta * dsp[lo:hi]
                lo = hi
            tgt_dfeat += beta * dtf
            tgt_dprobs += beta * dtp
        elif cfg.scenario == "dg":
            cells = []
            spans = []
            for k, (cache, y) in enumerate(zip(src_caches, batch.source_y)):
                for m in np.unique(y):
                    rows = np.nonzero(y == m)[0]
                    cells.append(glot.ClassConditionalMeasure(
                        k, int(m), cache.features[rows]))
                    spans.append((k, rows))
            gval, cell_grads = glot.global_dg_grads(cells, batch.n_domains,
                                                    cfg.ot)
            glo_val += beta * gval
            for (k, rows), cg in zip(spans, cell_grads):
                src_dfeats[k][rows] += beta * cg
        else:   # aml: benign anchors vs their adversarial particles
            if perturbed is not None and n_s > 0:
                cf = np.concatenate([c.features for c in src_caches])
                cp = np.concatenate([c.probs for c in src_caches])
                cl = np.concatenate(batch.source_y)
                al = np.repeat(cl, n_s)
                ap = np.concatenate([p.reshape(-1, p.shape[-1])
                                     for p in part_probs])
                if latent:
                    af = np.concatenate(
                        [tilde[:, 1:].reshape(-1, tilde.shape[-1])
                         for tilde in perturbed.source])
                else:
                    af = np.concatenate([c.features for c in part_caches])
                gate = None
                if pot is not None:
                    gate = (al[:, None] == cl[None, :]).astype(np.float64)
                    gval, dcf, dcp, daf, dap = pot(cf, cp, af, ap,
                                                   w.gamma_pred, gate=gate)
                else:
                    gval, dcf, dcp, daf, dap = glot.global_aml_grads(
                        cf, cp, cl, af, ap, al, w.gamma_pred, cfg.ot)
                glo_val += beta * gval
                lo = 0
                for k, c in enumerate(src_caches):
                    hi = lo + c.probs.shape[0]
                    src_dfeats[k] += beta * dcf[lo:hi]
                    src_dprobs[k] += beta * dcp[lo:hi]
                    lo = hi
                # adversarial-side gradients re-enter through the particles'
                # probability channel (and features when in input space)
                lo = 0
                for k, cache in enumerate(part_caches):
                    B = perturbed.source[k].shape[0]
                    hi = lo + B * n_s
                    if latent:
                        hg = diffcore.backprop(
                            head, cache, dprobs=beta * dap[lo:hi])[0]
                        _add_head_grads(grads, hg, off)
                    else:
                        g = diffcore.backprop(
                            net, cache, dprobs=beta * dap[lo:hi],
                            dfeatures=beta * daf[lo:hi])[0]
                        diffcore.add_grads(grads, g)
                    lo = hi

    # one backward pass per anchor cache with all channels combined
    for cache, dp, df in zip(src_caches, src_dprobs, src_dfeats):
        g, _ = diffcore.backprop(net, cache, dprobs=dp, dfeatures=df)
        diffcore.add_grads(grads, g)
    if tgt_cache is not None:
        g, _ = diffcore.backprop(net, tgt_cache, dprobs=tgt_dprobs,
                                 dfeatures=tgt_dfeat)
        diffcore.add_grads(grads, g)

    return ce_val, loc_val, glo_val, grads
