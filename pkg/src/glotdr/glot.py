"""Core training objects for globally+locally regularized distributional
robustness.

This module owns the repeated-sample batch layout (each anchor carries its
perturbed copies, with the anchor itself stored at slot j=0), the transport
cost with hard anchor/label constraints, the closed-form local Gibbs
densities over epsilon-balls, SVGD-based particle sampling from those
densities, the assembled risk, and three scenario-specific global
regularizers (adaptation/semi-supervised, multi-domain generalization,
adversarial) with exact fixed-plan gradients.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import backend, diffcore, svgd, transport


@dataclass
class AnchorBatch:
    """A draw of anchors: K source groups with labels, optional unlabeled
    target inputs (possibly empty)."""
    source_x: list                    # K arrays (B_k, d)
    source_y: list                    # K arrays (B_k,) int labels
    target_x: np.ndarray = None       # (B_T, d) or None

    def __post_init__(self):
        if len(self.source_x) == 0 or len(self.source_x) != len(self.source_y):
            raise ValueError("need K >= 1 source groups with matching labels")
        self.source_x = [np.asarray(x, dtype=np.float64) for x in self.source_x]
        self.source_y = [np.asarray(y, dtype=np.int64) for y in self.source_y]
        for x, y in zip(self.source_x, self.source_y):
            if x.shape[0] != y.shape[0]:
                raise ValueError("labels do not match inputs")
            if y.size and y.min() < 0:
                raise ValueError("labels must be nonnegative")
        if self.target_x is not None:
            self.target_x = np.asarray(self.target_x, dtype=np.float64)

    @property
    def n_domains(self):
        return len(self.source_x)

    @property
    def n_source(self):
        return sum(x.shape[0] for x in self.source_x)

    @property
    def n_target(self):
        return 0 if self.target_x is None else self.target_x.shape[0]


@dataclass
class PerturbedBatch:
    """Anchors bundled with their particles: slot j=0 is the anchor itself,
    slots j>=1 are perturbations inside the anchor's ball; labels are copied
    from the anchors and never perturbed.  `space` records whether the point
    arrays live in input space or in the feature (latent) space."""
    source: list                      # K arrays (B_k, 1+n_s, d)
    source_labels: list               # K arrays (B_k,)
    target: np.ndarray = None         # (B_T, 1+n_t, d) or None
    space: str = "input"

    def __post_init__(self):
        if self.space not in ("input", "latent"):
            raise ValueError(f"unknown space {self.space!r}")

    @property
    def n_source_particles(self):
        return self.source[0].shape[1] - 1 if self.source else 0

    @property
    def n_target_particles(self):
        return 0 if self.target is None else self.target.shape[1] - 1


@dataclass
class RiskWeights:
    alpha: float = 1.0       # local term
    beta: float = 1.0        # global term
    gamma_pred: float = 0.5  # prediction part of the composite cost d

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma_pred < 0:
            raise ValueError("risk weights must be nonnegative")


@dataclass
class ClassConditionalMeasure:
    """Uniform empirical measure over the latent codes of one (domain, class)
    cell."""
    domain: int
    label: int
    points: np.ndarray    # (n_km, latent_dim)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError("cell must hold at least one latent point")


# ---------------------------------------------------------------------------
# transport cost over repeated-sample tuples

def rho_cost(batch, perturbed, p, q):
    """Cost between an anchor tuple and its perturbed tuple.

    +inf iff any j=0 slot differs from its anchor or any label differs;
    otherwise sum over all j>=1 slots of ||particle - anchor||_p^q.  The
    anchor arrays must live in the same space as `perturbed`.
    """
    if (batch.target_x is None) != (perturbed.target is None):
        raise ValueError("target sides do not align")
    if batch.n_domains != len(perturbed.source):
        raise ValueError("source group counts do not align")
    total = 0.0
    for x, y, tilde, ty in zip(batch.source_x, batch.source_y,
                               perturbed.source, perturbed.source_labels):
        if not (np.array_equal(tilde[:, 0], x) and np.array_equal(ty, y)):
            return np.inf
        if tilde.shape[1] > 1:
            dist = np.linalg.norm(tilde[:, 1:] - x[:, None, :], ord=p, axis=-1)
            total += float(np.sum(dist ** q))
    if perturbed.target is not None:
        if not np.array_equal(perturbed.target[:, 0], batch.target_x):
            return np.inf
        if perturbed.target.shape[1] > 1:
            dist = np.linalg.norm(
                perturbed.target[:, 1:] - batch.target_x[:, None, :],
                ord=p, axis=-1)
            total += float(np.sum(dist ** q))
    return total


def coupling_sup_cost(weights, dists, q):
    """E_coupling[rho]^(1/q) for a finite coupling.

    weights: atom probabilities; dists: per-atom arrays of per-sample
    distances (rho(atom) = sum_s d_s^q).  Evaluated through log-sum-exp so
    large q does not overflow; grows toward coupling_sup(dists) as q -> inf.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    terms = []
    for w, d in zip(np.asarray(weights, dtype=np.float64), dists):
        d = np.atleast_1d(np.asarray(d, dtype=np.float64))
        with np.errstate(divide="ignore"):
            terms.append(np.log(w) + q * np.log(d))
    allt = np.concatenate(terms)
    if np.all(np.isneginf(allt)):
        return 0.0
    return float(np.exp(logsumexp(allt) / q))


def coupling_sup(dists):
    """Largest per-sample distance anywhere in the coupling's support."""
    return float(max(np.max(np.atleast_1d(d)) for d in dists))


# ---------------------------------------------------------------------------
# local Gibbs densities

@dataclass
class LocalDensitySpec:
    """Unnormalized local log-density over the ball around one anchor.

    With a label: lam*(alpha*s + ce) where s is the symmetric KL between the
    network outputs at the anchor and at the query, ce the classification
    loss at the query.  Without a label: lam*alpha*s.
    """
    anchor: np.ndarray
    lam: float
    alpha: float
    ball: svgd.BallSpec
    net: diffcore.NetworkParams
    label: int = None

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    @property
    def mode(self):
        return "target" if self.label is None else "source"


def local_log_density(spec, xt):
    """Log-density (up to the normalizing constant) and its input gradient.

    xt: (m, d) or (d,).  Gradients flow through the network exactly; a
    non-finite network output raises.
    """
    xt = np.asarray(xt, dtype=np.float64)
    squeeze = xt.ndim == 1
    if squeeze:
        xt = xt[None, :]
    pa = diffcore.forward(spec.net, spec.anchor)[2]
    cache = diffcore.forward_cache(spec.net, xt)
    s = diffcore.symmetric_kl_batch(pa, cache.probs)
    dq = diffcore.symmetric_kl_grad(pa, cache.probs)[1]
    values = spec.lam * spec.alpha * s
    dprobs = spec.lam * spec.alpha * dq
    if spec.label is not None:
        labels = np.full(xt.shape[0], spec.label, dtype=np.int64)
        values = values + spec.lam * diffcore.cross_entropy_batch(cache.probs, labels)
        dprobs = dprobs + spec.lam * diffcore.cross_entropy_grad(cache.probs, labels)
    _, dx = diffcore.backprop(spec.net, cache, dprobs=dprobs)
    if squeeze:
        return float(values[0]), dx[0]
    return values, dx


def gibbs_conditional_oracle(points, r_values, lam):
    """Discretized optimal local conditional over candidate ball points.

    Closed form: softmax(lam * r).  The independent route — numerically
    maximizing sum(w*r) + H(w)/lam over the simplex — is
    gibbs_simplex_oracle; tests require the two to agree.
    """
    r_values = np.asarray(r_values, dtype=np.float64)
    if not lam > 0:
        raise ValueError("lam must be positive")
    if points is not None and len(points) != r_values.shape[0]:
        raise ValueError("candidate count does not match r_values")
    return diffcore.softmax(lam * r_values)


def gibbs_simplex_oracle(r_values, lam):
    """Entropy-regularized linear maximization over the simplex by projected
    gradient ascent; agrees with the closed form at its optimum."""
    r_values = np.asarray(r_values, dtype=np.float64)
    if not lam > 0:
        raise ValueError("lam must be positive")
    return backend.simplex_entropy_ascent(r_values, lam)


# ---------------------------------------------------------------------------
# particle sampling

@dataclass
class ParticleConfig:
    n_source: int = 2
    n_target: int = 2
    iters: int = 15
    step: object = 0.002           # scalar or callable(iteration) -> step
    radius: float = 0.1
    norm: float = np.inf
    space: str = "input"           # "input" or "latent"
    init_noise: float = None       # default radius/2
    bandwidth: object = "median_heuristic"
    lam: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        if self.n_source < 0 or self.n_target < 0:
            raise ValueError("particle counts must be nonnegative")
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.space not in ("input", "latent"):
            raise ValueError(f"unknown space {self.space!r}")


def _batched_local_score(net, anchor_probs, n, lam, alpha, labels=None):
    """Score function for projected_svgd_batch: maps particle blocks
    (B, n, d) to the gradient of the local log-density, one anchor per row."""
    pa_rep = np.repeat(anchor_probs, n, axis=0)
    lab_rep = None if labels is None else np.repeat(labels, n)

    def score(parts):
        B = parts.shape[0]
        flat = parts.reshape(B * n, -1)
        cache = diffcore.forward_cache(net, flat)
        dq = diffcore.symmetric_kl_grad(pa_rep, cache.probs)[1]
        dprobs = lam * alpha * dq
        if lab_rep is not None:
            dprobs = dprobs + lam * diffcore.cross_entropy_grad(cache.probs, lab_rep)
        dx = diffcore.backprop(net, cache, dprobs=dprobs)[1]
        return dx.reshape(parts.shape)

    return score


def _anchors_only(points, n):
    return np.repeat(points[:, None, :], n + 1, axis=1)


def sample_particles(batch, cfg, net, rng):
    """Draw the perturbed batch: per-anchor SVGD on the local log-density.

    In latent space the anchors are first embedded with the feature stack
    and the densities run through the classifier head only.  With zero
    particles or a zero-radius ball the RNG is never touched and the
    returned slots are exact anchor copies.
    """
    if cfg.space == "latent":
        density_net = net.head_view()
        src_pts = [diffcore.forward(net, x)[0] if x.shape[0] else
                   np.zeros((0, net.latent_dim)) for x in batch.source_x]
        tgt_pts = None
        if batch.target_x is not None:
            tgt_pts = (diffcore.forward(net, batch.target_x)[0]
                       if batch.target_x.shape[0] else
                       np.zeros((0, net.latent_dim)))
    else:
        density_net = net
        src_pts = batch.source_x
        tgt_pts = batch.target_x

    kernel = svgd.KernelSpec(bandwidth=cfg.bandwidth)

    def run(points, n, labels):
        if n == 0 or points.shape[0] == 0:
            return _anchors_only(points, n)
        if cfg.radius == 0.0:
            return _anchors_only(points, n)
        pa = diffcore.forward(density_net, points)[2]
        score = _batched_local_score(density_net, pa, n, cfg.lam, cfg.alpha,
                                     labels=labels)
        scfg = svgd.SvgdConfig(n=n, iters=cfg.iters, step=cfg.step,
                               init_noise=cfg.init_noise)
        parts = svgd.projected_svgd_batch(points, score, cfg.radius, cfg.norm,
                                          scfg, rng, kernel=kernel)
        return np.concatenate([points[:, None, :], parts], axis=1)

    source = [run(x, cfg.n_source, y) for x, y in zip(src_pts, batch.source_y)]
    target = None if tgt_pts is None else run(tgt_pts, cfg.n_target, None)
    return PerturbedBatch(source=source,
                          source_labels=[y.copy() for y in batch.source_y],
                          target=target, space=cfg.space)


# ---------------------------------------------------------------------------
# assembled risk

def _particle_net(net, space):
    return net.head_view() if space == "latent" else net


def risk_value(batch, perturbed, net, weights, global_term):
    """Scalar training risk.

    Per source anchor: classification loss at the anchor plus the particle
    average of alpha*s + loss; per target anchor: the particle average of
    alpha*s; plus beta times the supplied global-term value.  Averages are
    over anchors within each side.  Terms whose weight or particle count is
    zero are skipped, not added as zeros.
    """
    pnet = _particle_net(net, perturbed.space)
    total = 0.0
    n_src = sum(x.shape[0] for x in perturbed.source)
    for tilde, y in zip(perturbed.source, perturbed.source_labels):
        B, n1, _ = tilde.shape
        if B == 0:
            continue
        cache = diffcore.forward_cache(pnet, tilde.reshape(B * n1, -1))
        probs = cache.probs.reshape(B, n1, -1)
        ce_anchor = diffcore.cross_entropy_batch(probs[:, 0], y)
        contrib = float(ce_anchor.sum())
        if n1 > 1:
            rep = np.repeat(y, n1 - 1)
            flat = probs[:, 1:].reshape(B * (n1 - 1), -1)
            ce_p = diffcore.cross_entropy_batch(flat, rep)
            per = ce_p.copy()
            if weights.alpha != 0.0:
                pa = np.repeat(probs[:, 0], n1 - 1, axis=0)
                per = per + weights.alpha * diffcore.symmetric_kl_batch(pa, flat)
            contrib += float(per.sum()) / (n1 - 1)
        total += contrib
    value = total / n_src if n_src else 0.0
    if (perturbed.target is not None and perturbed.target.shape[0]
            and perturbed.target.shape[1] > 1 and weights.alpha != 0.0):
        B, n1, _ = perturbed.target.shape
        probs = diffcore.forward(pnet, perturbed.target.reshape(B * n1, -1))[2]
        probs = probs.reshape(B, n1, -1)
        pa = np.repeat(probs[:, 0], n1 - 1, axis=0)
        s = diffcore.symmetric_kl_batch(pa, probs[:, 1:].reshape(B * (n1 - 1), -1))
        value += weights.alpha * float(s.sum()) / (B * (n1 - 1))
    if weights.beta != 0.0:
        value += weights.beta * float(global_term)
    return float(value)


# ---------------------------------------------------------------------------
# global regularizers

def _check_nonempty(*arrays):
    for a in arrays:
        if a.shape[0] == 0:
            raise ValueError("global regularizer needs nonempty batches")


def composite_cost(feat_a, prob_a, feat_b, prob_b, gamma_pred):
    """Pairwise cost ||df||_2^2 + gamma_pred * ||dp||_1 between joint
    embedding rows."""
    C = backend.pairwise_sq_dists(np.ascontiguousarray(feat_a),
                                  np.ascontiguousarray(feat_b))
    if gamma_pred != 0.0 and prob_a is not None:
        C = C + gamma_pred * np.abs(
            prob_a[:, None, :] - prob_b[None, :, :]).sum(axis=-1)
    return C


def _entropic_w(C, ot_cfg):
    n, m = C.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    return transport.sinkhorn(a, b, C, ot_cfg)


def _plan_grads(pi, feat_a, prob_a, feat_b, prob_b, gamma_pred, gate=None):
    """Gradients of sum(pi*C) in the inputs with the plan held fixed (exact
    for the entropic value at the converged plan)."""
    w = pi if gate is None else pi * gate
    ra = w.sum(axis=1)
    rb = w.sum(axis=0)
    dfa = 2.0 * (feat_a * ra[:, None] - w @ feat_b)
    dfb = 2.0 * (feat_b * rb[:, None] - w.T @ feat_a)
    if gamma_pred != 0.0 and prob_a is not None:
        sign = np.sign(prob_a[:, None, :] - prob_b[None, :, :])
        dpa = gamma_pred * np.einsum("ij,ijk->ik", w, sign)
        dpb = -gamma_pred * np.einsum("ij,ijk->jk", w, sign)
    else:
        dpa = None if prob_a is None else np.zeros_like(prob_a)
        dpb = None if prob_b is None else np.zeros_like(prob_b)
    return dfa, dpa, dfb, dpb


def global_da_ssl(src_feat, src_prob, tgt_feat, tgt_prob, gamma_pred, ot_cfg):
    """Entropic transport distance between the joint embedding measures of
    the source and target batches."""
    _check_nonempty(src_feat, tgt_feat)
    C = composite_cost(src_feat, src_prob, tgt_feat, tgt_prob, gamma_pred)
    return _entropic_w(C, ot_cfg)[1]


def global_da_ssl_grads(src_feat, src_prob, tgt_feat, tgt_prob, gamma_pred,
                        ot_cfg):
    """(value, d_src_feat, d_src_prob, d_tgt_feat, d_tgt_prob)."""
    _check_nonempty(src_feat, tgt_feat)
    C = composite_cost(src_feat, src_prob, tgt_feat, tgt_prob, gamma_pred)
    plan, value = _entropic_w(C, ot_cfg)
    return (value, *_plan_grads(plan.matrix, src_feat, src_prob,
                                tgt_feat, tgt_prob, gamma_pred))


def global_dg(cells, n_domains, ot_cfg):
    """Sum over classes and domains of the transport distance between each
    domain's class-conditional latent measure and the cross-domain mixture,
    each term weighted by 1/n_domains; squared-Euclidean cost on latents.
    Empty (domain, class) cells are simply absent from `cells`."""
    value, _ = _global_dg_impl(cells, n_domains, ot_cfg, want_grads=False)
    return value


def global_dg_grads(cells, n_domains, ot_cfg):
    """(value, per-cell latent gradients aligned with `cells`)."""
    return _global_dg_impl(cells, n_domains, ot_cfg, want_grads=True)


def _global_dg_impl(cells, n_domains, ot_cfg, want_grads):
    if n_domains < 2:
        raise ValueError("need at least two domains")
    grads = [np.zeros_like(c.points) for c in cells] if want_grads else None
    by_class = {}
    for idx, c in enumerate(cells):
        by_class.setdefault(c.label, []).append(idx)
    total = 0.0
    coef = 1.0 / n_domains
    for label in sorted(by_class):
        idxs = by_class[label]
        sizes = [cells[i].points.shape[0] for i in idxs]
        km = len(idxs)
        mix_pts = np.concatenate([cells[i].points for i in idxs], axis=0)
        mix_w = np.concatenate([np.full(s, 1.0 / (km * s)) for s in sizes])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for i in idxs:
            pts = cells[i].points
            na = pts.shape[0]
            C = backend.pairwise_sq_dists(np.ascontiguousarray(pts),
                                          np.ascontiguousarray(mix_pts))
            a = np.full(na, 1.0 / na)
            plan, w_val = transport.sinkhorn(a, mix_w, C, ot_cfg)
            total += coef * w_val
            if want_grads:
                dfa, _, dfb, _ = _plan_grads(plan.matrix, pts, None,
                                             mix_pts, None, 0.0)
                grads[i] += coef * dfa
                for pos, j in enumerate(idxs):
                    lo, hi = offsets[pos], offsets[pos + 1]
                    grads[j] += coef * dfb[lo:hi]
    return total, grads


def global_aml(clean_feat, clean_prob, clean_labels, adv_feat, adv_prob,
               adv_labels, gamma_pred, ot_cfg):
    """Entropic transport between benign and adversarial joint embeddings,
    with the cost zeroed wherever the two sides' labels differ."""
    value, *_ = global_aml_grads(clean_feat, clean_prob, clean_labels,
                                 adv_feat, adv_prob, adv_labels,
                                 gamma_pred, ot_cfg)
    return value


def global_aml_grads(clean_feat, clean_prob, clean_labels, adv_feat, adv_prob,
                     adv_labels, gamma_pred, ot_cfg):
    """(value, d_clean_feat, d_clean_prob, d_adv_feat, d_adv_prob)."""
    _check_nonempty(clean_feat, adv_feat)
    gate = (np.asarray(clean_labels)[:, None]
            == np.asarray(adv_labels)[None, :]).astype(np.float64)
    C = gate * composite_cost(clean_feat, clean_prob, adv_feat, adv_prob,
                              gamma_pred)
    plan, value = _entropic_w(C, ot_cfg)
    return (value, *_plan_grads(plan.matrix, clean_feat, clean_prob,
                                adv_feat, adv_prob, gamma_pred, gate=gate))
