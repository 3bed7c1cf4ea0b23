"""Small dense classifiers with hand-rolled reverse-mode gradients.

Tensors are plain float64 numpy arrays.  A network is a feature stack
followed by a classifier head, both lists of dense layers; `forward` returns
(features, logits, probs).  Losses come with exact gradients, and
`finite_diff_check` is the oracle every loss path in the repo is tested
against.  Also here: SGD-with-momentum / Adam and the epoch schedules.
"""

from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12
LEAKY_SLOPE = 0.1

ACTIVATIONS = ("relu", "leaky_relu", "identity")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length does not match weight rows")


@dataclass
class NetworkParams:
    """f = classifier_layers o feature_layers; the last layer emits logits."""

    feature_layers: list
    classifier_layers: list

    @property
    def layers(self):
        return self.feature_layers + self.classifier_layers

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[0]

    @property
    def latent_dim(self):
        if self.feature_layers:
            return self.feature_layers[-1].weight.shape[0]
        return self.in_dim

    @property
    def n_params(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def head_view(self):
        """The classifier alone, as a network acting on latent codes."""
        return NetworkParams([], self.classifier_layers)


def init_dense_net(dims, n_feature_layers, rng, hidden_activation="relu"):
    """Kaiming-uniform (fan-in) initialized net, biases zero.

    dims = [in, hidden..., out]; the first n_feature_layers layers form the
    feature stack.  Hidden layers use hidden_activation, the final layer is
    identity so it emits logits.
    """
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    if not 0 <= n_feature_layers < len(dims) - 1:
        raise ValueError("feature stack must leave at least one classifier layer")
    layers = []
    for i in range(len(dims) - 1):
        bound = np.sqrt(6.0 / dims[i])
        w = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        b = np.zeros(dims[i + 1])
        act = "identity" if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, b, act))
    return NetworkParams(layers[:n_feature_layers], layers[n_feature_layers:])


def copy_network(net):
    def cp(ls):
        return [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in ls]

    return NetworkParams(cp(net.feature_layers), cp(net.classifier_layers))


def param_arrays(net):
    """Flat list [W0, b0, W1, b1, ...] over feature then classifier layers."""
    out = []
    for l in net.layers:
        out.append(l.weight)
        out.append(l.bias)
    return out


# ---------------------------------------------------------------------------
# forward / backward

def _act(z, tag):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    return z


def _act_deriv(z, tag):
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list = field(default_factory=list)    # pre-activation per layer
    post: list = field(default_factory=list)   # post-activation per layer
    features: np.ndarray = None
    logits: np.ndarray = None
    probs: np.ndarray = None


def forward_cache(net, x):
    """Forward pass keeping per-layer activations for backprop.

    x: (B, in_dim).  Raises on shape mismatch and on the first layer that
    produces a non-finite value (the index counts feature then classifier
    layers).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    layers = net.layers
    if x.shape[1] != layers[0].weight.shape[1]:
        raise ValueError(
            f"input dim {x.shape[1]} does not match layer 0 "
            f"(expects {layers[0].weight.shape[1]})")
    cache = ForwardCache(x=x)
    h = x
    for idx, l in enumerate(layers):
        # overflow is detected and reported below; keep numpy quiet about it
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ l.weight.T + l.bias
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite output at layer {idx}")
        h = _act(z, l.activation)
        cache.pre.append(z)
        cache.post.append(h)
    nf = len(net.feature_layers)
    cache.features = cache.post[nf - 1] if nf else x
    cache.logits = h
    cache.probs = softmax(h)
    return cache


def forward(net, x):
    """(features, logits, probs) for a batch x of shape (B, in_dim) or (in_dim,)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    c = forward_cache(net, x)
    if squeeze:
        return c.features[0], c.logits[0], c.probs[0]
    return c.features, c.logits, c.probs


def softmax_backward(probs, dprobs):
    """dlogits given probs = softmax(logits) and dL/dprobs."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def backprop(net, cache, dlogits=None, dfeatures=None, dprobs=None):
    """Reverse pass.  Any of dlogits/dprobs (B, M) and dfeatures (B, latent)
    may be given; contributions are summed at the right points.  Returns
    (grads, dx) where grads matches param_arrays layout.
    """
    layers = net.layers
    nf = len(net.feature_layers)
    B = cache.x.shape[0]
    delta = np.zeros((B, layers[-1].weight.shape[0]))
    if dlogits is not None:
        delta = delta + dlogits
    if dprobs is not None:
        delta = delta + softmax_backward(cache.probs, dprobs)
    grads = [None] * (2 * len(layers))
    # delta is dL/d(post-activation of current layer)
    for idx in range(len(layers) - 1, -1, -1):
        l = layers[idx]
        dpre = delta * _act_deriv(cache.pre[idx], l.activation)
        inp = cache.post[idx - 1] if idx > 0 else cache.x
        grads[2 * idx] = dpre.T @ inp
        grads[2 * idx + 1] = dpre.sum(axis=0)
        delta = dpre @ l.weight
        if dfeatures is not None and nf > 0 and idx == nf:
            # entering the feature stack: add gradient injected at features
            delta = delta + dfeatures
    if dfeatures is not None and nf == 0:
        delta = delta + dfeatures
    return grads, delta


def grad(net, loss_head, x):
    """Value and exact gradients of a scalar loss defined on the net outputs.

    loss_head(features, logits, probs) -> (value, dfeatures, dlogits, dprobs)
    with unused slots None.  Returns (value, grads, dx).
    """
    cache = forward_cache(net, x)
    value, dfeat, dlog, dpr = loss_head(cache.features, cache.logits, cache.probs)
    grads, dx = backprop(net, cache, dlogits=dlog, dfeatures=dfeat, dprobs=dpr)
    return value, grads, dx


def zero_grads(net):
    return [np.zeros_like(a) for a in param_arrays(net)]


def add_grads(acc, grads, scale=1.0):
    for a, g in zip(acc, grads):
        if g is not None:
            a += scale * g
    return acc


# ---------------------------------------------------------------------------
# losses

def cross_entropy(probs, label):
    """-log(probs[label] + floor); label must index a class."""
    probs = np.asarray(probs, dtype=np.float64)
    label = int(label)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[label] + PROB_FLOOR))


def cross_entropy_batch(probs, labels):
    """Per-row CE values for probs (B, M), labels (B,)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label out of range")
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(picked + PROB_FLOOR)


def cross_entropy_grad(probs, labels):
    """dCE/dprobs rows: -1/(p_y + floor) at the true class, else 0."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    d = np.zeros_like(probs)
    rows = np.arange(len(labels))
    d[rows, labels] = -1.0 / (probs[rows, labels] + PROB_FLOOR)
    return d


def symmetric_kl(p, q):
    """0.5*KL(p||q) + 0.5*KL(q||p) with 1e-12 flooring inside the logs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    lr = np.log(p + PROB_FLOOR) - np.log(q + PROB_FLOOR)
    return float(0.5 * np.sum(p * lr) - 0.5 * np.sum(q * lr))


def symmetric_kl_batch(p, q):
    lr = np.log(p + PROB_FLOOR) - np.log(q + PROB_FLOOR)
    return 0.5 * np.sum(p * lr, axis=-1) - 0.5 * np.sum(q * lr, axis=-1)


def symmetric_kl_grad(p, q):
    """(ds/dp, ds/dq) for s = 0.5*KL(p||q) + 0.5*KL(q||p), floored."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    lr = np.log(p + PROB_FLOOR) - np.log(q + PROB_FLOOR)
    dp = 0.5 * (lr + (p - q) / (p + PROB_FLOOR))
    dq = 0.5 * (-lr + (q - p) / (q + PROB_FLOOR))
    return dp, dq


def is_simplex(v, tol=1e-9):
    v = np.asarray(v)
    return bool(np.all(v >= 0) and abs(float(v.sum()) - 1.0) <= tol)


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_check(value_fn, params, grads, h=1e-5):
    """Max relative error between analytic grads and central differences.

    value_fn() re-evaluates the scalar loss from the live arrays in `params`
    (each is perturbed in place, entry by entry, then restored); `grads` holds
    the matching analytic gradient arrays.  Error per entry is
    |g - g_fd| / max(|g_fd|, |g|, 1e-3 * scale, 1e-8) where scale is the
    largest gradient magnitude seen — entries that are structurally zero are
    judged against the gradient's characteristic size rather than against
    finite-difference noise.
    """
    if not 0 < h <= 1e-2:
        raise ValueError("h must be in (0, 1e-2]")
    diffs = []
    scale = 0.0
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = value_fn()
            flat_p[i] = orig - h
            dn = value_fn()
            flat_p[i] = orig
            fd = (up - dn) / (2.0 * h)
            diffs.append((flat_g[i], fd))
            scale = max(scale, abs(fd), abs(flat_g[i]))
    worst = 0.0
    for g_i, fd in diffs:
        err = abs(g_i - fd) / max(abs(fd), abs(g_i), 1e-3 * scale, 1e-8)
        if err > worst:
            worst = err
    return worst


def finite_diff_check_net(net, loss_head, x, h=1e-5):
    """finite_diff_check specialized to grad(net, loss_head, x) params."""
    _, grads, _ = grad(net, loss_head, x)

    def value_fn():
        c = forward_cache(net, x)
        return loss_head(c.features, c.logits, c.probs)[0]

    return finite_diff_check(value_fn, param_arrays(net), grads, h=h)


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    buffers: list = None


def init_optimizer(net, kind="sgd_momentum", lr=0.1, momentum=0.9,
                   weight_decay=0.0, betas=(0.9, 0.999)):
    if kind not in ("sgd_momentum", "adam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    params = param_arrays(net)
    if kind == "sgd_momentum":
        buffers = [np.zeros_like(p) for p in params]
    else:
        buffers = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
    return OptimizerState(kind=kind, lr=lr, momentum=momentum,
                          weight_decay=weight_decay, betas=betas,
                          buffers=buffers)


def apply_update(net, grads, state, lr_factor=1.0):
    """One in-place optimizer step.  lr_factor multiplies the base lr (for
    schedules).  With an effective lr of 0 the parameters are left untouched
    bit for bit; moments and the step counter still advance.
    """
    params = param_arrays(net)
    state.step_count += 1
    lr = state.lr * lr_factor
    if state.kind == "sgd_momentum":
        for p, g, v in zip(params, grads, state.buffers):
            gg = g + state.weight_decay * p if state.weight_decay else g
            v *= state.momentum
            v += gg
            if lr != 0.0:
                p -= lr * v
    else:
        b1, b2 = state.betas
        t = state.step_count
        for p, g, (m, v) in zip(params, grads, state.buffers):
            gg = g + state.weight_decay * p if state.weight_decay else g
            m *= b1
            m += (1.0 - b1) * gg
            v *= b2
            v += (1.0 - b2) * gg * gg
            if lr != 0.0:
                mhat = m / (1.0 - b1 ** t)
                vhat = v / (1.0 - b2 ** t)
                p -= lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# schedules

@dataclass
class ScheduleSpec:
    kind: str = "constant"     # constant | cosine_annealing | step_decay | exp_rampup
    total_epochs: int = 100
    rampup_length: int = 30
    decay_epochs: tuple = (100, 105)
    decay_rate: float = 0.1


def schedule_factor(spec, epoch):
    """Multiplier on the base value at a given epoch (>= 0)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = spec.kind
    if k == "constant":
        return 1.0
    if k == "cosine_annealing":
        # half cosine from 1 down to 0 across total_epochs
        e = min(epoch, spec.total_epochs)
        return 0.5 * (1.0 + np.cos(np.pi * e / spec.total_epochs))
    if k == "step_decay":
        hits = sum(1 for d in spec.decay_epochs if epoch >= d)
        return spec.decay_rate ** hits
    if k == "exp_rampup":
        if spec.rampup_length <= 0 or epoch >= spec.rampup_length:
            return 1.0
        frac = 1.0 - epoch / spec.rampup_length
        return float(np.exp(-5.0 * frac * frac))
    raise ValueError(f"unknown schedule kind {k!r}")
