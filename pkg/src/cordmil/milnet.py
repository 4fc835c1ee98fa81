"""Gated attention MIL network for 3-class slide staging.

One bag (all patch embeddings of a slide) is one sample and one minibatch.
Forward: per-bag feature normalization with learned affine, a hidden ReLU
layer, a tanh/sigmoid gate, then one attention branch and one linear score
per class; softmax only converts scores to probabilities. Training uses a
one-vs-rest hinge on the raw scores, weighted by the true class.

Gradients are written out by hand; there is no autodiff anywhere.

The forward pass is bit-identical under any permutation of the bag's rows,
not merely equal to rounding error. Two mechanisms together guarantee this:
instance-axis reductions (bag mean/variance, attention normalizer, pooled
feature) sum in sorted value order, and the per-instance layers run on a
lexicographically sorted copy of the bag, since BLAS kernels round a row's
dot products differently depending on its position in the matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import optim
from .validation import as_rng, check_embedding_matrix, check_labels

__all__ = [
    "ArchConfig",
    "MilParams",
    "ForwardTrace",
    "AttentionResult",
    "forward",
    "hinge_loss",
    "backward",
    "train_epoch",
    "predict",
    "inverse_frequency_weights",
    "MilClassifier",
]


def _sumi(a: np.ndarray) -> np.ndarray:
    """Sum over the instance axis (0) in value order.

    np.sum adds in memory order, so permuting rows can flip low-order bits.
    Sorting first makes the reduction canonical; exact permutation
    invariance of the forward pass rests on this.
    """
    return np.sum(np.sort(a, axis=0), axis=0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ArchConfig:
    """Layer sizes. Defaults fit 1024-dim foundation-model embeddings."""

    input_dim: int
    hidden_dim: int = 512
    gate_dim: int = 256
    attn_hidden: int = 64
    n_classes: int = 3
    bn_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("input_dim", "hidden_dim", "gate_dim", "attn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be positive")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "gate_dim": self.gate_dim,
            "attn_hidden": self.attn_hidden,
            "n_classes": self.n_classes,
            "bn_epsilon": self.bn_epsilon,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ArchConfig":
        return cls(**payload)


# Serialization order of the parameter tensors. Checkpoints write tensors
# in exactly this order.
TENSOR_FIELDS = (
    "bn_gain",
    "bn_bias",
    "w1",
    "b1",
    "wt",
    "bt",
    "ws",
    "bs",
    "attn_w1",
    "attn_b1",
    "attn_w2",
    "attn_b2",
    "clf_w",
    "clf_b",
)


@dataclass
class MilParams:
    """All learned tensors, float64.

    attn_w1[c], attn_b1[c] map the gated feature to the class-c attention
    hidden layer; attn_w2[c], attn_b2[c] reduce it to the raw attention
    logit; clf_w[c], clf_b[c] score the class-c pooled feature.
    """

    bn_gain: np.ndarray
    bn_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    wt: np.ndarray
    bt: np.ndarray
    ws: np.ndarray
    bs: np.ndarray
    attn_w1: np.ndarray
    attn_b1: np.ndarray
    attn_w2: np.ndarray
    attn_b2: np.ndarray
    clf_w: np.ndarray
    clf_b: np.ndarray

    def __post_init__(self) -> None:
        for name in TENSOR_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter tensor {name!r} contains non-finite values")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, arch: ArchConfig) -> "MilParams":
        d, h, g = arch.input_dim, arch.hidden_dim, arch.gate_dim
        a, k = arch.attn_hidden, arch.n_classes
        return cls(
            bn_gain=np.zeros(d),
            bn_bias=np.zeros(d),
            w1=np.zeros((h, d)),
            b1=np.zeros(h),
            wt=np.zeros((g, h)),
            bt=np.zeros(g),
            ws=np.zeros((g, h)),
            bs=np.zeros(g),
            attn_w1=np.zeros((k, a, g)),
            attn_b1=np.zeros((k, a)),
            attn_w2=np.zeros((k, a)),
            attn_b2=np.zeros(k),
            clf_w=np.zeros((k, g)),
            clf_b=np.zeros(k),
        )

    @classmethod
    def init(cls, arch: ArchConfig, seed) -> "MilParams":
        """Uniform(-l, l) with l = sqrt(6/(fan_in+fan_out)) per weight
        matrix; biases zero; normalization gain 1, bias 0."""
        rng = as_rng(seed)
        p = cls.zeros(arch)
        p.bn_gain[:] = 1.0

        def glorot(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        d, h, g = arch.input_dim, arch.hidden_dim, arch.gate_dim
        a, k = arch.attn_hidden, arch.n_classes
        p.w1 = glorot((h, d), d, h)
        p.wt = glorot((g, h), h, g)
        p.ws = glorot((g, h), h, g)
        p.attn_w1 = glorot((k, a, g), g, a)
        p.attn_w2 = glorot((k, a), a, 1)
        p.clf_w = glorot((k, g), g, 1)
        return p

    def arch_of(self) -> ArchConfig:
        k, a, g = self.attn_w1.shape
        return ArchConfig(
            input_dim=self.w1.shape[1],
            hidden_dim=self.w1.shape[0],
            gate_dim=g,
            attn_hidden=a,
            n_classes=k,
        )

    def tensors(self) -> dict:
        """Live views of every tensor, in serialization order."""
        return {name: getattr(self, name) for name in TENSOR_FIELDS}

    def copy(self) -> "MilParams":
        return MilParams(**{name: getattr(self, name).copy() for name in TENSOR_FIELDS})


@dataclass
class ForwardTrace:
    """Every activation backward needs, kept by name.

    xn is the normalized input before the affine, xa after; r[c] is the
    class-c attention hidden layer, a the raw attention in (0,1), alpha the
    normalized attention, z the pooled features, s the scores, p softmax.
    """

    x: np.ndarray
    xn: np.ndarray
    xa: np.ndarray
    h: np.ndarray
    t: np.ndarray
    g: np.ndarray
    e: np.ndarray
    r: np.ndarray
    a: np.ndarray
    a_sum: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    s: np.ndarray
    p: np.ndarray


@dataclass
class AttentionResult:
    """Per-class per-patch attention plus the bag-level prediction."""

    alpha: np.ndarray
    probabilities: np.ndarray
    predicted_class: int


def forward(params: MilParams, x) -> ForwardTrace:
    arch = params.arch_of()
    x = check_embedding_matrix(x, "bag embeddings")
    n, d = x.shape
    if d != arch.input_dim:
        raise ValueError(f"bag has dim {d}, model expects {arch.input_dim}")

    # Run the layers on a canonical row order: BLAS rounds a row's dot
    # products differently depending on its position in the matrix, so
    # canonical sums alone would not make the pass permutation-invariant.
    # Per-instance activations are mapped back to input order at the end.
    order = np.lexsort(x.T[::-1])
    inv = np.argsort(order)
    xs = x[order]

    mu = _sumi(xs) / n
    xc = xs - mu
    var = _sumi(xc * xc) / n
    # For n = 1 (or a constant feature) var is 0 and the epsilon guard
    # sends the normalized value to 0.
    xn = xc / np.sqrt(var + arch.bn_epsilon)
    xa = params.bn_gain * xn + params.bn_bias

    h = np.maximum(xa @ params.w1.T + params.b1, 0.0)
    t = np.tanh(h @ params.wt.T + params.bt)
    g = _sigmoid(h @ params.ws.T + params.bs)
    e = t * g

    k = arch.n_classes
    r = np.empty((k, n, arch.attn_hidden))
    a = np.empty((k, n))
    a_sum = np.empty(k)
    alpha = np.empty((k, n))
    z = np.empty((k, arch.gate_dim))
    s = np.empty(k)
    for c in range(k):
        r[c] = np.maximum(e @ params.attn_w1[c].T + params.attn_b1[c], 0.0)
        a[c] = _sigmoid(r[c] @ params.attn_w2[c] + params.attn_b2[c])
        a_sum[c] = _sumi(a[c])
        if a_sum[c] == 0.0:
            raise ValueError(f"attention for class {c} underflowed to zero everywhere")
        alpha[c] = a[c] / a_sum[c]
        z[c] = _sumi(alpha[c][:, None] * e)
        s[c] = params.clf_w[c] @ z[c] + params.clf_b[c]

    shifted = s - s.max()
    es = np.exp(shifted)
    p = es / es.sum()
    return ForwardTrace(
        x=x, xn=xn[inv], xa=xa[inv], h=h[inv], t=t[inv], g=g[inv], e=e[inv],
        r=r[:, inv], a=a[:, inv], a_sum=a_sum, alpha=alpha[:, inv], z=z, s=s, p=p,
    )


def hinge_loss(s, label: int, class_weights) -> float:
    """One-vs-rest hinge on raw scores, scaled by the true class's weight.

    L = w_label * sum_c max(0, 1 - y_c * s_c), y_c = +1 iff c == label.
    """
    s = np.asarray(s, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    if s.shape != w.shape:
        raise ValueError(f"scores shape {s.shape} != weights shape {w.shape}")
    if (w <= 0).any():
        raise ValueError("class weights must be positive")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    label = int(label)
    if not 0 <= label < len(s):
        raise ValueError(f"label {label} out of range for {len(s)} classes")
    y = np.full(len(s), -1.0)
    y[label] = 1.0
    return float(w[label] * np.sum(np.maximum(0.0, 1.0 - y * s)))


def backward(params: MilParams, trace: ForwardTrace, label: int, class_weights) -> dict:
    """Exact gradient of hinge_loss(trace.s, label, w) in every tensor.

    The attention normalization backpropagates by the quotient rule:
    d/da_i = (dalpha_i - sum_j dalpha_j * alpha_j) / sum(a). The hinge uses
    subgradient 0 at its kink, matching max(0, .) evaluated one-sided.
    """
    arch = params.arch_of()
    k = arch.n_classes
    n = trace.x.shape[0]
    w = np.asarray(class_weights, dtype=np.float64)
    label = int(label)
    y = np.full(k, -1.0)
    y[label] = 1.0
    # dL/ds_c = w_label * (-y_c) on active margins.
    active = (1.0 - y * trace.s) > 0.0
    ds = np.where(active, -w[label] * y, 0.0)

    grads = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    de = np.zeros_like(trace.e)
    for c in range(k):
        if ds[c] == 0.0:
            continue
        grads["clf_w"][c] = ds[c] * trace.z[c]
        grads["clf_b"][c] = ds[c]
        dz = ds[c] * params.clf_w[c]
        dalpha = trace.e @ dz
        de += trace.alpha[c][:, None] * dz
        da = (dalpha - dalpha @ trace.alpha[c]) / trace.a_sum[c]
        dq = da * trace.a[c] * (1.0 - trace.a[c])
        grads["attn_w2"][c] = dq @ trace.r[c]
        grads["attn_b2"][c] = dq.sum()
        dr = np.where(trace.r[c] > 0.0, dq[:, None] * params.attn_w2[c], 0.0)
        grads["attn_w1"][c] = dr.T @ trace.e
        grads["attn_b1"][c] = dr.sum(axis=0)
        de += dr @ params.attn_w1[c]

    dt = de * trace.g
    dg = de * trace.t
    dpre_t = dt * (1.0 - trace.t * trace.t)
    dpre_g = dg * trace.g * (1.0 - trace.g)
    grads["wt"] = dpre_t.T @ trace.h
    grads["bt"] = dpre_t.sum(axis=0)
    grads["ws"] = dpre_g.T @ trace.h
    grads["bs"] = dpre_g.sum(axis=0)

    dh = dpre_t @ params.wt + dpre_g @ params.ws
    dpre_h = np.where(trace.h > 0.0, dh, 0.0)
    grads["w1"] = dpre_h.T @ trace.xa
    grads["b1"] = dpre_h.sum(axis=0)

    dxa = dpre_h @ params.w1
    grads["bn_gain"] = (dxa * trace.xn).sum(axis=0)
    grads["bn_bias"] = dxa.sum(axis=0)
    # The normalization statistics depend only on the bag input, not on any
    # parameter, so no gradient flows past the affine.
    return grads


def predict(params: MilParams, x) -> AttentionResult:
    trace = forward(params, x)
    return AttentionResult(
        alpha=trace.alpha,
        probabilities=trace.p,
        predicted_class=int(np.argmax(trace.p)),
    )


def inverse_frequency_weights(labels, n_classes: int = 3) -> np.ndarray:
    """Weights proportional to 1/count, normalized to mean 1."""
    labels = check_labels(labels, n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {missing} absent from training labels")
    raw = 1.0 / counts
    return raw * (n_classes / raw.sum())


def train_epoch(params: MilParams, bags, state, hyperparams, seed, class_weights=None):
    """One pass over the training list in a seeded shuffled order.

    bags is a list of (embeddings, label) pairs; each bag is one optimizer
    step. Returns (params, mean loss over the epoch).
    """
    if not bags:
        raise ValueError("empty training list")
    if class_weights is None:
        class_weights = inverse_frequency_weights(
            [lab for _, lab in bags], params.arch_of().n_classes
        )
    rng = as_rng(seed)
    order = rng.permutation(len(bags))
    tensors = params.tensors()
    losses = []
    for i in order:
        x, label = bags[i]
        trace = forward(params, x)
        losses.append(hinge_loss(trace.s, label, class_weights))
        grads = backward(params, trace, label, class_weights)
        optim.step(state, tensors, grads, hyperparams)
    return params, float(np.mean(losses))


class MilClassifier(ClassifierMixin, BaseEstimator):
    """Estimator-style wrapper: fit on a list of bags, predict stages.

    X is a list of (n_i, input_dim) arrays. Hyperparameters mirror
    Hyperparams fields; layer sizes mirror ArchConfig.
    """

    def __init__(
        self,
        hidden_dim: int = 512,
        gate_dim: int = 256,
        attn_hidden: int = 64,
        n_classes: int = 3,
        algorithm: str = "adam",
        learning_rate: float = 1e-3,
        lr_decay: float = 1.0,
        momentum: float = 0.9,
        beta1: float = 0.9,
        beta2: float = 0.999,
        ema_enabled: bool = False,
        ema_momentum: float = 0.99,
        epochs: int = 30,
        seed: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.gate_dim = gate_dim
        self.attn_hidden = attn_hidden
        self.n_classes = n_classes
        self.algorithm = algorithm
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.ema_enabled = ema_enabled
        self.ema_momentum = ema_momentum
        self.epochs = epochs
        self.seed = seed

    def _hyperparams(self) -> optim.Hyperparams:
        return optim.Hyperparams(
            algorithm=self.algorithm,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            ema_enabled=self.ema_enabled,
            ema_momentum=self.ema_momentum,
        )

    def fit(self, X, y):
        if len(X) == 0:
            raise ValueError("empty training list")
        y = check_labels(y, self.n_classes)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} bags but {len(y)} labels")
        arch = ArchConfig(
            input_dim=np.asarray(X[0]).shape[1],
            hidden_dim=self.hidden_dim,
            gate_dim=self.gate_dim,
            attn_hidden=self.attn_hidden,
            n_classes=self.n_classes,
        )
        hp = self._hyperparams()
        params = MilParams.init(arch, np.random.default_rng([self.seed, 0]))
        state = optim.init_opt_state(params.tensors(), hp)
        bags = [(np.asarray(x, dtype=np.float64), int(lab)) for x, lab in zip(X, y)]
        weights = inverse_frequency_weights(y, self.n_classes)
        self.loss_history_ = []
        for epoch in range(1, self.epochs + 1):
            _, loss = train_epoch(
                params, bags, state, hp,
                np.random.default_rng([self.seed, 1, epoch]),
                class_weights=weights,
            )
            optim.decay_lr(state, hp)
            if hp.ema_enabled:
                optim.ema_update(state, params.tensors(), hp)
            self.loss_history_.append(loss)
        eval_tensors = optim.evaluation_tensors(state, params.tensors(), hp)
        self.params_ = MilParams(**{k: v.copy() for k, v in eval_tensors.items()})
        self.arch_ = arch
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        return np.stack([predict(self.params_, x).probabilities for x in X])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def attention(self, x) -> AttentionResult:
        return predict(self.params_, x)
