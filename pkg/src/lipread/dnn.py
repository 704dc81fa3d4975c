"""Hybrid DNN-HMM acoustic model: sigmoid MLP with softmax output over
pdf-ids, RBM-stack pretraining and cross-entropy fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import archive

log = logging.getLogger(__name__)


class DnnError(ValueError):
    pass


@dataclass
class TrainSchedule:
    lr0: float = 0.008
    dropout: float = 0.1
    minibatch: int = 256
    cv_fraction: float = 0.1
    stop_delta: float = 0.001
    rbm_lr: float = 0.4
    rbm_lr_gaussian: float = 0.01
    rbm_l2: float = 0.0002
    rbm_epochs: int = 3
    rbm_momentum: float = 0.9
    rbm_init_std: float = 0.1
    lr_retry_factor: float = 0.5
    max_epochs: int = 20
    max_retries: int = 4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k not in ("rbm_epochs", "dropout", "rbm_momentum", "max_retries") and v <= 0:
                raise DnnError(f"{k} must be positive")
        if not 0 < self.cv_fraction < 1:
            raise DnnError("cv_fraction must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise DnnError("dropout must lie in [0, 1)")
        if not 0 <= self.rbm_momentum < 1:
            raise DnnError("rbm_momentum must lie in [0, 1)")
        if self.rbm_epochs < 0 or self.max_retries < 0:
            raise DnnError("rbm_epochs and max_retries must be non-negative")


@dataclass
class Mlp:
    """Sigmoid hidden layers and a softmax output layer.

    ``weights[i]`` has shape (in, out); ``log_priors`` (optional) are the
    pdf log-priors used for hybrid scoring.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_priors: np.ndarray | None = None

    def __post_init__(self):
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise DnnError(f"layer dims do not chain: {a.shape} -> {b.shape}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise DnnError("bias shape does not match its layer")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def n_outputs(self) -> int:
        return self.dims[-1]

    @classmethod
    def init(cls, dims, rng: np.random.Generator) -> "Mlp":
        Ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            r = np.sqrt(6.0 / (a + b))
            Ws.append(rng.uniform(-r, r, (a, b)))
            bs.append(np.zeros(b))
        return cls(Ws, bs)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   None if self.log_priors is None else self.log_priors.copy())

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise DnnError(f"dimension mismatch: {X.shape[1]} != {self.in_dim}")
        return X

    def logits(self, X, dropout: float = 0.0, rng=None, keep_hidden: bool = False):
        h = self._check(X)
        hidden = [h]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = expit(h @ W + b)
            if dropout > 0:
                mask = rng.random(h.shape) >= dropout
                h = h * mask / (1 - dropout)
            hidden.append(h)
        z = h @ self.weights[-1] + self.biases[-1]
        return (z, hidden) if keep_hidden else z

    def save(self, path):
        arrays = {f"W{i}": w for i, w in enumerate(self.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(self.biases)})
        if self.log_priors is not None:
            arrays["log_priors"] = self.log_priors
        meta = {"kind": "dnn", "dims": self.dims,
                "nonlinearity": ["sigmoid"] * (len(self.weights) - 1) + ["softmax"]}
        archive.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Mlp":
        a, meta = archive.load_container(path)
        if meta.get("kind") != "dnn":
            raise archive.ArchiveError(f"{path}: not a network file")
        n = len(meta["dims"]) - 1
        return cls([a[f"W{i}"] for i in range(n)], [a[f"b{i}"] for i in range(n)], a.get("log_priors"))


def forward(net: Mlp, X) -> np.ndarray:
    """Posterior over pdf-ids for each row of ``X`` (inference mode)."""
    return softmax(net.logits(X), axis=1)


def cross_entropy(net: Mlp, X, y) -> float:
    return float(-log_softmax(net.logits(X), axis=1)[np.arange(len(y)), y].mean())


def backprop(net: Mlp, X, y, dropout: float = 0.0, rng=None):
    """Mean cross-entropy and its gradient, ordered like ``net.params()``."""
    z, hidden = net.logits(X, dropout, rng, keep_hidden=True)
    n = len(y)
    logp = log_softmax(z, axis=1)
    loss = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1
    delta /= n
    grads = []
    for i in range(len(net.weights) - 1, -1, -1):
        h = hidden[i]
        grads.append(delta.sum(0))
        grads.append(h.T @ delta)
        if i > 0:
            dh = delta @ net.weights[i].T
            delta = dh * _sigmoid_grad_from_output(h, dropout)
    grads.reverse()
    return loss, grads


def _sigmoid_grad_from_output(h, dropout):
    # h = sigmoid(a) * mask / keep, so dh/da = h * (1 - sigmoid(a)) and sigmoid(a) = h * keep
    keep = 1.0 - dropout
    s = h * keep
    return h * (1.0 - s)


# -- RBM pretraining ----------------------------------------------------------

def _rbm_layer(X, n_hidden, lr, sch, gaussian, rng):
    n_vis = X.shape[1]
    W = rng.normal(0.0, sch.rbm_init_std, (n_vis, n_hidden))
    bh = np.zeros(n_hidden)
    bv = X.mean(0) if gaussian else np.log(np.clip(X.mean(0), 1e-3, 1 - 1e-3) / np.clip(1 - X.mean(0), 1e-3, 1))
    dW, dbv, dbh = np.zeros_like(W), np.zeros_like(bv), np.zeros_like(bh)
    errs = []
    for epoch in range(sch.rbm_epochs):
        # momentum ramps up after the first epoch
        mom = 0.5 if epoch == 0 else sch.rbm_momentum
        order = rng.permutation(len(X))
        err = 0.0
        for s in range(0, len(X), sch.minibatch):
            v0 = X[order[s:s + sch.minibatch]]
            h0 = expit(v0 @ W + bh)
            hs = (rng.random(h0.shape) < h0).astype(float)
            v1 = hs @ W.T + bv
            if not gaussian:
                v1 = expit(v1)
            h1 = expit(v1 @ W + bh)
            m = len(v0)
            dW = mom * dW + lr * ((v0.T @ h0 - v1.T @ h1) / m - sch.rbm_l2 * W)
            dbv = mom * dbv + lr * (v0 - v1).mean(0)
            dbh = mom * dbh + lr * (h0 - h1).mean(0)
            W += dW
            bv += dbv
            bh += dbh
            err += float(((v0 - v1) ** 2).sum())
        errs.append(err / X.size)
    return W, bh, errs


def rbm_pretrain(dims, X, schedule: TrainSchedule | None = None, rng=None):
    """Greedy CD-1 training of a stack of RBMs with hidden sizes ``dims[1:]``.

    The first layer has Gaussian visible units (input assumed normalised);
    higher layers are Bernoulli-Bernoulli and see the hidden probabilities
    of the layer below. Returns ``(weights, biases, log)`` where ``log``
    holds per-layer, per-epoch mean squared reconstruction errors.
    """
    sch = schedule or TrainSchedule()
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != dims[0]:
        raise DnnError(f"dimension mismatch: {X.shape[1]} != {dims[0]}")
    Ws, bs, logs = [], [], []
    h = X
    for i, n_hidden in enumerate(dims[1:]):
        gaussian = i == 0
        lr = sch.rbm_lr_gaussian if gaussian else sch.rbm_lr
        W, b, errs = _rbm_layer(h, n_hidden, lr, sch, gaussian, rng)
        Ws.append(W)
        bs.append(b)
        logs.append(errs)
        h = expit(h @ W + b)
    return Ws, bs, logs


# -- fine-tuning --------------------------------------------------------------

@dataclass
class FinetuneLog:
    epochs: list[dict] = field(default_factory=list)
    initial_cv: float = float("nan")
    converged: bool = False
    reason: str = ""

    def accepted_losses(self) -> list[float]:
        return [self.initial_cv] + [e["cv_loss"] for e in self.epochs if e["accepted"]]


def _sgd_epoch(net, X, y, lr, sch, rng):
    order = rng.permutation(len(X))
    total = 0.0
    for s in range(0, len(X), sch.minibatch):
        idx = order[s:s + sch.minibatch]
        loss, grads = backprop(net, X[idx], y[idx], sch.dropout, rng)
        # the learning rate is per frame: step along the summed gradient
        for p, g in zip(net.params(), grads):
            p -= (lr * len(idx)) * g
        total += loss * len(idx)
    return total / len(X)


def finetune(net: Mlp, X, y, schedule: TrainSchedule | None = None, seed: int = 0,
             cv: tuple[np.ndarray, np.ndarray] | None = None):
    """Minibatch SGD with held-out accept/reject learning-rate control.

    An epoch is kept only if it lowers the held-out cross-entropy; otherwise
    the weights are restored and the learning rate is scaled by
    ``lr_retry_factor``. Training stops once an accepted epoch improves the
    held-out loss by less than ``stop_delta`` (relative), after
    ``max_retries`` consecutive rejections, or after ``max_epochs``.
    """
    sch = schedule or TrainSchedule()
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if cv is None:
        order = rng.permutation(len(X))
        n_cv = max(1, int(round(sch.cv_fraction * len(X))))
        cv_idx, tr_idx = order[:n_cv], order[n_cv:]
        Xcv, ycv, X, y = X[cv_idx], y[cv_idx], X[tr_idx], y[tr_idx]
    else:
        Xcv, ycv = cv
    net = net.copy()
    tlog = FinetuneLog(initial_cv=cross_entropy(net, Xcv, ycv))
    best = tlog.initial_cv
    lr = sch.lr0
    rejects = 0
    for epoch in range(1, sch.max_epochs + 1):
        saved = net.copy()
        train_loss = _sgd_epoch(net, X, y, lr, sch, rng)
        cv_loss = cross_entropy(net, Xcv, ycv)
        accepted = cv_loss < best
        tlog.epochs.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                            "cv_loss": cv_loss, "accepted": accepted})
        log.info("epoch %d lr %.5f train %.4f cv %.4f %s", epoch, lr, train_loss, cv_loss,
                 "accepted" if accepted else "rejected")
        if accepted:
            rel = (best - cv_loss) / abs(best) if best else 0.0
            best = cv_loss
            rejects = 0
            if rel < sch.stop_delta:
                tlog.converged, tlog.reason = True, "improvement below stop_delta"
                break
        else:
            net = saved
            lr *= sch.lr_retry_factor
            rejects += 1
            if rejects > sch.max_retries:
                tlog.reason = "too many rejected epochs"
                break
    else:
        tlog.reason = "max_epochs reached"
    if not any(e["accepted"] for e in tlog.epochs):
        tlog.reason = "no accepted epoch"
    return net, tlog


# -- hybrid scoring -----------------------------------------------------------

def estimate_priors(pdf_labels, n_pdfs: int, floor: float = 1e-8) -> np.ndarray:
    """Log state priors from alignment counts, floored and renormalised."""
    counts = np.bincount(np.concatenate([np.asarray(p).ravel() for p in pdf_labels])
                         if isinstance(pdf_labels, (list, tuple)) else np.asarray(pdf_labels),
                         minlength=n_pdfs).astype(float)
    p = np.maximum(counts / max(counts.sum(), 1.0), floor)
    return np.log(p / p.sum())


def hybrid_loglike(posteriors, log_priors, scale: float = 0.1) -> np.ndarray:
    """scale * (log posterior - log prior)."""
    post = np.asarray(posteriors, dtype=np.float64)
    log_priors = np.asarray(log_priors, dtype=np.float64)
    if post.shape[-1] != log_priors.shape[-1]:
        raise DnnError(f"dimension mismatch: {post.shape[-1]} != {log_priors.shape[-1]}")
    if not np.all(np.isfinite(log_priors)):
        raise DnnError("zero prior after flooring")
    with np.errstate(divide="ignore"):
        return scale * (np.log(post) - log_priors)


class HybridScorer:
    """Frame scorer for the decoder: unscaled log posterior minus log prior."""

    def __init__(self, net: Mlp):
        if net.log_priors is None:
            raise DnnError("network has no priors")
        self.net = net

    def __call__(self, X) -> np.ndarray:
        logp = log_softmax(self.net.logits(X), axis=1)
        return logp - self.net.log_priors


class DnnAcousticModel(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: RBM pretraining, fine-tuning and prior estimation."""

    def __init__(self, hidden_layers: int = 6, hidden_dim: int = 2048, pretrain: bool = True,
                 lr0: float = 0.008, dropout: float = 0.1, minibatch: int = 256,
                 cv_fraction: float = 0.1, stop_delta: float = 0.001, rbm_lr: float = 0.4,
                 rbm_lr_gaussian: float = 0.01, rbm_l2: float = 0.0002, rbm_epochs: int = 3,
                 rbm_momentum: float = 0.9, rbm_init_std: float = 0.1,
                 lr_retry_factor: float = 0.5, max_epochs: int = 20, max_retries: int = 4,
                 n_outputs: int | None = None, random_state: int = 0):
        self.hidden_layers = hidden_layers
        self.hidden_dim = hidden_dim
        self.pretrain = pretrain
        self.lr0 = lr0
        self.dropout = dropout
        self.minibatch = minibatch
        self.cv_fraction = cv_fraction
        self.stop_delta = stop_delta
        self.rbm_lr = rbm_lr
        self.rbm_lr_gaussian = rbm_lr_gaussian
        self.rbm_l2 = rbm_l2
        self.rbm_epochs = rbm_epochs
        self.rbm_momentum = rbm_momentum
        self.rbm_init_std = rbm_init_std
        self.lr_retry_factor = lr_retry_factor
        self.max_epochs = max_epochs
        self.max_retries = max_retries
        self.n_outputs = n_outputs
        self.random_state = random_state

    def schedule(self) -> TrainSchedule:
        names = TrainSchedule.__dataclass_fields__
        return TrainSchedule(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(np.int64)
        n_out = self.n_outputs or int(y.max()) + 1
        sch = self.schedule()
        rng = np.random.default_rng(self.random_state)
        dims = [X.shape[1]] + [self.hidden_dim] * self.hidden_layers + [n_out]
        net = Mlp.init(dims, rng)
        self.pretrain_log_ = []
        if self.pretrain and self.hidden_layers > 0:
            Ws, bs, self.pretrain_log_ = rbm_pretrain(dims[:-1], X, sch, rng)
            net.weights[:-1], net.biases[:-1] = Ws, bs
        net, self.finetune_log_ = finetune(net, X, y, sch, seed=int(rng.integers(2 ** 31)))
        net.log_priors = estimate_priors(y, n_out)
        self.net_ = net
        self.classes_ = np.arange(n_out)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return forward(self.net_, check_array(X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
