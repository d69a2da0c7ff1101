# global imports
import numpy as np

# local imports
from sdmcalibrate.classes.activation import sdm_activation, sdm_log_vjp, sdm_nll
from sdmcalibrate.classes.constants import DEFAULTS, KEPS
from sdmcalibrate.classes.errors import ShapeError, TrainingError


class NumericsConfig:
    """Numerical settings of the exemplar adaptor
    :param keps: guard added inside the logs of the activation
    :param lr: Adam learning rate
    :param batch_size: mini-batch size
    :param seed: initialization and shuffling seed
    :param kernel_span: filter width, None for full-width filters
    :param nonlinearity: apply tanh to the filter outputs
    """

    def __init__(
        self,
        keps=KEPS,
        lr=DEFAULTS["lr"],
        batch_size=DEFAULTS["batch_size"],
        seed=DEFAULTS["seed"],
        kernel_span=None,
        nonlinearity=False,
    ):
        if keps <= 0:
            raise ValueError("keps must be positive")
        self.keps = keps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.kernel_span = kernel_span
        self.nonlinearity = nonlinearity

    def as_dict(self):
        return dict(vars(self))

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class AdaptorWeights:
    """Filters G (M x span), linear layer W (M x C) and bias b (C)"""

    def __init__(self, G, W, b):
        self.G = np.asarray(G, dtype=np.float64)
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.W.shape[0] != self.G.shape[0] or self.b.shape != (self.W.shape[1],):
            raise ShapeError(
                "inconsistent adaptor shapes G%s W%s b%s"
                % (self.G.shape, self.W.shape, self.b.shape)
            )

    @property
    def M(self):
        return self.G.shape[0]

    @property
    def span(self):
        return self.G.shape[1]

    @property
    def C(self):
        return self.W.shape[1]

    def params(self):
        return {"G": self.G, "W": self.W, "b": self.b}

    def copy(self):
        return AdaptorWeights(self.G.copy(), self.W.copy(), self.b.copy())

    @classmethod
    def initialize(cls, D, C, M, rng, kernel_span=None):
        """uniform initialization scaled by fan-in"""
        span = kernel_span or D
        bound = 1.0 / np.sqrt(span)
        G = rng.uniform(-bound, bound, size=(M, span))
        bound = 1.0 / np.sqrt(M)
        W = rng.uniform(-bound, bound, size=(M, C))
        b = rng.uniform(-bound, bound, size=C)
        return cls(G, W, b)


def normalize(embeddings, mean, std, keps=KEPS):
    std = np.where(np.asarray(std) <= keps, 1.0, std)
    return (np.asarray(embeddings, dtype=np.float64) - mean) / std


def fold(u, span):
    """sum of consecutive windows of width span (zero padded)"""
    u = np.atleast_2d(u)
    D = u.shape[1]
    if span is None or span == D:
        return u
    pad = (-D) % span
    if pad:
        u = np.pad(u, ((0, 0), (0, pad)))
    return u.reshape(u.shape[0], -1, span).sum(axis=1)


def hidden_layer(weights, folded, nonlinearity):
    h = folded @ weights.G.T
    if nonlinearity:
        h = np.tanh(h)
    return h


def adaptor_forward(weights, embedding, mean, std, nonlinearity=False, keps=KEPS):
    """Returns (h', z') for one embedding or a batch of rows"""
    embedding = np.asarray(embedding, dtype=np.float64)
    single = embedding.ndim == 1
    if np.atleast_2d(embedding).shape[1] != np.shape(mean)[0]:
        raise ShapeError(
            "embedding dimension %s does not match %s"
            % (np.atleast_2d(embedding).shape[1], np.shape(mean)[0])
        )
    folded = fold(normalize(embedding, mean, std, keps), weights.span)
    if folded.shape[1] != weights.span:
        raise ShapeError("filter span %s does not match input" % weights.span)
    h = hidden_layer(weights, folded, nonlinearity)
    z = h @ weights.W + weights.b
    if single:
        return h[0], z[0]
    return h, z


def sdm_loss_and_grad(weights, folded, labels, q, d, nonlinearity=False, keps=KEPS):
    """Mean SDM negative log-likelihood over a batch and its gradients
    :param folded: normalized (and folded) inputs, one row per instance
    :param q, d: per-instance constants of the current epoch
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    h = hidden_layer(weights, folded, nonlinearity)
    z = h @ weights.W + weights.b
    log_out = sdm_activation(z, q, d, log_form=True, keps=keps)
    loss = float(np.mean(sdm_nll(log_out, labels)))
    if not np.isfinite(loss):
        raise TrainingError("non-finite SDM loss")
    upstream = np.zeros_like(z)
    upstream[np.arange(n), labels] = -1.0 / n
    grad_z = sdm_log_vjp(z, q, d, upstream, keps=keps)
    grad_h = grad_z @ weights.W.T
    if nonlinearity:
        grad_h = grad_h * (1.0 - h ** 2)
    grads = {
        "G": grad_h.T @ folded,
        "W": h.T @ grad_z,
        "b": grad_z.sum(axis=0),
    }
    return loss, grads


class OptimizerState:
    """Adam moments per parameter tensor"""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}


def adam_update(state, params, grads, lr):
    """One bias-corrected Adam step, returns new parameter arrays"""
    state.step += 1
    out = {}
    for name, value in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(value):
            raise ShapeError("gradient shape mismatch for %s" % name)
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - state.beta1 ** state.step)
        v_hat = v / (1 - state.beta2 ** state.step)
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out
