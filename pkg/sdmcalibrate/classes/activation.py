# global imports
import numpy as np
from scipy.special import logsumexp

# local imports
from sdmcalibrate.classes.constants import KEPS, Q_RESCALE_OFFSET


def softmax(z, tau=1.0):
    """softmax(tau * z) over the last axis, max-subtracted"""
    z = tau * np.asarray(z, dtype=np.float64)
    return np.exp(z - logsumexp(z, axis=-1, keepdims=True))


def log_softmax(z, tau=1.0):
    z = tau * np.asarray(z, dtype=np.float64)
    return z - logsumexp(z, axis=-1, keepdims=True)


def _broadcast(z, value):
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return value
    return value.reshape(value.shape + (1,) * (z.ndim - value.ndim))


def _terms(z, q, d):
    z = np.asarray(z, dtype=np.float64)
    base = Q_RESCALE_OFFSET + _broadcast(z, q)
    d = _broadcast(z, d)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    r = np.power(base, d * shifted)
    return z, base, d, r


def sdm_activation(z, q, d, log_form=False, keps=KEPS):
    """(2+q)^(d*z) normalized over the last axis
    q and d are scalars or one value per row of z. The log form is
    log base (2+q) of the normalized value with keps inside both logs.
    """
    z, base, d, r = _terms(z, q, d)
    total = np.sum(r, axis=-1, keepdims=True)
    if log_form:
        return (np.log(r + keps) - np.log(total + keps)) / np.log(base)
    return r / total


def sdm_nll(log_output, label):
    """negative log-form entry of the true label, one value per row"""
    log_output = np.asarray(log_output)
    if log_output.ndim == 1:
        return -float(log_output[int(label)])
    label = np.asarray(label, dtype=np.int64)
    return -log_output[np.arange(log_output.shape[0]), label]


def sdm_log_vjp(z, q, d, upstream, keps=KEPS):
    """Gradient w.r.t. z of sum(upstream * sdm_activation(z, q, d, log_form=True))

    q and d are held constant. The max-subtraction index is held fixed,
    which is exact away from ties in the argmax.
    """
    z, base, d, r = _terms(z, q, d)
    g = np.asarray(upstream, dtype=np.float64)
    total = np.sum(r, axis=-1, keepdims=True)
    weighted = g * r / (r + keps)
    g_sum = np.sum(g, axis=-1, keepdims=True)
    grad = weighted - g_sum * r / (total + keps)
    # the subtracted max entry receives the opposite of everything else
    peak = np.argmax(z, axis=-1)
    correction = -np.sum(weighted, axis=-1) + g_sum[..., 0] * total[..., 0] / (total[..., 0] + keps)
    np.put_along_axis(
        grad,
        peak[..., None],
        np.take_along_axis(grad, peak[..., None], axis=-1) + correction[..., None],
        axis=-1,
    )
    return d * grad
