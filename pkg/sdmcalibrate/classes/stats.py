# global imports
import math

import numpy as np
from scipy import stats as scipy_stats

# local imports
from sdmcalibrate.classes.errors import SdmError


class EmpiricalCdf:
    """Empirical CDF over a stored sample
    :param values: sample, sorted on construction
    :param saturating: values are known to lie in [0,1]; queries at or
        above the largest stored value return exactly 1
    """

    def __init__(self, values=(), saturating=False):
        self.values = np.sort(np.asarray(values, dtype=np.float64).ravel())
        self.saturating = bool(saturating)

    def __len__(self):
        return self.values.shape[0]

    @property
    def empty(self):
        return self.values.shape[0] == 0

    def quantile(self, val, reverse=False):
        """fraction of stored values strictly below val (or 1 minus it)"""
        return ecdf_quantile(self, val, reverse)

    def inverse(self, p):
        """smallest stored value x with #(values <= x) / n >= p"""
        n = len(self)
        if n == 0:
            return None
        k = math.ceil(p * n - 1e-9)
        k = min(max(k, 1), n)
        return float(self.values[k - 1])

    def to_array(self):
        return self.values

    @classmethod
    def from_array(cls, values, saturating=False):
        cdf = cls.__new__(cls)
        cdf.values = np.asarray(values, dtype=np.float64)
        cdf.saturating = bool(saturating)
        return cdf


def ecdf_quantile(cdf, val, reverse=False):
    """Quantile of val relative to the stored sample
    Empty sample gives 0. Left insertion point: stored values equal to
    val are not counted. Accepts scalars or arrays.
    """
    scalar = np.ndim(val) == 0
    val = np.asarray(val, dtype=np.float64)
    n = len(cdf)
    if n == 0:
        out = np.zeros(val.shape)
        return float(out) if scalar else out
    index = np.searchsorted(cdf.values, val, side="left")
    if reverse:
        out = 1.0 - index / n
    else:
        out = index / n
        if cdf.saturating:
            out = np.where(val >= cdf.values[-1], 1.0, out)
    return float(out) if scalar else out


class RobustScale:
    """Median and median absolute deviation of a sample"""

    def __init__(self, location, mad):
        self.location = float(location)
        self.mad = float(mad)

    def __repr__(self):
        return "RobustScale(location=%r, mad=%r)" % (self.location, self.mad)


def robust_scale(samples):
    a = np.asarray(samples, dtype=np.float64).ravel()
    if a.size == 0:
        raise SdmError("robust scale of an empty sample", "empty_sample")
    location = np.median(a)
    return RobustScale(location, np.median(np.abs(a - location)))


def cauchy_inverse_cdf(location, scale, alpha):
    if not 0 < alpha < 1:
        raise SdmError("alpha must lie strictly inside (0, 1): %r" % alpha, "invalid_alpha")
    if scale < 0:
        raise SdmError("negative Cauchy scale: %r" % scale, "invalid_scale")
    if scale == 0:
        return float(location)
    return float(scipy_stats.cauchy.ppf(alpha, loc=location, scale=scale))


def dkw_epsilon(n, alpha_prime):
    """half-width of the DKW band at confidence alpha_prime, 1 when n is 0"""
    n = np.asarray(n, dtype=np.float64)
    if alpha_prime >= 1:
        out = np.ones(n.shape)
    else:
        with np.errstate(divide="ignore"):
            out = np.sqrt(np.log(2.0 / (1.0 - alpha_prime)) / (2.0 * n))
        out = np.where(n > 0, np.minimum(out, 1.0), 1.0)
    return float(out) if out.ndim == 0 else out


def mad(samples):
    """median absolute deviation of a sample, 0 when empty"""
    if np.size(samples) == 0:
        return 0.0
    return robust_scale(samples).mad
