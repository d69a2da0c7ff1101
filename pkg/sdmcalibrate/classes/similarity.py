# global imports
import numpy as np

# local imports
from sdmcalibrate.classes.errors import SdmError, ShapeError
from sdmcalibrate.classes.stats import EmpiricalCdf, ecdf_quantile

CHUNK = 256


class QDResult:
    """Similarity, nearest distance and distance quantile of one query"""

    def __init__(self, q, d_x, d=None, ood=False, exemplars=()):
        self.q = int(q)
        self.d_x = float(d_x)
        self.d = d
        self.ood = ood
        self.exemplars = list(exemplars)

    def __repr__(self):
        return "QDResult(q=%s, d_x=%.6g, d=%r)" % (self.q, self.d_x, self.d)


class SupportIndex:
    """Exact L2 index over train representations
    :param h: train h' rows
    :param predictions: train predicted labels
    :param labels: train true labels
    :param ids: train instance ids
    """

    def __init__(self, h, predictions, labels, ids=None):
        self.h = np.ascontiguousarray(h, dtype=np.float64)
        self.predictions = np.asarray(predictions, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = self.h.shape[0]
        if self.predictions.shape != (n,) or self.labels.shape != (n,):
            raise ShapeError("support arrays do not align")
        if not np.all(np.isfinite(self.h)):
            raise ShapeError("non-finite support representation")
        self.ids = list(ids) if ids is not None else [str(i) for i in range(n)]
        self.row_of = {sid: row for row, sid in enumerate(self.ids)}
        self.correct = self.predictions == self.labels
        self.sq_norms = np.einsum("ij,ij->i", self.h, self.h)

    def __len__(self):
        return self.h.shape[0]

    def distances(self, queries):
        """L2 distances from each query row to every support row"""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        d2 = (
            np.einsum("ij,ij->i", queries, queries)[:, None]
            + self.sq_norms[None, :]
            - 2.0 * queries @ self.h.T
        )
        return np.sqrt(np.maximum(d2, 0.0))

    def query(self, queries, predictions, exclude_rows=None, top_k=0, session=None):
        """Batch version of compute_q_and_dx
        :param exclude_rows: support row to skip per query (-1 for none)
        :return: q (int array), d_x (array), exemplar rows (list of arrays)
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        n_query = queries.shape[0]
        n = len(self)
        if exclude_rows is None:
            exclude_rows = np.full(n_query, -1, dtype=np.int64)
        exclude_rows = np.asarray(exclude_rows, dtype=np.int64)
        if n == 0 or (n == 1 and np.any(exclude_rows >= 0)):
            raise SdmError("empty support index", "empty_index")
        if session is not None:
            session.count(n_query)
        rows = np.arange(n)
        q = np.zeros(n_query, dtype=np.int64)
        d_x = np.zeros(n_query)
        exemplars = []
        for start in range(0, n_query, CHUNK):
            stop = min(start + CHUNK, n_query)
            dist = self.distances(queries[start:stop])
            excluded = rows[None, :] == exclude_rows[start:stop, None]
            admissible = (self.predictions[None, :] == predictions[start:stop, None]) & self.correct[None, :]
            admissible &= ~excluded
            blocked = ~admissible & ~excluded
            dist_blocked = np.where(blocked, dist, np.inf)
            first_dist = dist_blocked.min(axis=1)
            first_row = np.where(
                blocked & (dist_blocked == first_dist[:, None]), rows[None, :], n
            ).min(axis=1)
            before = (dist < first_dist[:, None]) | (
                (dist == first_dist[:, None]) & (rows[None, :] < first_row[:, None])
            )
            q[start:stop] = np.sum(admissible & before, axis=1)
            d_x[start:stop] = np.where(excluded, np.inf, dist).min(axis=1)
            if top_k:
                for i in range(stop - start):
                    keep = ~excluded[i]
                    order = np.lexsort((rows[keep], dist[i][keep]))[:top_k]
                    exemplars.append(rows[keep][order])
        return q, d_x, exemplars


def compute_q_and_dx(index, h, prediction, exclude_id=None):
    """q and d_x for one representation, optionally excluding a support id"""
    exclude = -1
    if exclude_id is not None:
        exclude = index.row_of.get(exclude_id, -1)
    q, d_x, _ = index.query(np.asarray(h)[None, :], [prediction], [exclude])
    return int(q[0]), float(d_x[0])


def distance_cdfs(d_x, labels, q, C):
    """per-true-class eCDFs of d_x over points with q > 0"""
    d_x = np.asarray(d_x)
    labels = np.asarray(labels)
    keep = np.asarray(q) > 0
    return [EmpiricalCdf(d_x[keep & (labels == c)]) for c in range(C)]


def distance_quantile_d(cdfs, d_x):
    """Most conservative reverse quantile of d_x over classes
    Classes without stored distances are skipped; when every class is
    empty d is 0 and the query is flagged out-of-distribution.
    :return: (d, ood flag), arrays when d_x is an array
    """
    scalar = np.ndim(d_x) == 0
    d_x = np.atleast_1d(np.asarray(d_x, dtype=np.float64))
    filled = [cdf for cdf in cdfs if not cdf.empty]
    if not filled:
        d = np.zeros(d_x.shape)
        ood = np.ones(d_x.shape, dtype=bool)
    else:
        d = np.min([ecdf_quantile(cdf, d_x, reverse=True) for cdf in filled], axis=0)
        ood = np.zeros(d_x.shape, dtype=bool)
    if scalar:
        return float(d[0]), bool(ood[0])
    return d, ood
