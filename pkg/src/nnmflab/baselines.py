"""Non-embedding baselines for accuracy context: neighborhood scorers over
the interaction matrix, a pairwise-ranking-trained sparse item-item weight
model, and a truncated-SVD projector.

None of these host neighbor-combined embeddings; they exist to anchor the
accuracy numbers of the factorization models.
"""

import json
import math
import warnings

import numpy as np
import scipy.sparse as sp
from sklearn.utils.extmath import randomized_svd

from . import _kernels
from .factorization import DIVERGENCE_LIMIT, DivergenceError
from .similarity import cosine_topk

BASELINE_KINDS = ("item_knn", "user_knn", "slim", "pure_svd")


def _strip_diagonal(csr):
    """Copy of a square sparse matrix with diagonal entries removed."""
    coo = csr.tocoo()
    keep = coo.row != coo.col
    out = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])),
                        shape=csr.shape)
    out.sort_indices()
    return out


class KNNModel:
    """Neighborhood scorer: item axis scores a user by summing the
    similarities of candidate items to the user's own items, user axis by
    mixing the interaction rows of similar users. Self-similarities are
    excluded from scoring."""

    def __init__(self, axis, k, shrink, similarity, train):
        self.kind = "item_knn" if axis == "item" else "user_knn"
        self.axis = axis
        self.k = k
        self.shrink = shrink
        self.similarity = similarity
        self.train = train

    def score_all(self):
        if self.axis == "item":
            return (self.train.csr @ self.similarity.T).toarray()
        return (self.similarity @ self.train.csr).toarray()


class SlimModel:
    """Sparse item-item weight matrix learned by pairwise ranking SGD;
    the diagonal is identically zero."""

    kind = "slim"

    def __init__(self, weights, train, history):
        self.weights = weights
        self.train = train
        self.history = history

    def score_all(self):
        return (self.train.csr @ self.weights).toarray()


class PureSVDModel:
    """Rank-f projector onto the top right-singular subspace of the train
    matrix; scores are the projections of each user's interaction row."""

    kind = "pure_svd"

    def __init__(self, item_factors, singular_values, train):
        self.item_factors = item_factors
        self.singular_values = singular_values
        self.train = train

    def score_all(self):
        return (self.train.csr @ self.item_factors) @ self.item_factors.T


def fit_knn(train, axis, k, shrink):
    sim = cosine_topk(train, axis, k, shrink)
    return KNNModel(axis, k, shrink, _strip_diagonal(sim.csr), train)


def fit_slim_bpr(train, k, learning_rate, reg, epochs, seeds=0):
    """Trains the dense weight matrix with one sampled non-interacted item
    per positive, then keeps only the k largest weights per column.

    The matrix starts at zero, so ``seeds`` only drives the sampling
    stream (visit order and negative draws).
    """
    if train.nnz == 0:
        raise ValueError("train matrix is empty")
    n_items = train.n_items
    if not 1 <= k:
        raise ValueError("k must be >= 1")
    if learning_rate <= 0 or reg < 0 or epochs < 1:
        raise ValueError("bad training settings")

    pos_u, pos_i, _ = train.coo_arrays()
    prof_ptr, prof_idx = train.profile_arrays()
    W = np.zeros((n_items, n_items))
    rng = np.random.default_rng(seeds)
    trace = np.full(100, -1, dtype=np.int64)
    trace_used = 0
    history = []
    skipped_total = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(pos_u.shape[0])
        loss, skipped, trace_used = _kernels.slim_bpr_epoch(
            W, pos_u, pos_i, perm, prof_ptr, prof_idx,
            learning_rate, reg, rng, trace, trace_used)
        skipped_total += skipped
        if not math.isfinite(loss) or np.abs(W).max() > DIVERGENCE_LIMIT:
            raise DivergenceError(f"training diverged at epoch {epoch}")
        history.append(float(loss))
    if skipped_total:
        warnings.warn(
            f"skipped {skipped_total} samples for users whose profiles "
            "cover every item", stacklevel=2)

    keep = min(k, n_items - 1)
    rows = []
    cols = []
    vals = []
    for c in range(n_items):
        col = W[:, c]
        order = np.argsort(-col, kind="stable")[:keep]
        for r in order:
            if col[r] != 0.0 and r != c:
                rows.append(r)
                cols.append(c)
                vals.append(col[r])
    weights = sp.csr_matrix((vals, (rows, cols)), shape=(n_items, n_items))
    weights.sort_indices()
    return SlimModel(weights, train, history)


def fit_pure_svd(train, f, seed):
    if not 1 <= f <= min(train.n_users, train.n_items):
        raise ValueError(
            f"f must be in [1, {min(train.n_users, train.n_items)}], "
            f"got {f}")
    _, sigma, Vt = randomized_svd(train.csr, n_components=f,
                                  n_oversamples=10, n_iter=7,
                                  flip_sign=False, random_state=seed)
    # sign convention: each right-singular vector's largest-magnitude
    # entry is made positive
    for t in range(Vt.shape[0]):
        m = int(np.argmax(np.abs(Vt[t])))
        if Vt[t, m] < 0:
            Vt[t] = -Vt[t]
    return PureSVDModel(np.ascontiguousarray(Vt.T), sigma, train)


# ---------------------------------------------------------------------------
# Serialization: same kind-tagged scheme as the factorization models (one
# JSON header line, then little-endian float64 payload). Loading requires
# the train matrix the model was fitted on.
# ---------------------------------------------------------------------------

def _coo_payload(csr):
    coo = csr.tocoo()
    return (coo.row.astype(np.int64), coo.col.astype(np.int64),
            coo.data.astype(np.float64))


def save_score_model(model, path):
    header = {"format": "nnmflab-model", "version": 1, "kind": model.kind}
    blobs = []
    if model.kind in ("item_knn", "user_knn"):
        header.update(axis=model.axis, k=model.k, shrink=model.shrink,
                      n=model.similarity.shape[0],
                      nnz=model.similarity.nnz)
        rows, cols, vals = _coo_payload(model.similarity)
        blobs = [rows, cols, vals]
    elif model.kind == "slim":
        header.update(n=model.weights.shape[0], nnz=model.weights.nnz)
        rows, cols, vals = _coo_payload(model.weights)
        blobs = [rows, cols, vals]
    elif model.kind == "pure_svd":
        header.update(n_items=model.item_factors.shape[0],
                      f=model.item_factors.shape[1])
        blobs = [model.singular_values, model.item_factors]
    else:
        raise ValueError(f"unknown model kind {model.kind!r}")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(np.ascontiguousarray(
                blob, dtype="<i8" if blob.dtype.kind == "i" else "<f8"
            ).tobytes())


def load_score_model(path, train):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != "nnmflab-model":
            raise ValueError(f"{path}: not a model file")
        kind = header["kind"]
        if kind in ("item_knn", "user_knn"):
            n, nnz = header["n"], header["nnz"]
            rows = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            cols = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            vals = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
            sim = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
            sim.sort_indices()
            return KNNModel(header["axis"], header["k"], header["shrink"],
                            sim, train)
        if kind == "slim":
            n, nnz = header["n"], header["nnz"]
            rows = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            cols = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            vals = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
            weights = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
            weights.sort_indices()
            return SlimModel(weights, train, history=[])
        if kind == "pure_svd":
            n_items, f = header["n_items"], header["f"]
            sigma = np.frombuffer(fh.read(8 * f), dtype="<f8").copy()
            V = np.frombuffer(fh.read(8 * n_items * f), dtype="<f8")
            return PureSVDModel(V.reshape(n_items, f).copy(), sigma, train)
        raise ValueError(f"unknown model kind {kind!r}")
