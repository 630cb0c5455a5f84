"""Shrunk-cosine top-k similarity matrices and the identity similarity.

Rows always carry a self entry with weight exactly 1; NNMF collapses to
plain MF when both similarities are identities.
"""

import hashlib

import numpy as np
import scipy.sparse as sp


class SimilarityMatrix:
    """Row-sparse square similarity with unit self-weights.

    k records the per-row non-self neighbor budget (0 for the identity).
    """

    def __init__(self, csr, k):
        csr = csr.tocsr().astype(np.float64)
        if csr.shape[0] != csr.shape[1]:
            raise ValueError("similarity matrix must be square")
        csr.sort_indices()
        self.csr = csr
        self.k = int(k)
        self._arr64 = None

    @property
    def n(self):
        return self.csr.shape[0]

    def row(self, x):
        lo, hi = self.csr.indptr[x], self.csr.indptr[x + 1]
        return self.csr.indices[lo:hi], self.csr.data[lo:hi]

    def arrays64(self):
        """(indptr, indices, weights) with 64-bit indices, cached."""
        if self._arr64 is None:
            self._arr64 = (self.csr.indptr.astype(np.int64),
                           self.csr.indices.astype(np.int64),
                           self.csr.data)
        return self._arr64

    @property
    def is_identity(self):
        return self.k == 0


def identity_similarity(n):
    """Diagonal-only similarity; multiplying by it is the identity map."""
    if n < 1:
        raise ValueError("need n >= 1")
    return SimilarityMatrix(sp.identity(n, format="csr", dtype=np.float64), 0)


def cosine_topk(matrix, axis, k, shrink, chunk=512):
    """Shrunk-cosine similarity with per-row top-k truncation.

    For profiles r_x, r_y the weight is (r_x . r_y) / (|r_x| |r_y| + shrink).
    Each row keeps the k largest non-self weights (ties broken toward the
    smaller id), drops zeros, and gains a self entry with weight 1. Rows are
    not re-normalized afterwards. Zero-norm profiles degrade to self-only
    rows.
    """
    if axis not in ("user", "item"):
        raise ValueError(f"axis must be 'user' or 'item', got {axis!r}")
    if shrink < 0:
        raise ValueError("shrink must be non-negative")
    R = matrix.csr if axis == "user" else matrix.csr.T.tocsr()
    n = R.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < {n}, got k={k}")
    if matrix.nnz == 0:
        raise ValueError("matrix has no interactions")
    norms = np.sqrt(np.asarray(R.multiply(R).sum(axis=1)).ravel())
    ids = []
    weights = []
    indptr = [0]
    col_ids = np.arange(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        overlap = (R[start:stop] @ R.T).toarray()
        denom = norms[start:stop, None] * norms[None, :] + shrink
        denom[denom == 0.0] = 1.0  # zero-norm pairs have zero overlap anyway
        block = overlap / denom
        for local in range(stop - start):
            x = start + local
            w = block[local]
            w[x] = 0.0  # the self entry is added with weight 1 below
            # stable sort on the negated weights: descending weight,
            # ties toward the smaller id
            order = np.argsort(-w, kind="stable")[:k]
            take = order[w[order] > 0]
            row_ids = np.append(take, x)
            row_w = np.append(w[take], 1.0)
            asc = np.argsort(row_ids)
            ids.append(row_ids[asc])
            weights.append(row_w[asc])
            indptr.append(indptr[-1] + row_ids.size)
    del col_ids
    out = sp.csr_matrix(
        (np.concatenate(weights), np.concatenate(ids),
         np.asarray(indptr, dtype=np.int64)),
        shape=(n, n))
    return SimilarityMatrix(out, k)


def similarity_cache_key(axis, k, shrink, dataset_hash):
    h = hashlib.sha256()
    h.update(f"{axis}|{int(k)}|{float(shrink)!r}|{dataset_hash}".encode())
    return h.hexdigest()[:24]


def save_similarity(path, sim):
    """Persist as sorted coordinate triples plus dimensions."""
    coo = sim.csr.tocoo()
    np.savez(path, n=np.int64(sim.n), k=np.int64(sim.k),
             row=coo.row.astype(np.int64), col=coo.col.astype(np.int64),
             weight=coo.data.astype(np.float64))


def load_similarity(path):
    with np.load(path) as z:
        n = int(z["n"])
        csr = sp.csr_matrix((z["weight"], (z["row"], z["col"])), shape=(n, n))
        return SimilarityMatrix(csr, int(z["k"]))


def build_or_load(cache_dir, matrix, axis, k, shrink):
    """Similarity with an on-disk cache keyed by inputs; identity for k=0."""
    if k == 0:
        n = matrix.n_users if axis == "user" else matrix.n_items
        return identity_similarity(n)
    key = similarity_cache_key(axis, k, shrink, matrix.content_hash())
    path = cache_dir / f"sim_{key}.npz"
    if path.exists():
        return load_similarity(path)
    sim = cosine_topk(matrix, axis, k, shrink)
    cache_dir.mkdir(parents=True, exist_ok=True)
    save_similarity(path, sim)
    return sim
