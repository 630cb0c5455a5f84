"""Interaction datasets: loading, binarization, count filtering, holdout
splitting, and synthetic power-law generation.

All operations are pure functions over immutable inputs and are safe to
call concurrently.
"""

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp


class DataError(Exception):
    """Base class for dataset problems (CLI exit code 2)."""


class ParseError(DataError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class EmptyDatasetError(DataError):
    pass


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    value: float


class InteractionMatrix:
    """Sparse user-item preference matrix with fixed dimensions.

    Rows are users, columns items. Stored values may legitimately be zero
    (explicit negative targets), so ``nnz`` counts stored pairs rather than
    nonzero cells; nothing here calls ``eliminate_zeros``.
    """

    def __init__(self, csr):
        if not sp.issparse(csr):
            raise TypeError("expected a scipy sparse matrix")
        csr = csr.tocsr().astype(np.float64)
        csr.sort_indices()
        self.csr = csr
        self._prof64 = None

    @classmethod
    def from_pairs(cls, users, items, values, n_users, n_items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if len(users) != len(set(zip(users.tolist(), items.tolist()))):
            raise ValueError("duplicate (user, item) pairs")
        mat = sp.csr_matrix((values, (users, items)),
                            shape=(n_users, n_items))
        return cls(mat)

    @property
    def n_users(self):
        return self.csr.shape[0]

    @property
    def n_items(self):
        return self.csr.shape[1]

    @property
    def nnz(self):
        return self.csr.nnz

    def coo_arrays(self):
        """Canonical row-major (users, items, values) arrays."""
        counts = np.diff(self.csr.indptr)
        users = np.repeat(np.arange(self.n_users, dtype=np.int64), counts)
        return users, self.csr.indices.astype(np.int64), self.csr.data.copy()

    def profile_arrays(self):
        """(indptr, indices) as int64, cached, for tight loops."""
        if self._prof64 is None:
            self._prof64 = (self.csr.indptr.astype(np.int64),
                            self.csr.indices.astype(np.int64))
        return self._prof64

    def user_items(self, u):
        lo, hi = self.csr.indptr[u], self.csr.indptr[u + 1]
        return self.csr.indices[lo:hi]

    def user_counts(self):
        return np.diff(self.csr.indptr)

    def item_counts(self):
        return np.bincount(self.csr.indices, minlength=self.n_items)

    def density(self):
        cells = self.n_users * self.n_items
        return self.nnz / cells if cells else 0.0

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.int64([self.n_users, self.n_items]).tobytes())
        users, items, values = self.coo_arrays()
        h.update(users.tobytes())
        h.update(items.tobytes())
        h.update(values.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class DatasetSplit:
    train: InteractionMatrix
    validation: InteractionMatrix
    test: InteractionMatrix


def load_interactions(path, delimiter="\t", header=False):
    """Parse a delimited interaction file.

    Each record needs at least user, item, and value columns; extra columns
    are ignored. Tokens are remapped to dense 0-based indices in first-seen
    order. Duplicate (user, item) pairs keep the last value. Returns
    (interactions, user_tokens, item_tokens).
    """
    user_index = {}
    item_index = {}
    merged = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if header and line_no == 1:
                continue
            line = raw.rstrip("\r\n")
            if not line:
                continue
            parts = line.split(delimiter)
            if len(parts) < 3:
                raise ParseError(path, line_no,
                                 f"expected 3 columns, got {len(parts)}")
            try:
                value = float(parts[2])
            except ValueError:
                raise ParseError(path, line_no,
                                 f"value not numeric: {parts[2]!r}") from None
            if not math.isfinite(value):
                raise ParseError(path, line_no, f"non-finite value: {parts[2]}")
            u = user_index.setdefault(parts[0], len(user_index))
            i = item_index.setdefault(parts[1], len(item_index))
            merged[(u, i)] = value
    if not merged:
        raise EmptyDatasetError(f"{path}: no interactions")
    interactions = [Interaction(u, i, v) for (u, i), v in merged.items()]
    return interactions, list(user_index), list(item_index)


def write_interactions(path, interactions, delimiter="\t",
                       user_tokens=None, item_tokens=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for u, i, v in interactions:
            ut = user_tokens[u] if user_tokens is not None else str(u)
            it = item_tokens[i] if item_tokens is not None else str(i)
            fh.write(f"{ut}{delimiter}{it}{delimiter}{float(v)!r}\n")


def interactions_to_matrix(interactions, n_users, n_items):
    if not interactions:
        raise EmptyDatasetError("no interactions")
    users = [x.user_id for x in interactions]
    items = [x.item_id for x in interactions]
    values = [x.value for x in interactions]
    return InteractionMatrix.from_pairs(users, items, values, n_users, n_items)


def matrix_to_interactions(matrix):
    users, items, values = matrix.coo_arrays()
    return [Interaction(int(u), int(i), float(v))
            for u, i, v in zip(users, items, values)]


def binarize(interactions, threshold):
    """Keep interactions with value >= threshold, setting the value to 1."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return [Interaction(x.user_id, x.item_id, 1.0)
            for x in interactions if x.value >= threshold]


def core_filter(matrix, min_interactions, iterative=True):
    """Drop users and items with fewer than min_interactions interactions.

    With iterative=True (default) removal repeats until a fixpoint, so the
    output satisfies its own precondition. Returns
    (filtered, kept_users, kept_items) where the kept arrays map new dense
    indices back to the original ones.
    """
    if min_interactions < 1:
        raise ValueError("min_interactions must be >= 1")
    users, items, values = matrix.coo_arrays()
    keep_u = np.ones(matrix.n_users, dtype=bool)
    keep_i = np.ones(matrix.n_items, dtype=bool)
    while True:
        active = keep_u[users] & keep_i[items]
        uc = np.bincount(users[active], minlength=matrix.n_users)
        ic = np.bincount(items[active], minlength=matrix.n_items)
        bad_u = keep_u & (uc < min_interactions)
        bad_i = keep_i & (ic < min_interactions)
        if not bad_u.any() and not bad_i.any():
            break
        keep_u &= ~bad_u
        keep_i &= ~bad_i
        if not iterative:
            break
    active = keep_u[users] & keep_i[items]
    if not active.any():
        raise EmptyDatasetError("count filter removed every interaction")
    kept_users = np.flatnonzero(keep_u)
    kept_items = np.flatnonzero(keep_i)
    u_map = np.full(matrix.n_users, -1, dtype=np.int64)
    i_map = np.full(matrix.n_items, -1, dtype=np.int64)
    u_map[kept_users] = np.arange(kept_users.size)
    i_map[kept_items] = np.arange(kept_items.size)
    filtered = InteractionMatrix.from_pairs(
        u_map[users[active]], i_map[items[active]], values[active],
        kept_users.size, kept_items.size)
    return filtered, kept_users, kept_items


def holdout_split(matrix, ratios=(0.6, 0.2, 0.2), seed=0):
    """Seeded global-shuffle partition into train/validation/test.

    Partition sizes are floor-rounded; the remainder goes to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("need three positive ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = matrix.nnz
    if n < 3:
        raise DataError("need at least 3 interactions to split")
    users, items, values = matrix.coo_arrays()
    perm = np.random.default_rng(seed).permutation(n)
    n_tr = math.floor(ratios[0] * n)
    n_va = math.floor(ratios[1] * n)
    n_te = math.floor(ratios[2] * n)
    n_tr += n - (n_tr + n_va + n_te)
    parts = (perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:])

    def build(idx):
        return InteractionMatrix.from_pairs(
            users[idx], items[idx], values[idx],
            matrix.n_users, matrix.n_items)

    return DatasetSplit(build(parts[0]), build(parts[1]), build(parts[2]))


def synthesize_powerlaw(n_users, n_items, n_interactions, exponent, seed):
    """Generate unique (user, item) pairs with item popularity following a
    power law over item rank; users drawn uniformly; all values 1."""
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    if n_interactions > n_users * n_items:
        raise ValueError("requested density exceeds 1")
    if n_interactions < 1:
        raise ValueError("need at least one interaction")
    probs = np.arange(1, n_items + 1, dtype=np.float64) ** (-float(exponent))
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    seen = set()
    out_u = []
    out_i = []
    while len(seen) < n_interactions:
        need = n_interactions - len(seen)
        du = rng.integers(0, n_users, size=need)
        di = rng.choice(n_items, size=need, p=probs)
        for u, i in zip(du.tolist(), di.tolist()):
            if (u, i) not in seen:
                seen.add((u, i))
                out_u.append(u)
                out_i.append(i)
                if len(seen) == n_interactions:
                    break
    values = np.ones(n_interactions)
    return InteractionMatrix.from_pairs(out_u, out_i, values,
                                        n_users, n_items)
