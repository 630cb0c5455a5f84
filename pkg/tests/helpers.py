"""Shared fixtures and harnesses used by both the unit tests and the
acceptance suite."""

import numpy as np
import scipy.sparse as sp

from nnmflab import _kernels
from nnmflab.data import DatasetSplit, InteractionMatrix
from nnmflab.factorization import ModelConfig, train_model
from nnmflab.similarity import cosine_topk, identity_similarity

import oracles


def mat(dense):
    return InteractionMatrix(sp.csr_matrix(np.asarray(dense, dtype=float)))


def empty_like(train):
    return InteractionMatrix.from_pairs([], [], [], train.n_users,
                                        train.n_items)


def split_train_only(train):
    return DatasetSplit(train, empty_like(train), empty_like(train))


def random_binary_matrix(rng, n_users, n_items, density=0.35):
    """Binary matrix where every user and item has at least one interaction
    and no user covers every item (so negative draws terminate)."""
    while True:
        dense = rng.random((n_users, n_items)) < density
        if (dense.sum() >= 3 and dense.any(axis=1).all()
                and dense.any(axis=0).all()
                and not dense.all(axis=1).any()):
            return dense.astype(float)


def sim_rows(sim):
    """SimilarityMatrix rows as {x: [(id, weight), ...]} for the oracle
    loss functions."""
    return {x: list(zip(*(a.tolist() for a in sim.row(x))))
            for x in range(sim.n)}


# ---------------------------------------------------------------------------
# Finite-difference gradient harness.
#
# One kernel step with learning rate 0.125 (a power of two, so dividing the
# observed update by it is exact) yields the implementation's analytic
# gradient; central differences of the independently coded per-sample loss
# provide the reference.
# ---------------------------------------------------------------------------

FD_LR = 0.125
FD_REG_P = 0.03
FD_REG_Q = 0.07


def fd_max_rel_error(algorithm, seed, n=5, f=4, k=2, step=1e-5):
    """Max relative gradient error for one random sample on a random
    instance with non-identity similarities. Also asserts update locality:
    rows outside the stored neighborhoods must not move."""
    rng = np.random.default_rng(seed)
    dense = random_binary_matrix(rng, n, n, density=0.45)
    train = mat(dense)
    s_user = cosine_topk(train, "user", k, 0.3)
    s_item = cosine_topk(train, "item", k, 0.3)
    P = rng.normal(0.0, 0.2, (n, f))
    Q = rng.normal(0.0, 0.2, (n, f))
    P0, Q0 = P.copy(), Q.copy()

    u = int(rng.integers(0, n))
    prof_ptr, prof_idx = train.profile_arrays()
    su = s_user.arrays64()
    si = s_item.arrays64()
    trace = np.full(4, -1, dtype=np.int64)
    urow = sim_rows(s_user)[u]

    if algorithm == "bpr":
        pos = train.user_items(u)
        i = int(pos[rng.integers(0, len(pos))])
        pos_u = np.array([u], dtype=np.int64)
        pos_i = np.array([i], dtype=np.int64)
        perm = np.array([0], dtype=np.int64)
        krng = np.random.default_rng(int(rng.integers(0, 2**32)))
        _kernels.bpr_epoch(P, Q, pos_u, pos_i, perm, prof_ptr, prof_idx,
                           *su, *si, FD_LR, FD_REG_P, FD_REG_Q,
                           krng, trace, 0)
        j = int(trace[0])
        irow = sim_rows(s_item)[i]
        jrow = sim_rows(s_item)[j]
        touched_p = {v for v, _ in urow}
        touched_q = {v for v, _ in irow} | {v for v, _ in jrow}

        def loss():
            return oracles.bpr_sample_loss(P0, Q0, urow, irow, jrow,
                                           FD_REG_P, FD_REG_Q)
    else:
        i = int(rng.integers(0, n))
        r = float(dense[u, i])
        pos_u = np.array([u], dtype=np.int64)
        pos_i = np.array([i], dtype=np.int64)
        pos_r = np.array([r], dtype=np.float64)
        perm = np.array([0], dtype=np.int64)
        _kernels.point_epoch(algorithm == "pmf", P, Q, pos_u, pos_i, pos_r,
                             perm, prof_ptr, prof_idx, *su, *si,
                             FD_LR, FD_REG_P, FD_REG_Q, 0,
                             np.random.default_rng(0), trace, 0)
        irow = sim_rows(s_item)[i]
        touched_p = {v for v, _ in urow}
        touched_q = {v for v, _ in irow}
        loss_fn = (oracles.pmf_sample_loss if algorithm == "pmf"
                   else oracles.funk_sample_loss)

        def loss():
            return loss_fn(P0, Q0, urow, irow, r, FD_REG_P, FD_REG_Q)

    grad_P = (P0 - P) / FD_LR
    grad_Q = (Q0 - Q) / FD_LR

    # update locality: untouched rows must be bit-identical
    for v in range(n):
        if v not in touched_p:
            assert P[v].tobytes() == P0[v].tobytes()
        if v not in touched_q:
            assert Q[v].tobytes() == Q0[v].tobytes()

    errs = []
    scale = 1e-8
    for rows, M, G in ((touched_p, P0, grad_P), (touched_q, Q0, grad_Q)):
        for v in rows:
            for t in range(f):
                fd = oracles.fd_gradient(loss, M, v, t, step)
                an = G[v, t]
                errs.append(abs(fd - an))
                scale = max(scale, abs(an))
    return max(errs) / scale


# ---------------------------------------------------------------------------
# Collapse harness: identity similarities against the literal plain-MF
# trainer from the oracle module.
# ---------------------------------------------------------------------------

def run_collapse_pair(algorithm, n_users=30, n_items=20, f=5, epochs=3,
                      lr=0.05, reg_p=0.02, reg_q=0.01, neg_ratio=1,
                      init_seed=11, sample_seed=7, density=0.15,
                      data_seed=0):
    rng = np.random.default_rng(data_seed)
    dense = random_binary_matrix(rng, n_users, n_items, density)
    train = mat(dense)
    split = split_train_only(train)
    config = ModelConfig(
        algorithm=algorithm, f=f, learning_rate=lr, reg_p=reg_p, reg_q=reg_q,
        epochs_max=epochs, negative_ratio=neg_ratio, eval_every=0,
        init_seed=init_seed, sample_seed=sample_seed)
    model = train_model(split, config,
                        identity_similarity(n_users),
                        identity_similarity(n_items))
    users, items, values = train.coo_arrays()
    positives = list(zip(users.tolist(), items.tolist(), values.tolist()))
    profiles = [train.user_items(u).tolist() for u in range(n_users)]
    P_ref, Q_ref, losses_ref = oracles.train_literal_mf(
        algorithm, positives, profiles, n_users, n_items, f,
        lr, reg_p, reg_q, epochs, init_seed, sample_seed, neg_ratio)
    return model, P_ref, Q_ref, losses_ref, train
