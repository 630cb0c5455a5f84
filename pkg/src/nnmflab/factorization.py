"""Embedding initialization, MF/NNMF prediction, and the three SGD
trainers (pointwise squared error, pairwise ranking, sigmoid-squashed
pointwise) with neighbor-propagated updates, early stopping, and a fixed
sampling order.

A single training run is sequential; independent runs may execute
concurrently (each owns its generators and arrays, the kernels release
the GIL).
"""

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import _kernels, evaluation
from .similarity import SimilarityMatrix, identity_similarity

ALGORITHMS = ("funk", "bpr", "pmf")

DIVERGENCE_LIMIT = 1e6


class DivergenceError(Exception):
    """Training produced non-finite or runaway values (CLI exit code 3)."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters for one trainer run.

    user_k/item_k are the similarity neighbor counts; both zero means pure
    MF via identity similarities. Neighborhood mode requires at least 2
    neighbors on one side. eval_every=0 disables early stopping.
    """
    algorithm: str
    f: int
    learning_rate: float
    reg_p: float = 0.0
    reg_q: float = 0.0
    epochs_max: int = 200
    user_k: int = 0
    item_k: int = 0
    user_shrink: float = 0.0
    item_shrink: float = 0.0
    negative_ratio: int = 1
    eval_every: int = 10
    patience: int = 5
    eval_cutoff: int = 5
    init_seed: int = 0
    sample_seed: int = 0

    @property
    def is_nnmf(self):
        return self.user_k > 0 or self.item_k > 0

    @property
    def kind(self):
        return f"{self.algorithm}-{'nnmf' if self.is_nnmf else 'mf'}"

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.f < 1:
            raise ValueError("f must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reg_p < 0 or self.reg_q < 0:
            raise ValueError("regularization must be non-negative")
        if self.user_k < 0 or self.item_k < 0:
            raise ValueError("neighbor counts must be non-negative")
        if self.user_shrink < 0 or self.item_shrink < 0:
            raise ValueError("shrink must be non-negative")
        if self.is_nnmf and not (self.user_k >= 2 or self.item_k >= 2):
            raise ValueError(
                "neighborhood mode needs at least 2 neighbors for users "
                f"or items, got user_k={self.user_k}, item_k={self.item_k}")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio must be non-negative")
        if self.eval_every < 0 or self.patience < 1 or self.eval_cutoff < 1:
            raise ValueError("bad early-stopping settings")
        return self

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EmbeddingPair:
    P: np.ndarray
    Q: np.ndarray

    @property
    def f(self):
        return self.P.shape[1]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_metric: float | None


@dataclass
class TrainedModel:
    """A finished run: base generating-set matrices, the similarity
    matrices that couple them, and the materialized embeddings actually
    used for scoring."""
    config: ModelConfig
    base: EmbeddingPair
    s_user: SimilarityMatrix
    s_item: SimilarityMatrix
    materialized: EmbeddingPair
    history: list
    epochs_run: int
    best_epoch: int
    best_val: float | None
    skipped_samples: int
    sample_log: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.config.kind

    def score_all(self):
        return self.materialized.P @ self.materialized.Q.T


class FactorScorer:
    """Lightweight scorer over materialized embeddings (used when loading
    serialized models without reconstructing the full training state)."""

    def __init__(self, kind, P_star, Q_star):
        self.kind = kind
        self.P_star = P_star
        self.Q_star = Q_star

    def score_all(self):
        return self.P_star @ self.Q_star.T


def init_embeddings(n_users, n_items, f, seed):
    """Entries i.i.d. Normal(0, 0.1/sqrt(f)); P is drawn before Q."""
    if n_users < 1 or n_items < 1 or f < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 0.1 / math.sqrt(f)
    P = rng.normal(0.0, scale, (n_users, f))
    Q = rng.normal(0.0, scale, (n_items, f))
    return EmbeddingPair(P, Q)


def predict_mf(P, Q, u, i):
    return float(np.dot(P[u], Q[i]))


def predict_nnmf(P, Q, s_user, s_item, u, i):
    """Dot product of the two similarity-combined vectors; sums run only
    over stored neighbors. Identity similarities reduce this to
    predict_mf exactly."""
    ids, w = s_user.row(u)
    ps = w @ P[ids]
    ids, w = s_item.row(i)
    qs = w @ Q[ids]
    return float(np.dot(ps, qs))


def materialize(P, Q, s_user, s_item):
    """(S_user P, S_item Q) as a new EmbeddingPair."""
    return EmbeddingPair(s_user.csr @ P, s_item.csr @ Q)


def _similarity_for(train, axis, k, shrink):
    from .similarity import cosine_topk
    n = train.n_users if axis == "user" else train.n_items
    if k == 0:
        return identity_similarity(n)
    return cosine_topk(train, axis, k, shrink)


def build_similarities(train, config):
    """The pair (s_user, s_item) that a config asks for."""
    return (_similarity_for(train, "user", config.user_k, config.user_shrink),
            _similarity_for(train, "item", config.item_k, config.item_shrink))


def _validation_map(P, Q, s_user, s_item, split, cutoff):
    pair = materialize(P, Q, s_user, s_item)
    scores = pair.P @ pair.Q.T
    recs = evaluation.topn_from_scores(scores, split.train, cutoff)
    return evaluation.map_at_k(recs, split.validation, cutoff)


def _check_divergence(loss, P, Q, epoch):
    if not math.isfinite(loss) \
            or not np.isfinite(P).all() or not np.isfinite(Q).all() \
            or max(np.abs(P).max(), np.abs(Q).max()) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"training diverged at epoch {epoch}")


def _train(split, config, s_user, s_item):
    config.validate()
    train = split.train
    if train.nnz == 0:
        raise ValueError("train matrix is empty")
    if s_user.n != train.n_users or s_item.n != train.n_items:
        raise ValueError("similarity dimensions do not match the dataset")
    if config.algorithm == "pmf":
        vals = train.csr.data
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            raise ValueError("sigmoid-squashed trainer needs values in [0, 1]")

    pos_u, pos_i, pos_r = train.coo_arrays()
    prof_ptr, prof_idx = train.profile_arrays()
    su_ptr, su_idx, su_val = s_user.arrays64()
    si_ptr, si_idx, si_val = s_item.arrays64()

    pair = init_embeddings(train.n_users, train.n_items, config.f,
                           config.init_seed)
    P, Q = pair.P, pair.Q
    rng = np.random.default_rng(config.sample_seed)

    trace = np.full(100, -1, dtype=np.int64)
    trace_used = 0
    perm_head = None
    history = []
    best = None  # (val, epoch, P copy, Q copy)
    stale_evals = 0
    skipped_total = 0
    epochs_run = 0

    for epoch in range(1, config.epochs_max + 1):
        perm = rng.permutation(pos_u.shape[0])
        if perm_head is None:
            perm_head = perm[:100].copy()
        if config.algorithm == "bpr":
            loss, skipped, trace_used = _kernels.bpr_epoch(
                P, Q, pos_u, pos_i, perm, prof_ptr, prof_idx,
                su_ptr, su_idx, su_val, si_ptr, si_idx, si_val,
                config.learning_rate, config.reg_p, config.reg_q,
                rng, trace, trace_used)
        else:
            loss, skipped, trace_used = _kernels.point_epoch(
                config.algorithm == "pmf", P, Q, pos_u, pos_i, pos_r, perm,
                prof_ptr, prof_idx,
                su_ptr, su_idx, su_val, si_ptr, si_idx, si_val,
                config.learning_rate, config.reg_p, config.reg_q,
                config.negative_ratio, rng, trace, trace_used)
        skipped_total += skipped
        epochs_run = epoch
        _check_divergence(loss, P, Q, epoch)
        val = None
        if config.eval_every and epoch % config.eval_every == 0:
            val = _validation_map(P, Q, s_user, s_item, split,
                                  config.eval_cutoff)
            if best is None or val > best[0]:
                best = (val, epoch, P.copy(), Q.copy())
                stale_evals = 0
            else:
                stale_evals += 1
        history.append(EpochRecord(epoch, float(loss), val))
        if config.eval_every and stale_evals >= config.patience:
            break

    if skipped_total:
        warnings.warn(
            f"skipped {skipped_total} samples for users whose profiles "
            "cover every item", stacklevel=3)

    best_val = None
    best_epoch = epochs_run
    if best is not None:
        best_val, best_epoch, P, Q = best
    base = EmbeddingPair(P, Q)
    return TrainedModel(
        config=config, base=base, s_user=s_user, s_item=s_item,
        materialized=materialize(P, Q, s_user, s_item),
        history=history, epochs_run=epochs_run, best_epoch=best_epoch,
        best_val=best_val, skipped_samples=skipped_total,
        sample_log={"perm_head": perm_head, "negatives_head": trace.copy()})


def train_funk(split, config, s_user, s_item):
    if config.algorithm != "funk":
        raise ValueError("config.algorithm must be 'funk'")
    return _train(split, config, s_user, s_item)


def train_bpr(split, config, s_user, s_item):
    if config.algorithm != "bpr":
        raise ValueError("config.algorithm must be 'bpr'")
    return _train(split, config, s_user, s_item)


def train_pmf(split, config, s_user, s_item):
    if config.algorithm != "pmf":
        raise ValueError("config.algorithm must be 'pmf'")
    return _train(split, config, s_user, s_item)


TRAINERS = {"funk": train_funk, "bpr": train_bpr, "pmf": train_pmf}


def train_model(split, config, s_user=None, s_item=None):
    """Dispatch on config.algorithm, building similarities if not given."""
    if s_user is None or s_item is None:
        s_user, s_item = build_similarities(split.train, config)
    return TRAINERS[config.algorithm](split, config, s_user, s_item)


# ---------------------------------------------------------------------------
# Serialization: one JSON header line, then P and Q row-major as
# little-endian 64-bit floats. Similarity matrices travel by cache key.
# ---------------------------------------------------------------------------

def save_model(model, path, sim_user_key=None, sim_item_key=None):
    header = {
        "format": "nnmflab-model",
        "version": 1,
        "kind": model.kind,
        "algorithm": model.config.algorithm,
        "f": model.config.f,
        "n_users": model.base.P.shape[0],
        "n_items": model.base.Q.shape[0],
        "config": asdict(model.config),
        "config_hash": model.config.config_hash(),
        "epochs_run": model.epochs_run,
        "best_epoch": model.best_epoch,
        "best_val": model.best_val,
        "sim_user_key": sim_user_key,
        "sim_item_key": sim_item_key,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(model.base.P, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.base.Q, dtype="<f8").tobytes())


def load_model(path):
    """Returns (header, P, Q); the caller re-derives similarity matrices
    from the header's config (or the referenced cache) to materialize."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != "nnmflab-model":
            raise ValueError(f"{path}: not a model file")
        n_users = header["n_users"]
        n_items = header["n_items"]
        f = header["f"]
        P = np.frombuffer(fh.read(8 * n_users * f), dtype="<f8")
        Q = np.frombuffer(fh.read(8 * n_items * f), dtype="<f8")
    header["config"] = ModelConfig(**header["config"])
    return header, P.reshape(n_users, f).copy(), Q.reshape(n_items, f).copy()


def write_history_csv(model, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,loss,val_metric\n")
        for rec in model.history:
            val = "" if rec.val_metric is None else repr(rec.val_metric)
            fh.write(f"{rec.epoch},{rec.loss!r},{val}\n")


def read_history_csv(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            epoch, loss, val = line.rstrip("\n").split(",")
            records.append(EpochRecord(
                int(epoch), float(loss), float(val) if val else None))
    return records


def mf_twin(config):
    """The same hyperparameters with identity similarities (for matched
    neighborhood-vs-plain comparisons)."""
    return replace(config, user_k=0, item_k=0,
                   user_shrink=0.0, item_shrink=0.0)
