"""Multi-seed retraining harness measuring how much recommendations and
latent representations move when only the embedding initialization seed
changes, with popularity-bin breakdowns for items.

All comparisons are model-1-versus-the-rest: with ten models each entity
gets nine Jaccard values, averaged per entity and then over entities.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation
from .factorization import DivergenceError, build_similarities, train_model


@dataclass
class JaccardBook:
    """Counter for the degenerate both-empty comparisons, which are
    defined as 1 but worth surfacing."""
    empty_pairs: int = 0


def jaccard(a, b, book=None):
    """|a ∩ b| / |a ∪ b|; two empty sets count as identical (1.0) and tick
    the bookkeeping counter."""
    if not a and not b:
        if book is not None:
            book.empty_pairs += 1
        return 1.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


@dataclass
class StabilityReport:
    """kind is one of recommendations / representations_user /
    representations_item; per_entity maps an entity id to its mean Jaccard
    over the model-1-vs-rest comparisons."""
    kind: str
    cutoff: int
    per_entity: dict
    overall: float
    per_bin: dict = field(default_factory=dict)
    empty_pairs: int = 0
    skipped_entities: tuple = ()


def run_seeds(split, config, s_user=None, s_item=None, seeds=(0, 1),
              threads=1, skip_failures=False):
    """One model per init seed, sampling stream held constant.

    With skip_failures, diverging seeds are dropped with a warning as long
    as at least two models survive; otherwise the failing seed is named.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds")
    if s_user is None or s_item is None:
        s_user, s_item = build_similarities(split.train, config)

    def one(seed):
        return train_model(split, replace(config, init_seed=seed),
                           s_user, s_item)

    results = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [(seed, pool.submit(one, seed)) for seed in seeds]
            for seed, future in futures:
                try:
                    results.append(future.result())
                except DivergenceError as exc:
                    results.append((seed, exc))
    else:
        for seed in seeds:
            try:
                results.append(one(seed))
            except DivergenceError as exc:
                results.append((seed, exc))

    models = [r for r in results if not isinstance(r, tuple)]
    failures = [r for r in results if isinstance(r, tuple)]
    for seed, exc in failures:
        if not skip_failures:
            raise DivergenceError(f"seed {seed}: {exc}")
        warnings.warn(f"seed {seed} dropped: {exc}", stacklevel=2)
    if len(models) < 2:
        seed, exc = failures[0]
        raise DivergenceError(
            f"fewer than 2 seeds survived; first failure seed {seed}: {exc}")
    return models


def _topn_sets(model, train, n_top):
    recs = evaluation.topn_from_scores(model.score_all(), train, n_top)
    return [set(int(i) for i in row if i >= 0) for row in recs]


def recommendation_stability(models, train, n_top=10):
    """Per-user Jaccard of top-N sets, model 1 against each other model."""
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    book = JaccardBook()
    sets = [_topn_sets(model, train, n_top) for model in models]
    per_entity = {}
    for u in range(train.n_users):
        vals = [jaccard(sets[0][u], other[u], book) for other in sets[1:]]
        per_entity[u] = sum(vals) / len(vals)
    overall = sum(per_entity.values()) / len(per_entity)
    return StabilityReport("recommendations", n_top, per_entity, overall,
                           empty_pairs=book.empty_pairs)


def _embedding_table(model, entity, use_base):
    pair = model.base if use_base else model.materialized
    return pair.P if entity == "user" else pair.Q


def _neighbor_sets(X, n_neighbors, zero_rows):
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0.0
    zero_rows |= set(np.flatnonzero(zero).tolist())
    Xn = X / np.where(zero, 1.0, norms)[:, None]
    sims = Xn @ Xn.T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :n_neighbors]
    return [set(int(i) for i in row) for row in order]


def representation_stability(models, entity, n_neighbors=10,
                             use_base=False):
    """Per-entity Jaccard of cosine nearest-neighbor sets in embedding
    space (self excluded, ties by ascending id), model 1 against each
    other model. Works on the materialized factors unless use_base.

    Comparing neighbor SETS makes the measure invariant to any common
    rotation or reflection of one model's embedding space.
    """
    if entity not in ("user", "item"):
        raise ValueError(f"unknown entity {entity!r}")
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    tables = [_embedding_table(m, entity, use_base) for m in models]
    n = tables[0].shape[0]
    if not 1 <= n_neighbors < n:
        raise ValueError("n_neighbors must be in [1, entity count)")
    if any(t.shape[0] != n for t in tables):
        raise ValueError("models disagree on entity count")

    book = JaccardBook()
    zero_rows = set()
    sets = [_neighbor_sets(t, n_neighbors, zero_rows) for t in tables]
    if zero_rows:
        warnings.warn(
            f"skipped {len(zero_rows)} zero-norm {entity} rows",
            stacklevel=2)
    per_entity = {}
    for e in range(n):
        if e in zero_rows:
            continue
        vals = [jaccard(sets[0][e], other[e], book) for other in sets[1:]]
        per_entity[e] = sum(vals) / len(vals)
    if not per_entity:
        raise ValueError("every entity was skipped")
    overall = sum(per_entity.values()) / len(per_entity)
    return StabilityReport(f"representations_{entity}", n_neighbors,
                           per_entity, overall,
                           empty_pairs=book.empty_pairs,
                           skipped_entities=tuple(sorted(zero_rows)))


def per_bin_stability(report, bins):
    """Copy of an item-representation report with per_bin filled with the
    mean per-entity value inside each popularity bin; empty bins are
    absent from the result."""
    if report.kind != "representations_item":
        raise ValueError("per-bin breakdown needs an item-entity report")
    per_bin = {}
    for b in range(1, bins.n_bins + 1):
        vals = [report.per_entity[int(i)] for i in bins.items_in(b)
                if int(i) in report.per_entity]
        if vals:
            per_bin[b] = sum(vals) / len(vals)
    return replace(report, per_bin=per_bin)


# ---------------------------------------------------------------------------
# Report files: one CSV row per entity plus a JSON summary with the
# overall and per-bin means.
# ---------------------------------------------------------------------------

def write_stability_csv(report, path, bins=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("entity_id,bin,mean_jaccard\n")
        for e in sorted(report.per_entity):
            b = ""
            if bins is not None and report.kind == "representations_item":
                b = int(bins.assignment[e])
            fh.write(f"{e},{b},{report.per_entity[e]!r}\n")


def write_stability_json(report, path):
    payload = {
        "kind": report.kind,
        "cutoff": report.cutoff,
        "overall": report.overall,
        "per_bin": {str(b): v for b, v in sorted(report.per_bin.items())},
        "n_entities": len(report.per_entity),
        "empty_pairs": report.empty_pairs,
        "skipped_entities": list(report.skipped_entities),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
