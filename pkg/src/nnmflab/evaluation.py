"""Top-N recommendation lists, MAP/Recall, long-tail filtering, and
popularity bins.

MAP convention (the underlying definition varies across the literature, so
it is spelled out here): AP@k for a user divides the summed precision at
hit positions by min(k, |ground truth|), and MAP averages AP@k over users
with at least one ground-truth item; other users are excluded from the
mean rather than counted as zero.
"""

from dataclasses import dataclass

import numpy as np

from .data import InteractionMatrix


class UndefinedMetricError(Exception):
    """No user has ground truth, so the metric mean does not exist."""


def topn_from_scores(scores, train, n_top):
    """Top-N item ids per user from a dense score table.

    Train items are masked out. Ordering is by descending score with ties
    broken by ascending item id. Rows are padded with -1 when fewer than
    n_top unmasked items exist.
    """
    if n_top < 1:
        raise ValueError("n_top must be >= 1")
    scores = np.array(scores, dtype=np.float64, copy=True)
    n_users, n_items = scores.shape
    if train is not None:
        users, items, _ = train.coo_arrays()
        scores[users, items] = -np.inf
    # stable argsort on the negated scores: descending value, ties by
    # ascending item id
    order = np.argsort(-scores, axis=1, kind="stable")[:, :n_top]
    out = np.full((n_users, n_top), -1, dtype=np.int64)
    width = min(n_top, n_items)
    out[:, :width] = order[:, :width]
    picked = np.take_along_axis(scores, order, axis=1)
    out[:, :width][picked[:, :width] == -np.inf] = -1
    return out


def recommend_topn(model, train, n_top):
    """Top-N lists for a scoring model (anything with score_all())."""
    scores = model.score_all() if hasattr(model, "score_all") else model
    return topn_from_scores(scores, train, n_top)


def _gt_sets(ground_truth):
    return [set(ground_truth.user_items(u).tolist())
            for u in range(ground_truth.n_users)]


def _ap_values(recs, gt_sets, k):
    users = []
    vals = []
    for u, gt in enumerate(gt_sets):
        if not gt:
            continue
        hits = 0
        score = 0.0
        for pos in range(min(k, recs.shape[1])):
            item = recs[u, pos]
            if item >= 0 and item in gt:
                hits += 1
                score += hits / (pos + 1)
        users.append(u)
        vals.append(score / min(k, len(gt)))
    return np.asarray(users, dtype=np.int64), np.asarray(vals)


def _recall_values(recs, gt_sets, k):
    users = []
    vals = []
    for u, gt in enumerate(gt_sets):
        if not gt:
            continue
        top = {i for i in recs[u, :k].tolist() if i >= 0}
        users.append(u)
        vals.append(len(top & gt) / len(gt))
    return np.asarray(users, dtype=np.int64), np.asarray(vals)


def map_at_k(recs, ground_truth, k):
    users, vals = _ap_values(recs, _gt_sets(ground_truth), k)
    if users.size == 0:
        raise UndefinedMetricError("no user has ground truth")
    return float(vals.mean())


def recall_at_k(recs, ground_truth, k):
    users, vals = _recall_values(recs, _gt_sets(ground_truth), k)
    if users.size == 0:
        raise UndefinedMetricError("no user has ground truth")
    return float(vals.mean())


def _covering_prefix_lengths(cums, targets, tol):
    """For each cumulative-count target, the minimal number of leading
    items whose counts sum to at least that target (within tolerance)."""
    out = []
    for target in targets:
        if target <= tol:
            out.append(0)
        else:
            out.append(int(np.searchsorted(cums, target - tol, side="left")) + 1)
    return out


def _sorted_by_popularity(train):
    counts = train.item_counts()
    active = np.flatnonzero(counts > 0)
    order = np.argsort(-counts[active], kind="stable")
    sorted_ids = active[order]
    return sorted_ids, counts[sorted_ids]


def longtail_items(train, tail_fraction=0.66):
    """Ids of the least popular items holding tail_fraction of interactions.

    The short head is the minimal popularity-sorted prefix covering at
    least (1 - tail_fraction) of interactions; the tail is everything else
    that has at least one train interaction.
    """
    if not 0 < tail_fraction < 1:
        raise ValueError("tail_fraction must be in (0, 1)")
    sorted_ids, sorted_counts = _sorted_by_popularity(train)
    total = float(sorted_counts.sum())
    cums = np.cumsum(sorted_counts, dtype=np.float64)
    head_len = _covering_prefix_lengths(
        cums, [(1.0 - tail_fraction) * total], 1e-9 * total)[0]
    return np.sort(sorted_ids[head_len:])


@dataclass(frozen=True)
class PopularityBins:
    """Item bin assignment; bin 1 is the most popular segment, 0 = unbinned
    (items without train interactions)."""
    thresholds: tuple
    assignment: np.ndarray

    @property
    def n_bins(self):
        return len(self.thresholds) - 1

    def items_in(self, b):
        return np.flatnonzero(self.assignment == b)


def popularity_bins(train, thresholds=(1.0, 0.66, 0.4, 0.3, 0.2, 0.1, 0.0)):
    """Assign items to popularity bins by cumulative interaction share.

    Items are sorted by descending popularity; bin b spans the segment
    between the minimal prefixes covering (1 - thresholds[b-1]) and
    (1 - thresholds[b]) of all interactions, so boundary items land in the
    higher-popularity bin and a dominant head item absorbs the whole first
    segment.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if len(thresholds) < 2 or thresholds[0] != 1.0 or thresholds[-1] != 0.0 \
            or any(a <= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must descend strictly from 1 to 0")
    sorted_ids, sorted_counts = _sorted_by_popularity(train)
    total = float(sorted_counts.sum())
    cums = np.cumsum(sorted_counts, dtype=np.float64)
    bounds = _covering_prefix_lengths(
        cums, [(1.0 - t) * total for t in thresholds], 1e-9 * total)
    assignment = np.zeros(train.n_items, dtype=np.int64)
    for b in range(1, len(thresholds)):
        lo, hi = bounds[b - 1], bounds[b]
        assignment[sorted_ids[lo:hi]] = b
    return PopularityBins(thresholds, assignment)


def filter_ground_truth(ground_truth, item_ids):
    """Ground truth restricted to the given item set (train is untouched
    by long-tail evaluation; only the targets are filtered)."""
    keep = np.zeros(ground_truth.n_items, dtype=bool)
    keep[np.asarray(item_ids, dtype=np.int64)] = True
    users, items, values = ground_truth.coo_arrays()
    mask = keep[items]
    return InteractionMatrix.from_pairs(
        users[mask], items[mask], values[mask],
        ground_truth.n_users, ground_truth.n_items)


@dataclass
class EvalReport:
    """Metric values keyed by (metric name, cutoff), with per-user values
    retained for significance testing."""
    values: dict
    per_user: dict
    users: dict

    def row_tuples(self, label):
        return [(label, metric, cutoff, self.values[(metric, cutoff)])
                for (metric, cutoff) in sorted(self.values)]


def evaluate_scores(scores, train, ground_truth, cutoffs=(5, 10)):
    """MAP and Recall at each cutoff for one dense score table."""
    recs = topn_from_scores(scores, train, max(cutoffs))
    gt_sets = _gt_sets(ground_truth)
    values = {}
    per_user = {}
    users_out = {}
    for k in cutoffs:
        for metric, fn in (("MAP", _ap_values), ("Recall", _recall_values)):
            users, vals = fn(recs, gt_sets, k)
            if users.size == 0:
                raise UndefinedMetricError("no user has ground truth")
            values[(metric, k)] = float(vals.mean())
            per_user[(metric, k)] = vals
            users_out[(metric, k)] = users
    return EvalReport(values, per_user, users_out)
