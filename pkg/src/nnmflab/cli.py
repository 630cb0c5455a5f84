"""Command-line pipeline driver.

Subcommands cover the experiment stages end to end: preprocess builds the
persisted split, train fits the configured models, evaluate scores them on
long-tail test data, stability retrains across seeds and measures Jaccard
overlap, search runs a seeded random search, and report renders figures
from whatever tables the earlier stages produced. Stages communicate only
through files under the output directory, so any stage can be rerun (or
its outputs deleted and rebuilt) with byte-identical results.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
divergence.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import reports
from .baselines import fit_knn, fit_pure_svd, fit_slim_bpr
from .config import ConfigError, load_config
from .data import (DataError, DatasetSplit, Interaction, InteractionMatrix,
                   binarize, core_filter, holdout_split,
                   interactions_to_matrix, load_interactions,
                   matrix_to_interactions, synthesize_powerlaw,
                   write_interactions)
from .evaluation import (UndefinedMetricError, evaluate_scores,
                         filter_ground_truth, longtail_items,
                         popularity_bins)
from .factorization import (DivergenceError, FactorScorer, load_model,
                            materialize, read_history_csv, save_model,
                            train_model, write_history_csv)
from .similarity import build_or_load, similarity_cache_key
from .stability import (per_bin_stability, recommendation_stability,
                        representation_stability, run_seeds,
                        write_stability_csv, write_stability_json)

OUT_ENV_VAR = "NNMFLAB_OUT"


def _resolve_out(config, args):
    """Output directory: --out beats the environment beats the config."""
    if args.out:
        return Path(args.out)
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return Path(env)
    return Path(config.out_dir)


def _model_id(idx, model_config):
    return f"{idx:02d}_{model_config.kind}_{model_config.config_hash()}"


def _parse_seed_list(text):
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise ConfigError("--seed-list must be comma-separated integers,"
                          f" got {text!r}") from None


def _run_ordered(fn, items, threads):
    """Apply fn to each item, collecting results (or the exception each
    item raised) in submission order regardless of scheduling."""
    outcomes = []
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(fn, item) for item in items]
            for future in futures:
                try:
                    outcomes.append(future.result())
                except Exception as exc:
                    outcomes.append(exc)
    else:
        for item in items:
            try:
                outcomes.append(fn(item))
            except Exception as exc:
                outcomes.append(exc)
    return outcomes


# ---------------------------------------------------------------------------
# Split persistence: plain TSV of dense integer ids, plus a stats summary.
# ---------------------------------------------------------------------------

def _write_index_csv(path, tokens):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("token,index\n")
        for idx, tok in enumerate(tokens):
            fh.write(f"{tok},{idx}\n")


def _read_split_file(path, n_users, n_items):
    interactions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            u, i, v = line.split("\t")
            interactions.append(Interaction(int(u), int(i), float(v)))
    if not interactions:
        return InteractionMatrix.from_pairs([], [], [], n_users, n_items)
    return interactions_to_matrix(interactions, n_users, n_items)


def _load_split(out):
    ddir = out / "dataset"
    stats_path = ddir / "stats.json"
    if not stats_path.exists():
        raise DataError(f"no preprocessed dataset at {ddir};"
                        " run preprocess first")
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    n_users, n_items = stats["n_users"], stats["n_items"]
    split = DatasetSplit(
        _read_split_file(ddir / "train.tsv", n_users, n_items),
        _read_split_file(ddir / "validation.tsv", n_users, n_items),
        _read_split_file(ddir / "test.tsv", n_users, n_items))
    return split, stats


def _prebuild_similarities(out, train, model_configs):
    """One similarity per distinct (axis, k, shrink), built sequentially so
    parallel trainings never race on the cache files."""
    sims = {}
    for mc in model_configs:
        for axis, k, shrink in (("user", mc.user_k, mc.user_shrink),
                                ("item", mc.item_k, mc.item_shrink)):
            key = (axis, k, shrink)
            if key not in sims:
                try:
                    sims[key] = build_or_load(out / "sims", train, axis, k,
                                              shrink)
                except ValueError as exc:
                    raise ConfigError(f"{axis} similarity with k={k}:"
                                      f" {exc}") from None
    return sims


def _sims_for(sims, mc):
    return (sims[("user", mc.user_k, mc.user_shrink)],
            sims[("item", mc.item_k, mc.item_shrink)])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_preprocess(config, out, args):
    if config.synthetic is not None:
        spec = config.synthetic
        matrix = synthesize_powerlaw(spec.n_users, spec.n_items,
                                     spec.n_interactions, spec.exponent,
                                     spec.seed)
        user_tokens = item_tokens = None
    else:
        if not Path(config.dataset_path).is_file():
            raise ConfigError(f"dataset path does not exist:"
                              f" {config.dataset_path}")
        interactions, user_tokens, item_tokens = load_interactions(
            config.dataset_path, config.delimiter, config.header)
        kept = binarize(interactions, config.threshold)
        matrix = interactions_to_matrix(kept, len(user_tokens),
                                        len(item_tokens))
        matrix, kept_users, kept_items = core_filter(
            matrix, config.min_interactions)
        user_tokens = [user_tokens[j] for j in kept_users]
        item_tokens = [item_tokens[j] for j in kept_items]

    split = holdout_split(matrix, config.split_ratios, config.split_seed)
    ddir = out / "dataset"
    ddir.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", split.train),
                       ("validation", split.validation),
                       ("test", split.test)):
        write_interactions(ddir / f"{name}.tsv", matrix_to_interactions(part))
    if user_tokens is not None:
        _write_index_csv(ddir / "user_index.csv", user_tokens)
        _write_index_csv(ddir / "item_index.csv", item_tokens)
    stats = {
        "n_users": int(matrix.n_users),
        "n_items": int(matrix.n_items),
        "n_interactions": int(matrix.nnz),
        "density": float(matrix.density()),
        "train_nnz": int(split.train.nnz),
        "validation_nnz": int(split.validation.nnz),
        "test_nnz": int(split.test.nnz),
    }
    with open(ddir / "stats.json", "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    print(f"preprocessed: {stats['n_users']} users, {stats['n_items']} items,"
          f" {stats['n_interactions']} interactions"
          f" (density {stats['density']:.4%})")
    return 0


def cmd_train(config, out, args):
    if not config.models:
        raise ConfigError("no [[model]] tables in config")
    split, _ = _load_split(out)
    sims = _prebuild_similarities(out, split.train, config.models)
    mdir = out / "models"
    mdir.mkdir(parents=True, exist_ok=True)

    def one(item):
        _, mc = item
        s_user, s_item = _sims_for(sims, mc)
        return train_model(split, mc, s_user, s_item)

    items = list(enumerate(config.models))
    outcomes = _run_ordered(one, items, args.threads)
    failure = None
    train_hash = split.train.content_hash()
    for (idx, mc), outcome in zip(items, outcomes):
        mid = _model_id(idx, mc)
        if isinstance(outcome, DivergenceError):
            failure = failure or DivergenceError(f"model {mid}: {outcome}")
            continue
        if isinstance(outcome, Exception):
            raise outcome
        keys = [similarity_cache_key(axis, k, shrink, train_hash)
                if k > 0 else None
                for axis, k, shrink in (("user", mc.user_k, mc.user_shrink),
                                        ("item", mc.item_k, mc.item_shrink))]
        save_model(outcome, mdir / f"{mid}.model",
                   sim_user_key=keys[0], sim_item_key=keys[1])
        write_history_csv(outcome, mdir / f"{mid}_history.csv")
        best = "" if outcome.best_val is None \
            else f", best val {outcome.best_val:.4f}"
        print(f"trained {mid}: {outcome.epochs_run} epochs{best}")
    if failure is not None:
        raise failure
    return 0


def _fit_baseline(spec, train):
    p = spec.params
    try:
        if spec.kind == "item_knn":
            return fit_knn(train, "item", p["k"], p["shrink"])
        if spec.kind == "user_knn":
            return fit_knn(train, "user", p["k"], p["shrink"])
        if spec.kind == "slim":
            return fit_slim_bpr(train, p["k"], p["learning_rate"], p["reg"],
                                p["epochs"], p["seeds"])
        return fit_pure_svd(train, p["f"], p["seed"])
    except ValueError as exc:
        raise ConfigError(f"baseline {spec.kind}: {exc}") from None


def cmd_evaluate(config, out, args):
    split, _ = _load_split(out)
    mdir = out / "models"
    expected = [(idx, mc, mdir / f"{_model_id(idx, mc)}.model")
                for idx, mc in enumerate(config.models)]
    missing = [str(path) for _, _, path in expected if not path.exists()]
    if missing:
        raise DataError("missing model files (run train first): "
                        + ", ".join(missing))
    if not expected and not config.baselines:
        raise ConfigError("nothing to evaluate: config has no [[model]]"
                          " or [[baseline]] tables")

    tail = longtail_items(split.train, config.tail_fraction)
    gt = filter_ground_truth(split.test, tail)
    rows = []
    for idx, mc, path in expected:
        header, P, Q = load_model(path)
        hconf = header["config"]
        sims = _prebuild_similarities(out, split.train, [hconf])
        s_user, s_item = _sims_for(sims, hconf)
        emb = materialize(P, Q, s_user, s_item)
        scores = FactorScorer(header["kind"], emb.P, emb.Q).score_all()
        report = evaluate_scores(scores, split.train, gt, config.cutoffs)
        rows.extend(report.row_tuples(_model_id(idx, mc)))
    for idx, spec in enumerate(config.baselines):
        model = _fit_baseline(spec, split.train)
        report = evaluate_scores(model.score_all(), split.train, gt,
                                 config.cutoffs)
        rows.extend(report.row_tuples(f"baseline{idx:02d}_{spec.kind}"))

    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    reports.write_accuracy_csv(
        rdir / "accuracy.csv", rows,
        comment=f"long-tail evaluation, tail_fraction="
                f"{config.tail_fraction!r}, {tail.size} tail items")
    print(f"evaluated {len(expected)} models and {len(config.baselines)}"
          f" baselines on {tail.size} tail items -> {rdir / 'accuracy.csv'}")
    return 0


def cmd_stability(config, out, args):
    if not config.models:
        raise ConfigError("no [[model]] tables in config")
    split, _ = _load_split(out)
    seeds = config.stability_seeds
    if args.seed_list:
        # Duplicates are allowed here on purpose: repeating one seed is
        # the quickest sanity check that every stability value hits 1.0.
        seeds = _parse_seed_list(args.seed_list)
    if len(seeds) < 2:
        raise ConfigError(f"stability needs at least 2 seeds,"
                          f" got {list(seeds)}")
    for cutoff in config.rep_cutoffs:
        limit = min(split.train.n_users, split.train.n_items)
        if cutoff >= limit:
            raise ConfigError(f"rep cutoff {cutoff} must be smaller than"
                              f" the entity counts (min {limit})")

    sims = _prebuild_similarities(out, split.train, config.models)
    bins = popularity_bins(split.train, config.popularity_thresholds)
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    bin_rows = []
    for idx, mc in enumerate(config.models):
        mid = _model_id(idx, mc)
        s_user, s_item = _sims_for(sims, mc)
        try:
            models = run_seeds(split, mc, s_user, s_item, seeds=seeds,
                               threads=args.threads, skip_failures=True)
        except DivergenceError as exc:
            raise DivergenceError(f"model {mid}: {exc}") from None
        outputs = [recommendation_stability(models, split.train,
                                            n_top=config.top_n)]
        for cutoff in config.rep_cutoffs:
            outputs.append(representation_stability(models, "user", cutoff))
            item_rep = representation_stability(models, "item", cutoff)
            outputs.append(per_bin_stability(item_rep, bins))
        for rep in outputs:
            stem = f"stability_{mid}_{rep.kind}_at{rep.cutoff}"
            is_item = rep.kind == "representations_item"
            write_stability_csv(rep, rdir / f"{stem}.csv",
                                bins=bins if is_item else None)
            write_stability_json(rep, rdir / f"{stem}.json")
            summary_rows.append((mid, rep.kind, rep.cutoff, rep.overall,
                                 rep.empty_pairs))
            for b in sorted(rep.per_bin):
                bin_rows.append((mid, rep.cutoff, b, rep.per_bin[b]))
        print(f"stability {mid}: recommendations@{config.top_n}"
              f" = {outputs[0].overall:.4f}")
    reports.write_stability_summary_csv(rdir / "stability_summary.csv",
                                        summary_rows)
    reports.write_stability_bins_csv(rdir / "stability_bins.csv", bin_rows)
    return 0


def cmd_search(config, out, args):
    space = config.search
    if space is None:
        raise ConfigError("config has no [search] section")
    split, _ = _load_split(out)
    rng = np.random.default_rng(space.seed)
    trials = [space.draw(rng) for _ in range(space.budget)]
    sims = _prebuild_similarities(out, split.train, trials)

    def one(mc):
        s_user, s_item = _sims_for(sims, mc)
        return train_model(split, mc, s_user, s_item)

    outcomes = _run_ordered(one, trials, args.threads)
    best_pos = None
    lines = []
    for pos, (mc, outcome) in enumerate(zip(trials, outcomes)):
        if isinstance(outcome, DivergenceError):
            lines.append(f"{pos},diverged,{mc.algorithm},{mc.f},"
                         f"{mc.learning_rate!r},{mc.reg_p!r},{mc.reg_q!r},"
                         f"{mc.user_k},{mc.item_k},{mc.user_shrink!r},"
                         f"{mc.item_shrink!r},,,")
            continue
        if isinstance(outcome, Exception):
            raise type(outcome)(f"trial {pos}: {outcome}")
        lines.append(f"{pos},trained,{mc.algorithm},{mc.f},"
                     f"{mc.learning_rate!r},{mc.reg_p!r},{mc.reg_q!r},"
                     f"{mc.user_k},{mc.item_k},{mc.user_shrink!r},"
                     f"{mc.item_shrink!r},{outcome.epochs_run},"
                     f"{outcome.best_epoch},{outcome.best_val!r}")
        if best_pos is None or outcome.best_val > outcomes[best_pos].best_val:
            best_pos = pos
    if best_pos is None:
        raise DivergenceError(f"all {space.budget} trials diverged")

    sdir = out / "search"
    sdir.mkdir(parents=True, exist_ok=True)
    with open(sdir / "trials.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# seeded random search (deterministic stand-in for a"
                 f" Bayesian tuner); algorithm={space.algorithm};"
                 f" seed={space.seed}; budget={space.budget}; ranked by"
                 f" validation MAP@{space.eval_cutoff}\n")
        fh.write("trial,status,algorithm,f,learning_rate,reg_p,reg_q,"
                 "user_k,item_k,user_shrink,item_shrink,epochs_run,"
                 "best_epoch,val_metric\n")
        for line in lines:
            fh.write(line + "\n")
    best_model = outcomes[best_pos]
    best_blob = {
        "trial": best_pos,
        "config": asdict(trials[best_pos]),
        "config_hash": trials[best_pos].config_hash(),
        "val_metric": best_model.best_val,
        "epochs_run": best_model.epochs_run,
        "best_epoch": best_model.best_epoch,
    }
    with open(sdir / "best.json", "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(best_blob, sort_keys=True, indent=2) + "\n")
    print(f"search done: best trial {best_pos}"
          f" (val MAP@{space.eval_cutoff} = {best_model.best_val:.4f})"
          f" -> {sdir / 'best.json'}")
    return 0


def cmd_report(config, out, args):
    mdir = out / "models"
    rdir = out / "reports"
    fdir = out / "figures"
    made = []

    history_paths = sorted(mdir.glob("*_history.csv")) if mdir.exists() \
        else []
    if history_paths:
        data = [(p.name[:-len("_history.csv")], read_history_csv(p))
                for p in history_paths]
        fdir.mkdir(parents=True, exist_ok=True)
        reports.render_convergence(data, fdir / "convergence.png")
        made.append("convergence.png")

    acc_path = rdir / "accuracy.csv"
    if acc_path.exists():
        rows = reports.read_accuracy_csv(acc_path)
        if rows:
            fdir.mkdir(parents=True, exist_ok=True)
            reports.render_accuracy(rows, fdir / "accuracy.png")
            made.append("accuracy.png")

    summary_path = rdir / "stability_summary.csv"
    if summary_path.exists():
        rows = reports.read_stability_summary_csv(summary_path)
        if rows:
            fdir.mkdir(parents=True, exist_ok=True)
            reports.render_stability_overall(rows, fdir / "stability.png")
            made.append("stability.png")

    bins_path = rdir / "stability_bins.csv"
    if bins_path.exists():
        rows = reports.read_stability_bins_csv(bins_path)
        if rows:
            fdir.mkdir(parents=True, exist_ok=True)
            reports.render_stability_bins(rows, fdir / "stability_bins.png")
            made.append("stability_bins.png")

    if not made:
        raise DataError("nothing to report: run train, evaluate, or"
                        " stability first")
    print(f"figures written to {fdir}: {', '.join(made)}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "stability": cmd_stability,
    "search": cmd_search,
    "report": cmd_report,
}


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="TOML experiment configuration")
    common.add_argument("--out", default=None,
                        help="output directory (overrides the config and"
                             f" the {OUT_ENV_VAR} environment variable)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent trainings")
    common.add_argument("--seed-list", default=None,
                        help="comma-separated seeds overriding the"
                             " configured stability seeds")
    parser = argparse.ArgumentParser(
        prog="nnmflab",
        description="Neighborhood-coupled matrix factorization lab:"
                    " preprocess, train, evaluate, stability, search,"
                    " report.")
    sub = parser.add_subparsers(dest="command", required=True)
    blurbs = {
        "preprocess": "build and persist the train/validation/test split",
        "train": "train every configured model on the persisted split",
        "evaluate": "score models and baselines on long-tail test data",
        "stability": "retrain across seeds and measure Jaccard overlap",
        "search": "random hyperparameter search ranked by validation MAP",
        "report": "render figures from the emitted tables",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=blurbs[name])
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config = load_config(args.config)
        out = _resolve_out(config, args)
        return COMMANDS[args.command](config, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
