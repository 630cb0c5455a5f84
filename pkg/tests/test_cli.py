"""End-to-end tests for the command-line pipeline.

The module-scoped pipeline fixture runs every subcommand three times over
one small synthetic experiment: once serially, once again on top of the
existing files, and once from scratch with 8 worker threads. The hash
comparisons double as the determinism suite.
"""

import hashlib
import json
import shutil

import numpy as np
import pytest

import oracles
from nnmflab import reports
from nnmflab.cli import OUT_ENV_VAR, main
from nnmflab.config import ConfigError, SearchSpace, load_config
from nnmflab.data import holdout_split, synthesize_powerlaw
from nnmflab.evaluation import (evaluate_scores, filter_ground_truth,
                                longtail_items)
from nnmflab.factorization import ModelConfig

COMMANDS = ("preprocess", "train", "evaluate", "stability", "search",
            "report")

PIPELINE_TOML = """\
[dataset.synthetic]
n_users = 60
n_items = 40
n_interactions = 600
exponent = 1.0
seed = 5

[split]
ratios = [0.6, 0.2, 0.2]
seed = 1

[[model]]
algorithm = "funk"
f = 4
learning_rate = 0.05
reg_p = 0.02
reg_q = 0.01
epochs_max = 8
eval_every = 4

[[model]]
algorithm = "bpr"
f = 4
learning_rate = 0.05
reg_p = 0.01
reg_q = 0.01
epochs_max = 8
item_k = 5
eval_every = 0

[[baseline]]
kind = "item_knn"
k = 10
shrink = 5.0

[[baseline]]
kind = "pure_svd"
f = 6

[stability]
seeds = [0, 1, 2]
rep_cutoffs = [5]

[evaluation]
cutoffs = [5, 10]

[output]
dir = "{out}"

[search]
algorithm = "funk"
budget = 3
seed = 9
f = [3, 6]
learning_rate = [0.01, 0.1]
regularization = [0.001, 0.05]
item_k = [3, 8]
epochs_max = 10
eval_every = 5
patience = 2
"""

SYNTH_SMALL = """\
[dataset.synthetic]
n_users = 30
n_items = 20
n_interactions = 200
exponent = 1.0
seed = 3
"""


def write_config(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def run_pipeline(config_path, threads=1):
    for command in COMMANDS:
        code = main([command, "--config", str(config_path),
                     "--threads", str(threads)])
        assert code == 0, f"{command} exited with {code}"


def tree_hashes(root):
    return {path.relative_to(root).as_posix():
            hashlib.sha256(path.read_bytes()).hexdigest()
            for path in sorted(root.rglob("*")) if path.is_file()}


def read_pairs(path):
    pairs = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        if line:
            u, i, _ = line.split("\t")
            pairs.add((int(u), int(i)))
    return pairs


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_pipeline")
    out = root / "out"
    config = write_config(root, PIPELINE_TOML.format(out=out.as_posix()))
    run_pipeline(config)
    first = tree_hashes(out)
    run_pipeline(config)
    second = tree_hashes(out)
    shutil.rmtree(out)
    run_pipeline(config, threads=8)
    third = tree_hashes(out)
    return {"config": config, "out": out, "hashes": (first, second, third)}


class TestConfigParsing:

    def test_full_config_roundtrip(self, pipeline):
        config = load_config(pipeline["config"])
        assert [m.algorithm for m in config.models] == ["funk", "bpr"]
        assert config.models[0].kind == "funk-mf"
        assert config.models[1].kind == "bpr-nnmf"
        assert [b.kind for b in config.baselines] == ["item_knn", "pure_svd"]
        assert config.baselines[0].params == {"k": 10, "shrink": 5.0}
        assert config.stability_seeds == (0, 1, 2)
        assert config.rep_cutoffs == (5,)
        assert config.cutoffs == (5, 10)
        assert config.search.budget == 3
        assert config.search.item_k_range == (3, 8)
        assert config.out_dir == pipeline["out"].as_posix()

    def test_defaults_fill_in(self, tmp_path):
        config = load_config(write_config(tmp_path, SYNTH_SMALL))
        assert config.stability_seeds == tuple(range(10))
        assert config.top_n == 10
        assert config.rep_cutoffs == (10, 100)
        assert config.cutoffs == (5, 10)
        assert config.tail_fraction == 0.66
        assert config.popularity_thresholds == (1.0, 0.66, 0.4, 0.3, 0.2,
                                                0.1, 0.0)
        assert config.split_ratios == (0.6, 0.2, 0.2)
        assert config.min_interactions == 5
        assert config.out_dir == "out"
        assert config.search is None

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.toml")

    def test_toml_syntax_error(self, tmp_path):
        path = write_config(tmp_path, "[dataset\n")
        with pytest.raises(ConfigError, match="exp.toml"):
            load_config(path)

    def test_missing_dataset_section(self, tmp_path):
        path = write_config(tmp_path, "[split]\nseed = 1\n")
        with pytest.raises(ConfigError, match="dataset"):
            load_config(path)

    def test_dataset_needs_exactly_one_source(self, tmp_path):
        both = SYNTH_SMALL.replace("[dataset.synthetic]",
                                   '[dataset]\npath = "x.tsv"\n'
                                   "[dataset.synthetic]")
        with pytest.raises(ConfigError, match="exactly one"):
            load_config(write_config(tmp_path, both))
        with pytest.raises(ConfigError, match="exactly one"):
            load_config(write_config(tmp_path, '[dataset]\nheader = false\n',
                                     name="neither.toml"))

    def test_unknown_keys_rejected(self, tmp_path):
        for text in (SYNTH_SMALL + "[split]\nratio = [0.6, 0.2, 0.2]\n",
                     SYNTH_SMALL + "[outputs]\ndir = 'x'\n",
                     SYNTH_SMALL + "[dataset]\nheder = true\n"):
            with pytest.raises(ConfigError, match="unknown keys"):
                load_config(write_config(tmp_path, text))

    def test_type_errors_are_config_errors(self, tmp_path):
        text = SYNTH_SMALL + "[preprocess]\nthreshold = true\n"
        with pytest.raises(ConfigError, match="boolean"):
            load_config(write_config(tmp_path, text))
        text = SYNTH_SMALL + "[stability]\nseeds = [0, 1.5]\n"
        with pytest.raises(ConfigError, match="integer"):
            load_config(write_config(tmp_path, text))

    def test_model_neighbor_rule_enforced(self, tmp_path):
        text = SYNTH_SMALL + ("[[model]]\nalgorithm = 'funk'\nf = 4\n"
                              "learning_rate = 0.05\nuser_k = 1\n"
                              "item_k = 1\n")
        with pytest.raises(ConfigError, match="at least 2"):
            load_config(write_config(tmp_path, text))

    def test_model_requires_f_and_learning_rate(self, tmp_path):
        text = SYNTH_SMALL + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(write_config(tmp_path, text))

    def test_model_unknown_key(self, tmp_path):
        text = SYNTH_SMALL + ("[[model]]\nalgorithm = 'funk'\nf = 4\n"
                              "learning_rate = 0.05\nlearningrate = 0.1\n")
        with pytest.raises(ConfigError, match="unknown keys"):
            load_config(write_config(tmp_path, text))

    def test_duplicate_stability_seeds(self, tmp_path):
        text = SYNTH_SMALL + "[stability]\nseeds = [0, 1, 1]\n"
        with pytest.raises(ConfigError, match="distinct"):
            load_config(write_config(tmp_path, text))

    def test_split_ratios_must_sum_to_one(self, tmp_path):
        text = SYNTH_SMALL + "[split]\nratios = [0.5, 0.2, 0.2]\n"
        with pytest.raises(ConfigError, match="sum to 1"):
            load_config(write_config(tmp_path, text))

    def test_baseline_unknown_kind(self, tmp_path):
        text = SYNTH_SMALL + "[[baseline]]\nkind = 'knn'\n"
        with pytest.raises(ConfigError, match="unknown kind"):
            load_config(write_config(tmp_path, text))

    def test_baseline_unknown_param(self, tmp_path):
        text = SYNTH_SMALL + "[[baseline]]\nkind = 'pure_svd'\nk = 5\n"
        with pytest.raises(ConfigError, match="unknown keys"):
            load_config(write_config(tmp_path, text))

    def test_search_validation(self, tmp_path):
        base = SYNTH_SMALL + "[search]\nalgorithm = 'funk'\nbudget = {b}\n"
        with pytest.raises(ConfigError, match="budget"):
            load_config(write_config(tmp_path, base.format(b=0)))
        text = base.format(b=2) + "item_k = [1, 5]\n"
        with pytest.raises(ConfigError, match="entirely at >= 2"):
            load_config(write_config(tmp_path, text))
        text = base.format(b=2) + "learning_rate = [0.0, 0.1]\n"
        with pytest.raises(ConfigError, match="positive"):
            load_config(write_config(tmp_path, text))
        text = base.format(b=2) + "eval_every = 500\n"
        with pytest.raises(ConfigError, match="exceed"):
            load_config(write_config(tmp_path, text))


class TestSearchSpace:

    def test_same_seed_same_trial_sequence(self):
        space = SearchSpace(algorithm="bpr", budget=6, seed=12,
                            item_k_range=(2, 9)).validate()
        seqs = []
        for _ in range(2):
            rng = np.random.default_rng(space.seed)
            seqs.append([space.draw(rng) for _ in range(space.budget)])
        assert seqs[0] == seqs[1]

    def test_draws_respect_bounds(self):
        space = SearchSpace(algorithm="pmf", budget=1, f_range=(3, 7),
                            learning_rate_range=(1e-3, 0.2),
                            regularization_range=(1e-4, 0.05),
                            user_k_range=(2, 4), item_k_range=(0, 0),
                            user_shrink_range=(1, 6),
                            item_shrink_range=(0, 0)).validate()
        rng = np.random.default_rng(0)
        for _ in range(60):
            cfg = space.draw(rng).validate()
            assert 3 <= cfg.f <= 7
            assert 1e-3 <= cfg.learning_rate <= 0.2
            assert 1e-4 <= cfg.reg_p <= 0.05
            assert cfg.reg_q == cfg.reg_p
            assert 2 <= cfg.user_k <= 4
            assert cfg.item_k == 0
            assert 1 <= cfg.user_shrink <= 6
            assert cfg.item_shrink == 0.0

    def test_pinned_ranges_draw_exact_values(self):
        space = SearchSpace(algorithm="funk", budget=1, f_range=(4, 4),
                            learning_rate_range=(0.05, 0.05),
                            regularization_range=(0.01, 0.01),
                            user_k_range=(0, 0), item_k_range=(3, 3),
                            user_shrink_range=(2, 2),
                            item_shrink_range=(0, 0)).validate()
        cfg = space.draw(np.random.default_rng(5))
        assert cfg.f == 4
        assert cfg.learning_rate == 0.05
        assert cfg.reg_p == 0.01 and cfg.reg_q == 0.01
        assert (cfg.user_k, cfg.item_k) == (0, 3)
        assert (cfg.user_shrink, cfg.item_shrink) == (2.0, 0.0)


class TestPreprocessSynthetic:

    def test_stats_equal_generator_parameters(self, pipeline):
        stats = json.loads(
            (pipeline["out"] / "dataset" / "stats.json").read_text())
        assert stats["n_users"] == 60
        assert stats["n_items"] == 40
        assert stats["n_interactions"] == 600
        assert stats["density"] == 600 / (60 * 40)
        assert stats["train_nnz"] == 360
        assert stats["validation_nnz"] == 120
        assert stats["test_nnz"] == 120

    def test_split_files_partition_the_interactions(self, pipeline):
        ddir = pipeline["out"] / "dataset"
        parts = [read_pairs(ddir / f"{name}.tsv")
                 for name in ("train", "validation", "test")]
        assert sum(len(p) for p in parts) == 600
        assert len(parts[0] | parts[1] | parts[2]) == 600
        generated = synthesize_powerlaw(60, 40, 600, 1.0, 5)
        users, items, _ = generated.coo_arrays()
        assert parts[0] | parts[1] | parts[2] == \
            set(zip(users.tolist(), items.tolist()))

    def test_no_index_files_for_synthetic(self, pipeline):
        assert not (pipeline["out"] / "dataset" / "user_index.csv").exists()


class TestPreprocessFile:

    RATINGS = ("u1\ti1\t5\nu1\ti2\t4\nu1\ti3\t2\n"
               "u2\ti1\t4\nu2\ti2\t5\n"
               "u3\ti1\t3\nu3\ti4\t5\n"
               "u4\ti9\t5\n")

    def config_for(self, tmp_path):
        data = tmp_path / "ratings.tsv"
        data.write_text(self.RATINGS, encoding="utf-8")
        text = (f'[dataset]\npath = "{data.as_posix()}"\n'
                "[preprocess]\nthreshold = 3.0\nmin_interactions = 2\n"
                f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        return write_config(tmp_path, text)

    def test_filtered_stats_match_fixpoint_oracle(self, tmp_path):
        assert main(["preprocess", "--config",
                     str(self.config_for(tmp_path))]) == 0
        # Binarize at 3 keeps everything except (u1, i3); the 2-core then
        # drops i9/u4 (singletons) and the cascade u3 -> i4.
        tokens_u = ["u1", "u2", "u3", "u4"]
        tokens_i = ["i1", "i2", "i3", "i4", "i9"]
        dense = np.zeros((4, 5))
        for line in self.RATINGS.splitlines():
            u, i, v = line.split("\t")
            if float(v) >= 3.0:
                dense[tokens_u.index(u), tokens_i.index(i)] = 1.0
        keep_u, keep_i = oracles.fixpoint_filter(dense, 2)
        assert [tokens_u[j] for j in keep_u] == ["u1", "u2"]
        assert [tokens_i[j] for j in keep_i] == ["i1", "i2"]

        ddir = tmp_path / "out" / "dataset"
        stats = json.loads((ddir / "stats.json").read_text())
        assert stats["n_users"] == len(keep_u)
        assert stats["n_items"] == len(keep_i)
        assert stats["n_interactions"] == 4
        user_rows = (ddir / "user_index.csv").read_text().splitlines()
        assert user_rows == ["token,index", "u1,0", "u2,1"]
        item_rows = (ddir / "item_index.csv").read_text().splitlines()
        assert item_rows == ["token,index", "i1,0", "i2,1"]
        pairs = set()
        for name in ("train", "validation", "test"):
            pairs |= read_pairs(ddir / f"{name}.tsv")
        assert pairs == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_missing_dataset_path_is_config_error(self, tmp_path, capsys):
        text = ('[dataset]\npath = "/nonexistent/r.tsv"\n'
                f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        code = main(["preprocess", "--config",
                     str(write_config(tmp_path, text))])
        assert code == 1
        assert "does not exist" in capsys.readouterr().err

    def test_overly_strict_threshold_is_data_error(self, tmp_path):
        config = self.config_for(tmp_path)
        text = config.read_text().replace("threshold = 3.0",
                                          "threshold = 10.0")
        config.write_text(text, encoding="utf-8")
        assert main(["preprocess", "--config", str(config)]) == 2


class TestExitCodes:

    def test_config_error_is_1(self, tmp_path):
        path = write_config(tmp_path, SYNTH_SMALL + "[outputs]\ndir = 'x'\n")
        assert main(["preprocess", "--config", str(path)]) == 1

    def test_train_before_preprocess_is_2(self, tmp_path, capsys):
        text = (SYNTH_SMALL
                + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
                  "learning_rate = 0.05\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        assert main(["train", "--config",
                     str(write_config(tmp_path, text))]) == 2
        assert "preprocess" in capsys.readouterr().err

    def test_evaluate_missing_models_lists_paths(self, tmp_path, capsys):
        text = (SYNTH_SMALL
                + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
                  "learning_rate = 0.05\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["evaluate", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "00_funk-mf_" in err and ".model" in err

    def test_divergent_training_is_3(self, tmp_path, capsys):
        text = (SYNTH_SMALL
                + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
                  "learning_rate = 50.0\nepochs_max = 5\neval_every = 0\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 3
        assert "model 00_funk-mf_" in capsys.readouterr().err

    def test_oversized_rep_cutoff_is_1(self, tmp_path):
        text = (SYNTH_SMALL
                + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
                  "learning_rate = 0.05\nepochs_max = 3\neval_every = 0\n"
                + "[stability]\nseeds = [0, 1]\nrep_cutoffs = [100]\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["stability", "--config", str(path)]) == 1

    def test_search_without_section_is_1(self, tmp_path, capsys):
        path = write_config(tmp_path, SYNTH_SMALL)
        assert main(["search", "--config", str(path)]) == 1
        assert "[search]" in capsys.readouterr().err

    def test_bad_seed_list_is_1(self, tmp_path):
        text = (SYNTH_SMALL
                + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
                  "learning_rate = 0.05\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["stability", "--config", str(path),
                     "--seed-list", "1,x"]) == 1

    def test_zero_threads_is_1(self, tmp_path):
        path = write_config(tmp_path, SYNTH_SMALL)
        assert main(["preprocess", "--config", str(path),
                     "--threads", "0"]) == 1


class TestTrainOutputs:

    def test_two_models_two_files_independent_hashes(self, pipeline):
        mdir = pipeline["out"] / "models"
        model_files = sorted(p.name for p in mdir.glob("*.model"))
        assert len(model_files) == 2
        assert model_files[0].startswith("00_funk-mf_")
        assert model_files[1].startswith("01_bpr-nnmf_")
        hashes = {name.rsplit("_", 1)[1].split(".")[0]
                  for name in model_files}
        assert len(hashes) == 2

    def test_model_header_records_kind(self, pipeline):
        mdir = pipeline["out"] / "models"
        for path in mdir.glob("*.model"):
            with open(path, "rb") as fh:
                header = json.loads(fh.readline().decode())
            expected = "funk-mf" if "funk" in path.name else "bpr-nnmf"
            assert header["kind"] == expected
            if expected == "bpr-nnmf":
                assert header["sim_item_key"] is not None
                assert header["sim_user_key"] is None

    def test_history_matches_training_schedule(self, pipeline):
        mdir = pipeline["out"] / "models"
        funk = next(mdir.glob("00_funk-mf_*_history.csv"))
        lines = funk.read_text().splitlines()
        assert lines[0] == "epoch,loss,val_metric"
        assert len(lines) == 1 + 8
        vals = [line.split(",")[2] for line in lines[1:]]
        assert [bool(v) for v in vals] == [False, False, False, True,
                                           False, False, False, True]

    def test_similarity_cache_populated(self, pipeline):
        sims = list((pipeline["out"] / "sims").glob("sim_*.npz"))
        assert len(sims) >= 1


class TestEvaluateOutputs:

    def test_accuracy_table_shape(self, pipeline):
        rows = reports.read_accuracy_csv(
            pipeline["out"] / "reports" / "accuracy.csv")
        labels = sorted({r[0] for r in rows})
        assert labels == ["00_funk-mf_" + labels[0].rsplit("_", 1)[1],
                          "01_bpr-nnmf_" + labels[1].rsplit("_", 1)[1],
                          "baseline00_item_knn", "baseline01_pure_svd"]
        assert len(rows) == 4 * 4
        combos = {(r[1], r[2]) for r in rows}
        assert combos == {("MAP", 5), ("MAP", 10),
                          ("Recall", 5), ("Recall", 10)}
        assert all(0.0 <= r[3] <= 1.0 for r in rows)

    def test_comment_line_first(self, pipeline):
        first = (pipeline["out"] / "reports"
                 / "accuracy.csv").read_text().splitlines()[0]
        assert first.startswith("# long-tail evaluation")


class TestEvaluateSemantics:
    """Long-tail evaluation checked against independent oracles."""

    def make_split(self, seed=2):
        matrix = synthesize_powerlaw(25, 15, 120, 1.0, seed)
        return holdout_split(matrix, (0.6, 0.2, 0.2), seed=1)

    def test_perfect_oracle_scores_reach_map_one(self):
        split = self.make_split()
        tail = longtail_items(split.train, 0.66)
        gt = filter_ground_truth(split.test, tail)
        report = evaluate_scores(gt.csr.toarray(), split.train, gt, (5, 10))
        assert report.values[("MAP", 5)] == 1.0
        assert report.values[("MAP", 10)] == 1.0

    def test_random_scores_match_monte_carlo_baseline(self):
        split = self.make_split()
        tail = longtail_items(split.train, 0.66)
        gt = filter_ground_truth(split.test, tail)
        n_users, n_items = 25, 15
        gt_sets = [set(gt.user_items(u).tolist()) for u in range(n_users)]
        n_sims = 200

        route_impl = []
        for s in range(n_sims):
            scores = np.random.default_rng(1000 + s).random(
                (n_users, n_items))
            report = evaluate_scores(scores, split.train, gt, (5,))
            route_impl.append(report.values[("MAP", 5)])

        rng = np.random.default_rng(77)
        eligible = [np.setdiff1d(np.arange(n_items),
                                 split.train.user_items(u))
                    for u in range(n_users)]
        route_oracle = []
        for _ in range(n_sims):
            vals = [oracles.ap_at_k(rng.permutation(eligible[u]).tolist(),
                                    gt_sets[u], 5)
                    for u in range(n_users) if gt_sets[u]]
            route_oracle.append(sum(vals) / len(vals))
        assert abs(np.mean(route_impl) - np.mean(route_oracle)) < 0.03

    def test_tail_fraction_near_one_is_full_test_evaluation(self):
        # Item 0 dominates training, so the 0.999-tail head is exactly
        # {0}; the test interactions avoid item 0 and items without train
        # support, making the filtered ground truth the full ground truth.
        from nnmflab.data import InteractionMatrix

        train_pairs = [(u, 0) for u in range(6)]
        train_pairs += [(u, i) for u in range(6) for i in (1, 2, 3)
                        if (u + i) % 2 == 0]
        train_pairs += [(0, 4), (1, 4), (2, 5), (3, 5)]
        train = InteractionMatrix.from_pairs(
            [p[0] for p in train_pairs], [p[1] for p in train_pairs],
            np.ones(len(train_pairs)), 6, 8)
        test_pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 1)]
        test = InteractionMatrix.from_pairs(
            [p[0] for p in test_pairs], [p[1] for p in test_pairs],
            np.ones(len(test_pairs)), 6, 8)

        tail = longtail_items(train, 0.999)
        assert 0 not in tail
        assert set(tail.tolist()) == {1, 2, 3, 4, 5}
        scores = np.random.default_rng(4).random((6, 8))
        filtered = evaluate_scores(scores, train,
                                   filter_ground_truth(test, tail), (5, 10))
        full = evaluate_scores(scores, train, test, (5, 10))
        assert filtered.values == full.values


class TestStabilityOutputs:

    def test_summary_row_count_is_models_times_kinds_times_cutoffs(
            self, pipeline):
        rows = reports.read_stability_summary_csv(
            pipeline["out"] / "reports" / "stability_summary.csv")
        assert len(rows) == 2 * (1 + 2 * 1)
        kinds = {(r[1], r[2]) for r in rows}
        assert kinds == {("recommendations", 10),
                         ("representations_user", 5),
                         ("representations_item", 5)}
        assert all(0.0 <= r[3] <= 1.0 for r in rows)

    def test_per_entity_files_emitted(self, pipeline):
        rdir = pipeline["out"] / "reports"
        csvs = sorted(rdir.glob("stability_0*_at*.csv"))
        jsons = sorted(rdir.glob("stability_0*_at*.json"))
        assert len(csvs) == 6 and len(jsons) == 6
        blob = json.loads(jsons[0].read_text())
        assert {"kind", "cutoff", "overall", "n_entities",
                "empty_pairs"} <= set(blob)

    def test_item_detail_rows_carry_bins(self, pipeline):
        rdir = pipeline["out"] / "reports"
        path = next(rdir.glob("stability_00_*representations_item_at5.csv"))
        lines = path.read_text().splitlines()
        assert lines[0] == "entity_id,bin,mean_jaccard"
        bins = {line.split(",")[1] for line in lines[1:]}
        assert bins and all(b != "" for b in bins)

    def test_bins_table_covers_both_models(self, pipeline):
        rows = reports.read_stability_bins_csv(
            pipeline["out"] / "reports" / "stability_bins.csv")
        models = {r[0] for r in rows}
        assert len(models) == 2
        assert all(1 <= r[2] <= 6 for r in rows)
        assert all(0.0 <= r[3] <= 1.0 for r in rows)

    def test_identical_seeds_give_stability_one(self, tmp_path):
        text = (SYNTH_SMALL
                + "[[model]]\nalgorithm = 'funk'\nf = 4\n"
                  "learning_rate = 0.05\nepochs_max = 4\neval_every = 0\n"
                + "[stability]\nseeds = [0, 1]\nrep_cutoffs = [5]\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["stability", "--config", str(path),
                     "--seed-list", "3,3"]) == 0
        rows = reports.read_stability_summary_csv(
            tmp_path / "out" / "reports" / "stability_summary.csv")
        assert len(rows) == 3
        assert all(r[3] == 1.0 for r in rows)


class TestSearchOutputs:

    def test_trials_csv_structure(self, pipeline):
        lines = (pipeline["out"] / "search"
                 / "trials.csv").read_text().splitlines()
        assert lines[0].startswith("#")
        assert "random search" in lines[0]
        assert lines[1].startswith("trial,status,algorithm,")
        assert len(lines) == 2 + 3
        for pos, line in enumerate(lines[2:]):
            cells = line.split(",")
            assert cells[0] == str(pos)
            assert cells[1] in ("trained", "diverged")

    def test_best_is_argmax_of_logged_trials(self, pipeline):
        lines = (pipeline["out"] / "search"
                 / "trials.csv").read_text().splitlines()
        vals = [float(line.split(",")[-1]) for line in lines[2:]
                if line.split(",")[1] == "trained"]
        best = json.loads(
            (pipeline["out"] / "search" / "best.json").read_text())
        assert best["val_metric"] == max(vals)
        assert all(best["val_metric"] >= v for v in vals)
        assert set(best["config"]) == {f.name for f in
                                       __import__("dataclasses").fields(
                                           ModelConfig)}

    def test_budget_one_returns_that_config(self, tmp_path):
        text = (SYNTH_SMALL
                + "[search]\nalgorithm = 'funk'\nbudget = 1\nseed = 4\n"
                  "f = [3, 5]\nitem_k = [0, 0]\nepochs_max = 6\n"
                  "eval_every = 3\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["search", "--config", str(path)]) == 0
        best = json.loads(
            (tmp_path / "out" / "search" / "best.json").read_text())
        assert best["trial"] == 0
        space = load_config(path).search
        expected = space.draw(np.random.default_rng(space.seed))
        assert best["config"]["f"] == expected.f
        assert best["config"]["learning_rate"] == expected.learning_rate

    def test_all_trials_diverged_is_3(self, tmp_path, capsys):
        text = (SYNTH_SMALL
                + "[search]\nalgorithm = 'funk'\nbudget = 2\nseed = 0\n"
                  "learning_rate = [60.0, 90.0]\nitem_k = [0, 0]\n"
                  "epochs_max = 6\neval_every = 3\n"
                + f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n')
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert main(["search", "--config", str(path)]) == 3
        assert "diverged" in capsys.readouterr().err


class TestReportOutputs:

    PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

    def test_all_four_figures_rendered(self, pipeline):
        fdir = pipeline["out"] / "figures"
        for name in ("convergence.png", "accuracy.png", "stability.png",
                     "stability_bins.png"):
            blob = (fdir / name).read_bytes()
            assert blob[:8] == self.PNG_MAGIC
            assert len(blob) > 1000

    def test_report_with_no_inputs_is_2(self, tmp_path, capsys):
        text = SYNTH_SMALL + \
            f'[output]\ndir = "{(tmp_path / "out").as_posix()}"\n'
        path = write_config(tmp_path, text)
        assert main(["report", "--config", str(path)]) == 2
        assert "nothing to report" in capsys.readouterr().err


class TestOutResolution:

    def test_flag_beats_env_beats_config(self, tmp_path, monkeypatch):
        text = SYNTH_SMALL + \
            f'[output]\ndir = "{(tmp_path / "from_config").as_posix()}"\n'
        path = write_config(tmp_path, text)
        assert main(["preprocess", "--config", str(path)]) == 0
        assert (tmp_path / "from_config" / "dataset" / "stats.json").exists()

        monkeypatch.setenv(OUT_ENV_VAR, (tmp_path / "from_env").as_posix())
        assert main(["preprocess", "--config", str(path)]) == 0
        assert (tmp_path / "from_env" / "dataset" / "stats.json").exists()

        flag_dir = tmp_path / "from_flag"
        assert main(["preprocess", "--config", str(path),
                     "--out", flag_dir.as_posix()]) == 0
        assert (flag_dir / "dataset" / "stats.json").exists()


class TestDeterminism:
    """Byte-identity of every pipeline output across reruns and thread
    counts (reruns over existing files, plus a fresh 8-worker rebuild)."""

    def test_rerun_is_byte_identical(self, pipeline):
        first, second, _ = pipeline["hashes"]
        assert first == second

    def test_eight_threads_rebuild_matches_serial_run(self, pipeline):
        first, _, third = pipeline["hashes"]
        assert first == third

    def test_expected_artifacts_present(self, pipeline):
        first = pipeline["hashes"][0]
        names = set(first)
        for expected in ("dataset/stats.json", "dataset/train.tsv",
                         "reports/accuracy.csv",
                         "reports/stability_summary.csv",
                         "reports/stability_bins.csv", "search/trials.csv",
                         "search/best.json", "figures/convergence.png"):
            assert expected in names
        assert any(name.startswith("models/00_funk-mf_") for name in names)
        assert any(name.startswith("sims/sim_") for name in names)
