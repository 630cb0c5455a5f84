"""Experiment configuration loaded from TOML files.

The schema mirrors the pipeline stages: a [dataset] source (file path or
synthetic generator), [preprocess] and [split] settings, one [[model]]
table per trainer run, optional [[baseline]] tables, [stability] and
[evaluation] settings, an [output] directory, and an optional [search]
space for hyperparameter random search. Unknown keys are rejected so a
typo fails loudly instead of silently falling back to a default.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .baselines import BASELINE_KINDS
from .factorization import ModelConfig, TRAINERS


class ConfigError(Exception):
    """The experiment configuration is malformed or inconsistent."""


_MISSING = object()


def _check_keys(table, allowed, where):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys: {', '.join(unknown)}")


def _get(table, key, where, kinds, default=_MISSING):
    if key not in table:
        if default is _MISSING:
            raise ConfigError(f"{where}: missing required key {key!r}")
        return default
    value = table[key]
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{where}: {key} must not be a boolean")
    if not isinstance(value, tuple(kinds)):
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{where}: {key} must be {names}, "
                          f"got {type(value).__name__}")
    return value


def _get_int(table, key, where, default=_MISSING):
    return int(_get(table, key, where, (int,), default))


def _get_float(table, key, where, default=_MISSING):
    return float(_get(table, key, where, (int, float), default))


def _get_str(table, key, where, default=_MISSING):
    return _get(table, key, where, (str,), default)


def _get_bool(table, key, where, default=_MISSING):
    return _get(table, key, where, (bool,), default)


def _get_numbers(table, key, where, default=_MISSING):
    value = _get(table, key, where, (list,), default)
    if value is default and default is not _MISSING:
        return default
    out = []
    for pos, entry in enumerate(value):
        if isinstance(entry, bool) or not isinstance(entry, (int, float)):
            raise ConfigError(f"{where}: {key}[{pos}] must be a number")
        out.append(entry)
    return tuple(out)


def _get_ints(table, key, where, default=_MISSING):
    values = _get_numbers(table, key, where, default)
    if values is default and default is not _MISSING:
        return default
    for pos, entry in enumerate(values):
        if not isinstance(entry, int):
            raise ConfigError(f"{where}: {key}[{pos}] must be an integer")
    return tuple(int(v) for v in values)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the power-law interaction generator."""
    n_users: int
    n_items: int
    n_interactions: int
    exponent: float
    seed: int = 0


@dataclass(frozen=True)
class BaselineSpec:
    """One non-factorization reference model and its settings."""
    kind: str
    params: dict


_BASELINE_SCHEMAS = {
    "item_knn": (("k", _get_int, 50), ("shrink", _get_float, 10.0)),
    "user_knn": (("k", _get_int, 50), ("shrink", _get_float, 10.0)),
    "slim": (("k", _get_int, 50), ("learning_rate", _get_float, 0.05),
             ("reg", _get_float, 0.01), ("epochs", _get_int, 30),
             ("seeds", _get_int, 0)),
    "pure_svd": (("f", _get_int, 32), ("seed", _get_int, 0)),
}

_MODEL_INT_KEYS = ("f", "epochs_max", "user_k", "item_k", "negative_ratio",
                   "eval_every", "patience", "eval_cutoff", "init_seed",
                   "sample_seed")
_MODEL_FLOAT_KEYS = ("learning_rate", "reg_p", "reg_q", "user_shrink",
                     "item_shrink")


@dataclass(frozen=True)
class SearchSpace:
    """Random-search space over trainer hyperparameters.

    learning_rate and regularization are drawn log-uniformly, f, neighbor
    counts, and shrink integer-uniformly (inclusive bounds). A neighbor
    range must be [0, 0] (identity side) or lie entirely at >= 2 so every
    draw is a valid configuration. One regularization draw feeds both
    reg_p and reg_q.
    """
    algorithm: str
    budget: int
    seed: int = 0
    f_range: tuple = (4, 64)
    learning_rate_range: tuple = (1e-3, 0.1)
    regularization_range: tuple = (1e-4, 0.1)
    user_k_range: tuple = (0, 0)
    item_k_range: tuple = (2, 50)
    user_shrink_range: tuple = (0, 20)
    item_shrink_range: tuple = (0, 20)
    epochs_max: int = 200
    eval_every: int = 10
    patience: int = 5
    negative_ratio: int = 1
    eval_cutoff: int = 5
    init_seed: int = 0
    sample_seed: int = 0

    def validate(self):
        if self.algorithm not in TRAINERS:
            raise ConfigError(f"search: unknown algorithm {self.algorithm!r}")
        if self.budget < 1:
            raise ConfigError("search: budget must be >= 1")
        for name in ("f_range", "learning_rate_range", "regularization_range",
                     "user_k_range", "item_k_range", "user_shrink_range",
                     "item_shrink_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"search: {name} must be [low, high]"
                                  " with low <= high")
        if self.f_range[0] < 1:
            raise ConfigError("search: f_range must start at >= 1")
        for name in ("learning_rate_range", "regularization_range"):
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"search: {name} must be positive"
                                  " (log-uniform)")
        for name in ("user_k_range", "item_k_range"):
            rng = getattr(self, name)
            if rng != (0, 0) and rng[0] < 2:
                raise ConfigError(f"search: {name} must be [0, 0] or lie"
                                  " entirely at >= 2")
        for name in ("user_shrink_range", "item_shrink_range"):
            if getattr(self, name)[0] < 0:
                raise ConfigError(f"search: {name} must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("search: eval_every must be >= 1"
                              " (trials rank by validation metric)")
        if self.eval_every > self.epochs_max:
            raise ConfigError("search: eval_every must not exceed epochs_max"
                              " or no trial ever records a validation score")
        probe = self.draw(np.random.default_rng(0))
        try:
            probe.validate()
        except ValueError as exc:
            raise ConfigError(f"search: {exc}") from None
        return self

    def draw(self, rng):
        """One configuration; draws consume the stream in a fixed order."""
        f = int(rng.integers(self.f_range[0], self.f_range[1] + 1))
        lr = _log_uniform(rng, self.learning_rate_range)
        reg = _log_uniform(rng, self.regularization_range)
        user_k = _draw_neighbors(rng, self.user_k_range)
        item_k = _draw_neighbors(rng, self.item_k_range)
        user_shrink = float(rng.integers(self.user_shrink_range[0],
                                         self.user_shrink_range[1] + 1))
        item_shrink = float(rng.integers(self.item_shrink_range[0],
                                         self.item_shrink_range[1] + 1))
        return ModelConfig(
            algorithm=self.algorithm, f=f, learning_rate=lr,
            reg_p=reg, reg_q=reg, epochs_max=self.epochs_max,
            user_k=user_k, item_k=item_k,
            user_shrink=user_shrink, item_shrink=item_shrink,
            negative_ratio=self.negative_ratio, eval_every=self.eval_every,
            patience=self.patience, eval_cutoff=self.eval_cutoff,
            init_seed=self.init_seed, sample_seed=self.sample_seed)


def _log_uniform(rng, bounds):
    lo, hi = float(bounds[0]), float(bounds[1])
    x = rng.uniform(math.log(lo), math.log(hi))
    return lo if lo == hi else float(math.exp(x))


def _draw_neighbors(rng, bounds):
    value = int(rng.integers(bounds[0], bounds[1] + 1))
    return 0 if bounds == (0, 0) else value


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, resolved and validated."""
    dataset_path: str = None
    delimiter: str = "\t"
    header: bool = False
    synthetic: SyntheticSpec = None
    threshold: float = 1.0
    min_interactions: int = 5
    split_ratios: tuple = (0.6, 0.2, 0.2)
    split_seed: int = 0
    models: tuple = ()
    baselines: tuple = ()
    stability_seeds: tuple = tuple(range(10))
    top_n: int = 10
    rep_cutoffs: tuple = (10, 100)
    cutoffs: tuple = (5, 10)
    tail_fraction: float = 0.66
    popularity_thresholds: tuple = (1.0, 0.66, 0.4, 0.3, 0.2, 0.1, 0.0)
    out_dir: str = "out"
    search: SearchSpace = None

    def validate(self):
        if (self.dataset_path is None) == (self.synthetic is None):
            raise ConfigError("dataset: give exactly one of 'path' or"
                              " a [dataset.synthetic] table")
        if not math.isfinite(self.threshold):
            raise ConfigError("preprocess: threshold must be finite")
        if self.min_interactions < 1:
            raise ConfigError("preprocess: min_interactions must be >= 1")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in
                                              self.split_ratios):
            raise ConfigError("split: ratios must be three positive numbers")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split: ratios must sum to 1")
        if len(set(self.stability_seeds)) != len(self.stability_seeds):
            raise ConfigError("stability: seeds must be distinct")
        if len(self.stability_seeds) < 2:
            raise ConfigError("stability: need at least 2 seeds")
        if self.top_n < 1:
            raise ConfigError("stability: top_n must be >= 1")
        for group, values in (("stability: rep_cutoffs", self.rep_cutoffs),
                              ("evaluation: cutoffs", self.cutoffs)):
            if not values or any(v < 1 for v in values):
                raise ConfigError(f"{group} must be positive integers")
            if len(set(values)) != len(values):
                raise ConfigError(f"{group} must be distinct")
        if not 0 < self.tail_fraction < 1:
            raise ConfigError("evaluation: tail_fraction must be in (0, 1)")
        t = self.popularity_thresholds
        if len(t) < 2 or t[0] != 1.0 or t[-1] != 0.0 \
                or any(a <= b for a, b in zip(t, t[1:])):
            raise ConfigError("evaluation: popularity_thresholds must"
                              " descend strictly from 1 to 0")
        return self


def _parse_synthetic(table):
    where = "dataset.synthetic"
    _check_keys(table, {"n_users", "n_items", "n_interactions", "exponent",
                        "seed"}, where)
    spec = SyntheticSpec(
        n_users=_get_int(table, "n_users", where),
        n_items=_get_int(table, "n_items", where),
        n_interactions=_get_int(table, "n_interactions", where),
        exponent=_get_float(table, "exponent", where),
        seed=_get_int(table, "seed", where, 0))
    if spec.n_users < 1 or spec.n_items < 1:
        raise ConfigError(f"{where}: dimensions must be >= 1")
    return spec


def _parse_model(table, idx):
    where = f"model #{idx + 1}"
    allowed = {f.name for f in fields(ModelConfig)}
    _check_keys(table, allowed, where)
    kwargs = {"algorithm": _get_str(table, "algorithm", where)}
    for key in _MODEL_INT_KEYS:
        if key in table:
            kwargs[key] = _get_int(table, key, where)
    for key in _MODEL_FLOAT_KEYS:
        if key in table:
            kwargs[key] = _get_float(table, key, where)
    if "f" not in kwargs or "learning_rate" not in kwargs:
        raise ConfigError(f"{where}: f and learning_rate are required")
    try:
        return ModelConfig(**kwargs).validate()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_baseline(table, idx):
    where = f"baseline #{idx + 1}"
    kind = _get_str(table, "kind", where)
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"{where}: unknown kind {kind!r}; expected one"
                          f" of {', '.join(BASELINE_KINDS)}")
    schema = _BASELINE_SCHEMAS[kind]
    _check_keys(table, {"kind"} | {name for name, _, _ in schema}, where)
    params = {name: getter(table, name, where, default)
              for name, getter, default in schema}
    return BaselineSpec(kind, params)


def _parse_search(table):
    where = "search"
    _check_keys(table, {"algorithm", "budget", "seed", "f", "learning_rate",
                        "regularization", "user_k", "item_k", "user_shrink",
                        "item_shrink", "epochs_max", "eval_every", "patience",
                        "negative_ratio", "eval_cutoff", "init_seed",
                        "sample_seed"}, where)
    defaults = SearchSpace(algorithm="", budget=1)
    ranges = {}
    for key, attr, as_int in (
            ("f", "f_range", True),
            ("learning_rate", "learning_rate_range", False),
            ("regularization", "regularization_range", False),
            ("user_k", "user_k_range", True),
            ("item_k", "item_k_range", True),
            ("user_shrink", "user_shrink_range", True),
            ("item_shrink", "item_shrink_range", True)):
        getter = _get_ints if as_int else _get_numbers
        values = getter(table, key, where, getattr(defaults, attr))
        if len(values) != 2:
            raise ConfigError(f"{where}: {key} must be [low, high]")
        ranges[attr] = tuple(values)
    space = SearchSpace(
        algorithm=_get_str(table, "algorithm", where),
        budget=_get_int(table, "budget", where),
        seed=_get_int(table, "seed", where, defaults.seed),
        epochs_max=_get_int(table, "epochs_max", where, defaults.epochs_max),
        eval_every=_get_int(table, "eval_every", where, defaults.eval_every),
        patience=_get_int(table, "patience", where, defaults.patience),
        negative_ratio=_get_int(table, "negative_ratio", where,
                                defaults.negative_ratio),
        eval_cutoff=_get_int(table, "eval_cutoff", where,
                             defaults.eval_cutoff),
        init_seed=_get_int(table, "init_seed", where, defaults.init_seed),
        sample_seed=_get_int(table, "sample_seed", where,
                             defaults.sample_seed),
        **ranges)
    return space.validate()


def parse_config(raw):
    """ExperimentConfig from a parsed TOML document (a plain dict)."""
    _check_keys(raw, {"dataset", "preprocess", "split", "model", "baseline",
                      "stability", "evaluation", "output", "search"},
                "config")
    kwargs = {}

    dataset = _get(raw, "dataset", "config", (dict,))
    _check_keys(dataset, {"path", "delimiter", "header", "synthetic"},
                "dataset")
    if "path" in dataset:
        kwargs["dataset_path"] = _get_str(dataset, "path", "dataset")
    kwargs["delimiter"] = _get_str(dataset, "delimiter", "dataset", "\t")
    kwargs["header"] = _get_bool(dataset, "header", "dataset", False)
    if "synthetic" in dataset:
        kwargs["synthetic"] = _parse_synthetic(
            _get(dataset, "synthetic", "dataset", (dict,)))

    if "preprocess" in raw:
        pre = _get(raw, "preprocess", "config", (dict,))
        _check_keys(pre, {"threshold", "min_interactions"}, "preprocess")
        kwargs["threshold"] = _get_float(pre, "threshold", "preprocess", 1.0)
        kwargs["min_interactions"] = _get_int(pre, "min_interactions",
                                              "preprocess", 5)

    if "split" in raw:
        split = _get(raw, "split", "config", (dict,))
        _check_keys(split, {"ratios", "seed"}, "split")
        if "ratios" in split:
            kwargs["split_ratios"] = tuple(
                float(r) for r in _get_numbers(split, "ratios", "split"))
        kwargs["split_seed"] = _get_int(split, "seed", "split", 0)

    model_tables = _get(raw, "model", "config", (list,), [])
    models = []
    for idx, table in enumerate(model_tables):
        if not isinstance(table, dict):
            raise ConfigError(f"model #{idx + 1}: expected a [[model]] table")
        models.append(_parse_model(table, idx))
    kwargs["models"] = tuple(models)

    baseline_tables = _get(raw, "baseline", "config", (list,), [])
    baselines = []
    for idx, table in enumerate(baseline_tables):
        if not isinstance(table, dict):
            raise ConfigError(f"baseline #{idx + 1}: expected a [[baseline]]"
                              " table")
        baselines.append(_parse_baseline(table, idx))
    kwargs["baselines"] = tuple(baselines)

    if "stability" in raw:
        stab = _get(raw, "stability", "config", (dict,))
        _check_keys(stab, {"seeds", "top_n", "rep_cutoffs"}, "stability")
        if "seeds" in stab:
            kwargs["stability_seeds"] = _get_ints(stab, "seeds", "stability")
        kwargs["top_n"] = _get_int(stab, "top_n", "stability", 10)
        if "rep_cutoffs" in stab:
            kwargs["rep_cutoffs"] = _get_ints(stab, "rep_cutoffs",
                                              "stability")

    if "evaluation" in raw:
        ev = _get(raw, "evaluation", "config", (dict,))
        _check_keys(ev, {"cutoffs", "tail_fraction", "popularity_thresholds"},
                    "evaluation")
        if "cutoffs" in ev:
            kwargs["cutoffs"] = _get_ints(ev, "cutoffs", "evaluation")
        kwargs["tail_fraction"] = _get_float(ev, "tail_fraction",
                                             "evaluation", 0.66)
        if "popularity_thresholds" in ev:
            kwargs["popularity_thresholds"] = tuple(
                float(t) for t in _get_numbers(ev, "popularity_thresholds",
                                               "evaluation"))

    if "output" in raw:
        out = _get(raw, "output", "config", (dict,))
        _check_keys(out, {"dir"}, "output")
        kwargs["out_dir"] = _get_str(out, "dir", "output", "out")

    if "search" in raw:
        kwargs["search"] = _parse_search(_get(raw, "search", "config",
                                              (dict,)))

    return ExperimentConfig(**kwargs).validate()


def load_config(path):
    """ExperimentConfig from a TOML file on disk."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw)
