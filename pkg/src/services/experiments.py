#!/usr/bin/env python3
"""
Evaluation pipelines: traditional ZSL, the four generalized-ZSL scenarios,
zero-shot retrieval, class-wise cross-validation of (lambda, d), fusion
weight search, parameter sweeps and config-driven experiment runs.
"""
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.model_selection import KFold, train_test_split

from .base import BaseService, format_list, parse_float_list, parse_id_list, read_ini
from .datasets import ClassSplit, Dataset, assemble_dataset, resolve_manifest_path
from .exceptions import ValidationError
from .inference import FusionWeights, duplicate_prototypes, pick, predict_batch
from .latent import Hyperparams, fast_compact, train, train_path, training_view
from .metrics import EvalReport, average_precision, mean_average_precision, per_class_accuracy
from .reports import summary_csv, summary_text, table_to_csv, write_confusion_csv, write_report

logger = logging.getLogger('lse')

SCENARIO_TABLE = {
    "U-U": ("unseen", "unseen"),
    "S-S": ("seen", "seen"),
    "U-T": ("unseen", "total"),
    "S-T": ("seen", "total"),
}
DEFAULT_LAMBDAS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)
DEFAULT_FOLDS = 5
DEFAULT_FUSION_STEP = 0.1
FUSION_VALIDATION_FRACTION = 0.2
PROTOCOLS = ("validation", "unseen")
ALL_SCENARIOS = ("TZSL", "U-U", "S-S", "U-T", "S-T", "ZSR")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    test_source: str
    candidate_set: str
    seen_train_fraction: float = 0.8

    def __post_init__(self):
        expected = SCENARIO_TABLE.get(self.name)
        if expected is None:
            raise ValidationError(f"unknown scenario {self.name!r}; expected one of {list(SCENARIO_TABLE)}",
                                  contract="scenario")
        if (self.test_source, self.candidate_set) != expected:
            raise ValidationError(f"scenario {self.name} means test source {expected[0]} with {expected[1]} candidates",
                                  contract="scenario")
        if not (0.0 < self.seen_train_fraction < 1.0):
            raise ValidationError(f"seen_train_fraction must lie in (0, 1), got {self.seen_train_fraction}",
                                  contract="scenario")

    @classmethod
    def named(cls, name, seen_train_fraction=0.8):
        if name not in SCENARIO_TABLE:
            raise ValidationError(f"unknown scenario {name!r}; expected one of {list(SCENARIO_TABLE)}", contract="scenario")
        return cls(name, *SCENARIO_TABLE[name], seen_train_fraction)


def default_dim_grid(n, f1):
    """Powers of two up to min(n, f1)"""
    limit = max(1, min(int(n), int(f1)))
    dims, d = [], 2
    while d <= limit:
        dims.append(d)
        d *= 2
    return tuple(dims) or (1,)


@dataclass(frozen=True)
class CvPlan:
    folds: int = DEFAULT_FOLDS
    lambda_grid: tuple = DEFAULT_LAMBDAS
    dim_grid: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if int(self.folds) != self.folds or self.folds < 2:
            raise ValidationError(f"folds must be an integer >= 2, got {self.folds}", contract="cv-folds")
        lambdas = tuple(float(v) for v in self.lambda_grid)
        dims = tuple(int(v) for v in self.dim_grid)
        if not lambdas or not dims:
            raise ValidationError("grid empty: lambda and dim grids must be non-empty", contract="grid empty")
        bad = [v for v in lambdas if not (0.0 <= v < 1.0)]
        if bad:
            raise ValidationError(f"lambda grid values must satisfy 0 <= lambda < 1, got {bad}", contract="lambda-range")
        if min(dims) < 1:
            raise ValidationError(f"dim grid values must be >= 1, got {list(dims)}", contract="latent-dim")
        object.__setattr__(self, 'folds', int(self.folds))
        object.__setattr__(self, 'lambda_grid', lambdas)
        object.__setattr__(self, 'dim_grid', dims)

    @classmethod
    def for_dataset(cls, dataset, folds=DEFAULT_FOLDS, seed=0, lambdas=None, dims=None):
        """Plan with the default grids filled in from the dataset's size"""
        if not dims:
            dims = default_dim_grid(dataset.indices_of(dataset.split.seen).size, dataset.visual.rows)
        return cls(folds, tuple(lambdas) if lambdas else DEFAULT_LAMBDAS, tuple(dims), seed)


@dataclass(frozen=True)
class EvalOptions:
    """Settings shared by every pipeline"""

    fast: bool = False
    seed: int = 0
    strict: bool = False
    threads: int = 1
    standardize: bool = False
    solver: str = "dense"
    modalities: tuple = None
    semantic: tuple = None
    weights: FusionWeights = None
    ks: tuple = (1, 5)
    provenance: dict = field(default_factory=dict)


def _semantic_names(dataset, options):
    trained = list(options.modalities) if options.modalities else dataset.semantic_names
    used = list(options.semantic) if options.semantic else trained[:1]
    if not used:
        raise ValidationError("at least one semantic modality with prototypes is required", contract="semantic modality")
    untrained = [n for n in used if n not in trained]
    if untrained:
        raise ValidationError(f"semantic modalities {untrained} are not among the trained modalities {trained}",
                              contract="semantic modality")
    for name in trained:
        if dataset.modality(name).kind != "semantic":
            raise ValidationError(f"modality {name} is not a semantic modality", contract="semantic modality")
    return trained, used


def _hyper_record(hyper, options):
    record = {
        "lambda": repr(hyper.lam),
        "latent_dim": hyper.latent_dim,
        "standardize": hyper.standardize,
        "solver": hyper.solver,
        "fast": options.fast,
    }
    if options.semantic:
        record["semantic"] = format_list(options.semantic)
    if options.weights is not None:
        record["weights"] = ", ".join(f"{n}:{a!r}" for n, a in options.weights.weights)
    record.update(options.provenance)
    return record


def _duplicate_warnings(dataset, used):
    warnings = []
    for name in used:
        protos = dataset.prototypes_for(name).restricted(dataset.split.total)
        for a, b in duplicate_prototypes(protos):
            message = (f"duplicate prototypes in {name}: classes {a} and {b} share one semantic vector "
                       f"and cannot be told apart")
            logger.warning(message)
            warnings.append(message)
    return warnings


def _fit(train_set, hyper, options):
    if options.fast:
        train_set = fast_compact(train_set)
    trained, _ = _semantic_names(train_set, options)
    started = time.perf_counter()
    model = train(train_set, hyper, trained, options.threads)
    return model, time.perf_counter() - started


def fit_seen(dataset, hyper, options):
    """Model trained on every seen-class instance"""
    return _fit(training_view(dataset), hyper, options)


def seen_instance_split(dataset, train_fraction=0.8, seed=0):
    """Instance-level stratified split of the seen-class instances"""
    seen_idx = dataset.indices_of(dataset.split.seen)
    try:
        train_idx, test_idx = train_test_split(seen_idx, train_size=train_fraction, random_state=seed, shuffle=True,
                                               stratify=dataset.labels.labels[seen_idx])
    except ValueError as e:
        raise ValidationError(f"cannot split seen instances {train_fraction:.0%}/{1 - train_fraction:.0%}: {e}",
                              contract="seen split")
    return np.sort(train_idx), np.sort(test_idx)


def fit_seen_split(dataset, hyper, options, train_fraction=0.8, seed=0):
    """(model, train seconds, held-out seen indices) for the S-S and S-T scenarios"""
    train_idx, test_idx = seen_instance_split(dataset, train_fraction, seed)
    model, seconds = _fit(dataset.subset(train_idx), hyper, options)
    return model, seconds, test_idx


def _classification(scenario, model, dataset, test_idx, candidate_ids, hyper, options, warnings, train_seconds):
    if test_idx.size == 0:
        raise ValidationError(f"no test instances for scenario {scenario}", contract="test-set")
    _, used = _semantic_names(dataset, options)
    started = time.perf_counter()
    preds = predict_batch(model, dataset.visual.select(test_idx), [dataset.prototypes_for(n) for n in used],
                          candidate_ids, weights=options.weights, threads=options.threads)
    test_seconds = time.perf_counter() - started
    report = EvalReport.from_predictions(scenario, preds, dataset.labels.labels[test_idx], dataset.class_names,
                                         _hyper_record(hyper, options), warnings + list(model.warnings),
                                         {"train_seconds": train_seconds, "test_seconds": test_seconds}, options.ks)
    logger.info(f"{scenario}: PC accuracy {report.per_class_accuracy:.4f} on {test_idx.size} instances")
    return report


def _unseen_report(scenario, dataset, hyper, options, candidate_set, fitted=None):
    _, used = _semantic_names(dataset, options)
    warnings = _duplicate_warnings(dataset, used)
    model, seconds = fitted or fit_seen(dataset, hyper, options)
    test_idx = dataset.indices_of(dataset.split.unseen)
    return _classification(scenario, model, dataset, test_idx, dataset.split.candidates(candidate_set), hyper,
                           options, warnings, seconds)


def run_tzsl(dataset, hyper, options=None, fitted=None):
    """
    Train on seen instances, classify unseen instances among the unseen classes

    Args:
        dataset (Dataset): Full dataset; unseen instances are never used for training
        hyper (Hyperparams): lambda, d and training flags
        options (EvalOptions): fast-LSE, semantic modalities, fusion weights, threads
        fitted (tuple): Optional (model, train seconds) from fit_seen to reuse

    Returns:
        EvalReport: TZSL report
    """
    return _unseen_report("TZSL", dataset, hyper, options or EvalOptions(), "unseen", fitted)


def run_gzsl(dataset, hyper, scenario, seed=None, options=None, fitted=None):
    """Evaluate one of U-U, S-S, U-T, S-T; U-U runs exactly the TZSL pipeline"""
    options = options or EvalOptions()
    spec = scenario if isinstance(scenario, ScenarioSpec) else ScenarioSpec.named(scenario)
    seed = options.seed if seed is None else seed
    if spec.test_source == "unseen":
        return _unseen_report(spec.name, dataset, hyper, options, spec.candidate_set, fitted)
    _, used = _semantic_names(dataset, options)
    warnings = _duplicate_warnings(dataset, used)
    model, seconds, test_idx = fitted or fit_seen_split(dataset, hyper, options, spec.seen_train_fraction, seed)
    return _classification(spec.name, model, dataset, test_idx, dataset.split.candidates(spec.candidate_set),
                           hyper, options, warnings, seconds)


def run_zsr(dataset, hyper, options=None, fitted=None):
    """Rank the unseen test pool for every unseen class prototype and report mAP"""
    options = options or EvalOptions()
    _, used = _semantic_names(dataset, options)
    warnings = _duplicate_warnings(dataset, used)
    candidates = dataset.split.candidates("unseen")
    pool = dataset.indices_of(candidates)
    if pool.size == 0:
        raise ValidationError("unseen test pool is empty", contract="test-set")
    pool_labels = dataset.labels.labels[pool]
    queries = []
    for c in candidates:
        if np.any(pool_labels == c):
            queries.append(c)
            continue
        message = f"unseen class {c} has no test instances and is excluded from retrieval"
        if options.strict:
            raise ValidationError(message, contract="empty class")
        logger.warning(message)
        warnings.append(message)
    if not queries:
        raise ValidationError("no unseen class has test instances", contract="empty class")

    model, train_seconds = fitted or fit_seen(dataset, hyper, options)
    started = time.perf_counter()
    preds = predict_batch(model, dataset.visual.select(pool), [dataset.prototypes_for(n) for n in used],
                          candidates, weights=options.weights, threads=options.threads)
    rankings, relevance, queried = [], [], []
    for j, c in enumerate(preds.class_ids):
        if c not in queries:
            continue
        rankings.append(np.argsort(-preds.scores[:, j], kind='stable'))
        relevance.append(np.flatnonzero(pool_labels == c))
        queried.append(c)
    test_seconds = time.perf_counter() - started
    per_query = {c: average_precision(r, rel) for c, r, rel in zip(queried, rankings, relevance)}
    map_score = mean_average_precision(rankings, relevance)
    logger.info(f"ZSR: mAP {map_score:.4f} over {len(per_query)} queries, pool of {pool.size}")
    return EvalReport(
        scenario="ZSR",
        map_score=map_score,
        class_ids=candidates,
        class_id_map={c: dataset.class_name(c) for c in candidates},
        per_class=per_query,
        hyper=_hyper_record(hyper, options),
        warnings=tuple(warnings + list(model.warnings)),
        timings={"train_seconds": train_seconds, "test_seconds": test_seconds},
        extras={"test_instances": int(pool.size), "queries": len(per_query)},
    )


def _class_split_view(dataset, train_classes, held_out):
    """Seen-class instances relabeled as a split with held_out playing the unseen role"""
    sub = dataset.subset(dataset.indices_of(list(train_classes) + list(held_out)))
    return Dataset(sub.modalities, sub.labels, ClassSplit(tuple(sorted(train_classes)), tuple(sorted(held_out))),
                   sub.prototypes, sub.class_names)


def cv_folds(dataset, plan):
    """(training classes, held-out classes) per fold, seeded over the sorted seen ids"""
    seen = np.array(sorted(dataset.split.seen))
    if seen.size < plan.folds:
        raise ValidationError(f"fewer classes than folds: {seen.size} seen classes for {plan.folds} folds",
                              contract="cv-folds")
    splitter = KFold(n_splits=plan.folds, shuffle=True, random_state=plan.seed)
    return [([int(c) for c in seen[a]], [int(c) for c in seen[b]]) for a, b in splitter.split(seen)]


def cross_validate(dataset, plan, options=None):
    """
    Select (lambda, d) by class-wise cross-validation on the seen classes

    Each fold's classes play the unseen role while the remaining seen classes
    train; a cell's score is the mean held-out PC accuracy over folds. Cells
    whose d exceeds a fold's training instances are skipped. Ties keep the
    earliest grid cell (lambda-major).

    Returns:
        tuple: (best Hyperparams, list of score rows)
    """
    options = options or EvalOptions(seed=plan.seed)
    _, used = _semantic_names(dataset, options)
    folds = [_class_split_view(dataset, a, b) for a, b in cv_folds(dataset, plan)]
    cells = [(f, lam) for f in range(len(folds)) for lam in plan.lambda_grid]

    def run_cell(cell):
        fold, lam = folds[cell[0]], cell[1]
        train_set = training_view(fold, options.fast)
        dims = [d for d in plan.dim_grid if d <= train_set.n_instances]
        if not dims:
            return {}
        trained, _ = _semantic_names(train_set, options)
        models = train_path(train_set, lam, dims, options.standardize, options.solver, trained)
        val_idx = fold.indices_of(fold.split.unseen)
        truth = fold.labels.labels[val_idx]
        instances = fold.visual.select(val_idx)
        scores = {}
        for d, model in zip(dims, models):
            preds = predict_batch(model, instances, [fold.prototypes_for(n) for n in used],
                                  fold.split.candidates("unseen"), weights=options.weights)
            scores[d] = per_class_accuracy(preds.labels, truth)
        return scores

    if options.threads > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(cell) for cell in cells]

    n_lambdas = len(plan.lambda_grid)
    table, best = [], None
    for i, lam in enumerate(plan.lambda_grid):
        for d in plan.dim_grid:
            fold_scores = [results[f * n_lambdas + i].get(d) for f in range(len(folds))]
            row = {"lambda": lam, "dim": d, "score": None, "folds": len(folds)}
            if any(s is None for s in fold_scores):
                row["note"] = "skipped: d exceeds training instances"
            else:
                row["score"] = float(np.mean(fold_scores))
                if best is None or row["score"] > best["score"]:
                    best = row
            table.append(row)
    if best is None:
        raise ValidationError("every grid cell was skipped: latent dims exceed the fold training sizes",
                              contract="grid empty")
    logger.info(f"Cross-validation selected lambda={best['lambda']}, d={best['dim']} (score {best['score']:.4f})")
    return Hyperparams(best["lambda"], best["dim"], options.standardize, options.solver), table


def simplex_grid(n, step=DEFAULT_FUSION_STEP):
    """Weight vectors with entries in multiples of step summing to 1, in ascending lexicographic order"""
    if not (0.0 < step <= 1.0):
        raise ValidationError(f"grid step must lie in (0, 1], got {step}", contract="fusion-step")
    steps = int(round(1.0 / step))
    if abs(steps * step - 1.0) > 1e-9:
        raise ValidationError(f"grid step {step} does not divide 1", contract="fusion-step")
    return [tuple(i / steps for i in point)
            for point in itertools.product(range(steps + 1), repeat=n) if sum(point) == steps]


def _margins(scores, truth, class_ids):
    column = {c: j for j, c in enumerate(class_ids)}
    margins = []
    for row, t in zip(scores, truth):
        j = column[int(t)]
        others = np.delete(row, j)
        margins.append(row[j] - (others.max() if others.size else 0.0))
    margins = np.asarray(margins)
    return float(np.mean(margins[np.isfinite(margins)])) if np.any(np.isfinite(margins)) else 0.0


def fusion_search(dataset, hyper, modalities, grid_step=DEFAULT_FUSION_STEP, options=None, protocol="validation"):
    """
    Score every simplex grid point of fusion weights

    The default protocol holds out a class-wise share of the seen classes for
    validation. The "unseen" protocol scores on the unseen test classes and is
    flagged as protocol-leaking. Points are ranked by PC accuracy and ties keep
    the first point in lexicographic order. The mean true-class score margin is
    reported per point but never decides.

    Returns:
        tuple: (FusionWeights, list of score rows, warnings)
    """
    options = options or EvalOptions()
    names = list(modalities)
    if len(names) < 2:
        raise ValidationError(f"fusion search needs >= 2 semantic modalities, got {names}", contract="fusion-modalities")
    if protocol not in PROTOCOLS:
        raise ValidationError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}", contract="fusion-protocol")
    options = replace(options, modalities=tuple(names), semantic=tuple(names), weights=None)
    _semantic_names(dataset, options)
    warnings = []
    if protocol == "validation":
        seen = sorted(dataset.split.seen)
        try:
            kept, held_out = train_test_split(seen, test_size=FUSION_VALIDATION_FRACTION, random_state=options.seed)
        except ValueError as e:
            raise ValidationError(f"cannot hold out validation classes from {len(seen)} seen classes: {e}",
                                  contract="fusion-validation")
        evaluation = _class_split_view(dataset, kept, held_out)
    else:
        message = "fusion weights tuned on unseen test classes (unseen protocol, protocol-leaking)"
        logger.warning(message)
        warnings.append(message)
        evaluation = dataset
    model, _ = _fit(training_view(evaluation), hyper, options)
    test_idx = evaluation.indices_of(evaluation.split.unseen)
    candidates = evaluation.split.candidates("unseen")
    instances = evaluation.visual.select(test_idx)
    truth = evaluation.labels.labels[test_idx]
    per_modality = [predict_batch(model, instances, evaluation.prototypes_for(n), candidates, threads=options.threads)
                    for n in names]
    class_ids = per_modality[0].class_ids

    table, best = [], None
    for point in simplex_grid(len(names), grid_step):
        total = np.zeros_like(per_modality[0].scores)
        for alpha, preds in zip(point, per_modality):
            if alpha == 0.0:
                continue
            total = total + alpha * preds.scores
        predicted = [pick(row, class_ids) for row in total]
        row = {"weights": point, "score": per_class_accuracy(predicted, truth),
               "margin": _margins(total, truth, class_ids)}
        row.update({name: alpha for name, alpha in zip(names, point)})
        if best is None or row["score"] > best["score"]:
            best = row
        table.append(row)
    weights = FusionWeights(tuple(zip(names, best["weights"])))
    logger.info(f"Fusion search ({protocol}) selected {weights.as_dict()} with score {best['score']:.4f}")
    return weights, table, warnings


def search_fusion_weights(dataset, hyper, modalities, grid_step=DEFAULT_FUSION_STEP, options=None,
                          protocol="validation"):
    """Best fusion weights of a simplex grid search; warnings go to the log"""
    return fusion_search(dataset, hyper, modalities, grid_step, options, protocol)[0]


def sweep(dataset, hyper, parameter, values, options=None):
    """
    TZSL PC accuracy while one of lambda or d varies and the other stays fixed

    Returns:
        list: rows of {"lambda", "dim", "score"}; a d above the training size scores None
    """
    options = options or EvalOptions()
    values = list(values)
    if not values:
        raise ValidationError("sweep needs at least one value", contract="sweep-values")
    if parameter == "lambda":
        def one(lam):
            report = run_tzsl(dataset, Hyperparams(lam, hyper.latent_dim, hyper.standardize, hyper.solver), options)
            return {"lambda": float(lam), "dim": hyper.latent_dim, "score": report.per_class_accuracy}
        if options.threads > 1:
            with ThreadPoolExecutor(max_workers=options.threads) as pool:
                return list(pool.map(one, values))
        return [one(v) for v in values]
    if parameter != "dim":
        raise ValidationError(f"sweep parameter must be lambda or dim, got {parameter!r}", contract="sweep-parameter")
    train_set = training_view(dataset, options.fast)
    dims = [int(d) for d in values]
    valid = sorted({d for d in dims if 1 <= d <= train_set.n_instances})
    trained, _ = _semantic_names(train_set, options)
    started = time.perf_counter()
    models = dict(zip(valid, train_path(train_set, hyper.lam, valid, hyper.standardize, hyper.solver, trained,
                                        options.threads))) if valid else {}
    seconds = time.perf_counter() - started
    rows = []
    for d in dims:
        row = {"lambda": hyper.lam, "dim": d, "score": None}
        if d in models:
            report = run_tzsl(dataset, hyper.with_dim(d), options, fitted=(models[d], seconds))
            row["score"] = report.per_class_accuracy
        rows.append(row)
    return rows


def _config_bool(raw):
    value = str(raw).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {raw!r}", contract="experiment-config")


def _config_list(raw):
    return [token.strip() for token in (raw or "").split(',') if token.strip()]


def _config_number(raw, convert, field):
    try:
        return convert(str(raw).strip())
    except ValueError:
        raise ValidationError(f"{field}: expected {convert.__name__}, got {raw!r}", contract="experiment-config")


def load_experiment(path):
    """Parse an experiment config into a plain settings dict"""
    path = Path(path)
    config = read_ini(path)
    if not config.has_section("experiment"):
        raise ValidationError(f"{path} lacks an [experiment] section", contract="experiment-config")
    exp = config["experiment"]
    if "manifest" not in exp:
        raise ValidationError(f"{path} lacks experiment.manifest", contract="experiment-config")

    def resolve(raw):
        p = Path(raw.strip())
        return p if p.is_absolute() else path.parent / p

    scenarios = _config_list(exp.get("scenarios", "")) or list(ALL_SCENARIOS)
    unknown = [s for s in scenarios if s not in ALL_SCENARIOS]
    if unknown:
        raise ValidationError(f"unknown scenarios {unknown}; expected {list(ALL_SCENARIOS)}", contract="scenario")
    fast_raw = exp.get("fast", "false").strip().lower()
    methods = [("LSE", False), ("fast-LSE", True)] if fast_raw == "both" else \
        [("fast-LSE", True)] if _config_bool(fast_raw) else [("LSE", False)]
    settings = {
        "manifest": resolve_manifest_path(resolve(exp["manifest"])),
        "output": resolve(exp.get("output", "results")),
        "scenarios": scenarios,
        "seed": _config_number(exp.get("seed", "0"), int, "experiment.seed"),
        "methods": methods,
        "threads": _config_number(exp["threads"], int, "experiment.threads") if "threads" in exp else None,
        "include_timings": _config_bool(exp.get("timings", "false")),
        "standardize": False,
        "solver": "dense",
        "hyper": None,
        "grid": None,
        "fusion": None,
    }
    if config.has_section("hyper"):
        hyper = config["hyper"]
        settings["standardize"] = _config_bool(hyper.get("standardize", "false"))
        settings["solver"] = hyper.get("solver", "dense").strip()
        if "lambda" in hyper and "dim" in hyper:
            settings["hyper"] = (_config_number(hyper["lambda"], float, "hyper.lambda"),
                                 _config_number(hyper["dim"], int, "hyper.dim"))
    if config.has_section("grid"):
        grid = config["grid"]
        settings["grid"] = {
            "lambdas": parse_float_list(grid.get("lambdas", ""), "grid.lambdas"),
            "dims": parse_id_list(grid.get("dims", ""), "grid.dims"),
            "folds": _config_number(grid.get("folds", str(DEFAULT_FOLDS)), int, "grid.folds"),
        }
    if settings["hyper"] is None and settings["grid"] is None:
        raise ValidationError(f"{path} needs [hyper] lambda and dim, or a [grid] section", contract="experiment-config")
    if config.has_section("fusion"):
        fusion = config["fusion"]
        settings["fusion"] = {
            "modalities": _config_list(fusion.get("modalities", "")),
            "step": _config_number(fusion.get("step", str(DEFAULT_FUSION_STEP)), float, "fusion.step"),
            "protocol": fusion.get("protocol", "validation").strip(),
        }
    return settings


def run_experiment(path, threads=None, strict=False):
    """
    Run every configured scenario for every method and write the results

    Writes <method>_<scenario>.ini reports, confusion CSVs for classification
    scenarios, and summary.csv / summary.txt into the output directory.

    Returns:
        dict: method -> {scenario: EvalReport}
    """
    settings = load_experiment(path)
    dataset = assemble_dataset(settings["manifest"])
    output = settings["output"]
    output.mkdir(parents=True, exist_ok=True)
    base = EvalOptions(seed=settings["seed"], strict=strict, threads=threads or settings["threads"] or 1,
                       standardize=settings["standardize"], solver=settings["solver"])
    results = {}
    for method, fast in settings["methods"]:
        options = replace(base, fast=fast)
        provenance = {}
        if settings["grid"] is not None:
            grid = settings["grid"]
            plan = CvPlan.for_dataset(dataset, grid["folds"], settings["seed"], grid["lambdas"], grid["dims"])
            hyper, table = cross_validate(dataset, plan, options)
            (output / f"{method}_gridsearch.csv").write_text(
                table_to_csv(table, ("lambda", "dim", "score", "folds", "note")), encoding='utf-8')
            provenance = {"selection": "class-wise cross-validation", "grid_lambdas": format_list(plan.lambda_grid),
                          "grid_dims": format_list(plan.dim_grid), "grid_folds": plan.folds}
        else:
            lam, dim = settings["hyper"]
            hyper = Hyperparams(lam, dim, settings["standardize"], settings["solver"])
            provenance = {"selection": "fixed"}
        if settings["fusion"] is not None:
            fusion = settings["fusion"]
            weights = search_fusion_weights(dataset, hyper, fusion["modalities"], fusion["step"], options,
                                            fusion["protocol"])
            options = replace(options, modalities=tuple(fusion["modalities"]), semantic=tuple(fusion["modalities"]),
                              weights=weights)
            provenance["fusion_protocol"] = fusion["protocol"]
        options = replace(options, provenance=provenance)

        reports = {}
        unseen_fit = None
        seen_fit = None
        for scenario in settings["scenarios"]:
            if scenario in ("TZSL", "U-U", "U-T", "ZSR") and unseen_fit is None:
                unseen_fit = fit_seen(dataset, hyper, options)
            if scenario == "TZSL":
                reports[scenario] = run_tzsl(dataset, hyper, options, unseen_fit)
            elif scenario == "ZSR":
                reports[scenario] = run_zsr(dataset, hyper, options, unseen_fit)
            elif scenario in ("U-U", "U-T"):
                reports[scenario] = run_gzsl(dataset, hyper, scenario, settings["seed"], options, unseen_fit)
            else:
                if seen_fit is None:
                    seen_fit = fit_seen_split(dataset, hyper, options, seed=settings["seed"])
                reports[scenario] = run_gzsl(dataset, hyper, scenario, settings["seed"], options, seen_fit)
            report = reports[scenario]
            write_report(report, output / f"{method}_{scenario}.ini", settings["include_timings"])
            if report.confusion is not None:
                write_confusion_csv(report, output / f"{method}_{scenario}_confusion.csv")
        results[method] = reports
    (output / "summary.csv").write_text(summary_csv(results), encoding='utf-8')
    (output / "summary.txt").write_text(summary_text(results), encoding='utf-8')
    logger.info(f"Experiment {path} finished; results in {output}")
    return results


class EvaluationService(BaseService):
    """Handler for the evaluation pipelines"""

    def _options(self, **kwargs):
        return EvalOptions(seed=self.seed, strict=self.strict, threads=self.threads, **kwargs)

    def tzsl(self, manifest, lam, dim, **kwargs):
        """TZSL report for a manifest"""
        def run():
            options = self._options(**kwargs)
            hyper = Hyperparams(lam, dim, options.standardize, options.solver)
            return {"report": run_tzsl(assemble_dataset(manifest), hyper, options)}
        return self._run(f"running TZSL on {manifest}", run)

    def gzsl(self, manifest, scenario, lam, dim, **kwargs):
        """GZSL report for one scenario"""
        def run():
            options = self._options(**kwargs)
            hyper = Hyperparams(lam, dim, options.standardize, options.solver)
            return {"report": run_gzsl(assemble_dataset(manifest), hyper, scenario, self.seed, options)}
        return self._run(f"running GZSL {scenario} on {manifest}", run)

    def zsr(self, manifest, lam, dim, **kwargs):
        """Zero-shot retrieval report"""
        def run():
            options = self._options(**kwargs)
            hyper = Hyperparams(lam, dim, options.standardize, options.solver)
            return {"report": run_zsr(assemble_dataset(manifest), hyper, options)}
        return self._run(f"running ZSR on {manifest}", run)

    def gridsearch(self, manifest, folds=DEFAULT_FOLDS, lambdas=None, dims=None, **kwargs):
        """Class-wise cross-validation of (lambda, d)"""
        def run():
            dataset = assemble_dataset(manifest)
            plan = CvPlan.for_dataset(dataset, folds, self.seed, lambdas, dims)
            hyper, table = cross_validate(dataset, plan, self._options(**kwargs))
            return {"lambda": hyper.lam, "dim": hyper.latent_dim, "table": table, "plan": plan}
        return self._run(f"cross-validating on {manifest}", run)

    def fuse_search(self, manifest, lam, dim, modalities, step=DEFAULT_FUSION_STEP, protocol="validation", **kwargs):
        """Fusion weight grid search"""
        def run():
            options = self._options(**kwargs)
            hyper = Hyperparams(lam, dim, options.standardize, options.solver)
            weights, table, warnings = fusion_search(assemble_dataset(manifest), hyper, modalities, step, options,
                                                     protocol)
            return {"weights": weights, "table": table, "warnings": warnings}
        return self._run(f"searching fusion weights on {manifest}", run)

    def sweep(self, manifest, lam, dim, parameter, values, **kwargs):
        """One-parameter sensitivity sweep"""
        def run():
            options = self._options(**kwargs)
            hyper = Hyperparams(lam, dim, options.standardize, options.solver)
            return {"table": sweep(assemble_dataset(manifest), hyper, parameter, values, options)}
        return self._run(f"sweeping {parameter} on {manifest}", run)

    def run_config(self, config_path):
        """Run a config-driven experiment"""
        def run():
            results = run_experiment(config_path, self.threads, self.strict)
            return {"results": results, "output": str(load_experiment(config_path)["output"])}
        return self._run(f"running experiment {config_path}", run)
