"""
Harness Commands Module

The experiments behind each CLI subcommand. Every command writes the resolved
config and its artifacts into cfg.output_dir and returns what it wrote.

Pools are always read back from their checkpoints before use, so a fresh run and a
run that reuses cached checkpoints evaluate the same float32-quantized weights.
Checkpoints are reused only when their stored recipe hash matches the config.
"""

import filecmp
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from merge_lab.bounds.lab import BoundReport, exact_violation_count, run_bound_suite
from merge_lab.data.synth import (
    GeneratedDataset,
    class_means,
    cross_task_spec,
    generate,
    zero_noise_preset,
)
from merge_lab.errors import CheckpointError, DomainError
from merge_lab.harness.experiment_config import ExperimentConfig
from merge_lab.merging.operators import (
    INDIVIDUAL,
    PERF_AVE,
    MergeMethod,
    ModelPool,
    ens_logits,
    evaluate_methods,
    merge_templates,
    scale_weights,
    uniform_soup,
)
from merge_lab.models.zoo import ActivationKind, Model, TemplateAlignment, forward
from merge_lab.models.zoo import TEMPLATE_COSINE_FLOOR, template_alignment, template_rows
from merge_lab.storage.checkpoint import read_checkpoint, write_checkpoint
from merge_lab.storage.export import (
    BoundRow,
    ResultRow,
    ScatterRow,
    TrainLogRow,
    append_csv,
    write_pgm_grid,
    write_ppm_grid,
)
from merge_lab.tensor.core import RngStream, StreamTag
from merge_lab.training.trainer import TrainConfig, accuracy_from_logits, train_pool
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

GAP_TAG = "uniform_soup_minus_ens_logits"
MODEL1_TAG = "model1"
MODEL2_TAG = "model2"

CROSSTASK_METHODS = (
    MergeMethod.UNIFORM_SOUP.value,
    MergeMethod.ENS_LOGITS.value,
    MergeMethod.ENS_FEATURES.value,
)


def _prepare(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


def _fresh(path: Path) -> Path:
    """Remove a previous result file so the run rewrites it from scratch."""
    path.unlink(missing_ok=True)
    return path


def _stamp(model: Model, recipe_hash: str) -> Model:
    return model.model_copy(update={"meta": model.meta.model_copy(update={"config_hash": recipe_hash})})


def _read_cached(paths: Sequence[Path], recipe_hash: str) -> Optional[List[Model]]:
    models = []
    for path in paths:
        if not path.exists():
            return None
        try:
            model = read_checkpoint(path)
        except CheckpointError as e:
            logger.warning(f"Ignoring unreadable checkpoint {path}: {e}")
            return None
        if model.meta.config_hash != recipe_hash:
            logger.info(f"Checkpoint {path} was trained with another recipe, retraining")
            return None
        models.append(model)
    return models


def load_or_train_pool(
    cfg: ExperimentConfig,
    data: GeneratedDataset,
    out: Path,
    jobs: int = 1,
    prefix: str = "model",
    stream_offset: int = 0,
    count: Optional[int] = None,
    arch: Optional[List[int]] = None,
    activation: Optional[ActivationKind] = None,
    init_scale: Optional[float] = None,
    train_cfg: Optional[TrainConfig] = None,
) -> List[Model]:
    """
    Train (or reuse) a pool and return it as read back from its checkpoints.

    Model i is written to {prefix}_{stream_offset + i:03d}.mrgl and its per-epoch log
    to {prefix}_train_log.csv.
    """
    count = cfg.pool_size if count is None else count
    arch = cfg.arch() if arch is None else arch
    activation = cfg.activation if activation is None else activation
    init_scale = cfg.init_scale if init_scale is None else init_scale
    train_cfg = cfg.train_config() if train_cfg is None else train_cfg
    recipe_hash = cfg.pool_hash(data.spec, arch, activation, init_scale, train_cfg)
    paths = [out / f"{prefix}_{stream_offset + i:03d}.mrgl" for i in range(count)]

    if _read_cached(paths, recipe_hash) is None:
        logger.info(f"Training {count} model(s) {arch} ({activation}) into {out}")
        results = train_pool(
            arch,
            activation,
            data,
            train_cfg,
            cfg.master_seed,
            count,
            jobs=jobs,
            init_scale=init_scale,
            stream_offset=stream_offset,
        )
        rows: List[TrainLogRow] = []
        for i, ((model, log), path) in enumerate(zip(results, paths)):
            write_checkpoint(_stamp(model, recipe_hash), path)
            rows.extend(
                TrainLogRow(model=stream_offset + i, epoch=epoch + 1, train_loss=loss, val_accuracy=acc)
                for epoch, (loss, acc) in enumerate(zip(log.train_loss, log.val_accuracy))
            )
        append_csv(rows, _fresh(out / f"{prefix}_train_log.csv"), TrainLogRow)
    else:
        logger.info(f"Reusing {count} cached checkpoint(s) in {out}")
    return [read_checkpoint(path) for path in paths]


def _row(
    cfg: ExperimentConfig,
    experiment: str,
    method: str,
    n_models: int,
    factor: float,
    value: float,
    metric: str = "accuracy",
    seed: Optional[int] = None,
) -> ResultRow:
    return ResultRow(
        experiment=experiment,
        method=method,
        n_models=n_models,
        factor=factor,
        seed=cfg.master_seed if seed is None else seed,
        metric=metric,
        value=value,
    )


def _method_rows(
    cfg: ExperimentConfig,
    experiment: str,
    models: Sequence[Model],
    data: GeneratedDataset,
    factor: float,
    methods: Optional[Sequence[str]] = None,
) -> List[ResultRow]:
    """Perf Ave plus every configured method, for each pool size; accuracies in percent."""
    rows = []
    test = data.test
    for n in cfg.counts:
        pool = ModelPool(models[:n], data.val)
        tags = [PERF_AVE, *(methods if methods is not None else cfg.methods)]
        results = evaluate_methods(tags, pool, test.images, test.labels)
        for method, accuracy in results.items():
            rows.append(_row(cfg, experiment, method, n, factor, 100.0 * accuracy))
        logger.info(
            f"{experiment} factor {factor:g}, {n} models: "
            + ", ".join(f"{m}={100.0 * a:.2f}" for m, a in results.items())
        )
    return rows


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> List[Path]:
    """Train the candidate pool; returns the checkpoint paths."""
    out = _prepare(cfg)
    data = generate(cfg.dataset_spec())
    load_or_train_pool(cfg, data, out, jobs)
    return [out / f"model_{i:03d}.mrgl" for i in range(cfg.pool_size)]


def cmd_compare(cfg: ExperimentConfig, jobs: int = 1) -> List[ResultRow]:
    """
    Test accuracy of every configured method and Perf Ave for each pool size.

    Also emits one `individual` row per pool member (its seed column holds the
    member's stream id).
    """
    out = _prepare(cfg)
    data = generate(cfg.dataset_spec())
    models = load_or_train_pool(cfg, data, out, jobs)
    rows = [
        _row(
            cfg,
            "compare",
            INDIVIDUAL,
            1,
            1.0,
            100.0 * accuracy_from_logits(forward(m, data.test.images).logits, data.test.labels),
            seed=m.meta.stream_id,
        )
        for m in models
    ]
    rows.extend(_method_rows(cfg, "compare", models, data, 1.0))
    append_csv(rows, _fresh(out / "compare.csv"), ResultRow)
    return rows


def _scatter_order(cfg: ExperimentConfig, n: int) -> np.ndarray:
    gen = RngStream(cfg.master_seed).derive(StreamTag.TEST_SPLIT).derive(StreamTag.SHUFFLE)
    return gen.generator.permutation(n)


def cmd_magnitude(cfg: ExperimentConfig, jobs: int = 1) -> Tuple[List[ResultRow], List[ScatterRow]]:
    """
    Re-evaluate every method with all pool parameters scaled by each factor.

    Emits per-method accuracy rows, uniform_soup minus ens_logits gap rows, and
    per-batch paired soup/ensemble accuracies on a fixed shuffle of the test set.
    """
    out = _prepare(cfg)
    data = generate(cfg.dataset_spec())
    models = load_or_train_pool(cfg, data, out, jobs)
    test = data.test
    order = _scatter_order(cfg, len(test))
    rows: List[ResultRow] = []
    scatter: List[ScatterRow] = []
    for factor in cfg.factor_grid:
        scaled = [scale_weights(m, factor) for m in models]
        rows.extend(_method_rows(cfg, "magnitude", scaled, data, factor))
        for n in cfg.counts:
            pool = ModelPool(scaled[:n], data.val)
            soup_logits = forward(uniform_soup(pool), test.images).logits
            ens = ens_logits(pool, test.images)
            gap = accuracy_from_logits(soup_logits, test.labels) - accuracy_from_logits(
                ens, test.labels
            )
            rows.append(_row(cfg, "magnitude", GAP_TAG, n, factor, 100.0 * gap, metric="gap"))
            for batch, start in enumerate(range(0, len(test), cfg.scatter_batch_size)):
                idx = order[start : start + cfg.scatter_batch_size]
                scatter.append(
                    ScatterRow(
                        factor=factor,
                        n_models=n,
                        batch=batch,
                        soup_accuracy=100.0 * accuracy_from_logits(soup_logits[idx], test.labels[idx]),
                        ens_accuracy=100.0 * accuracy_from_logits(ens[idx], test.labels[idx]),
                    )
                )
    append_csv(rows, _fresh(out / "magnitude.csv"), ResultRow)
    append_csv(scatter, _fresh(out / "magnitude_scatter.csv"), ScatterRow)
    return rows, scatter


def cmd_templates(cfg: ExperimentConfig, jobs: int = 1) -> TemplateAlignment:
    """
    Train a linear classifier and write class-mean, template and merged-template grids.

    Merged templates pair class i with class i + k//2 for i < k//2, or every class
    with itself when templates_self_merge is set.
    """
    out = _prepare(cfg)
    spec = cfg.dataset_spec()
    if cfg.templates_zero_noise:
        spec = zero_noise_preset(spec)
    data = generate(spec)
    arch = [spec.dim, spec.n_classes]
    classifier = load_or_train_pool(
        cfg,
        data,
        out,
        jobs,
        prefix="template",
        count=1,
        arch=arch,
        activation="identity",
        init_scale=cfg.template_init_scale,
        train_cfg=cfg.template_train_config(),
    )[0]

    write_grid = write_pgm_grid if spec.channels == 1 else write_ppm_grid
    ext = "pgm" if spec.channels == 1 else "ppm"
    k = spec.n_classes
    pairs = [(i, i) for i in range(k)] if cfg.templates_self_merge else [
        (i, i + k // 2) for i in range(k // 2)
    ]
    merged = np.stack([merge_templates(classifier, i, j) for i, j in pairs])
    write_grid(class_means(data.train), spec.height, spec.width, cfg.grid_cols, out / f"class_means.{ext}")
    write_grid(template_rows(classifier), spec.height, spec.width, cfg.grid_cols, out / f"templates.{ext}")
    write_grid(merged, spec.height, spec.width, cfg.grid_cols, out / f"merged_templates.{ext}")

    alignment = template_alignment(classifier, data.prototypes)
    rows = [
        _row(cfg, f"templates_class_{c}", INDIVIDUAL, 1, 1.0, cosine, metric="cosine")
        for c, cosine in enumerate(alignment.cosines)
    ] + [
        _row(cfg, f"templates_class_{c}", INDIVIDUAL, 1, 1.0, cosine, metric="plain_cosine")
        for c, cosine in enumerate(alignment.plain_cosines)
    ]
    append_csv(rows, _fresh(out / "templates.csv"), ResultRow)
    logger.info(
        f"Template alignment: min cosine {alignment.min_cosine:.4f} "
        f"(raw rows {alignment.min_plain_cosine:.4f}), all classes matched: {alignment.all_matched}"
    )
    if not alignment.meets_floor():
        logger.warning(
            f"Templates fall short of cosine {TEMPLATE_COSINE_FLOOR}; raise template_epochs "
            f"or template_weight_decay"
        )
    return alignment


def cmd_bounds(cfg: ExperimentConfig, jobs: int = 1) -> List[BoundReport]:
    """Run the bound suite; writes bounds.csv and the readable bounds.txt."""
    out = _prepare(cfg)
    reports = run_bound_suite(
        cfg.bound_config(),
        taus=cfg.taus,
        fuzz_pairs=cfg.fuzz_pairs,
        variance_trials=cfg.variance_trials,
        theorem_trials=cfg.theorem_trials,
        inject_violation=cfg.inject_violation,
    )
    rows = [
        BoundRow(
            check=r.check,
            tau=r.params.get("tau", 0.0),
            bound_value=r.bound_value,
            empirical=r.empirical,
            violation_rate=r.violation_rate,
            guaranteed_prob=r.guaranteed_prob,
            holds=r.holds,
            exact_violations=r.exact_violations,
        )
        for r in reports
    ]
    append_csv(rows, _fresh(out / "bounds.csv"), BoundRow)
    (out / "bounds.txt").write_text("\n".join(r.to_text() for r in reports) + "\n", encoding="utf-8")
    violations = exact_violation_count(reports)
    if violations:
        logger.error(f"{violations} exact inequality violation(s)")
    return reports


def cmd_crosstask(cfg: ExperimentConfig, jobs: int = 1) -> List[ResultRow]:
    """
    Merge a task-1 model with a model trained on a second task; score on task 1.

    Model 1 uses init stream 0 on task 1, model 2 stream 1 on task 2, so with
    crosstask_same_task the pair equals the first two members of the compare pool.
    """
    out = _prepare(cfg)
    spec1 = cfg.dataset_spec()
    spec2 = spec1 if cfg.crosstask_same_task else cross_task_spec(spec1, cfg.crosstask_seed())
    data1 = generate(spec1)
    data2 = data1 if spec2 == spec1 else generate(spec2)
    model1 = load_or_train_pool(cfg, data1, out, jobs, prefix="task1", count=1)[0]
    model2 = load_or_train_pool(cfg, data2, out, jobs, prefix="task2", stream_offset=1, count=1)[0]

    test = data1.test
    rows = [
        _row(cfg, "crosstask", tag, 1, 1.0, 100.0 * accuracy_from_logits(forward(m, test.images).logits, test.labels))
        for tag, m in ((MODEL1_TAG, model1), (MODEL2_TAG, model2))
    ]
    pool = ModelPool([model1, model2], data1.val)
    results = evaluate_methods(CROSSTASK_METHODS, pool, test.images, test.labels)
    rows.extend(_row(cfg, "crosstask", m, 2, 1.0, 100.0 * a) for m, a in results.items())
    append_csv(rows, _fresh(out / "crosstask.csv"), ResultRow)
    logger.info("Cross-task: " + ", ".join(f"{r.method}={r.value:.2f}" for r in rows))
    return rows


COMMANDS: Dict[str, Callable[[ExperimentConfig, int], object]] = {
    "train": cmd_train,
    "compare": cmd_compare,
    "magnitude": cmd_magnitude,
    "templates": cmd_templates,
    "bounds": cmd_bounds,
    "crosstask": cmd_crosstask,
}


def verify(command: str, cfg: ExperimentConfig, jobs: int = 1) -> List[str]:
    """
    Re-run a command in a scratch directory and diff its CSVs against cfg.output_dir.

    Returns:
        List[str]: Names of CSV files that are missing or differ; empty when reproduced.

    Raises:
        DomainError: If the command is unknown.
    """
    if command not in COMMANDS:
        raise DomainError(f"unknown command {command!r}; choose from {sorted(COMMANDS)}")
    out = Path(cfg.output_dir)
    with tempfile.TemporaryDirectory(prefix="merge-lab-verify-") as scratch:
        COMMANDS[command](cfg.model_copy(update={"output_dir": scratch}), jobs)
        produced = sorted(Path(scratch).glob("*.csv"))
        mismatched = [
            path.name
            for path in produced
            if not (out / path.name).exists() or not filecmp.cmp(path, out / path.name, shallow=False)
        ]
    for name in mismatched:
        logger.error(f"Reproduction mismatch: {name}")
    if not produced:
        logger.warning(f"Command {command} produced no CSV files to compare")
    return mismatched
