"""End-to-end experiment: simulate, train sources, filter, transfer, fine-tune, evaluate.

Each stage is a plain function; :func:`run_pipeline` chains them and the
CLI exposes each one as a subcommand over the same files, so a pipeline
run and the equivalent sequence of subcommands write identical bytes.

Per run seed ``s`` the layout under ``output_dir`` is::

    cohorts/seed_<s>/<site>.csv (+ .json sidecar)
    models/seed_<s>/<site>.json, fatl.json, uniform_average.json, target_only.json
    reports/seed_<s>/transfer_report.json, uniform_transfer_report.json, comparison.csv
    reports/filter.json, summary.csv, summary.txt, summary.json, transfer_report.json
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from contextlib import contextmanager
from importlib import resources
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import (
    Cohort,
    PopulationSpec,
    derive_seed,
    generate_cohort,
    load_spec,
    save_cohort,
    shift_population,
    split_cohort,
)
from .errors import ConfigError, DegenerateFeature, FatlError, SchemaError, StageError
from .evaluation import (
    METRICS,
    EvalReport,
    auroc,
    compare_conditions,
    format_table,
    model_probabilities,
    reports_from_csv,
    reports_to_csv,
)
from .importance import FeatureFilter, binarize, compute_filter, load_profiles
from .models import ModelMeta, SourceModel, align, model_from_dict, model_to_dict, save_model
from .registry import FeatureRegistry, FeatureStats, fit_stats, impute_matrix, load_registry
from .trainer import TrainConfig, TrainTrace, train_logistic
from .transfer import InitializedTarget, TransferConfig, compute_alphas, fatl_init, target_as_model

log = logging.getLogger("fatl")

CONDITIONS = ("target_only", "single_best_source", "uniform_average", "fatl")
IMPUTE_DEFAULT = "zero_after_standardize"
SOURCE_TRAIN_DEFAULT = TrainConfig(learning_rate=0.5, epochs=500, l2_weight=1e-3)
FINETUNE_DEFAULT = TrainConfig(learning_rate=0.1, epochs=100, l2_weight=1e-2)


def safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TargetShift:
    feature_id: str
    delta_mean: float = 0.0
    scale_std: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    registry_path: Path
    profiles_paths: tuple[Path, ...]
    population_specs: tuple[Path, ...]
    target_spec_path: Path
    output_dir: Path
    seeds: tuple[int, ...] = (0,)
    target_labeled_n: int = 50
    target_shifts: tuple[TargetShift, ...] = ()
    filter_policy: str = "frequency"
    filter_threshold: float | None = None
    transfer: TransferConfig = TransferConfig()
    train: TrainConfig = FINETUNE_DEFAULT
    source_train: TrainConfig = SOURCE_TRAIN_DEFAULT
    source_holdout_fraction: float = 0.2
    impute_policy: str = IMPUTE_DEFAULT
    trace: bool = False

    def __post_init__(self):
        paths = [self.registry_path, *self.profiles_paths, *self.population_specs, self.target_spec_path]
        resolved = [Path(p).resolve() for p in paths]
        if len(set(resolved)) != len(resolved):
            raise ConfigError("input paths must be distinct")
        if not self.population_specs:
            raise ConfigError("population_specs needs at least one source spec")
        if not self.seeds:
            raise ConfigError("seeds needs at least one entry")
        if int(self.target_labeled_n) != self.target_labeled_n or self.target_labeled_n < 0:
            raise ConfigError("target_labeled_n must be an integer >= 0")
        if not (0 < self.source_holdout_fraction < 1):
            raise ConfigError("source_holdout_fraction must lie in (0, 1)")
        for s in self.seeds:
            if not (0 <= int(s) < 2**64):
                raise ConfigError(f"seed {s} is not a 64-bit unsigned integer")


_CONFIG_KEYS = {
    "registry_path", "profiles_path", "population_specs", "target_spec_path", "output_dir", "seeds",
    "target_labeled_n", "target_shifts", "filter_policy", "filter_threshold", "transfer", "train", "source_train",
    "source_holdout_fraction", "impute_policy",
}


def demo_config_path():
    """The shipped demo experiment config."""
    return resources.files("fatl") / "data" / "demo" / "config.json"


def config_from_dict(doc: dict, base_dir=".", overrides: dict | None = None) -> PipelineConfig:
    """Build a :class:`PipelineConfig`; relative input paths resolve against ``base_dir``.

    ``overrides`` holds command-line values and wins over the file.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    doc = dict(doc)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    base = Path(base_dir)

    def path(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    for key in ("registry_path", "profiles_path", "population_specs", "target_spec_path"):
        if key not in doc:
            raise ConfigError(f"config is missing {key!r}")
    profiles = doc["profiles_path"]
    profiles = [profiles] if isinstance(profiles, str) else list(profiles)

    transfer_doc = dict(doc.get("transfer", {}))
    for cli_key, key in (("alpha_policy", "alpha_policy"), ("lam", "lambda")):
        if cli_key in overrides:
            transfer_doc[key] = overrides[cli_key]
    train_doc = dict(doc.get("train", {}))
    source_doc = dict(doc.get("source_train", {}))
    output_dir = overrides.get("output_dir") or doc.get("output_dir") or "fatl_output"
    # output is relative to the working directory, not the config file
    out = Path(output_dir)

    try:
        return PipelineConfig(
            registry_path=path(doc["registry_path"]),
            profiles_paths=tuple(path(p) for p in profiles),
            population_specs=tuple(path(p) for p in doc["population_specs"]),
            target_spec_path=path(doc["target_spec_path"]),
            output_dir=out,
            seeds=tuple(int(s) for s in overrides.get("seeds") or doc.get("seeds", [0])),
            target_labeled_n=int(overrides.get("target_labeled_n", doc.get("target_labeled_n", 50))),
            target_shifts=tuple(TargetShift(**s) for s in doc.get("target_shifts", [])),
            filter_policy=overrides.get("filter_policy", doc.get("filter_policy", "frequency")),
            filter_threshold=overrides.get("filter_threshold", doc.get("filter_threshold")),
            transfer=TransferConfig.from_dict(transfer_doc),
            train=replace(FINETUNE_DEFAULT, **train_doc),
            source_train=replace(SOURCE_TRAIN_DEFAULT, **source_doc),
            source_holdout_fraction=float(doc.get("source_holdout_fraction", 0.2)),
            impute_policy=doc.get("impute_policy", IMPUTE_DEFAULT),
            trace=bool(overrides.get("trace", False)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except FatlError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StageError("config", "file not found", path) from None
    except json.JSONDecodeError as exc:
        raise StageError("config", f"invalid JSON: {exc}", path) from None
    try:
        return config_from_dict(doc, path.parent, overrides)
    except ConfigError as exc:
        raise StageError("config", str(exc), path) from None


# -- stages --------------------------------------------------------------------------


def simulate_site(spec: PopulationSpec, registry: FeatureRegistry, run_seed: int | None = None) -> Cohort:
    """Generate a site cohort; with ``run_seed`` the population seed is re-derived from it."""
    if run_seed is not None:
        spec = replace(spec, seed=derive_seed(run_seed, "cohort", spec.site_id))
    return generate_cohort(spec, registry)


def apply_shifts(spec: PopulationSpec, shifts: Sequence[TargetShift]) -> PopulationSpec:
    for s in shifts:
        spec = shift_population(spec, s.feature_id, s.delta_mean, s.scale_std)
    return spec


def _stats_with_fallback(values, observed, feature_ids, fallback: FeatureStats | None) -> FeatureStats:
    means = np.zeros(values.shape[1])
    stds = np.ones(values.shape[1])
    for j in range(values.shape[1]):
        try:
            st = fit_stats(values[:, [j]], observed[:, [j]], [feature_ids[j]])
            means[j], stds[j] = st.means[0], st.stds[0]
        except DegenerateFeature:
            if fallback is not None:
                means[j], stds[j] = fallback.means[j], fallback.stds[j]
    return FeatureStats(means, stds)


def train_source(
    cohort: Cohort,
    registry: FeatureRegistry,
    config: TrainConfig = SOURCE_TRAIN_DEFAULT,
    holdout_fraction: float = 0.2,
    impute_policy: str = IMPUTE_DEFAULT,
) -> tuple[SourceModel, TrainTrace]:
    """Fit one site's model over the features the site actually records.

    A seeded share of the cohort is held out to measure ``reported_auroc``;
    the split seed comes from ``config.seed`` and the site id.
    """
    n = len(cohort)
    n_train = n - int(round(n * holdout_fraction))
    train, holdout = split_cohort(cohort, n_train, derive_seed(config.seed, "source-split", cohort.site_id))
    native = [j for j in range(len(cohort.feature_ids)) if train.observed[:, j].sum() >= 2]
    if not native:
        raise DegenerateFeature(f"{cohort.site_id}: no recorded features")
    ids = tuple(cohort.feature_ids[j] for j in native)
    stats = fit_stats(train.values[:, native], train.observed[:, native], ids)
    X = impute_matrix(train.values[:, native], train.observed[:, native], impute_policy, stats)
    fitted, trace = train_logistic(X, train.labels, None, config)

    reported = None
    if len(holdout) and 0 < holdout.labels.sum() < len(holdout):
        Xh = impute_matrix(holdout.values[:, native], holdout.observed[:, native], impute_policy, stats)
        reported = max(0.5, auroc(Xh @ fitted.weights + fitted.bias, holdout.labels))
    model = SourceModel(
        cohort.site_id, ids, fitted.weights, fitted.bias, stats,
        ModelMeta(len(train), cohort.site_id, reported),
    )
    return model, trace


def transfer_report(
    models: Sequence[SourceModel],
    registry: FeatureRegistry,
    filt: FeatureFilter,
    config: TransferConfig,
    init_id: str = "fatl_init",
) -> tuple[InitializedTarget, SourceModel, dict]:
    """Align sources, compute alphas and the filtered initialization."""
    aligned = [align(m, registry) for m in models]
    alphas = compute_alphas(models, config)
    init = fatl_init(aligned, alphas, filt, config)
    model = target_as_model(init, registry, init_id, sum(m.meta.cohort_size for m in models))
    report = {
        "format_version": 1,
        "inputs": {
            "source_model_ids": [m.model_id for m in models],
            "feature_ids": list(registry.ids),
            "transfer": config.to_dict(),
            "filter": filt.to_dict(),
        },
        "alphas": [float(a) for a in init.alphas],
        "bias_anchor": init.bias_anchor,
        "bias_prior": init.bias_prior,
        "lambda": init.lam,
        "weights": [float(w) for w in init.weights],
        "bias": init.bias,
        "init_model": model_to_dict(model),
    }
    return init, model, report


def init_from_report(report: dict) -> tuple[SourceModel, float, float]:
    """``(init model, lambda, bias anchor)`` stored in a transfer report."""
    for key in ("init_model", "lambda", "bias_anchor"):
        if key not in report:
            raise SchemaError(key, "missing from transfer report")
    return model_from_dict(report["init_model"]), float(report["lambda"]), float(report["bias_anchor"])


def target_split_seed(run_seed: int, site_id: str) -> int:
    return derive_seed(run_seed, "target-split", site_id)


def finetune(
    init: SourceModel | None,
    cohort: Cohort,
    registry: FeatureRegistry,
    config: TrainConfig,
    labeled_n: int,
    split_seed: int,
    *,
    lam: float = 0.0,
    bias_anchor: float = 0.0,
    model_id: str = "target",
    impute_policy: str = IMPUTE_DEFAULT,
) -> tuple[SourceModel, TrainTrace | None]:
    """Fine-tune ``init`` (or train from zero when ``None``) on the labeled share.

    With ``labeled_n == 0`` nothing is fitted: the initialization is returned
    as-is under ``model_id`` (zero-shot), or a constant model when there is
    no initialization.
    """
    m = registry.m
    if init is not None and init.feature_ids != registry.ids:
        raise SchemaError("feature_ids", "initialization must cover the registry in order")
    if labeled_n == 0:
        if init is None:
            const = SourceModel(model_id, registry.ids, np.zeros(m), 0.0,
                                FeatureStats(np.zeros(m), np.ones(m)), ModelMeta(1, "no-data"))
            return const, None
        return replace(init, model_id=model_id), None

    labeled, _ = split_cohort(cohort, labeled_n, split_seed)
    fallback = init.standardization if init is not None else None
    stats = _stats_with_fallback(labeled.values, labeled.observed, registry.ids, fallback)
    X = impute_matrix(labeled.values, labeled.observed, impute_policy, stats)
    start = None if init is None else (init.weights, init.bias)
    cfg = replace(config, bias_anchor_lambda=lam, bias_anchor_value=bias_anchor)
    fitted, trace = train_logistic(X, labeled.labels, start, cfg)
    model = SourceModel(model_id, registry.ids, fitted.weights, fitted.bias, stats,
                        ModelMeta(labeled_n, f"finetune:{cohort.site_id}"))
    return model, trace


def best_source(models: Sequence[SourceModel]) -> SourceModel:
    """Highest reported AUROC; the earliest model wins ties, unreported counts as 0.5."""
    return max(models, key=lambda mdl: mdl.meta.reported_auroc if mdl.meta.reported_auroc is not None else 0.5)


# -- reporting -----------------------------------------------------------------------


def _seed_dirs(reports_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for p in reports_dir.glob("seed_*"):
        m = re.fullmatch(r"seed_(\d+)", p.name)
        if m and (p / "comparison.csv").exists():
            found.append((int(m.group(1)), p))
    return sorted(found)


def _sample_std(xs) -> float | None:
    if len(xs) < 2:
        return None
    mean = math.fsum(xs) / len(xs)
    return math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (len(xs) - 1))


def summarize(per_seed: dict[int, list[EvalReport]]) -> dict:
    """Seed-aggregated mean and sample std per condition and metric."""
    seeds = sorted(per_seed)
    tags = []
    for s in seeds:
        for r in per_seed[s]:
            if r.condition_tag not in tags:
                tags.append(r.condition_tag)
    ordered = [t for t in CONDITIONS if t in tags] + [t for t in tags if t not in CONDITIONS]
    rows = []
    for tag in ordered:
        reps = [r for s in seeds for r in per_seed[s] if r.condition_tag == tag]
        row = {"condition": tag, "n_seeds": len(reps)}
        for metric in METRICS:
            xs = [getattr(r, metric) for r in reps]
            row[f"{metric}_mean"] = math.fsum(xs) / len(xs)
            row[f"{metric}_std"] = _sample_std(xs)
        rows.append(row)
    by_tag = {r["condition"]: r for r in rows}
    checks = []
    for other in ("uniform_average", "target_only"):
        if "fatl" in by_tag and other in by_tag:
            a, b = by_tag["fatl"]["auroc_mean"], by_tag[other]["auroc_mean"]
            checks.append({"claim": f"fatl >= {other}", "fatl": a, other: b, "holds": a >= b})
    return {"format_version": 1, "synthetic": True, "seeds": seeds, "rows": rows, "ordering_checks": checks}


def summary_csv(summary: dict) -> str:
    cols = ["condition", "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    lines = [",".join(cols)]
    for row in summary["rows"]:
        cells = []
        for c in cols:
            v = row[c]
            cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def summary_text(summary: dict) -> str:
    header = ["condition", "seeds", "auroc", "auroc_sd", "sens", "spec", "brier"]
    rows = []
    for r in summary["rows"]:
        sd = r["auroc_std"]
        rows.append([r["condition"], r["n_seeds"], r["auroc_mean"], "n/a" if sd is None else sd,
                     r["sensitivity_mean"], r["specificity_mean"], r["brier_mean"]])
    text = "Synthetic cohorts; values are seed means (sample std for AUROC).\n"
    text += f"seeds: {len(summary['seeds'])}\n\n" + format_table(header, rows) + "\n"
    for chk in summary["ordering_checks"]:
        status = "ok" if chk["holds"] else "INVERSION"
        other = [k for k in chk if k not in ("claim", "fatl", "holds")][0]
        text += f"{status}: {chk['claim']} (fatl {chk['fatl']:.4f} vs {other} {chk[other]:.4f})\n"
    return text


def write_summary(reports_dir) -> dict:
    """Aggregate ``seed_*/comparison.csv`` and ``seed_*/transfer_report.json`` under ``reports_dir``."""
    reports_dir = Path(reports_dir)
    seed_dirs = _seed_dirs(reports_dir)
    if not seed_dirs:
        raise StageError("report", "no seed_*/comparison.csv found", reports_dir)
    per_seed = {s: reports_from_csv((d / "comparison.csv").read_text(encoding="utf-8")) for s, d in seed_dirs}
    summary = summarize(per_seed)
    write_text(reports_dir / "summary.csv", summary_csv(summary))
    write_text(reports_dir / "summary.txt", summary_text(summary))
    write_text(reports_dir / "summary.json", _dump_json(summary))
    runs = []
    for s, d in seed_dirs:
        tr = d / "transfer_report.json"
        if tr.exists():
            runs.append({"seed": s, "report": json.loads(tr.read_text(encoding="utf-8"))})
    if runs:
        write_text(reports_dir / "transfer_report.json", _dump_json({"format_version": 1, "runs": runs}))
    for chk in summary["ordering_checks"]:
        if not chk["holds"]:
            log.warning("ordering inverted: %s does not hold on seed means", chk["claim"])
    return summary


# -- orchestration --------------------------------------------------------------------


@contextmanager
def _stage(name, path=None):
    """Re-raise anything a stage throws as a :class:`StageError` naming it."""
    try:
        yield
    except StageError:
        raise
    except (FatlError, ValueError, OSError, KeyError) as exc:
        raise StageError(name, str(exc), path) from exc


@dataclass
class LoadedInputs:
    registry: FeatureRegistry
    profiles: list
    sources: list[PopulationSpec]
    target: PopulationSpec


def load_inputs(config: PipelineConfig) -> LoadedInputs:
    with _stage("registry", config.registry_path):
        registry, _ = load_registry(config.registry_path)
    profiles = []
    for p in config.profiles_paths:
        with _stage("profiles", p):
            profiles.extend(load_profiles(p))
    sources = []
    for p in config.population_specs:
        with _stage("population_spec", p):
            spec = load_spec(p)
            spec.validate(registry)
            sources.append(spec)
    with _stage("target_spec", config.target_spec_path):
        target = apply_shifts(load_spec(config.target_spec_path), config.target_shifts)
        target.validate(registry)
    return LoadedInputs(registry, profiles, sources, target)


def compute_run_filter(config: PipelineConfig, inputs: LoadedInputs) -> FeatureFilter:
    with _stage("filter", config.profiles_paths[0]):
        filt = compute_filter(inputs.profiles, inputs.registry, config.filter_policy)
        if config.filter_threshold is not None:
            filt = binarize(filt, config.filter_threshold)
        return filt


def run_seed(config: PipelineConfig, inputs: LoadedInputs, filt: FeatureFilter, seed: int) -> list[EvalReport]:
    """One full pass of the experiment for a single run seed; writes its files."""
    out = Path(config.output_dir)
    tag = f"seed_{seed}"
    registry = inputs.registry
    cohort_dir, model_dir, report_dir = out / "cohorts" / tag, out / "models" / tag, out / "reports" / tag

    models = []
    for spec in inputs.sources:
        with _stage("simulate", cohort_dir / f"{safe_name(spec.site_id)}.csv"):
            cohort = simulate_site(spec, registry, seed)
            save_cohort(cohort, cohort_dir / f"{safe_name(spec.site_id)}.csv")
        with _stage("train-source", model_dir / f"{safe_name(spec.site_id)}.json"):
            model, trace = train_source(cohort, registry, replace(config.source_train, seed=seed),
                                        config.source_holdout_fraction, config.impute_policy)
            save_model(model, model_dir / f"{safe_name(spec.site_id)}.json")
            if config.trace:
                trace.write_csv(report_dir / "traces" / f"{safe_name(spec.site_id)}.csv")
        models.append(model)

    with _stage("transfer", report_dir / "transfer_report.json"):
        fatl, fatl_model, fatl_report = transfer_report(models, registry, filt, config.transfer, "fatl_init")
        write_text(report_dir / "transfer_report.json", _dump_json(fatl_report))
        uniform_cfg = TransferConfig("uniform", 0.0, "source_mean")
        uni, uni_model, uni_report = transfer_report(
            models, registry, FeatureFilter.ones(registry.m), uniform_cfg, "uniform_init"
        )
        write_text(report_dir / "uniform_transfer_report.json", _dump_json(uni_report))
        log.info("seed %d: alphas=%s F=%s b_anchor=%r", seed, list(fatl.alphas), list(filt.values), fatl.bias_anchor)

    target_file = cohort_dir / f"{safe_name(inputs.target.site_id)}.csv"
    with _stage("simulate", target_file):
        target = simulate_site(inputs.target, registry, seed)
        save_cohort(target, target_file)
    split_seed = target_split_seed(seed, target.site_id)
    n_lab = config.target_labeled_n

    tuned = {}
    jobs = (
        ("target_only", None, 0.0, 0.0),
        ("uniform_average", uni_model, uni.lam, uni.bias_anchor),
        ("fatl", fatl_model, fatl.lam, fatl.bias_anchor),
    )
    for cond, init, lam, anchor in jobs:
        with _stage("finetune", model_dir / f"{cond}.json"):
            model, trace = finetune(init, target, registry, config.train, n_lab, split_seed,
                                    lam=lam, bias_anchor=anchor, model_id=cond,
                                    impute_policy=config.impute_policy)
            save_model(model, model_dir / f"{cond}.json")
            if config.trace and trace is not None:
                trace.write_csv(report_dir / "traces" / f"{cond}.csv")
        tuned[cond] = model

    conditions = [
        ("target_only", tuned["target_only"]),
        ("single_best_source", best_source(models)),
        ("uniform_average", tuned["uniform_average"]),
        ("fatl", tuned["fatl"]),
    ]
    with _stage("evaluate", report_dir / "comparison.csv"):
        reports = compare_conditions(target, conditions, registry, seed=split_seed, labeled_n=n_lab)
        write_text(report_dir / "comparison.csv", reports_to_csv(reports))
    return reports


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every seed, then write the seed-aggregated summary. Returns the summary."""
    inputs = load_inputs(config)
    filt = compute_run_filter(config, inputs)
    out = Path(config.output_dir)
    write_text(out / "reports" / "filter.json", _dump_json(filt.to_dict(inputs.registry)))
    for seed in sorted(set(config.seeds)):
        log.info("running seed %d", seed)
        run_seed(config, inputs, filt, seed)
    with _stage("report", out / "reports"):
        return write_summary(out / "reports")
