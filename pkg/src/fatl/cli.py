"""Command-line entry point: ``fatl <subcommand>``.

Precedence for every setting is command line, then ``--config`` file, then
built-in defaults. Logging verbosity comes from ``FATL_LOG``
(``error``, ``info`` or ``debug``); unset means warnings only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .cohort import load_cohort, load_spec, save_cohort, shift_population
from .errors import FatlError, StageError
from .evaluation import compare_conditions, reports_table, reports_to_csv
from .importance import FeatureFilter, binarize, compute_filter, load_profiles
from .models import load_model, save_model
from .registry import default_registry_path, load_registry
from .trainer import TrainConfig
from .transfer import TransferConfig

log = logging.getLogger("fatl")

_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = _LEVELS.get(os.environ.get("FATL_LOG", "warning").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StageError("config", "file not found", path) from None
    except json.JSONDecodeError as exc:
        raise StageError("config", f"invalid JSON: {exc}", path) from None


def _registry(path):
    path = path or default_registry_path()
    with pl._stage("registry", path):
        return load_registry(path)[0]


def _train_config(doc, section, default, seed=None):
    cfg = replace(default, **doc.get(section, {}))
    return cfg if seed is None else replace(cfg, seed=seed)


# -- subcommands --------------------------------------------------------------------


def cmd_registry_validate(args):
    path = args.path or default_registry_path()
    with pl._stage("registry-validate", path):
        registry, rules = load_registry(path)
    print(f"OK, {registry.m} features")
    return 0


def cmd_simulate(args):
    registry = _registry(args.registry)
    with pl._stage("simulate", args.spec):
        spec = load_spec(args.spec)
        for item in args.shift or []:
            fid, delta, scale = item.split(":")
            spec = shift_population(spec, fid, float(delta), float(scale))
        cohort = pl.simulate_site(spec, registry, args.seed)
        save_cohort(cohort, args.output)
    print(f"{cohort.site_id}: {len(cohort)} patients, prevalence {cohort.prevalence:.3f} -> {args.output}")
    return 0


def cmd_train_source(args):
    doc = _read_config(args.config)
    registry = _registry(args.registry)
    cfg = _train_config(doc, "source_train", pl.SOURCE_TRAIN_DEFAULT, args.seed)
    holdout = args.holdout if args.holdout is not None else float(doc.get("source_holdout_fraction", 0.2))
    impute = doc.get("impute_policy", pl.IMPUTE_DEFAULT)
    with pl._stage("train-source", args.cohort):
        cohort = load_cohort(args.cohort, registry)
        model, trace = pl.train_source(cohort, registry, cfg, holdout, impute)
        save_model(model, args.output)
        if args.trace:
            trace.write_csv(args.trace)
    print(f"{model.model_id}: {len(model.feature_ids)} features, reported_auroc={model.meta.reported_auroc}")
    return 0


def cmd_filter(args):
    doc = _read_config(args.config)
    registry = _registry(args.registry)
    policy = args.policy or doc.get("filter_policy", "frequency")
    threshold = args.binarize if args.binarize is not None else doc.get("filter_threshold")
    with pl._stage("filter", args.profiles[0]):
        profiles = load_profiles(*args.profiles)
        filt = compute_filter(profiles, registry, policy)
        if threshold is not None:
            filt = binarize(filt, threshold)
    pl.write_text(args.output, pl._dump_json(filt.to_dict(registry)))
    print(f"F ({filt.policy_tag}):")
    for fid, v in zip(registry.ids, filt.values):
        print(f"  {fid:20s} {v:.6g}")
    return 0


def cmd_transfer(args):
    doc = _read_config(args.config)
    registry = _registry(args.registry)
    tdoc = dict(doc.get("transfer", {}))
    if args.policy is not None:
        tdoc["alpha_policy"] = args.policy
    if args.alphas is not None:
        tdoc["alpha_policy"] = "explicit"
        tdoc["alpha_values"] = args.alphas
    if args.lam is not None:
        tdoc["lambda"] = args.lam
    if args.bias_prior is not None:
        prior = args.bias_prior
        tdoc["bias_prior"] = prior if prior in ("source_mean", "zero") else float(prior)
    with pl._stage("transfer", args.filter or args.models[0]):
        config = TransferConfig.from_dict(tdoc)
        models = [load_model(p) for p in args.models]
        if args.filter:
            filt = FeatureFilter.from_dict(json.loads(Path(args.filter).read_text(encoding="utf-8")), registry)
        else:
            filt = FeatureFilter.ones(registry.m)
        init, _, report = pl.transfer_report(models, registry, filt, config, args.init_id)
    pl.write_text(args.output, pl._dump_json(report))
    print("alpha = [" + ", ".join(f"{a:.6g}" for a in init.alphas) + "]")
    print("F     = [" + ", ".join(f"{v:.6g}" for v in filt.values) + "]")
    print(f"b_bar = {init.bias_anchor:.6g}")
    print(f"b_t   = {init.bias:.6g} (lambda={init.lam:g})")
    return 0


def cmd_finetune(args):
    doc = _read_config(args.config)
    registry = _registry(args.registry)
    cfg = _train_config(doc, "train", pl.FINETUNE_DEFAULT)
    labeled_n = args.labeled_n if args.labeled_n is not None else int(doc.get("target_labeled_n", 50))
    impute = doc.get("impute_policy", pl.IMPUTE_DEFAULT)
    with pl._stage("finetune", args.transfer or args.cohort):
        cohort = load_cohort(args.cohort, registry)
        if args.transfer:
            report = json.loads(Path(args.transfer).read_text(encoding="utf-8"))
            init, lam, anchor = pl.init_from_report(report)
        else:
            init, lam, anchor = None, 0.0, 0.0
        if args.lam is not None:
            lam = args.lam
        split_seed = pl.target_split_seed(args.seed, cohort.site_id)
        model, trace = pl.finetune(init, cohort, registry, cfg, labeled_n, split_seed,
                                   lam=lam, bias_anchor=anchor, model_id=args.model_id,
                                   impute_policy=impute)
        save_model(model, args.output)
        if args.trace and trace is not None:
            trace.write_csv(args.trace)
    if trace is None:
        print(f"{args.model_id}: zero-shot, no fine-tuning")
    else:
        print(f"{args.model_id}: {trace.epochs_run} epochs, loss {trace.initial_loss:.6g} -> {trace.losses[-1]:.6g}")
    return 0


def cmd_evaluate(args):
    doc = _read_config(args.config)
    registry = _registry(args.registry)
    labeled_n = args.labeled_n if args.labeled_n is not None else int(doc.get("target_labeled_n", 50))
    with pl._stage("evaluate", args.cohort):
        cohort = load_cohort(args.cohort, registry)
        conditions = []
        for item in args.model:
            tag, _, path = item.partition("=")
            if not path:
                raise ValueError(f"--model expects TAG=PATH, got {item!r}")
            conditions.append((tag, load_model(path)))
        split_seed = pl.target_split_seed(args.seed, cohort.site_id)
        reports = compare_conditions(cohort, conditions, registry, seed=split_seed, labeled_n=labeled_n)
    if args.output:
        pl.write_text(args.output, reports_to_csv(reports))
    print(reports_table(reports), end="")
    return 0


def cmd_report(args):
    summary = pl.write_summary(args.reports_dir)
    print(pl.summary_text(summary), end="")
    return 0


def cmd_run(args):
    overrides = {
        "output_dir": args.output,
        "seeds": args.seed,
        "trace": args.trace or None,
        "alpha_policy": args.policy,
        "lam": args.lam,
        "filter_policy": args.filter_policy,
        "target_labeled_n": args.labeled_n,
    }
    config = pl.load_config(args.config, overrides)
    summary = pl.run_pipeline(config)
    print(pl.summary_text(summary), end="")
    print(f"artifacts written to {config.output_dir}")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fatl", description="Feature-aligned transfer learning pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run the whole pipeline from a config file")
    s.add_argument("--config", required=True, help="pipeline config JSON")
    s.add_argument("--seed", type=int, action="append", help="run seed (repeatable; replaces config seeds)")
    s.add_argument("--output", help="output directory")
    s.add_argument("--trace", action="store_true", help="write per-training loss traces")
    s.add_argument("--policy", help="alpha policy: uniform, cohort_size, performance")
    s.add_argument("--lambda", dest="lam", type=float, help="bias penalty coefficient")
    s.add_argument("--filter-policy", help="frequency, mean_normalized or top_k_binary(k,q)")
    s.add_argument("--labeled-n", type=int, help="labeled target records for fine-tuning (0 = zero-shot)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("registry-validate", help="check a registry + rules file")
    s.add_argument("path", nargs="?", help="registry JSON (default: shipped registry)")
    s.set_defaults(func=cmd_registry_validate)

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    s.add_argument("--spec", required=True)
    s.add_argument("--registry")
    s.add_argument("--seed", type=int, help="run seed; the cohort seed is derived from it and the site id")
    s.add_argument("--shift", action="append", metavar="FEATURE:DELTA:SCALE")
    s.add_argument("--output", required=True, help="cohort CSV path")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-source", help="train a source model on a cohort")
    s.add_argument("--cohort", required=True)
    s.add_argument("--registry")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, help="seed for the holdout split")
    s.add_argument("--holdout", type=float, help="holdout fraction")
    s.add_argument("--trace", help="write the loss trace CSV here")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_train_source)

    s = sub.add_parser("filter", help="compute the feature filter from importance profiles")
    s.add_argument("--profiles", nargs="+", required=True)
    s.add_argument("--registry")
    s.add_argument("--config")
    s.add_argument("--policy", help="frequency, mean_normalized or top_k_binary(k,q)")
    s.add_argument("--binarize", type=float, metavar="THRESHOLD")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("transfer", help="combine source models into a target initialization")
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--registry")
    s.add_argument("--config")
    s.add_argument("--filter", help="filter JSON (default: all ones)")
    s.add_argument("--policy", help="alpha policy: uniform, cohort_size, performance")
    s.add_argument("--alphas", type=float, nargs="+", help="explicit alphas")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--bias-prior", help="source_mean, zero or a number")
    s.add_argument("--init-id", default="fatl_init")
    s.add_argument("--output", required=True, help="transfer report JSON")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("finetune", help="fine-tune an initialization on labeled target records")
    s.add_argument("--cohort", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--transfer", help="transfer report JSON holding the initialization")
    src.add_argument("--scratch", action="store_true", help="train from zero (target_only)")
    s.add_argument("--registry")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, required=True, help="run seed; the split seed is derived from it")
    s.add_argument("--labeled-n", type=int)
    s.add_argument("--lambda", dest="lam", type=float, help="override the bias penalty")
    s.add_argument("--model-id", default="target")
    s.add_argument("--trace")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="compare models on the held-out target split")
    s.add_argument("--cohort", required=True)
    s.add_argument("--model", action="append", required=True, metavar="TAG=PATH")
    s.add_argument("--registry")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--labeled-n", type=int)
    s.add_argument("--output", help="comparison CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="aggregate per-seed comparisons")
    s.add_argument("reports_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FatlError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
