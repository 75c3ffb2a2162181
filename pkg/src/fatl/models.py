"""Source/target logistic models and their alignment to the registry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, SchemaError, VersionMismatch
from .registry import FeatureRegistry, FeatureStats, impute_matrix

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelMeta:
    cohort_size: int
    population_tag: str = ""
    reported_auroc: float | None = None

    def __post_init__(self):
        if int(self.cohort_size) != self.cohort_size or self.cohort_size < 1:
            raise SchemaError("meta.cohort_size", "must be a positive integer")
        object.__setattr__(self, "cohort_size", int(self.cohort_size))
        if self.reported_auroc is not None:
            auc = float(self.reported_auroc)
            if not (0.5 <= auc <= 1.0):
                raise SchemaError("meta.reported_auroc", "must lie in [0.5, 1.0]")
            object.__setattr__(self, "reported_auroc", auc)


@dataclass(frozen=True, eq=False)
class SourceModel:
    """A logistic model over its own ("native") ordered feature list.

    ``standardization`` holds the training mean/std of each native feature;
    inputs are standardized with it before the linear score is taken.
    """

    model_id: str
    feature_ids: tuple[str, ...]
    weights: np.ndarray
    bias: float
    standardization: FeatureStats
    meta: ModelMeta

    def __post_init__(self):
        ids = tuple(self.feature_ids)
        weights = np.asarray(self.weights, dtype=float).copy()
        if weights.ndim != 1 or weights.shape[0] != len(ids):
            raise SchemaError("weights", f"expected {len(ids)} weights, got shape {weights.shape}")
        if len(set(ids)) != len(ids):
            raise SchemaError("feature_ids", "duplicate feature id")
        if self.standardization.means.shape[0] != len(ids):
            raise SchemaError("standardization", "length differs from feature_ids")
        weights.setflags(write=False)
        object.__setattr__(self, "feature_ids", ids)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))

    def __eq__(self, other):
        return (
            isinstance(other, SourceModel)
            and self.model_id == other.model_id
            and self.feature_ids == other.feature_ids
            and np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and self.standardization == other.standardization
            and self.meta == other.meta
        )

    __hash__ = None

    def native_score(self, z: np.ndarray) -> np.ndarray:
        """Linear score for standardized inputs already in native order."""
        return np.asarray(z) @ self.weights + self.bias

    def design_matrix(self, registry, values, observed, policy="zero_after_standardize"):
        """Pick this model's columns out of registry-ordered data and standardize."""
        cols = [registry.index(fid) for fid in self.feature_ids]
        values = np.asarray(values, dtype=float)[:, cols]
        observed = np.asarray(observed, dtype=bool)[:, cols]
        return impute_matrix(values, observed, policy, self.standardization)

    def decision_function(self, registry, values, observed) -> np.ndarray:
        return self.native_score(self.design_matrix(registry, values, observed))


@dataclass(frozen=True, eq=False)
class AlignedModel:
    """A model re-expressed in registry order.

    ``means``/``stds`` carry the source standardization in registry order
    (0/1 where not covered) so transferred models can be applied to data.
    """

    weights: np.ndarray
    bias: float
    coverage: np.ndarray
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    model_id: str = ""

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).copy()
        coverage = np.asarray(self.coverage, dtype=bool).copy()
        if weights.shape != coverage.shape or weights.ndim != 1:
            raise ValueError("weights and coverage must be vectors of equal length")
        if np.any(weights[~coverage] != 0):
            raise ValueError("weights must be zero where coverage is false")
        for arr in (weights, coverage):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "coverage", coverage)
        object.__setattr__(self, "bias", float(self.bias))
        m = weights.shape[0]
        means = np.zeros(m) if self.means is None else np.asarray(self.means, dtype=float)
        stds = np.ones(m) if self.stds is None else np.asarray(self.stds, dtype=float)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def score(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.weights + self.bias


def align(model: SourceModel, registry: FeatureRegistry) -> AlignedModel:
    """Permute a model's weights into registry order, zero-filling gaps."""
    m = registry.m
    weights = np.zeros(m)
    coverage = np.zeros(m, dtype=bool)
    means = np.zeros(m)
    stds = np.ones(m)
    for k, fid in enumerate(model.feature_ids):
        if fid not in registry:
            raise AlignmentError(fid)
        j = registry.index(fid)
        weights[j] = model.weights[k]
        coverage[j] = True
        means[j] = model.standardization.means[k]
        stds[j] = model.standardization.stds[k]
    return AlignedModel(weights, model.bias, coverage, means, stds, model.model_id)


def as_source_model(
    aligned: AlignedModel,
    registry: FeatureRegistry,
    model_id: str,
    meta: ModelMeta,
) -> SourceModel:
    """Wrap a registry-ordered weight vector as a full-coverage model."""
    return SourceModel(
        model_id,
        registry.ids,
        aligned.weights,
        aligned.bias,
        FeatureStats(aligned.means, aligned.stds),
        meta,
    )


# -- serialization -------------------------------------------------------------


def model_to_dict(model: SourceModel) -> dict:
    # key order is part of the file contract
    return {
        "format_version": FORMAT_VERSION,
        "model_id": model.model_id,
        "feature_ids": list(model.feature_ids),
        "weights": [float(w) for w in model.weights],
        "bias": [model.bias],
        "standardization": {
            "means": [float(v) for v in model.standardization.means],
            "stds": [float(v) for v in model.standardization.stds],
        },
        "meta": {
            "cohort_size": model.meta.cohort_size,
            "population_tag": model.meta.population_tag,
            "reported_auroc": model.meta.reported_auroc,
        },
    }


def dumps_model(model: SourceModel) -> str:
    # repr-based float output is the shortest string that round-trips exactly
    return json.dumps(model_to_dict(model), indent=2, allow_nan=False) + "\n"


def _require(doc, key, path, kind):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(path, "missing")
    value = doc[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(path, "expected a number")
    elif kind is list:
        if not isinstance(value, list):
            raise SchemaError(path, "expected an array")
    elif not isinstance(value, kind):
        raise SchemaError(path, f"expected {kind.__name__}")
    return value


def _number_list(doc, key, path):
    values = _require(doc, key, path, list)
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{path}[{i}]", "expected a number")
    return [float(v) for v in values]


def model_from_dict(doc) -> SourceModel:
    if not isinstance(doc, dict):
        raise SchemaError("", "expected an object")
    allowed = ("format_version", "model_id", "feature_ids", "weights", "bias", "standardization", "meta")
    for key in doc:
        if key not in allowed:
            raise SchemaError(key, "unknown key")
    version = _require(doc, "format_version", "format_version", int)
    if version != FORMAT_VERSION:
        raise VersionMismatch("format_version", f"expected {FORMAT_VERSION}, got {version}")
    model_id = _require(doc, "model_id", "model_id", str)
    feature_ids = _require(doc, "feature_ids", "feature_ids", list)
    for i, fid in enumerate(feature_ids):
        if not isinstance(fid, str):
            raise SchemaError(f"feature_ids[{i}]", "expected a string")
    weights = _number_list(doc, "weights", "weights")
    bias = _number_list(doc, "bias", "bias")
    if len(bias) != 1:
        raise SchemaError("bias", "expected a single-element array")
    std_doc = _require(doc, "standardization", "standardization", dict)
    means = _number_list(std_doc, "means", "standardization.means")
    stds = _number_list(std_doc, "stds", "standardization.stds")
    meta_doc = _require(doc, "meta", "meta", dict)
    cohort_size = _require(meta_doc, "cohort_size", "meta.cohort_size", int)
    tag = _require(meta_doc, "population_tag", "meta.population_tag", str)
    auroc = meta_doc.get("reported_auroc")
    if auroc is not None and (isinstance(auroc, bool) or not isinstance(auroc, (int, float))):
        raise SchemaError("meta.reported_auroc", "expected a number or null")
    if len(means) != len(feature_ids) or len(stds) != len(feature_ids):
        raise SchemaError("standardization", "length differs from feature_ids")
    return SourceModel(
        model_id,
        tuple(feature_ids),
        np.array(weights),
        bias[0],
        FeatureStats(np.array(means), np.array(stds)),
        ModelMeta(cohort_size, tag, auroc),
    )


def save_model(model: SourceModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> SourceModel:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError("", f"invalid JSON: {exc}") from None
    return model_from_dict(doc)
