"""Canonical feature space and harmonization of heterogeneous raw records.

A :class:`FeatureRegistry` fixes the order of the ``m`` canonical features.
Every weight vector, filter and record in the package is indexed in that
order. Raw records arrive keyed by site-specific field names in
site-specific units; :func:`harmonize_record` maps them through affine
:class:`HarmonizationRule` objects onto the registry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AmbiguousMapping,
    DegenerateFeature,
    DuplicateFeature,
    EmptyRegistry,
    InvalidDescriptor,
    SchemaError,
    UnknownFeature,
)

CATEGORIES = ("vital_sign", "lab_value", "demographic")
IMPUTE_POLICIES = ("zero_after_standardize", "population_mean")


@dataclass(frozen=True)
class FeatureDescriptor:
    id: str
    display_name: str
    category: str
    canonical_unit: str
    plausible_range: tuple[float, float]
    higher_is_worse: bool = True

    def __post_init__(self):
        if not self.id or self.id != self.id.lower() or not self.id.replace("_", "").isalnum():
            raise InvalidDescriptor(f"feature id must be lowercase snake case, got {self.id!r}")
        if self.category not in CATEGORIES:
            raise InvalidDescriptor(
                f"{self.id}: category must be one of {CATEGORIES}, got {self.category!r}"
            )
        lo, hi = (float(v) for v in self.plausible_range)
        if not (lo < hi):
            raise InvalidDescriptor(f"{self.id}: inverted plausible_range [{lo}, {hi}]")
        object.__setattr__(self, "plausible_range", (lo, hi))

    def in_range(self, value: float) -> bool:
        lo, hi = self.plausible_range
        return lo <= value <= hi


@dataclass(frozen=True)
class HarmonizationRule:
    """``canonical = scale * raw + offset`` for one source field."""

    alias: str
    target_id: str
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.scale == 0 or not math.isfinite(self.scale) or not math.isfinite(self.offset):
            raise InvalidDescriptor(f"rule {self.alias!r}: scale must be finite and non-zero")

    def apply(self, raw):
        return self.scale * raw + self.offset

    def invert(self, canonical):
        return (canonical - self.offset) / self.scale

    def inverse(self) -> "HarmonizationRule":
        """The rule mapping canonical values back to this alias's units."""
        return HarmonizationRule(self.target_id, self.alias, 1.0 / self.scale, -self.offset / self.scale)


class FeatureRegistry:
    """Ordered, immutable collection of :class:`FeatureDescriptor`."""

    def __init__(self, descriptors: Iterable[FeatureDescriptor]):
        descriptors = tuple(descriptors)
        if not descriptors:
            raise EmptyRegistry("a registry needs at least one feature")
        index = {}
        for pos, d in enumerate(descriptors):
            if d.id in index:
                raise DuplicateFeature(d.id)
            index[d.id] = pos
        self._descriptors = descriptors
        self._index = index

    def __len__(self):
        return len(self._descriptors)

    def __iter__(self):
        return iter(self._descriptors)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self._descriptors[self.index(key)]
        return self._descriptors[key]

    def __contains__(self, feature_id):
        return feature_id in self._index

    def __eq__(self, other):
        return isinstance(other, FeatureRegistry) and self._descriptors == other._descriptors

    def __hash__(self):
        return hash(self._descriptors)

    def __repr__(self):
        return f"FeatureRegistry({list(self.ids)!r})"

    @property
    def m(self) -> int:
        return len(self._descriptors)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self._descriptors)

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.array([d.plausible_range[0] for d in self._descriptors])

    @property
    def upper_bounds(self) -> np.ndarray:
        return np.array([d.plausible_range[1] for d in self._descriptors])

    def index(self, feature_id: str) -> int:
        try:
            return self._index[feature_id]
        except KeyError:
            raise UnknownFeature(feature_id) from None

    def check_ids(self, feature_ids: Iterable[str]) -> None:
        for fid in feature_ids:
            self.index(fid)


def build_registry(descriptors: Sequence[FeatureDescriptor]) -> FeatureRegistry:
    """Build a registry whose index order is the input order."""
    return FeatureRegistry(descriptors)


@dataclass(frozen=True)
class CanonicalRecord:
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        observed = np.asarray(self.observed, dtype=bool)
        if values.shape != observed.shape or values.ndim != 1:
            raise ValueError("values and observed must be 1-D arrays of equal length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    def __eq__(self, other):
        return (
            isinstance(other, CanonicalRecord)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.observed, other.observed)
        )

    __hash__ = None


@dataclass(frozen=True)
class QualityFlags:
    out_of_range: tuple[str, ...] = ()
    missing: tuple[str, ...] = ()
    unmapped_fields: tuple[str, ...] = ()

    @property
    def clean(self) -> bool:
        return not self.out_of_range


def _check_rules(rules: Sequence[HarmonizationRule], registry: FeatureRegistry):
    seen = set()
    for rule in rules:
        if rule.alias in seen:
            raise InvalidDescriptor(f"duplicate rule alias {rule.alias!r}")
        seen.add(rule.alias)
        registry.index(rule.target_id)


def harmonize_record(
    raw: Mapping[str, float],
    rules: Sequence[HarmonizationRule],
    registry: FeatureRegistry,
) -> tuple[CanonicalRecord, QualityFlags]:
    """Convert one raw record into canonical units.

    Only fields with a rule are used. Unobserved canonical features get
    ``observed=False`` (value 0.0). Out-of-range values are kept as-is and
    reported in the returned flags.
    """
    _check_rules(rules, registry)
    m = registry.m
    values = np.zeros(m)
    observed = np.zeros(m, dtype=bool)
    source_of = {}
    for rule in rules:
        if rule.alias not in raw:
            continue
        value = raw[rule.alias]
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        j = registry.index(rule.target_id)
        if j in source_of:
            first, second = sorted((source_of[j], rule.alias))
            raise AmbiguousMapping(
                f"fields {first!r} and {second!r} both map to {rule.target_id!r}"
            )
        source_of[j] = rule.alias
        values[j] = rule.apply(float(value))
        observed[j] = True

    out_of_range = tuple(
        d.id for j, d in enumerate(registry) if observed[j] and not d.in_range(values[j])
    )
    missing = tuple(d.id for j, d in enumerate(registry) if not observed[j])
    aliases = {r.alias for r in rules}
    unmapped = tuple(sorted(k for k in raw if k not in aliases))
    return CanonicalRecord(values, observed), QualityFlags(out_of_range, missing, unmapped)


@dataclass(frozen=True)
class FeatureStats:
    """Per-feature standardization statistics in registry (or native) order."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        stds = np.asarray(self.stds, dtype=float)
        if means.shape != stds.shape:
            raise ValueError("means and stds must have equal length")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureStats)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.stds, other.stds)
        )

    __hash__ = None


def fit_stats(values: np.ndarray, observed: np.ndarray, feature_ids: Sequence[str] = ()) -> FeatureStats:
    """Mean and sample std of the observed entries of each column."""
    values = np.asarray(values, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    means = np.empty(values.shape[1])
    stds = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        col = values[observed[:, j], j]
        name = feature_ids[j] if j < len(feature_ids) else str(j)
        if col.size < 2:
            raise DegenerateFeature(f"{name}: fewer than two observed values")
        means[j] = col.mean()
        stds[j] = col.std(ddof=1)
        if not stds[j] > 0:
            raise DegenerateFeature(f"{name}: zero standard deviation")
    return FeatureStats(means, stds)


def impute(
    record: CanonicalRecord,
    policy: str,
    stats: FeatureStats,
) -> np.ndarray:
    """Standardize observed entries and fill the unobserved ones.

    Both policies put a missing entry at the training mean, which is 0.0 in
    standardized space; they differ only in what they are named after.
    """
    return impute_matrix(record.values[None, :], record.observed[None, :], policy, stats)[0]


def impute_matrix(values, observed, policy, stats: FeatureStats) -> np.ndarray:
    if policy not in IMPUTE_POLICIES:
        raise ValueError(f"unknown imputation policy {policy!r}")
    values = np.asarray(values, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if values.shape[1] != stats.means.shape[0]:
        raise ValueError(
            f"stats cover {stats.means.shape[0]} features, records have {values.shape[1]}"
        )
    if np.any(~(stats.stds > 0)):
        bad = int(np.flatnonzero(~(stats.stds > 0))[0])
        raise DegenerateFeature(f"feature index {bad} has non-positive std")
    if policy == "population_mean":
        filled = np.where(observed, values, stats.means)
        return (filled - stats.means) / stats.stds
    z = (values - stats.means) / stats.stds
    return np.where(observed, z, 0.0)


# -- file format -------------------------------------------------------------

_DESCRIPTOR_KEYS = (
    "id",
    "display_name",
    "category",
    "canonical_unit",
    "plausible_range",
    "higher_is_worse",
)
_RULE_KEYS = ("alias", "target_id", "scale", "offset")


def _reject_unknown(obj, allowed, path):
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}" if path else key, "unknown key")


def _descriptor_from_dict(obj, path) -> FeatureDescriptor:
    _reject_unknown(obj, _DESCRIPTOR_KEYS, path)
    for key in _DESCRIPTOR_KEYS[:-1]:
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing")
    rng = obj["plausible_range"]
    if not isinstance(rng, (list, tuple)) or len(rng) != 2:
        raise SchemaError(f"{path}.plausible_range", "expected [min, max]")
    return FeatureDescriptor(
        id=obj["id"],
        display_name=obj["display_name"],
        category=obj["category"],
        canonical_unit=obj["canonical_unit"],
        plausible_range=(float(rng[0]), float(rng[1])),
        higher_is_worse=bool(obj.get("higher_is_worse", True)),
    )


def _rule_from_dict(obj, path) -> HarmonizationRule:
    _reject_unknown(obj, _RULE_KEYS, path)
    for key in ("alias", "target_id"):
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing")
    return HarmonizationRule(
        obj["alias"], obj["target_id"], float(obj.get("scale", 1.0)), float(obj.get("offset", 0.0))
    )


def registry_from_dict(doc) -> tuple[FeatureRegistry, tuple[HarmonizationRule, ...]]:
    _reject_unknown(doc, ("features", "rules"), "")
    if "features" not in doc:
        raise SchemaError("features", "missing")
    features = doc["features"]
    if not isinstance(features, list):
        raise SchemaError("features", "expected an array")
    registry = build_registry(
        [_descriptor_from_dict(f, f"features[{i}]") for i, f in enumerate(features)]
    )
    rules = tuple(_rule_from_dict(r, f"rules[{i}]") for i, r in enumerate(doc.get("rules", [])))
    _check_rules(rules, registry)
    return registry, rules


def registry_to_dict(registry: FeatureRegistry, rules: Sequence[HarmonizationRule] = ()) -> dict:
    return {
        "features": [
            {
                "id": d.id,
                "display_name": d.display_name,
                "category": d.category,
                "canonical_unit": d.canonical_unit,
                "plausible_range": list(d.plausible_range),
                "higher_is_worse": d.higher_is_worse,
            }
            for d in registry
        ],
        "rules": [
            {"alias": r.alias, "target_id": r.target_id, "scale": r.scale, "offset": r.offset}
            for r in rules
        ],
    }


def load_registry(path) -> tuple[FeatureRegistry, tuple[HarmonizationRule, ...]]:
    """Read a registry + rules JSON file. Unknown keys are rejected."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return registry_from_dict(doc)


def save_registry(registry, rules, path) -> None:
    Path(path).write_text(
        json.dumps(registry_to_dict(registry, rules), indent=2) + "\n", encoding="utf-8"
    )


def default_registry_path():
    return resources.files("fatl") / "data" / "default_registry.json"


def default_registry() -> tuple[FeatureRegistry, tuple[HarmonizationRule, ...]]:
    """The shipped ten-feature sepsis registry (placeholder list, overridable)."""
    with resources.as_file(default_registry_path()) as p:
        return load_registry(p)
