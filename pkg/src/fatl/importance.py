"""Turn per-study feature-importance reports into a transfer filter.

The filter is a vector in ``[0, 1]^m`` over registry order. Entries near 1
let the corresponding source weights through; entries near 0 suppress
them. Features that no study mentions get 0.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import PolicyError, SchemaError, UnknownFeature
from .registry import FeatureRegistry

POLICIES = ("frequency", "mean_normalized", "top_k_binary")


@dataclass(frozen=True)
class ImportanceProfile:
    study_id: str
    entries: Mapping[str, float]
    top_k_listed: int | None = None

    def __post_init__(self):
        if not self.entries:
            raise SchemaError(f"{self.study_id}.entries", "needs at least one entry")
        clean = {}
        for fid, score in self.entries.items():
            score = float(score)
            if not (score >= 0 and math.isfinite(score)):
                raise SchemaError(f"{self.study_id}.entries.{fid}", "score must be finite and >= 0")
            clean[fid] = score
        object.__setattr__(self, "entries", dict(clean))


@dataclass(frozen=True)
class FeatureFilter:
    values: np.ndarray
    policy_tag: str = "custom"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("filter must be a vector")
        if np.any(~((values >= 0) & (values <= 1))):
            raise ValueError("filter entries must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, FeatureFilter)
            and self.policy_tag == other.policy_tag
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    @classmethod
    def ones(cls, m: int) -> "FeatureFilter":
        return cls(np.ones(m), "identity")

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def to_dict(self, registry: FeatureRegistry | None = None) -> dict:
        doc = {"policy_tag": self.policy_tag, "values": [float(v) for v in self.values]}
        if registry is not None:
            doc["feature_ids"] = list(registry.ids)
        return doc

    @classmethod
    def from_dict(cls, doc, registry: FeatureRegistry | None = None) -> "FeatureFilter":
        if "values" not in doc:
            raise SchemaError("values", "missing")
        if registry is not None and "feature_ids" in doc and list(doc["feature_ids"]) != list(registry.ids):
            raise SchemaError("feature_ids", "filter was computed over a different registry")
        return cls(np.array(doc["values"], dtype=float), doc.get("policy_tag", "custom"))


def _parse_policy(policy):
    """Accept ``"frequency"``, ``("top_k_binary", k, q)`` or ``"top_k_binary(k=2,q=0.75)"``."""
    if isinstance(policy, (tuple, list)):
        name, *args = policy
    else:
        match = re.fullmatch(r"\s*(\w+)\s*(?:\((.*)\))?\s*", str(policy))
        if not match:
            raise PolicyError(f"cannot parse filter policy {policy!r}")
        name, argstr = match.groups()
        args = []
        if argstr:
            for part in argstr.split(","):
                part = part.split("=")[-1].strip()
                if part:
                    args.append(part)
    if name not in POLICIES:
        raise PolicyError(f"unknown filter policy {name!r}; expected one of {POLICIES}")
    if name == "top_k_binary":
        if len(args) != 2:
            raise PolicyError("top_k_binary needs k and q")
        k, q = int(args[0]), float(args[1])
        if k < 1 or not (0 < q <= 1):
            raise PolicyError("top_k_binary needs k >= 1 and q in (0, 1]")
        return name, (k, q)
    if args:
        raise PolicyError(f"policy {name!r} takes no arguments")
    return name, ()


def _in_top_k(entries: Mapping[str, float], k: int) -> set[str]:
    # ties at the k-th score are all included, so the result never depends on entry order
    scores = sorted(entries.values(), reverse=True)
    cutoff = scores[min(k, len(scores)) - 1]
    return {fid for fid, s in entries.items() if s >= cutoff}


def compute_filter(
    profiles: Sequence[ImportanceProfile],
    registry: FeatureRegistry,
    policy="frequency",
) -> FeatureFilter:
    """Aggregate importance profiles into a :class:`FeatureFilter`.

    ``frequency``
        share of profiles that mention the feature.
    ``mean_normalized``
        each profile divided by its own maximum, then averaged (absent = 0).
    ``top_k_binary(k, q)``
        1 where the feature is among a profile's top ``k`` scores in at least
        a fraction ``q`` of profiles, else 0. Ties at the k-th score count as
        top-k.
    """
    if not profiles:
        raise PolicyError("compute_filter needs at least one profile")
    for p in profiles:
        for fid in p.entries:
            if fid not in registry:
                raise UnknownFeature(f"profile {p.study_id!r} references unknown feature {fid!r}")
    name, args = _parse_policy(policy)
    n = len(profiles)
    m = registry.m

    if name == "frequency":
        counts = np.zeros(m, dtype=np.int64)
        for p in profiles:
            for fid in p.entries:
                counts[registry.index(fid)] += 1
        return FeatureFilter(counts / n, "frequency")

    if name == "mean_normalized":
        rows = np.zeros((n, m))
        for i, p in enumerate(profiles):
            top = max(p.entries.values())
            if top == 0:
                continue
            for fid, s in p.entries.items():
                rows[i, registry.index(fid)] = s / top
        # sorted summation keeps the result independent of profile order
        values = np.array([math.fsum(rows[:, j]) / n for j in range(m)])
        return FeatureFilter(np.clip(values, 0.0, 1.0), "mean_normalized")

    k, q = args
    hits = np.zeros(m, dtype=np.int64)
    for p in profiles:
        for fid in _in_top_k(p.entries, k):
            hits[registry.index(fid)] += 1
    needed = math.ceil(q * n - 1e-9)
    return FeatureFilter((hits >= needed).astype(float), f"top_k_binary(k={k},q={q:g})")


def binarize(filt: FeatureFilter, threshold: float) -> FeatureFilter:
    if not (0 < threshold < 1):
        raise ValueError("threshold must lie in (0, 1)")
    tag = filt.policy_tag
    suffix = f"|binarized({threshold:g})"
    if not tag.endswith(suffix):
        tag = tag + suffix
    return FeatureFilter((filt.values >= threshold).astype(float), tag)


def profiles_from_json(doc, source="profiles") -> list[ImportanceProfile]:
    if not isinstance(doc, list):
        raise SchemaError(source, "expected a JSON array of profiles")
    out = []
    for i, item in enumerate(doc):
        path = f"{source}[{i}]"
        if not isinstance(item, dict):
            raise SchemaError(path, "expected an object")
        for key in item:
            if key not in ("study_id", "entries", "top_k_listed"):
                raise SchemaError(f"{path}.{key}", "unknown key")
        for key in ("study_id", "entries"):
            if key not in item:
                raise SchemaError(f"{path}.{key}", "missing")
        if not isinstance(item["entries"], dict):
            raise SchemaError(f"{path}.entries", "expected an object")
        out.append(ImportanceProfile(item["study_id"], item["entries"], item.get("top_k_listed")))
    return out


def load_profiles(*paths) -> list[ImportanceProfile]:
    """Read and concatenate one or more profile files."""
    profiles = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            profiles.extend(profiles_from_json(json.load(fh), str(path)))
    return profiles
