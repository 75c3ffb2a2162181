"""Synthetic multi-site cohorts with a known logistic risk model.

Generator
---------
Every random number is a function of ``(seed, patient index, slot)``.
A cohort with ``m`` features draws ``2m + 1`` raw 64-bit outputs per
patient from a Philox-4x64 stream keyed by the seed, laid out row-major:

* slots ``0 .. m-1``   -> standard normals (inverse CDF of open uniforms),
* slots ``m .. 2m-1``  -> missingness uniforms,
* slot ``2m``          -> the label uniform.

Because Philox is counter-based, any block of patients can be produced
independently (:func:`raw_block`) and matches the serial output exactly.

Patient ``i``: ``z_i = L eps_i`` (``L`` = identity unless a correlation
factor is given), feature value ``mean + std * z_i`` clipped to the
plausible range, risk ``sigmoid(w* . z_i + b*)`` from the unclipped
``z_i``, label ``u_i < risk``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import CohortError, SchemaError
from .registry import CanonicalRecord, FeatureRegistry
from .trainer import sigmoid

MAX_ATTEMPTS = 8
_TWO_64 = 2**64


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    """Generative description of one site.

    ``means``, ``stds``, ``missing_rates`` and ``risk_weights`` are keyed by
    canonical feature id and must cover the whole registry.
    ``recorded_features`` lists what the site measures at all (default:
    everything); unrecorded features still drive risk but are never
    observed.
    """

    site_id: str
    means: Mapping[str, float]
    stds: Mapping[str, float]
    missing_rates: Mapping[str, float]
    risk_weights: Mapping[str, float]
    risk_bias: float
    n_patients: int
    seed: int
    recorded_features: tuple[str, ...] | None = None
    correlation_factor: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        for name in ("means", "stds", "missing_rates", "risk_weights"):
            object.__setattr__(self, name, {k: float(v) for k, v in getattr(self, name).items()})
        for fid, s in self.stds.items():
            if not (s > 0 and math.isfinite(s)):
                raise CohortError(f"{self.site_id}: std of {fid} must be > 0")
        for fid, r in self.missing_rates.items():
            if not (0 <= r < 1):
                raise CohortError(f"{self.site_id}: missing rate of {fid} must lie in [0, 1)")
        if int(self.n_patients) != self.n_patients or self.n_patients < 1:
            raise CohortError(f"{self.site_id}: n_patients must be a positive integer")
        if not (0 <= int(self.seed) < _TWO_64):
            raise CohortError(f"{self.site_id}: seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "n_patients", int(self.n_patients))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "risk_bias", float(self.risk_bias))
        if self.recorded_features is not None:
            object.__setattr__(self, "recorded_features", tuple(self.recorded_features))
        if self.correlation_factor is not None:
            object.__setattr__(
                self, "correlation_factor", tuple(tuple(float(v) for v in row) for row in self.correlation_factor)
            )

    def __eq__(self, other):
        return isinstance(other, PopulationSpec) and self.to_dict() == other.to_dict()

    __hash__ = None

    def validate(self, registry: FeatureRegistry) -> None:
        ids = set(registry.ids)
        for name in ("means", "stds", "missing_rates", "risk_weights"):
            keys = set(getattr(self, name))
            if keys != ids:
                extra, missing = sorted(keys - ids), sorted(ids - keys)
                raise CohortError(
                    f"{self.site_id}: {name} does not match registry (unknown {extra}, missing {missing})"
                )
        if self.recorded_features is not None:
            unknown = [f for f in self.recorded_features if f not in ids]
            if unknown or not self.recorded_features:
                raise CohortError(f"{self.site_id}: bad recorded_features {unknown}")
        if self.correlation_factor is not None:
            L = np.array(self.correlation_factor)
            if L.shape != (registry.m, registry.m) or np.any(np.triu(L, 1) != 0):
                raise CohortError(f"{self.site_id}: correlation_factor must be {registry.m}x{registry.m} lower-triangular")

    def vectors(self, registry: FeatureRegistry):
        self.validate(registry)
        ids = registry.ids
        return (
            np.array([self.means[f] for f in ids]),
            np.array([self.stds[f] for f in ids]),
            np.array([self.missing_rates[f] for f in ids]),
            np.array([self.risk_weights[f] for f in ids]),
        )

    def recorded_mask(self, registry: FeatureRegistry) -> np.ndarray:
        if self.recorded_features is None:
            return np.ones(registry.m, dtype=bool)
        rec = set(self.recorded_features)
        return np.array([f in rec for f in registry.ids])

    def to_dict(self) -> dict:
        ids = list(self.means)
        doc = {
            "site_id": self.site_id,
            "n_patients": self.n_patients,
            "seed": self.seed,
            "features": {
                f: {"mean": self.means[f], "std": self.stds[f], "missing_rate": self.missing_rates.get(f, 0.0)}
                for f in ids
            },
            "risk_weights": dict(self.risk_weights),
            "risk_bias": self.risk_bias,
        }
        if self.recorded_features is not None:
            doc["recorded_features"] = list(self.recorded_features)
        if self.correlation_factor is not None:
            doc["correlation_factor"] = [list(r) for r in self.correlation_factor]
        return doc

    @classmethod
    def from_dict(cls, doc) -> "PopulationSpec":
        allowed = {"site_id", "n_patients", "seed", "features", "risk_weights", "risk_bias",
                   "recorded_features", "correlation_factor"}
        if not isinstance(doc, dict):
            raise SchemaError("", "expected an object")
        for key in doc:
            if key not in allowed:
                raise SchemaError(key, "unknown key")
        for key in ("site_id", "n_patients", "seed", "features", "risk_weights", "risk_bias"):
            if key not in doc:
                raise SchemaError(key, "missing")
        means, stds, rates = {}, {}, {}
        for fid, entry in doc["features"].items():
            for key in entry:
                if key not in ("mean", "std", "missing_rate"):
                    raise SchemaError(f"features.{fid}.{key}", "unknown key")
            for key in ("mean", "std"):
                if key not in entry:
                    raise SchemaError(f"features.{fid}.{key}", "missing")
            means[fid] = entry["mean"]
            stds[fid] = entry["std"]
            rates[fid] = entry.get("missing_rate", 0.0)
        return cls(
            site_id=doc["site_id"],
            means=means,
            stds=stds,
            missing_rates=rates,
            risk_weights=doc["risk_weights"],
            risk_bias=doc["risk_bias"],
            n_patients=doc["n_patients"],
            seed=doc["seed"],
            recorded_features=doc.get("recorded_features"),
            correlation_factor=doc.get("correlation_factor"),
        )


def load_spec(path) -> PopulationSpec:
    with open(path, encoding="utf-8") as fh:
        return PopulationSpec.from_dict(json.load(fh))


def save_spec(spec: PopulationSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Cohort:
    """Registry-ordered values, observation mask and labels.

    ``values`` holds 0.0 wherever ``observed`` is false.
    """

    values: np.ndarray
    observed: np.ndarray
    labels: np.ndarray
    feature_ids: tuple[str, ...]
    site_id: str
    seed: int
    effective_seed: int | None = None
    attempts: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=bool))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "feature_ids", tuple(self.feature_ids))
        n = self.labels.shape[0]
        if self.values.shape != (n, len(self.feature_ids)) or self.observed.shape != self.values.shape:
            raise CohortError("cohort arrays have inconsistent shapes")
        if self.effective_seed is None:
            object.__setattr__(self, "effective_seed", self.seed)

    def __len__(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Cohort)
            and self.feature_ids == other.feature_ids
            and self.site_id == other.site_id
            and self.seed == other.seed
            and self.effective_seed == other.effective_seed
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def records(self) -> list[CanonicalRecord]:
        return [CanonicalRecord(v, o) for v, o in zip(self.values, self.observed)]

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, values=self.values[idx], observed=self.observed[idx], labels=self.labels[idx])


def raw_block(seed: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit outputs ``start .. start+count-1`` of the seed's Philox stream."""
    bg = np.random.Philox(key=int(seed))
    # one counter increment yields four outputs
    bg.advance(start // 4)
    skip = start % 4
    return bg.random_raw(skip + count)[skip:]


def _open_uniform(raw: np.ndarray) -> np.ndarray:
    # 53-bit midpoint grid: never exactly 0 or 1, so ndtri stays finite
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _draw(spec: PopulationSpec, registry: FeatureRegistry, seed: int, start: int, count: int):
    means, stds, rates, w_star = spec.vectors(registry)
    m = registry.m
    width = 2 * m + 1
    u = _open_uniform(raw_block(seed, start * width, count * width)).reshape(count, width)
    eps = ndtri(u[:, :m])
    if spec.correlation_factor is not None:
        eps = eps @ np.array(spec.correlation_factor).T
    risk = sigmoid(eps @ w_star + spec.risk_bias)
    labels = (u[:, 2 * m] < risk).astype(np.int64)
    raw_values = means + stds * eps
    values = np.clip(raw_values, registry.lower_bounds, registry.upper_bounds)
    observed = (u[:, m : 2 * m] >= rates) & spec.recorded_mask(registry)
    values = np.where(observed, values, 0.0)
    return values, observed, labels, raw_values


def generate_cohort(spec: PopulationSpec, registry: FeatureRegistry, *, rows: slice | None = None) -> Cohort:
    """Sample a cohort. Retries with ``seed + 1`` (up to 8 attempts) if single-class.

    ``rows`` restricts generation to a patient range of the first attempt;
    it exists to show that partial generation matches the full draw.
    """
    spec.validate(registry)
    if rows is not None:
        start, stop, _ = rows.indices(spec.n_patients)
        values, observed, labels, _ = _draw(spec, registry, spec.seed, start, stop - start)
        return Cohort(values, observed, labels, registry.ids, spec.site_id, spec.seed)
    for attempt in range(MAX_ATTEMPTS):
        seed = (spec.seed + attempt) % _TWO_64
        values, observed, labels, _ = _draw(spec, registry, seed, 0, spec.n_patients)
        if 0 < labels.sum() < labels.shape[0]:
            return Cohort(values, observed, labels, registry.ids, spec.site_id, spec.seed, seed, attempt + 1)
    raise CohortError(f"{spec.site_id}: single-class cohort after {MAX_ATTEMPTS} attempts")


def latent_values(spec: PopulationSpec, registry: FeatureRegistry) -> np.ndarray:
    """Unclipped feature values of the first attempt, for sampling diagnostics."""
    return _draw(spec, registry, spec.seed, 0, spec.n_patients)[3]


def shift_population(
    spec: PopulationSpec,
    feature_id: str,
    delta_means: float = 0.0,
    scale_stds: float = 1.0,
    suffix: str | None = None,
) -> PopulationSpec:
    """Copy of ``spec`` with one feature's mean moved and std rescaled."""
    if feature_id not in spec.means:
        raise CohortError(f"unknown feature {feature_id!r}")
    if not scale_stds > 0:
        raise CohortError("scale_stds must be > 0")
    means = dict(spec.means)
    stds = dict(spec.stds)
    means[feature_id] = means[feature_id] + delta_means
    stds[feature_id] = stds[feature_id] * scale_stds
    if suffix is None:
        suffix = f"shift-{feature_id}"
    return replace(spec, site_id=f"{spec.site_id}+{suffix}", means=means, stds=stds)


def derive_seed(base: int, *tags) -> int:
    """Deterministic 64-bit child seed from a base seed and string/int tags."""
    words = [int(base) % _TWO_64]
    for tag in tags:
        words.append(zlib.crc32(str(tag).encode("utf-8")))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def split_indices(n: int, n_first: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split into ``n_first`` and ``n - n_first`` indices."""
    if not (0 <= n_first <= n):
        raise CohortError(f"cannot take {n_first} of {n} records")
    keys = raw_block(seed, 0, n)
    order = np.argsort(keys, kind="stable")
    return np.sort(order[:n_first]), np.sort(order[n_first:])


def split_cohort(cohort: Cohort, n_first: int, seed: int) -> tuple[Cohort, Cohort]:
    first, rest = split_indices(len(cohort), n_first, seed)
    return cohort.subset(first), cohort.subset(rest)


# -- persistence ---------------------------------------------------------------


def cohort_to_csv(cohort: Cohort) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(cohort.feature_ids) + ["label"])
    for v, o, y in zip(cohort.values, cohort.observed, cohort.labels):
        writer.writerow([repr(float(x)) if ok else "" for x, ok in zip(v, o)] + [int(y)])
    return buf.getvalue()


def cohort_sidecar(cohort: Cohort) -> dict:
    return {
        "format_version": 1,
        "synthetic": True,
        "site_id": cohort.site_id,
        "seed": cohort.seed,
        "effective_seed": cohort.effective_seed,
        "attempts": cohort.attempts,
        "n_patients": len(cohort),
        "feature_ids": list(cohort.feature_ids),
    }


def sidecar_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_suffix(".json")


def save_cohort(cohort: Cohort, path) -> None:
    """Write ``<path>`` (CSV, empty cell = missing) and a provenance sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cohort_to_csv(cohort), encoding="utf-8")
    sidecar_path(path).write_text(json.dumps(cohort_sidecar(cohort), indent=2) + "\n", encoding="utf-8")


def load_cohort(path, registry: FeatureRegistry | None = None) -> Cohort:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(str(path), "empty cohort file") from None
        if not header or header[-1] != "label":
            raise SchemaError(f"{path}:header", "last column must be 'label'")
        ids = tuple(header[:-1])
        if registry is not None and ids != registry.ids:
            raise SchemaError(f"{path}:header", "columns differ from registry order")
        rows = list(reader)
    n, m = len(rows), len(ids)
    values = np.zeros((n, m))
    observed = np.zeros((n, m), dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != m + 1:
            raise SchemaError(f"{path}:row {i + 2}", f"expected {m + 1} cells")
        for j, cell in enumerate(row[:-1]):
            if cell != "":
                values[i, j] = float(cell)
                observed[i, j] = True
        labels[i] = int(row[-1])
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return Cohort(
        values,
        observed,
        labels,
        ids,
        meta.get("site_id", path.stem),
        meta.get("seed", 0),
        meta.get("effective_seed"),
        meta.get("attempts", 1),
    )
