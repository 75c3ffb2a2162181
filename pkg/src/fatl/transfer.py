"""Weighted combination of source models into a target initialization.

Two entry points:

* :func:`weight_transfer` -- ``W_t = sum_i alpha_i * W_i``.
* :func:`fatl_init` -- the same sum taken over filter-masked weights
  ``W_i * F`` plus a bias correction
  ``b_t = b_prior - lam * (b_prior - mean_i b_i)``.

The combined expression mixes a feature-sized term (weights) with a
bias-sized term. The two are kept apart: the masked sum becomes the target
weight vector and the penalty term acts on the bias coordinate only. The
same ``lam`` is also handed to the trainer as a bias-anchor penalty during
fine-tuning.

All sums run over sources in ascending index order so results are
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, PolicyError
from .importance import FeatureFilter
from .models import AlignedModel, ModelMeta, SourceModel
from .registry import FeatureStats

ALPHA_POLICIES = ("uniform", "cohort_size", "performance", "explicit")
PERFORMANCE_EPS = 1e-6


@dataclass(frozen=True)
class TransferConfig:
    alpha_policy: str = "uniform"
    lam: float = 0.0
    bias_prior: str | float = "source_mean"
    alpha_values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.alpha_policy not in ALPHA_POLICIES:
            raise PolicyError(f"unknown alpha policy {self.alpha_policy!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise PolicyError(f"lambda must be finite and >= 0, got {self.lam}")
        object.__setattr__(self, "lam", float(self.lam))
        if isinstance(self.bias_prior, str):
            if self.bias_prior not in ("source_mean", "zero"):
                raise PolicyError(f"unknown bias prior {self.bias_prior!r}")
        else:
            object.__setattr__(self, "bias_prior", float(self.bias_prior))
        if self.alpha_policy == "explicit":
            if not self.alpha_values:
                raise PolicyError("explicit alpha policy needs alpha_values")
            vals = tuple(float(a) for a in self.alpha_values)
            if any(a < 0 or not math.isfinite(a) for a in vals) or not sum(vals) > 0:
                raise PolicyError("explicit alphas must be finite, >= 0 and not all zero")
            object.__setattr__(self, "alpha_values", vals)

    def to_dict(self) -> dict:
        return {
            "alpha_policy": self.alpha_policy,
            "alpha_values": None if self.alpha_values is None else list(self.alpha_values),
            "lambda": self.lam,
            "bias_prior": self.bias_prior,
        }

    @classmethod
    def from_dict(cls, doc) -> "TransferConfig":
        allowed = {"alpha_policy", "alpha_values", "lambda", "bias_prior"}
        unknown = set(doc) - allowed
        if unknown:
            raise PolicyError(f"unknown transfer config keys: {sorted(unknown)}")
        values = doc.get("alpha_values")
        return cls(
            alpha_policy=doc.get("alpha_policy", "uniform"),
            lam=float(doc.get("lambda", 0.0)),
            bias_prior=doc.get("bias_prior", "source_mean"),
            alpha_values=None if values is None else tuple(values),
        )


@dataclass(frozen=True, eq=False)
class InitializedTarget:
    weights: np.ndarray
    bias: float
    alphas: np.ndarray
    lam: float
    filter_policy: str
    source_ids: tuple[str, ...]
    bias_anchor: float
    bias_prior: float
    # pooled standardization, registry order
    means: np.ndarray = field(default=None)
    stds: np.ndarray = field(default=None)

    def provenance(self) -> dict:
        return {
            "alphas": [float(a) for a in self.alphas],
            "lambda": self.lam,
            "filter_policy": self.filter_policy,
            "source_ids": list(self.source_ids),
            "bias_anchor": self.bias_anchor,
            "bias_prior": self.bias_prior,
        }


def _normalize(raw) -> np.ndarray:
    raw = [float(a) for a in raw]
    total = math.fsum(raw)
    return np.array([a / total for a in raw])


def compute_alphas(sources: Sequence[SourceModel], policy="uniform", values=None) -> np.ndarray:
    """Source mixing coefficients, non-negative and summing to one.

    ``policy`` may be a policy name or a :class:`TransferConfig`.

    >>> compute_alphas([None] * 4).tolist()
    [0.25, 0.25, 0.25, 0.25]
    """
    if isinstance(policy, TransferConfig):
        policy, values = policy.alpha_policy, policy.alpha_values
    n = len(sources)
    if n < 1:
        raise PolicyError("need at least one source model")
    if policy == "uniform":
        return np.full(n, 1.0 / n)
    if policy == "cohort_size":
        return _normalize([s.meta.cohort_size for s in sources])
    if policy == "performance":
        missing = [s.model_id for s in sources if s.meta.reported_auroc is None]
        if missing:
            raise PolicyError(f"performance policy needs reported_auroc; missing for {missing}")
        return _normalize([max(s.meta.reported_auroc - 0.5, PERFORMANCE_EPS) for s in sources])
    if policy == "explicit":
        if values is None or len(values) != n:
            raise PolicyError(f"explicit alphas must have length {n}")
        if any(a < 0 for a in values) or not sum(values) > 0:
            raise PolicyError("explicit alphas must be >= 0 and not all zero")
        return _normalize(values)
    raise PolicyError(f"unknown alpha policy {policy!r}")


def _weights_matrix(aligned) -> list[np.ndarray]:
    rows = [np.asarray(a.weights if isinstance(a, AlignedModel) else a, dtype=float) for a in aligned]
    if not rows:
        raise DimensionError("need at least one source model")
    m = rows[0].shape[0]
    for i, r in enumerate(rows):
        if r.ndim != 1 or r.shape[0] != m:
            raise DimensionError(f"source {i} has {r.shape} weights, expected ({m},)")
    return rows


def _check_alphas(alphas, n) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (n,):
        raise DimensionError(f"expected {n} alphas, got shape {alphas.shape}")
    return alphas


def weight_transfer(aligned: Sequence[AlignedModel], alphas) -> np.ndarray:
    """``sum_i alphas[i] * W_i`` accumulated in source order."""
    rows = _weights_matrix(aligned)
    alphas = _check_alphas(alphas, len(rows))
    out = np.zeros_like(rows[0])
    for a, w in zip(alphas, rows):
        out = out + a * w
    return out


def _resolve_bias_prior(prior, mean_bias: float) -> float:
    if prior == "source_mean":
        return mean_bias
    if prior == "zero":
        return 0.0
    return float(prior)


def fatl_init(
    aligned: Sequence[AlignedModel],
    alphas,
    filt: FeatureFilter | np.ndarray,
    config: TransferConfig = TransferConfig(),
) -> InitializedTarget:
    """Filter-masked weighted weight transfer with bias regularization.

    Target weights are ``sum_i alphas[i] * (W_i * F)``; the target bias is
    ``b_prior - lam * (b_prior - mean(b_i))``. Under the default
    ``source_mean`` prior the correction vanishes and the bias equals the
    mean source bias for every ``lam``.
    """
    rows = _weights_matrix(aligned)
    n, m = len(rows), rows[0].shape[0]
    alphas = _check_alphas(alphas, n)
    if isinstance(filt, FeatureFilter):
        f, tag = filt.values, filt.policy_tag
    else:
        f, tag = np.asarray(filt, dtype=float), "custom"
    if f.shape != (m,):
        raise DimensionError(f"filter has shape {f.shape}, expected ({m},)")
    if config.lam < 0:
        raise PolicyError("lambda must be >= 0")

    weights = np.zeros(m)
    for a, w in zip(alphas, rows):
        weights = weights + a * (w * f)

    biases = [a.bias if isinstance(a, AlignedModel) else 0.0 for a in aligned]
    mean_bias = math.fsum(biases) / n
    prior = _resolve_bias_prior(config.bias_prior, mean_bias)
    bias = prior - config.lam * (prior - mean_bias)

    means, stds = pooled_standardization(aligned, alphas)
    return InitializedTarget(
        weights=weights,
        bias=bias,
        alphas=alphas,
        lam=config.lam,
        filter_policy=tag,
        source_ids=tuple(getattr(a, "model_id", "") for a in aligned),
        bias_anchor=mean_bias,
        bias_prior=prior,
        means=means,
        stds=stds,
    )


def pooled_standardization(aligned: Sequence[AlignedModel], alphas) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-weighted mean of source means/stds over the sources covering each feature.

    Used only when the initialized model is applied without target-site
    statistics (zero-shot). Features no source covers get mean 0, std 1.
    """
    items = [a for a in aligned if isinstance(a, AlignedModel)]
    if len(items) != len(aligned):
        m = np.asarray(aligned[0]).shape[0] if len(aligned) else 0
        return np.zeros(m), np.ones(m)
    m = items[0].m
    means, stds = np.zeros(m), np.ones(m)
    for j in range(m):
        cover = [(float(al), a) for al, a in zip(alphas, items) if a.coverage[j]]
        total = math.fsum(al for al, _ in cover)
        if not cover:
            continue
        if total == 0:
            cover = [(1.0, a) for _, a in cover]
            total = float(len(cover))
        means[j] = math.fsum(al * a.means[j] for al, a in cover) / total
        stds[j] = math.fsum(al * a.stds[j] for al, a in cover) / total
    return means, stds


def target_as_model(init: InitializedTarget, registry, model_id: str, cohort_size: int) -> SourceModel:
    """Package an initialization as a full-coverage model file object."""
    return SourceModel(
        model_id,
        registry.ids,
        init.weights,
        init.bias,
        FeatureStats(init.means, init.stds),
        ModelMeta(cohort_size, "transfer:" + init.filter_policy),
    )
