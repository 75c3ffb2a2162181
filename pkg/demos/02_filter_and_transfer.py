"""
From importance profiles to a target initialization
===================================================

Published studies list which features mattered. Their agreement becomes a
filter over the registry; source weights are masked by it and averaged
into a starting point for the target site.
"""

import numpy as np

from fatl import FeatureFilter, ImportanceProfile, binarize, compute_filter, default_registry
from fatl.models import AlignedModel
from fatl.transfer import TransferConfig, fatl_init, weight_transfer

registry, _ = default_registry()

profiles = [
    ImportanceProfile("cohort_study", {"lactate": 0.9, "heart_rate": 0.6, "respiratory_rate": 0.5}),
    ImportanceProfile("icu_review", {"lactate": 0.8, "systolic_bp": 0.7, "heart_rate": 0.4}),
    ImportanceProfile("ed_triage", {"heart_rate": 1.0, "temperature": 0.3, "age": 0.2}),
]

for policy in ("frequency", "mean_normalized", "top_k_binary(k=2,q=0.5)"):
    f = compute_filter(profiles, registry, policy)
    print(f"{policy:26s}", np.round(f.values, 3))

filt = binarize(compute_filter(profiles, registry, "frequency"), 0.5)
print("binarized:", filt.values)

# two sources that only measured some features (zeros elsewhere)
rng = np.random.default_rng(0)
sources = []
for bias in (-1.1, -0.7):
    w = rng.normal(size=registry.m)
    cover = rng.random(registry.m) < 0.8
    sources.append(AlignedModel(np.where(cover, w, 0.0), bias, cover))

alphas = np.array([0.5, 0.5])
print("plain average :", np.round(weight_transfer(sources, alphas), 3))

# lambda = 0.5 moves the bias halfway from the zero prior to the source mean
init = fatl_init(sources, alphas, filt, TransferConfig(lam=0.5, bias_prior="zero"))
print("masked average:", np.round(init.weights, 3))
print("bias anchor", init.bias_anchor, "-> initial bias", init.bias)

# with F = 1, lambda = 0 and a zero prior nothing changes
plain = fatl_init(sources, alphas, FeatureFilter.ones(registry.m), TransferConfig(lam=0.0, bias_prior="zero"))
print("reduces to plain average:", np.array_equal(plain.weights, weight_transfer(sources, alphas)))
