"""
Training a logistic model and scoring it
========================================

A synthetic site with a known risk model is sampled, split, fitted by
full-batch gradient descent and evaluated on the held-out share.
"""

import numpy as np

from fatl import PopulationSpec, TrainConfig, auroc, default_registry, generate_cohort, train_logistic
from fatl.cohort import split_cohort
from fatl.evaluation import evaluate_scores, reports_table
from fatl.registry import fit_stats, impute_matrix
from fatl.trainer import predict_proba

registry, _ = default_registry()
ids = registry.ids

means = dict(zip(ids, [90, 20, 37.5, 120, 95, 11, 2.0, 1.1, 220, 60]))
stds = dict(zip(ids, [15, 4, 0.8, 18, 3, 4, 1.0, 0.5, 70, 15]))
weights = dict(zip(ids, [0.7, 0.6, 0.35, -0.5, -0.35, 0.45, 0.9, 0.0, 0.0, 0.25]))
spec = PopulationSpec("demo_site", means, stds, {f: 0.1 for f in ids}, weights, -1.2, 2000, 42)

cohort = generate_cohort(spec, registry)
print(f"{len(cohort)} patients, prevalence {cohort.prevalence:.3f}")

train, test = split_cohort(cohort, 1500, seed=7)
stats = fit_stats(train.values, train.observed, ids)
X_train = impute_matrix(train.values, train.observed, "zero_after_standardize", stats)
X_test = impute_matrix(test.values, test.observed, "zero_after_standardize", stats)

model, trace = train_logistic(X_train, train.labels, config=TrainConfig(learning_rate=0.5, epochs=500))
print(f"loss {trace.initial_loss:.4f} -> {trace.losses[-1]:.4f} in {trace.epochs_run} epochs")

# weight signs follow the generating model
print("fitted :", np.round(model.weights, 2))
print("true   :", [weights[f] for f in ids])

p = predict_proba(model, X_test)
print("held-out AUROC", round(auroc(p, test.labels), 4))
print(reports_table([evaluate_scores("logistic", p, test.labels)]), end="")
