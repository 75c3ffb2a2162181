"""
Harmonizing raw site records
============================

Each site names and scales its fields differently. The registry fixes one
canonical id, unit and plausible range per feature; harmonization rules
map raw aliases onto it with an affine conversion.
"""

import numpy as np

from fatl import default_registry, harmonize_record
from fatl.registry import FeatureStats, impute

registry, rules = default_registry()
print(registry.ids)

# a record from a site that reports Fahrenheit and mg/dL lactate
raw = {"temp_f": 101.3, "hr": 112, "lactate_mg_dl": 36.0, "bed": "7B"}
record, flags = harmonize_record(raw, rules, registry)

for fid, value, seen in zip(registry.ids, record.values, record.observed):
    print(f"{fid:18s} {value:8.3f}" if seen else f"{fid:18s}  missing")
print("unmapped:", flags.unmapped_fields)
print("out of range:", flags.out_of_range)

# 98.6 F lands on 37 C
rec, _ = harmonize_record({"temp_f": 98.6}, rules, registry)
print("98.6 F ->", rec.values[registry.index("temperature")], "C")

# standardize, then fill the gaps with zero
stats = FeatureStats(np.full(registry.m, 50.0), np.full(registry.m, 10.0))
print(impute(record, "zero_after_standardize", stats))
