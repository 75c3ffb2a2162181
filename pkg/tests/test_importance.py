import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatl.errors import PolicyError, UnknownFeature
from fatl.importance import FeatureFilter, ImportanceProfile, binarize, compute_filter, load_profiles
from fatl.registry import FeatureDescriptor, build_registry

IDS = ["hr", "temp", "lactate", "age", "wbc", "rr"]
REG = build_registry([FeatureDescriptor(i, i, "vital_sign", "u", (0, 1)) for i in IDS])


def prof(name, **entries):
    return ImportanceProfile(name, entries)


def test_frequency_counts():
    f = compute_filter([prof("a", lactate=1, age=2), prof("b", lactate=3)], REG, "frequency")
    assert f.values[REG.index("lactate")] == 1.0
    assert f.values[REG.index("age")] == 0.5
    assert f.values[REG.index("hr")] == 0.0


def test_mean_normalized_single():
    f = compute_filter([prof("a", hr=4, temp=2)], REG, "mean_normalized")
    assert f.values[REG.index("hr")] == 1.0
    assert f.values[REG.index("temp")] == 0.5


def _brute_top_k(profiles, k, q):
    """Recount by enumerating, for each profile, every feature whose score beats
    all but fewer than k others."""
    n = len(profiles)
    out = []
    for fid in IDS:
        hits = 0
        for p in profiles:
            if fid not in p.entries:
                continue
            better = sum(1 for other, s in p.entries.items() if s > p.entries[fid])
            hits += better < k
        out.append(1.0 if hits / n >= q - 1e-12 else 0.0)
    return np.array(out)


def test_top_k_binary_example():
    profiles = [
        prof("a", lactate=9, hr=5, temp=1),
        prof("b", lactate=8, temp=7, hr=1),
        prof("c", hr=3, lactate=2, age=1),
        prof("d", temp=5, hr=4, lactate=1),
    ]
    # lactate is top-2 in a, b, c: 3 of 4 profiles
    f = compute_filter(profiles, REG, ("top_k_binary", 2, 0.75))
    assert f.values[REG.index("lactate")] == 1.0
    np.testing.assert_array_equal(f.values, _brute_top_k(profiles, 2, 0.75))
    assert compute_filter(profiles, REG, "top_k_binary(k=2,q=0.75)") == f


profile_st = st.builds(
    lambda d, name: ImportanceProfile(name, d),
    st.dictionaries(st.sampled_from(IDS), st.integers(0, 5).map(float), min_size=1),
    st.text("abc", min_size=1, max_size=3),
)


@settings(max_examples=80, deadline=None)
@given(st.lists(profile_st, min_size=1, max_size=6), st.integers(1, 4), st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_top_k_matches_brute_force(profiles, k, q):
    f = compute_filter(profiles, REG, ("top_k_binary", k, q))
    np.testing.assert_array_equal(f.values, _brute_top_k(profiles, k, q))


@settings(max_examples=80, deadline=None)
@given(st.lists(profile_st, min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_policies_permutation_invariant(profiles, rnd):
    shuffled = list(profiles)
    rnd.shuffle(shuffled)
    for policy in ("frequency", "mean_normalized", ("top_k_binary", 2, 0.5)):
        a = compute_filter(profiles, REG, policy)
        b = compute_filter(shuffled, REG, policy)
        np.testing.assert_array_equal(a.values, b.values)


@settings(max_examples=80, deadline=None)
@given(st.lists(profile_st, min_size=1, max_size=6))
def test_frequency_multiples_of_one_over_n(profiles):
    n = len(profiles)
    f = compute_filter(profiles, REG, "frequency")
    counts = f.values * n
    np.testing.assert_allclose(counts, np.round(counts), atol=1e-12)
    for j, fid in enumerate(IDS):
        assert (f.values[j] == 1.0) == all(fid in p.entries for p in profiles)


@settings(max_examples=80, deadline=None)
@given(st.lists(profile_st, min_size=1, max_size=6), st.data())
def test_duplicate_profile_against_recount(profiles, data):
    dup = data.draw(st.sampled_from(profiles))
    before = compute_filter(profiles, REG, "frequency").values
    after = compute_filter(profiles + [dup], REG, "frequency").values
    indicator = np.array([1.0 if fid in dup.entries else 0.0 for fid in IDS])
    n = len(profiles)
    np.testing.assert_allclose(after, (before * n + indicator) / (n + 1), atol=1e-12)
    # moves toward the duplicated profile's indicator, never past it
    assert np.all(np.abs(after - indicator) <= np.abs(before - indicator) + 1e-12)
    # unchanged only if the duplicate mentions everything any profile mentions
    mentioned = {fid for p in profiles for fid in p.entries}
    if np.allclose(after, before, atol=1e-12):
        assert mentioned <= set(dup.entries)


def test_unknown_feature():
    with pytest.raises(UnknownFeature):
        compute_filter([prof("a", sofa=1)], REG)


def test_empty_profiles_rejected():
    with pytest.raises(PolicyError):
        compute_filter([], REG)


def test_never_mentioned_is_suppressed():
    f = compute_filter([prof("a", hr=1)], REG, "mean_normalized")
    assert f.values[REG.index("rr")] == 0.0


class TestBinarize:
    def test_threshold(self):
        f = binarize(FeatureFilter(np.array([0.9, 0.2])), 0.5)
        np.testing.assert_array_equal(f.values, [1.0, 0.0])

    def test_idempotent(self):
        f = FeatureFilter(np.array([0.9, 0.2, 0.5, 0.49]))
        once = binarize(f, 0.5)
        assert binarize(once, 0.5) == once

    def test_all_zero(self):
        f = FeatureFilter(np.zeros(3))
        for t in (0.01, 0.5, 0.99):
            np.testing.assert_array_equal(binarize(f, t).values, np.zeros(3))


def test_filter_bounds_enforced():
    with pytest.raises(ValueError):
        FeatureFilter(np.array([1.2, 0.0]))


def test_load_profiles_concatenates(tmp_path):
    for i in range(3):
        (tmp_path / f"p{i}.json").write_text(json.dumps([{"study_id": f"s{i}", "entries": {"hr": 1.0, IDS[i]: 2.0}}]))
    profiles = load_profiles(*(tmp_path / f"p{i}.json" for i in range(3)))
    f = compute_filter(profiles, REG, "frequency")
    np.testing.assert_allclose(f.values * 3, np.round(f.values * 3), atol=1e-12)
    assert f.values[REG.index("hr")] == 1.0
