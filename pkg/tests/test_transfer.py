import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fatl.errors import DimensionError, PolicyError
from fatl.importance import FeatureFilter
from fatl.models import AlignedModel, ModelMeta, SourceModel
from fatl.registry import FeatureStats
from fatl.transfer import TransferConfig, compute_alphas, fatl_init, weight_transfer


def src(cohort_size=10, auroc=None, k=1):
    return SourceModel("s", tuple(f"f{i}" for i in range(k)), np.zeros(k), 0.0,
                       FeatureStats(np.zeros(k), np.ones(k)), ModelMeta(cohort_size, "", auroc))


def aligned(weights, bias=0.0):
    w = np.asarray(weights, dtype=float)
    return AlignedModel(w, bias, np.ones_like(w, dtype=bool))


class TestAlphas:
    def test_uniform(self):
        np.testing.assert_array_equal(compute_alphas([src()] * 4, "uniform"), [0.25] * 4)

    def test_cohort_size(self):
        np.testing.assert_array_equal(compute_alphas([src(100), src(300)], "cohort_size"), [0.25, 0.75])

    def test_performance(self):
        a = compute_alphas([src(auroc=0.9), src(auroc=0.7)], "performance")
        np.testing.assert_allclose(a, [2 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_performance_floor(self):
        a = compute_alphas([src(auroc=0.5), src(auroc=0.5)], "performance")
        np.testing.assert_array_equal(a, [0.5, 0.5])

    def test_performance_needs_auroc(self):
        with pytest.raises(PolicyError):
            compute_alphas([src(auroc=0.9), src()], "performance")

    def test_explicit_normalized(self):
        cfg = TransferConfig("explicit", alpha_values=(2.0, 6.0))
        np.testing.assert_array_equal(compute_alphas([src(), src()], cfg), [0.25, 0.75])

    def test_negative_rejected(self):
        with pytest.raises(PolicyError):
            TransferConfig("explicit", alpha_values=(1.0, -0.5))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 10**6), min_size=1, max_size=8))
    def test_sum_to_one(self, sizes):
        a = compute_alphas([src(n) for n in sizes], "cohort_size")
        assert abs(a.sum() - 1) < 1e-12 and np.all(a >= 0)


class TestWeightTransfer:
    def test_mean(self):
        np.testing.assert_array_equal(weight_transfer([aligned([1, 2]), aligned([3, 4])], [0.5, 0.5]), [2, 3])

    def test_single_identity(self):
        w = np.array([0.1, -7.25, 3.0])
        np.testing.assert_array_equal(weight_transfer([aligned(w)], [1.0]), w)

    def test_arithmetic(self):
        np.testing.assert_allclose(weight_transfer([aligned([1, 0]), aligned([0, 1])], [0.9, 0.1]), [0.9, 0.1])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            weight_transfer([aligned([1, 2]), aligned([1, 2, 3])], [0.5, 0.5])
        with pytest.raises(DimensionError):
            weight_transfer([aligned([1, 2])], [0.5, 0.5])


class TestFatlInit:
    def test_reduces_to_weight_transfer(self):
        models = [aligned([1.0, 2.0], 0.2), aligned([3.0, -1.0], 0.4)]
        init = fatl_init(models, [0.3, 0.7], FeatureFilter.ones(2), TransferConfig(lam=0.0, bias_prior="zero"))
        np.testing.assert_array_equal(init.weights, weight_transfer(models, [0.3, 0.7]))
        assert init.bias == 0.0

    def test_suppression(self):
        init = fatl_init([aligned([5.0, 7.0])], [1.0], FeatureFilter(np.array([1.0, 0.0])))
        np.testing.assert_array_equal(init.weights, [5.0, 0.0])

    def test_bias_term_by_hand(self):
        models = [aligned([0.0], 0.2), aligned([0.0], 0.4)]
        init = fatl_init(models, [0.5, 0.5], FeatureFilter.ones(1), TransferConfig(lam=1.0, bias_prior="zero"))
        # 0 - 1 * (0 - 0.3)
        assert init.bias == pytest.approx(0.3, abs=1e-15)
        assert init.bias_anchor == pytest.approx(0.3, abs=1e-15)

    def test_explicit_prior(self):
        models = [aligned([0.0], 1.0), aligned([0.0], 3.0)]
        init = fatl_init(models, [0.5, 0.5], FeatureFilter.ones(1), TransferConfig(lam=0.25, bias_prior=0.0))
        assert init.bias == 0.0 - 0.25 * (0.0 - 2.0)

    def test_provenance(self):
        init = fatl_init([aligned([1.0]), aligned([2.0])], [0.5, 0.5], FeatureFilter(np.array([1.0]), "frequency"),
                         TransferConfig(lam=2.0))
        prov = init.provenance()
        assert prov["alphas"] == [0.5, 0.5] and prov["lambda"] == 2.0 and prov["filter_policy"] == "frequency"

    def test_negative_lambda(self):
        with pytest.raises(PolicyError):
            TransferConfig(lam=-1.0)

    def test_filter_length_checked(self):
        with pytest.raises(DimensionError):
            fatl_init([aligned([1.0, 2.0])], [1.0], FeatureFilter(np.array([1.0])))


@st.composite
def source_sets(draw, binary_filter=False):
    n = draw(st.integers(1, 8))
    m = draw(st.integers(1, 32))
    finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
    weights = [draw(arrays(np.float64, m, elements=finite)) for _ in range(n)]
    biases = [draw(finite) for _ in range(n)]
    raw = draw(arrays(np.float64, n, elements=st.floats(0.01, 10)))
    alphas = raw / raw.sum()
    if binary_filter:
        f = draw(arrays(np.float64, m, elements=st.sampled_from([0.0, 1.0])))
    else:
        f = draw(arrays(np.float64, m, elements=st.floats(0, 1)))
    return [aligned(w, b) for w, b in zip(weights, biases)], alphas, f


@settings(max_examples=100, deadline=None)
@given(source_sets(binary_filter=True))
def test_suppressed_coordinates_are_zero(case):
    models, alphas, f = case
    init = fatl_init(models, alphas, FeatureFilter(f))
    assert np.all(init.weights[f == 0] == 0)


@settings(max_examples=100, deadline=None)
@given(source_sets(), st.sampled_from([0.5, 2.0, -3.0, 0.125]))
def test_homogeneity(case, c):
    models, alphas, f = case
    scaled = [aligned(m.weights * c, m.bias) for m in models]
    base = fatl_init(models, alphas, FeatureFilter(f)).weights
    np.testing.assert_allclose(fatl_init(scaled, alphas, FeatureFilter(f)).weights, base * c, rtol=1e-12, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(source_sets())
def test_convex_combination_bounds(case):
    models, alphas, f = case
    w = fatl_init(models, alphas, FeatureFilter(f)).weights
    masked = np.array([m.weights * f for m in models])
    slack = 1e-9 * (1 + np.abs(masked).max(axis=0))
    assert np.all(w >= masked.min(axis=0) - slack)
    assert np.all(w <= masked.max(axis=0) + slack)


@settings(max_examples=100, deadline=None)
@given(source_sets(), st.floats(0, 1e6))
def test_bias_fixed_point(case, lam):
    models, alphas, f = case
    init = fatl_init(models, alphas, FeatureFilter(f), TransferConfig(lam=lam, bias_prior="source_mean"))
    assert init.bias == init.bias_anchor


@settings(max_examples=100, deadline=None)
@given(source_sets(binary_filter=True))
def test_masking_idempotent(case):
    models, alphas, f = case
    once = fatl_init(models, alphas, FeatureFilter(f)).weights
    twice = fatl_init([aligned(once)], [1.0], FeatureFilter(f)).weights
    np.testing.assert_array_equal(twice, once)
