import hashlib
import json

import numpy as np
import pytest

from fatl.errors import AlignmentError, SchemaError, VersionMismatch
from fatl.models import ModelMeta, SourceModel, align, dumps_model, load_model, save_model
from fatl.registry import FeatureDescriptor, FeatureStats, build_registry

REG = build_registry([FeatureDescriptor(i, i, "lab_value", "u", (0, 1)) for i in ("hr", "temp", "lactate")])


def model(ids, weights, bias=0.25, auroc=0.8, model_id="m"):
    k = len(ids)
    return SourceModel(
        model_id, tuple(ids), np.array(weights, dtype=float), bias,
        FeatureStats(np.arange(k, dtype=float) + 0.1, np.ones(k) * 1.5),
        ModelMeta(100, "site", auroc),
    )


def test_align_permutes_and_zero_fills():
    a = align(model(["lactate", "hr"], [2.0, 1.0]), REG)
    np.testing.assert_array_equal(a.weights, [1.0, 0.0, 2.0])
    assert a.coverage.tolist() == [True, False, True]
    assert a.bias == 0.25
    # standardization follows the weights
    np.testing.assert_array_equal(a.means, [1.1, 0.0, 0.1])


def test_align_identity_and_idempotent():
    m = model(["hr", "temp", "lactate"], [0.3, -0.2, 1.1])
    a = align(m, REG)
    np.testing.assert_array_equal(a.weights, m.weights)
    from fatl.models import as_source_model
    again = align(as_source_model(a, REG, "m", m.meta), REG)
    np.testing.assert_array_equal(again.weights, a.weights)
    assert again.bias == a.bias


def test_align_unknown_feature():
    with pytest.raises(AlignmentError) as err:
        align(model(["hr", "sofa"], [1.0, 1.0]), REG)
    assert str(err.value) == "sofa"


def test_native_and_aligned_scores_agree():
    rng = np.random.default_rng(3)
    m = model(["lactate", "hr"], rng.normal(size=2))
    a = align(m, REG)
    for _ in range(50):
        x = rng.normal(size=3)
        x[~a.coverage] = 0.0
        native = np.array([x[REG.index(f)] for f in m.feature_ids])
        scale = np.abs(native * m.weights).sum() + abs(m.bias)
        assert abs(m.native_score(native) - a.score(x)) <= 4 * np.finfo(float).eps * scale


def test_invariants_enforced():
    with pytest.raises(SchemaError):
        model(["hr"], [1.0, 2.0])
    with pytest.raises(SchemaError):
        ModelMeta(0)
    with pytest.raises(SchemaError):
        ModelMeta(5, "x", 0.3)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    m = model(["hr", "lactate"], rng.normal(size=2) / 3, bias=float(rng.normal()), auroc=None)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back == m
    assert back.weights.tobytes() == m.weights.tobytes()


def test_two_saves_byte_identical(tmp_path):
    m = model(["hr", "temp"], [1 / 3, 2 / 7], bias=-0.1)
    save_model(m, tmp_path / "a.json")
    save_model(m, tmp_path / "b.json")
    ha = hashlib.sha256((tmp_path / "a.json").read_bytes()).hexdigest()
    hb = hashlib.sha256((tmp_path / "b.json").read_bytes()).hexdigest()
    assert ha == hb


def test_key_order_is_fixed():
    doc = json.loads(dumps_model(model(["hr"], [1.0])))
    assert list(doc) == ["format_version", "model_id", "feature_ids", "weights", "bias", "standardization", "meta"]
    assert doc["bias"] == [0.25]


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d.pop("bias"), "bias"),
        (lambda d: d["meta"].pop("cohort_size"), "meta.cohort_size"),
        (lambda d: d.__setitem__("weights", [1.0, "x"]), "weights[1]"),
        (lambda d: d["standardization"].pop("stds"), "standardization.stds"),
        (lambda d: d.__setitem__("extra", 1), "extra"),
    ],
)
def test_schema_errors_name_the_field(tmp_path, mutate, path):
    doc = json.loads(dumps_model(model(["hr", "temp"], [1.0, 2.0])))
    mutate(doc)
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as err:
        load_model(tmp_path / "m.json")
    assert err.value.path == path


def test_version_mismatch(tmp_path):
    doc = json.loads(dumps_model(model(["hr"], [1.0])))
    doc["format_version"] = 2
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        load_model(tmp_path / "m.json")
