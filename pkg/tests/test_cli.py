import json

from fatl import cli
from fatl.models import ModelMeta, SourceModel, save_model
from fatl.registry import FeatureStats, default_registry, default_registry_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_registry_validate_default(capsys):
    assert run("registry-validate") == 0
    assert capsys.readouterr().out.strip() == "OK, 10 features"


def test_registry_validate_missing_file(tmp_path, capsys):
    missing = tmp_path / "no_registry.json"
    assert run("registry-validate", missing) == 1
    err = capsys.readouterr().err
    assert "registry-validate" in err and str(missing) in err


def test_registry_validate_bad_key(tmp_path, capsys):
    doc = json.loads(default_registry_path().read_text())
    doc["features"][2]["unit"] = "x"
    (tmp_path / "r.json").write_text(json.dumps(doc))
    assert run("registry-validate", tmp_path / "r.json") == 1
    assert "features[2].unit" in capsys.readouterr().err


def test_filter_from_three_files(tmp_path, capsys):
    for i, fid in enumerate(("lactate", "age", "wbc_count")):
        (tmp_path / f"p{i}.json").write_text(json.dumps([{"study_id": f"s{i}", "entries": {"heart_rate": 1, fid: 2}}]))
    paths = [tmp_path / f"p{i}.json" for i in range(3)]
    assert run("filter", "--profiles", *paths, "--output", tmp_path / "F.json") == 0
    out = capsys.readouterr().out
    assert "heart_rate" in out
    doc = json.loads((tmp_path / "F.json").read_text())
    reg, _ = default_registry()
    values = dict(zip(reg.ids, doc["values"]))
    assert values["heart_rate"] == 1.0 and values["lactate"] == 1 / 3 and values["platelet_count"] == 0.0


def _model(path, mid, w, b, auroc):
    reg, _ = default_registry()
    save_model(SourceModel(mid, reg.ids, w, b, FeatureStats([0.0] * reg.m, [1.0] * reg.m), ModelMeta(100, "", auroc)),
               path)


def test_transfer_uniform_prints_alphas(tmp_path, capsys):
    _model(tmp_path / "a.json", "a", [1.0] * 10, 0.2, 0.8)
    _model(tmp_path / "b.json", "b", [3.0] * 10, 0.4, 0.7)
    assert run("transfer", "--models", tmp_path / "a.json", tmp_path / "b.json", "--policy", "uniform",
               "--output", tmp_path / "r.json") == 0
    out = capsys.readouterr().out
    assert "alpha = [0.5, 0.5]" in out
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["weights"] == [2.0] * 10
    assert abs(report["bias_anchor"] - 0.3) < 1e-15


def test_transfer_explicit_alphas(tmp_path, capsys):
    _model(tmp_path / "a.json", "a", [1.0] * 10, 0.0, None)
    _model(tmp_path / "b.json", "b", [0.0] * 10, 0.0, None)
    assert run("transfer", "--models", tmp_path / "a.json", tmp_path / "b.json", "--alphas", 3, 1,
               "--output", tmp_path / "r.json") == 0
    assert json.loads((tmp_path / "r.json").read_text())["weights"] == [0.75] * 10
    capsys.readouterr()


def test_performance_without_auroc_fails_cleanly(tmp_path, capsys):
    _model(tmp_path / "a.json", "a", [1.0] * 10, 0.0, None)
    assert run("transfer", "--models", tmp_path / "a.json", "--policy", "performance",
               "--output", tmp_path / "r.json") == 1
    assert "error:" in capsys.readouterr().err


def test_run_missing_config(tmp_path, capsys):
    assert run("run", "--config", tmp_path / "none.json") == 1
    assert "none.json" in capsys.readouterr().err
