import json
from pathlib import Path

import numpy as np
import pytest

from gendissect import cli, persist, scenes, weights


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "model.gdw"
    net, truth = scenes.build_planted_generator(seed=0)
    weights.save_weights(net, path)
    scenes.save_truth(truth, str(path) + ".truth.json")
    return path, truth


def test_dissect_writes_report_and_grid(model_file, tmp_path):
    path, truth = model_file
    out = tmp_path / "dis"
    code = cli.main(["dissect", "--model", str(path), "--out", str(out),
                     "--val-samples", "100", "--samples", "300", "--seed", "5",
                     "--no-parts"])
    assert code == 0
    report = persist.load_json(out / "report.json", kind="dissection-report")
    for c in truth.concepts:
        assert report["histogram"].get(c.name, 0) >= len(c.units) - 1
    assert (out / "units.png").exists()


def test_dissect_determinism_byte_identical(model_file, tmp_path):
    path, _ = model_file
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(["dissect", "--model", str(path), "--out", str(out),
                         "--val-samples", "60", "--samples", "150", "--seed", "5",
                         "--no-parts"])
        assert code == 0
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]


def test_dissect_missing_model_exits_2(tmp_path):
    out = tmp_path / "none"
    code = cli.main(["dissect", "--model", str(tmp_path / "missing.gdw"),
                     "--out", str(out)])
    assert code == 2
    assert not (out / "report.json").exists()


def test_intervene_ablate_door(model_file, tmp_path):
    path, truth = model_file
    out = tmp_path / "int"
    code = cli.main(["intervene", "--model", str(path), "--concept", "door",
                     "--mode", "ablate", "--n-units", "8", "--samples", "120",
                     "--k-samples", "120", "--opt-steps", "8", "--seed", "3",
                     "--out", str(out)])
    assert code == 0
    ace = persist.load_json(out / "ace.json", kind="ace-result")
    assert ace["delta"] > 0
    curve = persist.load_json(out / "curve.json")
    assert curve["points"][0]["remaining"] == pytest.approx(1.0)
    assert curve["points"][-1]["remaining"] <= 0.2
    context = persist.load_json(out / "context.json", kind="context-effect")
    assert "building" in context["buckets"]
    assert (out / "pair00_before.png").exists()
    assert (out / "pair00_after.png").exists()


def test_intervene_absent_concept_exits_1(model_file, tmp_path):
    path, _ = model_file
    # universe with an extra concept that never appears
    uni = scenes.default_universe()
    from gendissect import segment
    uni = segment.ConceptUniverse(concepts=uni.concepts + [
        segment.ConceptSpec("violet", (0.80, 0.90), "rect")])
    upath = tmp_path / "universe.json"
    uni.save(upath)
    code = cli.main(["intervene", "--model", str(path), "--concept", "violet",
                     "--universe", str(upath), "--out", str(tmp_path / "x")])
    assert code == 1


def test_diagnose_usage_errors(model_file, tmp_path):
    path, _ = model_file
    code = cli.main(["diagnose", "--model", str(path), "--n-generate", "50",
                     "--top-k", "10", "--out", str(tmp_path / "d1")])
    assert code == 2
    code = cli.main(["diagnose", "--model", str(path), "--n-generate", "200",
                     "--top-k", "500", "--out", str(tmp_path / "d2")])
    assert code == 2


def test_diagnose_ranks_artifacts_and_repairs(model_file, tmp_path):
    path, truth = model_file
    out = tmp_path / "diag"
    code = cli.main(["diagnose", "--model", str(path), "--n-generate", "400",
                     "--top-k", "60", "--repair-m", "4", "--seed", "2",
                     "--out", str(out)])
    assert code == 0
    scores = persist.load_json(out / "scores.json")["scores"]
    best = max(scores, key=lambda s: s["fid"])
    assert best["unit"] in truth.artifact_units
    repair = persist.load_json(out / "repair.json")
    assert repair["fid_after"] < repair["fid_before"]


def test_unknown_subcommand_usage():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
