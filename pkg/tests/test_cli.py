import json

import pytest

from qesguard import dataio
from qesguard.cli import _num_list, main


def run(capsys, *argv):
    assert main(list(argv)) == 0, argv
    return json.loads(capsys.readouterr().out)


def test_num_list():
    assert _num_list("80..96:4") == [80, 84, 88, 92, 96]
    assert _num_list("5,10,20") == [5, 10, 20]
    assert _num_list("1..3") == [1, 2, 3]


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_full_pipeline(tmp_path, capsys):
    out = run(capsys, "make-dataset", "--kind", "A", "--n-train", "120", "--n-test", "60", "--out", str(tmp_path / "A"))
    tr, te = out["train"], out["test"]
    clf = str(tmp_path / "clf.json")
    acc = run(capsys, "train-classifier", "--data", tr, "--test", te, "--preset", "tiny", "--epochs", "1",
              "--out", clf)
    assert 0 <= acc["train_acc"] <= 1
    adv, adv_te = str(tmp_path / "adv.json"), str(tmp_path / "adv_te.json")
    run(capsys, "gen-attacks", "--classifier", clf, "--data", tr, "--attack", "PGD", "--steps", "2", "--out", adv)
    run(capsys, "gen-attacks", "--classifier", clf, "--data", te, "--attack", "PGD", "--steps", "2", "--out", adv_te)
    m = dataio.DatasetManifest.load(adv)
    assert m.attack["config"]["kind"] == "PGD" and m.attack["linf_max"] <= 8 / 255 + 1e-12
    det = str(tmp_path / "det.json")
    run(capsys, "qes-train", "--nat", tr, "--adv", adv, "--epochs", "1", "--optimizer", "adam", "--lr-scale", "20",
        "--batch-size", "40", "--out", det)
    prov = dataio.load_checkpoint(det).metadata["provenance"]
    assert {"command", "seed", "config", "inputs"} <= set(prov)
    bnd = str(tmp_path / "b.json")
    run(capsys, "calibrate", "--detector", det, "--data", tr, "--samples", "100", "--out", bnd)
    outs = str(tmp_path / "o.json")
    run(capsys, "detect", "--detector", det, "--boundaries", bnd, "--data", adv_te, "--out", outs)
    assert len(dataio.load_outcomes(outs)[0]) == 60
    rep = run(capsys, "evaluate", "--detector", det, "--boundaries", bnd, "--classifier", clf, "--nat", te,
              "--adv", adv_te)
    assert 0 <= rep["metrics"]["AUC"] <= 1 and sum(rep["exit_histogram"]["natural"]) == 60
    outs_nat = str(tmp_path / "on.json")
    run(capsys, "detect", "--detector", det, "--boundaries", bnd, "--data", te, "--out", outs_nat)
    energy = run(capsys, "energy-report", "--outcomes-nat", outs_nat, "--outcomes-adv", outs, "--bits", "16")
    assert energy
    info = run(capsys, "model-info", "--detector", det)
    assert info

    # boundaries from another detector are refused
    det2 = str(tmp_path / "det2.json")
    run(capsys, "qes-train", "--nat", tr, "--adv", adv, "--epochs", "1", "--seed", "9", "--batch-size", "40",
        "--out", det2)
    assert main(["detect", "--detector", det2, "--boundaries", bnd, "--data", te, "--out", outs]) == 2
    assert "different detector" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path, capsys):
    assert main(["calibrate", "--detector", str(tmp_path / "nope.json"), "--data", "x", "--out", "y"]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_model_info_preset(capsys):
    info = run(capsys, "model-info", "--preset", "D1")
    assert info


def test_energy_baseline(capsys):
    out = run(capsys, "energy-report", "--baseline", "--n-nat", "1000", "--n-adv", "1000", "--bits", "16")
    assert out
