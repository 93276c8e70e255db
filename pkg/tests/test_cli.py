import json

import pytest

from sucm import dataio
from sucm import evaluation as ev
from sucm.cli import main
from sucm.taxonomy import load_taxonomy


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    prefix = str(d / "s")
    assert main(["synth", "--users", "40", "--fanouts", "2,2", "--apps-per-subcategory", "6",
                 "--adoptions-per-user", "10", "--dim", "3", "--seed", "1", "--out-prefix", prefix]) == 0
    return {"dir": d, "tax": prefix + ".taxonomy.tsv", "adopt": prefix + ".adoptions.tsv",
            "planted": prefix + ".planted.model"}


def data_flags(s):
    return ["--taxonomy", s["tax"], "--adoptions", s["adopt"], "--min-adoptions", "5"]


def train_args(s, out, *extra):
    return ["train", *data_flags(s), "--dim", "3", "--epochs", "3", "--quiet", "--out", str(out), *extra]


def test_synth_outputs(synth, capsys):
    params, header = dataio.read_model(synth["planted"])
    assert header["kind"] == "sucm" and len(header["users"]) == 40
    assert main(["validate", "--taxonomy", synth["tax"], "--adoptions", synth["adopt"], "--min-adoptions", "5"]) == 0
    out = capsys.readouterr().out
    assert "apps\t24" in out and "400" in out


def test_validate_counts(capsys):
    assert main(["validate", "--counts", "52483,26426,3286156"]) == 0
    out = capsys.readouterr().out
    assert "99.76%" in out and "62.61" in out
    assert main(["validate", "--counts", "1,2"]) == 2


@pytest.mark.parametrize("model", ["sucm", "llfm", "pmf-neg", "bpr", "ccf"])
def test_train_evaluate_deterministic(synth, model, capsys):
    d = synth["dir"]
    outs = []
    for k in range(2):
        m = d / f"{model}{k}.model"
        assert main(train_args(synth, m, "--model", model)) == 0
        r = d / f"{model}{k}"
        assert main(["evaluate", "--model-file", str(m), *data_flags(synth), "--out", str(r)]) == 0
        outs.append((m.read_bytes(), (d / f"{model}{k}.tsv").read_bytes(), (d / f"{model}{k}.json").read_bytes()))
    assert outs[0] == outs[1]
    doc = json.loads(outs[0][2])
    assert doc["n_evaluated"] == 40 and len(doc["results"]) == 20
    assert "precision" in capsys.readouterr().out


def test_train_prints_objectives(synth, capsys):
    assert main(["train", *data_flags(synth), "--dim", "2", "--epochs", "2",
                 "--out", str(synth["dir"] / "p.model")]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch")]
    assert len(lines) == 2


def test_bad_epochs_and_flags(synth, capsys):
    assert main(train_args(synth, synth["dir"] / "x.model", "--epochs", "0")) == 2
    assert main(train_args(synth, synth["dir"] / "x.model", "--lr", "-1")) == 2
    assert main(["nonsense"]) == 2
    assert "UsageError" in capsys.readouterr().err


def test_config_layering(synth, capsys):
    cfg = synth["dir"] / "cfg.json"
    cfg.write_text(json.dumps({"dim": 2, "epochs": 1, "model": "bpr"}))
    m = synth["dir"] / "c.model"
    assert main(train_args(synth, m, "--config", str(cfg), "--epochs", "2")) == 0
    _, header = dataio.read_model(m)
    # explicit --dim 3 in train_args wins over the file; model comes from the file
    assert header["K"] == 3 and header["kind"] == "bpr"
    cfg.write_text(json.dumps({"dimension": 2}))
    assert main(train_args(synth, m, "--config", str(cfg))) == 2
    cfg.write_text(json.dumps({"model": "svd"}))
    assert main(train_args(synth, m, "--config", str(cfg))) == 2


def test_recommend(synth, capsys):
    m = synth["dir"] / "r.model"
    assert main(train_args(synth, m)) == 0
    capsys.readouterr()
    assert main(["recommend", "--model-file", str(m), "--user", "u3", "--n", "1"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 1
    assert main(["recommend", "--model-file", str(m), "--user", "u3", "--n", "30", "--exclude-train",
                 "--adoptions", synth["adopt"], "--min-adoptions", "5"]) == 0
    shown = [l.split("\t")[0] for l in capsys.readouterr().out.strip().splitlines()]
    tree = load_taxonomy(synth["tax"])
    data = dataio.load_adoptions(synth["adopt"], tree, min_adoptions=5)
    train, _ = ev.split(data, ev.SplitSpec(0.8, 0))
    seen = {tree.app_label(a) for a in train.items(data.user_labels.index("u3")).tolist()}
    assert len(shown) == 24 - len(seen) and not seen & set(shown)
    assert main(["recommend", "--model-file", str(m), "--user", "nobody"]) == 1
    assert "UnknownUser" in capsys.readouterr().err
    assert main(["recommend", "--model-file", str(m), "--user", "u3", "--exclude-train"]) == 2


def test_evaluate_rejects_other_taxonomy(synth, tmp_path, capsys):
    m = synth["dir"] / "r2.model"
    assert main(train_args(synth, m)) == 0
    other = str(tmp_path / "o")
    assert main(["synth", "--users", "40", "--fanouts", "2,3", "--apps-per-subcategory", "4",
                 "--adoptions-per-user", "10", "--out-prefix", other]) == 0
    assert main(["evaluate", "--model-file", str(m), "--taxonomy", other + ".taxonomy.tsv",
                 "--adoptions", other + ".adoptions.tsv", "--min-adoptions", "5"]) == 1


def test_missing_file_and_corrupt_model(synth, tmp_path, capsys):
    assert main(["validate", "--taxonomy", str(tmp_path / "none.tsv")]) == 1
    bad = tmp_path / "bad.model"
    bad.write_bytes(b"nope")
    assert main(["recommend", "--model-file", str(bad), "--user", "u1"]) == 1
    assert "CorruptFile" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--probes", "5", "--seed", "2"]) == 0
    assert "overall" in capsys.readouterr().out
