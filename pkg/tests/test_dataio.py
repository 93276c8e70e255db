import numpy as np
import pytest
from scipy.stats import chisquare

from sucm import dataio
from sucm.baselines import BaselineConfig, train_bpr
from sucm.errors import CorruptFile, EmptyAfterFiltering, ParseError, SpecInfeasible, UnknownAppInRecord, VersionMismatch
from sucm.gradcheck import random_params
from sucm.model import log_prob_matrix
from sucm.taxonomy import APP, INTERNAL, build_tree


def app_tree(n=50):
    edges = [("root", None, INTERNAL, "root"), ("c", "root", INTERNAL, "c")]
    edges += [(f"a{k}", "c", APP, f"a{k}") for k in range(n)]
    return build_tree(edges)


def loader_fixture():
    """u1: 40 apps, one rated 2 -> 39 -> dropped.  u2: 41 with a duplicate -> 40 kept.
    u3: 40 unrated (missing rating counts) -> kept."""
    lines = ["# header comment"]
    lines += [f"u1\ta{k}\t{2 if k == 0 else 4}" for k in range(40)]
    lines += [f"u2\ta{k}\t3" for k in range(40)] + ["u2\ta5\t5"]
    lines += [f"u3\ta{k}" for k in range(40)]
    return lines


def test_loader_rules(tmp_path):
    path = tmp_path / "adoptions.tsv"
    path.write_text("\n".join(loader_fixture()) + "\n")
    data = dataio.load_adoptions(path, app_tree())
    assert data.user_labels == ("u2", "u3")
    assert [len(data.items(u)) for u in range(2)] == [40, 40]


def test_loader_threshold_and_minimum_are_parameters():
    data = dataio.parse_adoptions(loader_fixture(), app_tree(), rating_threshold=2, min_adoptions=40)
    assert data.user_labels == ("u1", "u2", "u3")
    data = dataio.parse_adoptions(loader_fixture(), app_tree(), min_adoptions=39)
    assert data.user_labels == ("u1", "u2", "u3")
    with pytest.raises(EmptyAfterFiltering):
        dataio.parse_adoptions(loader_fixture(), app_tree(), min_adoptions=41)


def test_loader_errors():
    tree = app_tree()
    with pytest.raises(ParseError) as exc:
        dataio.parse_adoptions(["u\ta1", "broken line"], tree, min_adoptions=1)
    assert exc.value.line == 2
    with pytest.raises(UnknownAppInRecord):
        dataio.parse_adoptions(["u\tnope"], tree, min_adoptions=1)
    with pytest.raises(ParseError):
        dataio.parse_adoptions(["u\ta1\thigh"], tree, min_adoptions=1)


def test_stats():
    data = dataio.AdoptionDataset([(0, 0), (1, 1)], 2, 2)
    st = dataio.stats(data)
    assert st["sparsity"] == 0.5 and st["mean_adoptions"] == 1.0
    full = dataio.stats(dataio.AdoptionDataset([(0, 0), (0, 1), (1, 0), (1, 1)], 2, 2))
    assert full["sparsity"] == 0.0
    st = dataio.stats_from_counts(52483, 26426, 3286156)
    text = dataio.format_stats(st)
    assert "99.76%" in text and "62.61" in text


# -- synthetic data -----------------------------------------------------------------------------------

def test_synthetic_counts_and_determinism():
    spec = dataio.SynthSpec(num_users=30, fanouts=(2, 2), apps_per_subcategory=5, adoptions_per_user=7, seed=3)
    tree, data, planted = dataio.generate_synthetic(spec)
    assert tree.num_apps == spec.num_apps == 20
    assert all(len(data.items(u)) == 7 for u in range(30))
    _, again, p2 = dataio.generate_synthetic(spec)
    assert np.array_equal(data.instances, again.instances) and np.array_equal(planted.P, p2.P)
    _, other, _ = dataio.generate_synthetic(dataio.SynthSpec(**{**spec.to_dict(), "seed": 4}))
    assert not np.array_equal(data.instances, other.instances)


def test_synthetic_infeasible():
    with pytest.raises(SpecInfeasible):
        dataio.generate_synthetic(dataio.SynthSpec(fanouts=(2,), apps_per_subcategory=3, adoptions_per_user=7))
    with pytest.raises(ValueError):
        dataio.SynthSpec(fanouts=(0,))


def test_first_draw_follows_planted_distribution():
    spec = dataio.SynthSpec(num_users=1, fanouts=(2, 2), apps_per_subcategory=5, adoptions_per_user=1, seed=0)
    tree, _, planted = dataio.generate_synthetic(spec)
    probs = np.exp(log_prob_matrix(planted, [0]))[0]
    rng = np.random.default_rng(0)
    counts = np.bincount([dataio.sample_without_replacement(probs, 1, rng)[0] for _ in range(20000)],
                         minlength=20)
    assert chisquare(counts, probs * counts.sum()).pvalue > 1e-3


def test_zero_scale_is_near_uniform_choice():
    spec = dataio.SynthSpec(num_users=2, fanouts=(2, 2), apps_per_subcategory=4, adoptions_per_user=1,
                            scale=0.0, node_spread=0.0, bias_scale=0.0)
    _, _, planted = dataio.generate_synthetic(spec)
    np.testing.assert_allclose(np.exp(log_prob_matrix(planted)), 1 / 16, atol=1e-12)


def test_sample_without_replacement_distinct():
    rng = np.random.default_rng(0)
    probs = np.array([0.5, 0.3, 0.1, 0.1, 0.0])
    draw = dataio.sample_without_replacement(probs, 4, rng)
    assert sorted(draw) == [0, 1, 2, 3]


# -- model files ------------------------------------------------------------------------------------

def _sucm_params():
    rng = np.random.default_rng(7)
    tree = app_tree(9)
    p = random_params(rng, tree, num_users=4, K=3)
    p.meta["config"] = {"K": 3}
    return p


def test_sucm_round_trip_bitwise(tmp_path):
    p = _sucm_params()
    path = tmp_path / "m.sucm"
    dataio.save_model(p, path, user_labels=["a", "b", "c", "d"], extra={"split": [0.8, 0]})
    q, header = dataio.read_model(path)
    for name, arr in p.arrays().items():
        assert np.array_equal(arr, q.arrays()[name])
    assert header["users"] == ["a", "b", "c", "d"] and header["extra"]["split"] == [0.8, 0]
    assert q.forest.to_dict() == p.forest.to_dict() and q.sigma == p.sigma
    path2 = tmp_path / "m2.sucm"
    dataio.save_model(q, path2, user_labels=header["users"], extra=header["extra"])
    assert path.read_bytes() == path2.read_bytes()


def test_flat_round_trip(tmp_path):
    data = dataio.AdoptionDataset([(0, 1), (1, 2), (1, 0)], 2, 9)
    flat = train_bpr(data, BaselineConfig(K=2, max_iter=2))
    path = tmp_path / "f.sucm"
    with pytest.raises(ValueError):
        dataio.save_model(flat, path)
    dataio.save_model(flat, path, tree=app_tree(9))
    back = dataio.load_model(path)
    assert np.array_equal(back.Q, flat.Q) and back.meta["model"] == "bpr"


def test_corrupt_and_version(tmp_path):
    p = _sucm_params()
    path = tmp_path / "m.sucm"
    dataio.save_model(p, path)
    blob = path.read_bytes()
    (tmp_path / "t.sucm").write_bytes(blob[:-50])
    with pytest.raises(CorruptFile):
        dataio.load_model(tmp_path / "t.sucm")
    flipped = bytearray(blob)
    flipped[40] ^= 1
    (tmp_path / "x.sucm").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFile):
        dataio.load_model(tmp_path / "x.sucm")
    (tmp_path / "v.sucm").write_bytes(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(VersionMismatch):
        dataio.load_model(tmp_path / "v.sucm")
    (tmp_path / "g.sucm").write_bytes(b"garbage")
    with pytest.raises(CorruptFile):
        dataio.load_model(tmp_path / "g.sucm")


def test_dataset_tsv_round_trip(tmp_path):
    tree = app_tree(45)
    pairs = [(0, k) for k in range(40)] + [(1, k) for k in range(2, 44)]
    data = dataio.AdoptionDataset(pairs, 2, 45, ["x", "y"], tree.app_labels)
    data.to_tsv(tmp_path / "d.tsv")
    back = dataio.load_adoptions(tmp_path / "d.tsv", tree)
    assert np.array_equal(back.instances, data.instances) and back.user_labels == ("x", "y")
