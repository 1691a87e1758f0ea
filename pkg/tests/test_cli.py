import csv
import json

import numpy as np
import pytest

from anchorrec.cli import main
from anchorrec.ingest import load_features, load_interactions

SMALL_SYNTH = """
[synth]
num_users = 60
num_items = 40
num_blocks = 4
p_in = 0.4
p_out = 0.02
dims = {{ mm = 6, t = 5, v = 7 }}
clusters = {{ mm = 4, t = 4, v = 4 }}
noise = {noise}
"""

FAST = ["model.d=8", "model.d_proj=8", "data.k_sim=4", "train.epochs_max=2", "train.eval_every=1",
        "train.batch_size=128", "train.learning_rate=0.01", "train.seeds=[0, 1]"]


def sets(tmp_path, extra=()):
    args = []
    for s in [*FAST, f"output.dir='{tmp_path / 'runs'}'", *extra]:
        args += ["--set", s]
    return args


def run(capsys, argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text(SMALL_SYNTH.format(noise=0.3))
    code, _, _ = run(capsys, ["synth", "-c", spec, "--seed", 0, "--out", tmp_path / "data"])
    assert code == 0
    return tmp_path / "data" / "dataset.toml"


@pytest.fixture
def trained(tmp_path, capsys, dataset):
    code, out, _ = run(capsys, ["train", "-c", dataset, *sets(tmp_path)])
    assert code == 0
    return dataset, json.loads(out)["out"]


# ---------------------------------------------------------------- synth

def test_synth_writes_loadable_files(dataset):
    d = dataset.parent
    assert sorted(p.name for p in d.iterdir()) == sorted(
        ["dataset.toml", "interactions.tsv"] + [f"{m}.{e}" for m in ("mm", "t", "v") for e in ("f32", "json")])
    ds = load_interactions(d / "interactions.tsv")
    assert load_features(d / "v.f32", ds.num_items).shape == (ds.num_items, 7)


def test_synth_seed_sensitivity(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text(SMALL_SYNTH.format(noise=0.3))
    texts = []
    for seed in (0, 1):
        run(capsys, ["synth", "-c", spec, "--seed", seed, "--out", tmp_path / f"s{seed}"])
        texts.append((tmp_path / f"s{seed}" / "interactions.tsv").read_text())
    assert texts[0] != texts[1]


def test_synth_zero_noise_rows_collapse_to_centroids(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text(SMALL_SYNTH.format(noise=0.0))
    run(capsys, ["synth", "-c", spec, "--out", tmp_path / "z"])
    t = load_features(tmp_path / "z" / "t.f32")
    rows, cluster = np.unique(t, axis=0, return_inverse=True)
    assert len(rows) == 4
    unit = t / np.linalg.norm(t, axis=1, keepdims=True)
    same = cluster[:, None] == cluster[None, :]
    np.testing.assert_allclose((unit @ unit.T)[same], 1.0, atol=1e-6)


def test_synth_bad_spec_exit_1(tmp_path, capsys):
    spec = tmp_path / "spec.toml"
    spec.write_text("[synth]\np_in = 0.1\np_out = 0.2\n")
    code, _, err = run(capsys, ["synth", "-c", spec, "--out", tmp_path / "x"])
    assert code == 1 and json.loads(err)["exit_code"] == 1


# ---------------------------------------------------------------- train / evaluate

def test_train_artifacts(trained):
    _, out = trained
    report = json.loads(open(f"{out}/metrics.json").read())
    assert report["seeds"] == [0, 1] and report["failures"] == 0
    assert len(report["per_seed"]) == 2 and "recall@20" in report["test"]
    for s in (0, 1):
        log = open(f"{out}/seed{s}/train_log.jsonl").read().splitlines()
        assert {json.loads(line)["type"] for line in log} == {"epoch", "eval"}
    with open(f"{out}/seed0/checkpoint.ancr", "rb") as fh:
        assert fh.read(4) == b"ANCR"


def test_evaluate_matches_fit_validation(trained, tmp_path, capsys):
    dataset, out = trained
    code, text, _ = run(capsys, ["evaluate", "-c", dataset, *sets(tmp_path), "--checkpoint",
                                 f"{out}/seed1/checkpoint.ancr", "--split", "val", "--cutoffs", "20"])
    assert code == 0
    report = json.loads(open(f"{out}/metrics.json").read())
    fit_val = next(r for r in report["per_seed"] if r["seed"] == 1)["val"]
    ev = json.loads(text)["metrics"]
    assert ev["recall"]["20"] == fit_val["recall"]["20"]
    assert ev["ndcg"]["20"] == fit_val["ndcg"]["20"]


def test_evaluate_three_cutoffs(trained, tmp_path, capsys):
    dataset, out = trained
    target = tmp_path / "ev.json"
    code, _, _ = run(capsys, ["evaluate", "-c", dataset, *sets(tmp_path), "--checkpoint",
                              f"{out}/seed0/checkpoint.ancr", "--cutoffs", "10,20,50", "--out", target])
    assert code == 0
    metrics = json.loads(target.read_text())["metrics"]
    assert sorted(metrics["recall"], key=int) == ["10", "20", "50"] == sorted(metrics["ndcg"], key=int)


def test_evaluate_dimension_mismatch_is_hard_error(trained, tmp_path, capsys):
    dataset, out = trained
    code, _, err = run(capsys, ["evaluate", "-c", dataset, *sets(tmp_path, ["model.d=4"]),
                                "--checkpoint", f"{out}/seed0/checkpoint.ancr"])
    assert code == 3 and "shape" in json.loads(err)["message"]


def test_corrupt_checkpoint_exit_3(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.ancr"
    bad.write_bytes(b"ANCR\x01\x00")
    code, _, _ = run(capsys, ["evaluate", "-c", dataset, *sets(tmp_path), "--checkpoint", bad])
    assert code == 3


def test_missing_feature_file_exit_2(dataset, tmp_path, capsys):
    (dataset.parent / "v.f32").unlink()
    code, _, err = run(capsys, ["train", "-c", dataset, *sets(tmp_path)])
    assert code == 2 and "v.f32" in json.loads(err)["message"]


def test_unknown_key_exit_1(dataset, tmp_path, capsys):
    code, _, err = run(capsys, ["train", "-c", dataset, *sets(tmp_path, ["model.width=3"])])
    assert code == 1 and "width" in err


def test_usage_errors_exit_4(capsys):
    assert run(capsys, [])[0] == 4
    assert run(capsys, ["train"])[0] == 4
    assert run(capsys, ["frobnicate"])[0] == 4


def test_ablation_override_changes_hash(dataset, tmp_path, capsys):
    _, a, _ = run(capsys, ["train", "-c", dataset, *sets(tmp_path, ["train.seeds=[0]"])])
    _, b, _ = run(capsys, ["train", "-c", dataset, *sets(tmp_path, ["train.seeds=[0]", "losses.lambda1=0",
                                                                    "losses.lambda2=0"])])
    assert json.loads(a)["out"] != json.loads(b)["out"]


def test_train_is_byte_deterministic(dataset, tmp_path, capsys):
    _, text, _ = run(capsys, ["train", "-c", dataset, *sets(tmp_path)])
    out = json.loads(text)["out"]
    files = ["metrics.json", "config.toml", "seed0/checkpoint.ancr", "seed1/train_log.jsonl"]
    first = {f: open(f"{out}/{f}", "rb").read() for f in files}
    run(capsys, ["train", "-c", dataset, *sets(tmp_path)])
    assert all(open(f"{out}/{f}", "rb").read() == first[f] for f in files)


def test_resolved_config_reproduces_run(trained, tmp_path, capsys):
    _, out = trained
    code, text, _ = run(capsys, ["train", "-c", f"{out}/config.toml"])
    assert code == 0 and json.loads(text)["out"] == out


# ---------------------------------------------------------------- analyze

def test_analyze_all(trained, tmp_path, capsys):
    dataset, out = trained
    dest = tmp_path / "an"
    code, _, _ = run(capsys, ["analyze", "-c", dataset, *sets(tmp_path), "--checkpoint",
                              f"{out}/seed0/checkpoint.ancr", "--analyses", "overlap,neighbors,export",
                              "--target", 7, "--k", 3, "--out", dest])
    assert code == 0
    ov = json.loads((dest / "overlap.json").read_text())
    assert len(ov["labels"]) == 9 and ov["labels"][0] == "raw-mm"
    vals = np.array(ov["values"])
    assert np.array_equal(vals, vals.T) and np.all(np.diag(vals) == 1.0)
    nb = json.loads((dest / "neighbors_7.json").read_text())
    assert len(nb["neighbors"]) == 3 and nb["target"] == 7
    names = sorted(p.name for p in (dest / "embeddings").iterdir())
    stems = {n.rsplit(".", 1)[0] for n in names}
    assert len(names) == 2 * len(stems) and {"fused", "proj-mm", "origin-id"} <= stems


def test_analyze_unknown_name_exit_4(trained, tmp_path, capsys):
    dataset, out = trained
    code, _, _ = run(capsys, ["analyze", "-c", dataset, *sets(tmp_path), "--checkpoint",
                              f"{out}/seed0/checkpoint.ancr", "--analyses", "tsne"])
    assert code == 4


# ---------------------------------------------------------------- sweep

def test_sweep_two_by_two(dataset, tmp_path, capsys):
    code, text, _ = run(capsys, ["sweep", "-c", dataset, *sets(tmp_path, ["train.seeds=[0]"]),
                                 "--grid", "losses.lambda1=0,0.1", "--grid", "losses.tau=0.1,0.2"])
    assert code == 0
    out = json.loads(text)["out"]
    body = json.loads(open(f"{out}/sweep.json").read())
    assert len(body["cells"]) == 4
    assert sum(c["best"] for c in body["cells"]) == 1
    with open(f"{out}/sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["losses.lambda1"], r["losses.tau"]) for r in rows] == [
        ("0", "0.1"), ("0", "0.2"), ("0.1", "0.1"), ("0.1", "0.2")]


def test_degenerate_sweep_equals_train(dataset, tmp_path, capsys):
    extra = ["train.seeds=[0]"]
    _, text, _ = run(capsys, ["train", "-c", dataset, *sets(tmp_path, extra)])
    train_val = json.loads(text)["val"]
    _, text, _ = run(capsys, ["sweep", "-c", dataset, *sets(tmp_path, extra), "--grid", "losses.tau=0.2"])
    cell = json.loads(open(f"{json.loads(text)['out']}/sweep.json").read())["cells"][0]
    assert cell["val_recall@20"] == train_val["recall@20"]["mean"]
