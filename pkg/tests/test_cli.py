import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from rvsm.cli import RunConfig, linearity_ok, main, parse_grid
from rvsm.data_io import ClassDictionary, load_cloud, save_cloud
from rvsm.errors import InvalidInputError
from rvsm.kernel import KernelSpec
from rvsm.multiclass_map import MapPosterior, SemanticMapModel
from rvsm.sparse_bayes import BinaryRvmModel


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d / "scene"), "--count", "40", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    model = workdir / "model.json"
    assert main(["train", "--cloud", str(workdir / "scene" / "train.csv"), "--out", str(model)]) == 0
    return model


@pytest.fixture
def clean_env(monkeypatch):
    monkeypatch.delenv("RVSM_SEED", raising=False)


def perfect_model(tmp_path):
    """Hand-built map: each class fires only inside its own blob."""
    kernel = KernelSpec()
    centers = {0: (0.0, 0.0, 0.0), 1: (1.5, 0.0, 0.0), 2: (0.0, 1.5, 0.0)}
    models = tuple(BinaryRvmModel(k, kernel, [c], [-20.0, 200.0], np.eye(2)) for k, c in centers.items())
    path = tmp_path / "perfect.json"
    SemanticMapModel(models, ClassDictionary.default([0, 1, 2]), kernel).save(path)
    return path


def test_gen_writes_clouds_and_sidecars(workdir, tmp_path):
    for name in ("train", "test", "truth"):
        assert len(load_cloud(workdir / "scene" / f"{name}.csv")) == 120
        assert (workdir / "scene" / f"{name}.classes.json").exists()
    assert main(["gen", "--out", str(tmp_path), "--count", "40", "--seed", "3"]) == 0
    assert digest(tmp_path / "train.csv") == digest(workdir / "scene" / "train.csv")


def test_train_prints_counts_and_is_sparse(workdir, trained, capsys, clean_env):
    out = workdir / "again.json"
    assert main(["train", "--cloud", str(workdir / "scene" / "train.csv"), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["class", "relevance_vectors", "positive", "negative", "converged"]
    rows = [line.split() for line in lines[1:]]
    assert len(rows) == 3
    for row in rows:
        assert int(row[1]) <= 0.1 * 120
        assert int(row[2]) + int(row[3]) == 120
    # same seed: byte-identical model file
    assert out.read_bytes() == trained.read_bytes()


def test_train_does_not_mutate_inputs(workdir, tmp_path, clean_env):
    src = workdir / "scene" / "train.csv"
    before = digest(src), digest(workdir / "scene" / "train.classes.json")
    assert main(["train", "--cloud", str(src), "--out", str(tmp_path / "m.json"), "--downsample", "0.5"]) == 0
    assert (digest(src), digest(workdir / "scene" / "train.classes.json")) == before


def test_single_class_cloud_exit_2(tmp_path, capsys):
    p = tmp_path / "one.csv"
    p.write_text("x,y,z,label\n0,0,0,1\n1,0,0,1\n")
    assert main(["train", "--cloud", str(p), "--out", str(tmp_path / "m.json")]) == 2
    assert "two classes" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_bad_cloud_exit_2_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("x,y,z,label\n0,0,0,1\n0,nan,0,2\n")
    assert main(["train", "--cloud", str(p), "--out", str(tmp_path / "m.json")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_training_failure_exit_3(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"irls_max_steps": 1}}))
    code = main(["train", "--config", str(cfg), "--cloud", str(workdir / "scene" / "train.csv"),
                 "--out", str(tmp_path / "m.json")])
    assert code == 3


def test_unknown_config_keys_exit_2(tmp_path):
    for doc in ({"kernal": {}}, {"kernel": {"length": 1}}, {"train": {"seed": 1}}, {"paths": {"cloudd": "x"}}):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(doc))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 2


def test_run_config_validation():
    with pytest.raises(InvalidInputError):
        RunConfig.from_dict({"downsample_fraction": 0})
    with pytest.raises(InvalidInputError):
        RunConfig.from_dict({"kernel": {"length_scale": -1}})
    cfg = RunConfig.from_dict({"kernel": {"length_scale": 0.5}, "train": {"rng_seed": 4},
                               "bench_sizes": [10, 20], "scene": {"noise": 0.2}})
    assert cfg.kernel.length_scale == 0.5 and cfg.train.rng_seed == 4
    assert cfg.bench_sizes == (10, 20) and cfg.scene == {"noise": 0.2, "count": 300}


def test_seed_precedence(workdir, tmp_path, monkeypatch):
    cloud = str(workdir / "scene" / "train.csv")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"rng_seed": 11, "max_iterations": 2}}))

    def seed_of(*extra):
        out = tmp_path / "m.json"
        assert main(["train", "--config", str(cfg), "--cloud", cloud, "--out", str(out), *extra]) == 0
        return json.loads(out.read_text())["provenance"]["seed"]

    monkeypatch.delenv("RVSM_SEED", raising=False)
    assert seed_of() == 11
    monkeypatch.setenv("RVSM_SEED", "22")
    assert seed_of() == 22
    assert seed_of("--seed", "33") == 33
    monkeypatch.setenv("RVSM_SEED", "x")
    assert main(["train", "--config", str(cfg), "--cloud", cloud, "--out", str(tmp_path / "m.json")]) == 2


def test_flags_override_config(workdir, tmp_path, clean_env):
    cfg = tmp_path / "cfg.json"
    out = tmp_path / "m.json"
    cfg.write_text(json.dumps({"kernel": {"length_scale": 0.9}, "train": {"max_iterations": 2},
                               "paths": {"cloud": str(workdir / "scene" / "train.csv"), "out": str(out)}}))
    assert main(["train", "--config", str(cfg), "--length-scale", "0.4"]) == 0
    assert json.loads(out.read_text())["kernel"]["length_scale"] == 0.4
    assert main(["train", "--config", str(cfg)]) == 0
    assert json.loads(out.read_text())["kernel"]["length_scale"] == 0.9


def test_query_grid_and_file(trained, tmp_path):
    assert main(["query", "--model", str(trained), "--grid", "1:0:0.1,0:1:0.1,0:0:1",
                 "--out", str(tmp_path / "empty.csv")]) == 0
    assert (tmp_path / "empty.csv").read_text() == "x,y,z,p_0,p_1,p_2,label\n"

    assert main(["query", "--model", str(trained), "--grid", "0:1:0.5,0:1:0.5,0:0:1",
                 "--out", str(tmp_path / "coarse.csv")]) == 0
    assert main(["query", "--model", str(trained), "--grid", "0:1:0.25,0:1:0.5,0:0:1",
                 "--out", str(tmp_path / "fine.csv")]) == 0
    coarse = MapPosterior.from_csv(tmp_path / "coarse.csv")
    fine = MapPosterior.from_csv(tmp_path / "fine.csv")
    assert len(coarse) == 9 and len(fine) == 15
    np.testing.assert_allclose(coarse.class_probs.sum(axis=1), 1.0, atol=1e-12)

    q = tmp_path / "q.csv"
    q.write_text("x,y,z\n" + "".join(f"{i / 10},0.1,0\n" for i in range(17)))
    assert main(["query", "--model", str(trained), "--queries", str(q), "--out", str(tmp_path / "q.ply"),
                 "--plot"]) == 0
    assert len(load_cloud(tmp_path / "q.ply")) == 17
    assert (tmp_path / "q.png").stat().st_size > 0


def test_query_is_reproducible(trained, tmp_path):
    args = ["query", "--model", str(trained), "--grid=-1:2:0.3,-1:2:0.3,0:0:1"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")


@pytest.mark.parametrize("grid", ["0:1:0.1,0:1:0.1", "0:1:0,0:1:1,0:0:1", "a:1:1,0:1:1,0:0:1"])
def test_bad_grid_exit_2(trained, tmp_path, grid):
    assert main(["query", "--model", str(trained), "--grid", grid, "--out", str(tmp_path / "x.csv")]) == 2


def test_parse_grid():
    g = parse_grid("0:1:0.5,0:0:1,2:3:1")
    assert g.shape == (6, 3)
    np.testing.assert_array_equal(g[:2], [[0, 0, 2], [0, 0, 3]])
    assert parse_grid("0:0.3:0.1,0:0:1,0:0:1").shape == (4, 3)
    assert parse_grid("0:1:1,1:0:1,0:0:1").shape == (0, 3)


def test_eval_perfect_model(workdir, tmp_path, capsys):
    model = perfect_model(tmp_path)
    truth = workdir / "scene" / "truth.csv"
    assert main(["eval", "--model", str(model), "--truth", str(truth), "--out", str(tmp_path / "r.json")]) == 0
    table = capsys.readouterr().out
    assert table == (tmp_path / "r.txt").read_text()
    for row in table.splitlines()[2:4]:
        assert row.split()[1:] == ["100.0"] * 4
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["averages"] == {"auc": 1.0, "sensitivity": 1.0}
    assert (tmp_path / "r_metrics.png").exists() and (tmp_path / "r_roc.png").exists()


def test_eval_trained_model(workdir, trained, tmp_path):
    out = tmp_path / "r.json"
    assert main(["eval", "--model", str(trained), "--truth", str(workdir / "scene" / "test.csv"),
                 "--out", str(out), "--no-plot"]) == 0
    assert json.loads(out.read_text())["averages"]["auc"] > 0.97
    assert not (tmp_path / "r_roc.png").exists()


def test_eval_mismatched_lengths_exit_2(workdir, trained, tmp_path):
    post = tmp_path / "p.csv"
    assert main(["query", "--model", str(trained), "--grid", "0:1:0.5,0:0:1,0:0:1", "--out", str(post)]) == 0
    code = main(["eval", "--model", str(trained), "--truth", str(workdir / "scene" / "test.csv"),
                 "--posterior", str(post), "--out", str(tmp_path / "r.json")])
    assert code == 2


def test_eval_of_saved_posterior_matches_direct(workdir, trained, tmp_path):
    test = load_cloud(workdir / "scene" / "test.csv")
    q = tmp_path / "pts.csv"
    save_cloud(test, q)
    post = tmp_path / "p.csv"
    assert main(["query", "--model", str(trained), "--queries", str(q), "--out", str(post)]) == 0
    common = ["eval", "--model", str(trained), "--truth", str(q), "--no-plot"]
    assert main(common + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(common + ["--posterior", str(post), "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_bench(trained, tmp_path, capsys):
    out = tmp_path / "b.json"
    assert main(["bench", "--model", str(trained), "--sizes", "200,400", "--repeats", "2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert [r["n_queries"] for r in doc["results"]] == [200, 400]
    assert all(r["per_query"] > 0 for r in doc["results"])
    assert (tmp_path / "b.png").exists()
    assert len(capsys.readouterr().out.splitlines()) == 2
    # a single size never fails the assertion
    assert main(["bench", "--model", str(trained), "--sizes", "300", "--assert"]) == 0


def test_bench_missing_model_exit_2(tmp_path):
    assert main(["bench", "--model", str(tmp_path / "nope.json")]) == 2


def test_linearity_check():
    assert linearity_ok([{"per_query": 1.0}, {"per_query": 1.1}, {"per_query": 0.9}])[0]
    ok, med = linearity_ok([{"per_query": 1.0}, {"per_query": 1.0}, {"per_query": 1.5}])
    assert not ok and med == 1.0


def test_logs_are_key_value(workdir, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rvsm.cli", "gen", "--out", str(tmp_path), "--count", "5"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == ""
    for line in proc.stderr.splitlines():
        assert all("=" in tok for tok in line.split())


def test_console_script_help():
    proc = subprocess.run(["rvsm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "query", "eval", "bench", "gen"):
        assert cmd in proc.stdout
