import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bigran.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from bigran.core import load_vectors

SMALL = """\
dim = 16
n_answers = 1000
n_queries = 300
n_clusters = 8
warmup_epochs = 3
warmup_batch = 64
M = 4
P = 16
kmeans_iters = 5
opq_alternations = 2
s1_epochs = 2
s1_batch = 64
graph_N = 50
s2_epochs = 2
s2_batch = 64
s3_epochs = 1
s3_batch = 64
queue_capacity = 256
hnsw_max_degree = 8
ef_construction = 32
N = 100
ef_search = 100
eval_Ns = 10,50,100
bits_Ms = 2,4,8
bits_K = 20
"""


def run(*argv) -> int:
    return main([str(a) for a in argv])


def _pipeline(root: Path, extra=()):
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    c = ["--config", cfg, *extra]
    assert run("gen", *c, "--out", root / "data") == EXIT_OK
    assert run("train", *c, "--data", root / "data", "--out", root / "model", "--unify") == EXIT_OK
    assert run("build-index", *c, "--model", root / "model", "--data", root / "data", "--out", root / "index") == EXIT_OK
    return cfg


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _pipeline(root)
    return root, cfg


def test_artifacts_and_manifests(built):
    root, _ = built
    for sub in ("data", "model", "index"):
        assert (root / sub / "config.resolved").exists()
        assert (root / sub / "meta.json").exists()
        man = json.loads((root / sub / "manifest.json").read_text())
        assert man["artifacts"]
    for f in ("g.bge", "f_s.bgb", "graph.bgg", "g_prime.bge", "f_d.bge", "g_unified.bge", "train_log.tsv"):
        assert (root / "model" / f).exists()
    log = (root / "model" / "train_log.tsv").read_text().splitlines()
    assert log[0] == "stage\tepoch\tstep\tloss\tval_loss\tvisit_hash"


def test_search_output(built, capsys):
    root, cfg = built
    out = root / "results.tsv"
    assert run("search", "--config", cfg, "--index", root / "index", "--model", root / "model",
               "--queries", root / "data" / "queries.bgv", "-N", 50, "-K", 5, "--ef", 50, "--out", out) == EXIT_OK
    rows = [r.split("\t") for r in out.read_text().splitlines()]
    assert len(rows) == 300 * 5
    assert [int(r[1]) for r in rows[:5]] == [0, 1, 2, 3, 4]
    scores = [float(r[3]) for r in rows[:5]]
    assert scores == sorted(scores, reverse=True)


def test_search_modes_and_exhaustive(built):
    root, cfg = built
    a, b = root / "dual.tsv", root / "exh.tsv"
    base = ["search", "--config", cfg, "--index", root / "index", "--model", root / "model",
            "--queries", root / "data" / "queries.bgv", "-K", 3]
    assert run(*base, "--mode", "dual", "--out", a) == EXIT_OK
    assert run(*base, "--exhaustive", "--store", root / "index" / "dense.bgd", "--out", b) == EXIT_OK
    assert len(a.read_text().splitlines()) == len(b.read_text().splitlines()) == 900


def test_search_usage_errors(built):
    root, cfg = built
    base = ["search", "--config", cfg, "--index", root / "index", "--model", root / "model",
            "--queries", root / "data" / "queries.bgv"]
    with pytest.raises(SystemExit) as e:
        run(*base, "-N", 100, "--ef", 10)
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        run(*base, "-N", 5, "-K", 10)
    assert e.value.code == EXIT_USAGE


def test_eval_reports(built):
    root, cfg = built
    out = root / "eval"
    assert run("eval", "--config", cfg, "--data", root / "data", "--model", root / "model",
               "--index", root / "index", "--out", out, "--plot") == EXIT_OK
    q = (out / "quantizers.tsv").read_text().splitlines()
    assert q[0] == "method\tN\trecall"
    assert {r.split("\t")[0] for r in q[1:]} == {"pq", "opq", "contrastive", "upper_bound"}
    assert (out / "sweep_candidates.tsv").read_text().splitlines()[0] == "N\trecall\tlatency_median_ms\tlatency_p95_ms"
    bits = (out / "sweep_bits.tsv").read_text().splitlines()
    assert bits[0] == "M\tbits\trecall\tresident_bytes"
    assert [r.split("\t")[1] for r in bits[1:]] == ["16", "32", "64"]


def test_stats(built, capsys):
    root, _ = built
    assert run("stats", "--index", root / "index") == EXIT_OK
    s = json.loads(capsys.readouterr().out)
    assert s["count"] == 1000 and s["bits_per_item"] == 16
    assert s["resident_bytes"] == s["code_bytes"] + s["codebook_bytes"] + s["adjacency_bytes"]


def test_graph_and_dump_batches(built, capsys):
    root, cfg = built
    assert run("graph", "build", "--config", cfg, "--data", root / "data", "--model", root / "model",
               "--out", root / "g", "-N", 20) == EXIT_OK
    outs = {}
    for s in ("snowball", "randomwalk"):
        assert run("graph", "dump-batches", "--graph", root / "g" / "graph.bgg", "--strategy", s, "--batch", 16) == EXIT_OK
        outs[s] = capsys.readouterr().out
    assert outs["snowball"] != outs["randomwalk"]
    assert all(len(line.split("\t")) == 3 for line in outs["snowball"].splitlines())


def test_build_from_codes(built, tmp_path):
    root, cfg = built
    assert run("build-index", "--config", cfg, "--codes", root / "index" / "codes.bgc",
               "--books", root / "index" / "books.bgb", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "index.bgh").read_bytes() == (root / "index" / "index.bgh").read_bytes()


def test_exit_codes(built, tmp_path):
    root, cfg = built
    bad = tmp_path / "bad.cfg"
    bad.write_text("nope = 1\n")
    assert run("gen", "--config", bad, "--out", tmp_path / "x") == EXIT_VALIDATION
    assert run("gen", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "x") == EXIT_IO
    assert run("stats", "--index", tmp_path) == EXIT_IO
    assert run("build-index", "--config", cfg, "--codes", root / "index" / "codes.bgc", "--out", tmp_path) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        run("train")
    assert e.value.code == EXIT_USAGE


def test_hash_chain_detects_changed_input(built, tmp_path):
    root, cfg = built
    import shutil

    shutil.copytree(root / "data", tmp_path / "data")
    shutil.copytree(root / "model", tmp_path / "model")
    vs = load_vectors(tmp_path / "data" / "answers.bgv")
    from bigran.core import save_vectors

    v = vs.vectors.copy()
    v[0, 0] += 1
    save_vectors(type(vs)(v), tmp_path / "data" / "answers.bgv")
    rc = run("build-index", "--config", cfg, "--model", tmp_path / "model", "--data", tmp_path / "data", "--out", tmp_path / "i")
    assert rc == EXIT_VALIDATION


def test_unify_zero_steps_is_identity(tmp_path):
    root = tmp_path
    _pipeline(root, ["--set", "s3_steps=0"])
    from bigran.nn import load_encoder

    g2 = load_encoder(root / "model" / "g_prime.bge")
    gu = load_encoder(root / "model" / "g_unified.bge")
    x = np.random.default_rng(0).normal(size=(5, 16))
    np.testing.assert_array_equal(g2(x), gu(x))


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "bigran", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("bigran ")
