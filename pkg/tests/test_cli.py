import json

import numpy as np
import pytest

from nestmv.cli import main, parse_args, read_rankings
from nestmv.core import DEFAULT_LADDER, Budget
from nestmv.errors import UsageError
from nestmv.evaluation import Qrels, write_qrels
from nestmv.index import load_index, write_embeddings


def test_parse_search():
    cfg = parse_args(["search", "--index", "a.mvi", "--queries", "q.mve", "--budget", "8:16"])
    assert cfg.command == "search"
    assert cfg.budget == Budget(8, 16)
    assert (cfg.k, cfg.batch_size, cfg.output) == (10, 1000, None)


def test_parse_rejects_zero_budget():
    with pytest.raises(UsageError):
        parse_args(["search", "--index", "a", "--queries", "q", "--budget", "0:4"])


def test_parse_default_ladder():
    cfg = parse_args(["sweep", "--index", "a", "--queries", "q", "--qrels", "r"])
    assert cfg.ladder == DEFAULT_LADDER


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["eval", "--qrels", "r"],
    ["sweep", "--index", "a", "--queries", "q", "--qrels", "r", "--metric", "recall@3"],
    ["flops", "--dim", "8", "--n", "10"],
    ["sweep", "--index", "a", "--queries", "q", "--qrels", "r", "--ladder", "1:1,1:2"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_flops_table(capsys):
    assert main(["flops", "--budget", "16:64", "--dim", "3584", "--n", "100000"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t") == ["budget", "scoring_flops", "gflops", "index_bytes", "index_gib"]
    assert out[1].split("\t") == ["(16,64)", "7.340e+11", "734.00", "45875200000", "42.72"]


def test_flops_ladder(capsys):
    assert main(["flops", "--ladder", "1:1,2:4,4:8,8:16,16:64", "--dim", "3584", "--n", "100000"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["(1,1)", "(2,4)", "(4,8)", "(8,16)", "(16,64)"]


@pytest.fixture
def corpus(tmp_path):
    rng = np.random.default_rng(3)
    docs = [(i, rng.standard_normal((8, 6))) for i in range(20)]
    # each query is a perturbed copy of doc 2*q
    qs = [(q, docs[2 * q][1][:4] + 0.1 * rng.standard_normal((4, 6))) for q in range(5)]
    write_embeddings(tmp_path / "docs.mve", docs)
    write_embeddings(tmp_path / "queries.mve", qs)
    write_qrels(tmp_path / "qrels.tsv", Qrels({str(q): {2 * q: 1} for q in range(5)}))
    return tmp_path


def test_pipeline_end_to_end(corpus, capsys):
    d = corpus
    assert main(["ingest-check", "--input", str(d / "docs.mve")]) == 0
    assert "records 20" in capsys.readouterr().out

    assert main(["build-index", "--input", str(d / "docs.mve"), "--output", str(d / "full.mvi")]) == 0
    assert load_index(d / "full.mvi").r_c == 8
    assert main(["truncate", "--index", str(d / "full.mvi"), "--r-c", "4",
                 "--output", str(d / "small.mvi")]) == 0
    assert load_index(d / "small.mvi").r_c == 4
    capsys.readouterr()

    assert main(["search", "--index", str(d / "full.mvi"), "--queries", str(d / "queries.mve"),
                 "--budget", "4:8", "--k", "3", "--output", str(d / "run.tsv")]) == 0
    lines = (d / "run.tsv").read_text().splitlines()
    assert len(lines) == 15
    qid, rank, doc, score = lines[0].split("\t")
    assert (qid, rank, doc) == ("0", "1", "0")
    assert len(score.split(".")[1]) == 6
    assert [rl.top1 for rl in read_rankings(d / "run.tsv")] == [0, 2, 4, 6, 8]

    assert main(["eval", "--qrels", str(d / "qrels.tsv"), "--rankings", str(d / "run.tsv")]) == 0
    assert capsys.readouterr().out == "precision@1\t1.000000\nndcg@5\t1.000000\n"
    assert main(["eval", "--qrels", str(d / "qrels.tsv"), "--index", str(d / "full.mvi"),
                 "--queries", str(d / "queries.mve"), "--budget", "4:8",
                 "--metric", "precision@1"]) == 0
    assert capsys.readouterr().out == "precision@1\t1.000000\n"


def test_sweep_csv_and_json(corpus, capsys):
    d = corpus
    main(["build-index", "--input", str(d / "docs.mve"), "--output", str(d / "i.mvi")])
    capsys.readouterr()
    ladder = "1:1,2:4,4:8"
    base = ["sweep", "--index", str(d / "i.mvi"), "--queries", str(d / "queries.mve"),
            "--qrels", str(d / "qrels.tsv"), "--ladder", ladder, "--metric", "ndcg@5"]
    # index R_c is 8 and queries R_q is 4, so the ladder ends at the model budget
    assert main(base) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "r_q,r_c,metric,value,flops,index_bytes"
    assert [r.split(",")[:3] for r in rows[1:]] == [["1", "1", "ndcg@5"], ["2", "4", "ndcg@5"],
                                                    ["4", "8", "ndcg@5"]]
    assert main(base + ["--format", "json", "--output", str(d / "s.json")]) == 0
    data = json.loads((d / "s.json").read_text())
    assert [r["flops"] for r in data] == [2 * 1 * 1 * 6 * 20, 2 * 2 * 4 * 6 * 20, 2 * 4 * 8 * 6 * 20]


def test_truncated_index_exit_3(corpus, capsys):
    d = corpus
    main(["build-index", "--input", str(d / "docs.mve"), "--output", str(d / "i.mvi")])
    raw = (d / "i.mvi").read_bytes()
    (d / "cut.mvi").write_bytes(raw[: len(raw) // 2])
    capsys.readouterr()
    rc = main(["search", "--index", str(d / "cut.mvi"), "--queries", str(d / "queries.mve"),
               "--budget", "1:1"])
    assert rc == 3
    assert "TruncatedFile" in capsys.readouterr().err


def test_missing_file_exit_3(tmp_path, capsys):
    assert main(["ingest-check", "--input", str(tmp_path / "absent.mve")]) == 3


def test_budget_too_large_exit_4(corpus, capsys):
    d = corpus
    main(["build-index", "--input", str(d / "docs.mve"), "--output", str(d / "i.mvi")])
    rc = main(["search", "--index", str(d / "i.mvi"), "--queries", str(d / "queries.mve"),
               "--budget", "4:9"])
    assert rc == 4
    assert "BudgetExceedsVectors" in capsys.readouterr().err


def test_bench_runs(corpus, capsys):
    d = corpus
    main(["build-index", "--input", str(d / "docs.mve"), "--output", str(d / "i.mvi")])
    capsys.readouterr()
    assert main(["bench", "--index", str(d / "i.mvi"), "--queries", str(d / "queries.mve"),
                 "--budget", "2:4", "--repeats", "2"]) == 0
    assert "scoring_ms" in capsys.readouterr().out


def test_train_toy_is_reproducible(tmp_path, capsys):
    conf = tmp_path / "toy.cfg"
    conf.write_text("steps = 3\nn_train = 64\nn_eval = 32\n# short run\n")
    for name in ("a", "b"):
        assert main(["train-toy", "--config", str(conf), "--seed", "7",
                     "--output-dir", str(tmp_path / name)]) == 0
    for f in ("loss_history.csv", "metrics.csv", "config.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    hist = (tmp_path / "a" / "loss_history.csv").read_text().splitlines()
    assert hist[0] == "step,total,g0,g1,g2,g3,g4"
    assert len(hist) == 1 + 4
    with np.load(tmp_path / "a" / "params.npz") as p:
        assert p["W_q"].shape == (16 * 16, 32)
