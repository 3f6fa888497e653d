"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 I/O or file format, 4 numeric or
precondition failure, 5 training divergence.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_LADDER, Budget, BudgetLadder, Side
from .errors import DuplicateDocId, NestMVError, UsageError
from .evaluation import (
    budget_sweep,
    read_qrels,
    resolve_metric,
    sweep_to_csv,
    sweep_to_json,
)
from .index import (
    MemoryReport,
    build_index,
    load_index,
    memory_report,
    payload_bytes,
    read_embeddings,
    save_index,
    search,
    truncate_index,
)
from .lateint import RankedList, score_batch, scoring_flops, top_k
from .train import ToyConfig, loss_history_csv, train_toy

COMMANDS = ("ingest-check", "build-index", "truncate", "search", "eval", "sweep",
            "flops", "bench", "train-toy")


@dataclass
class RunConfig:
    command: str
    flags: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.flags[name]
        except KeyError:
            raise AttributeError(name) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _budget(text):
    try:
        return Budget.parse(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ladder(text):
    try:
        return BudgetLadder.parse(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestmv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest-check", help="validate an MVE1 embedding file")
    s.add_argument("--input", required=True)

    s = sub.add_parser("build-index", help="build an MVI1 index from an MVE1 file")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--r-c", type=_positive, help="vectors kept per candidate (default: all)")
    s.add_argument("--dtype", choices=("bf16", "f32"), default="bf16")

    s = sub.add_parser("truncate", help="keep the first r_c vectors per candidate")
    s.add_argument("--index", required=True)
    s.add_argument("--r-c", type=_positive, required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("search", help="rank the index for each query")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--budget", type=_budget, required=True)
    s.add_argument("--k", type=_positive, default=10)
    s.add_argument("--batch-size", type=_positive, default=1000)
    s.add_argument("--output", help="TSV path (default: stdout)")

    s = sub.add_parser("eval", help="score rankings against qrels")
    s.add_argument("--qrels", required=True)
    s.add_argument("--rankings", help="TSV written by `search`")
    s.add_argument("--index")
    s.add_argument("--queries")
    s.add_argument("--budget", type=_budget)
    s.add_argument("--metric", action="append", help="repeatable; default precision@1 and ndcg@5")
    s.add_argument("--batch-size", type=_positive, default=1000)

    s = sub.add_parser("sweep", help="metric, FLOPs and memory at every ladder budget")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--ladder", type=_ladder, default=DEFAULT_LADDER)
    s.add_argument("--metric", default="precision@1")
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--batch-size", type=_positive, default=1000)
    s.add_argument("--output", help="default: stdout")

    s = sub.add_parser("flops", help="analytic scoring FLOPs and index memory")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--budget", type=_budget)
    g.add_argument("--ladder", type=_ladder)
    s.add_argument("--dim", type=_positive, required=True)
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--dtype", choices=("bf16", "f32"), default="bf16")

    s = sub.add_parser("bench", help="wall-clock scoring time (informational)")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--budget", type=_budget, required=True)
    s.add_argument("--repeats", type=_positive, default=10)
    s.add_argument("--batch-size", type=_positive, default=1000)

    s = sub.add_parser("train-toy", help="train the toy encoder with the grouped objective")
    s.add_argument("--config", help="flat key = value file")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--output-dir", default=".")
    return p


def parse_args(argv) -> RunConfig:
    ns = _build_parser().parse_args(list(argv))
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    if ns.command == "eval":
        direct = [flags["index"], flags["queries"], flags["budget"]]
        if flags["rankings"] is None and not all(x is not None for x in direct):
            raise UsageError("eval: give --rankings, or all of --index, --queries and --budget")
        for m in flags["metric"] or ():
            resolve_metric(m)
    if ns.command == "sweep":
        resolve_metric(flags["metric"])
    if ns.command == "train-toy" and flags["steps"] is not None and flags["steps"] < 0:
        raise UsageError("train-toy: --steps must be >= 0")
    return RunConfig(ns.command, flags)


# -- commands -------------------------------------------------------------

def _out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8", newline="")


def _load_queries(path):
    recs = read_embeddings(path, Side.QUERY)
    return [str(qid) for qid, _ in recs], [s for _, s in recs]


def _format_rankings(rankings: list[RankedList]) -> str:
    lines = []
    for rl in rankings:
        for rank, (doc, score) in enumerate(rl.entries, 1):
            lines.append(f"{rl.query_id}\t{rank}\t{doc}\t{score:.6f}\n")
    return "".join(lines)


def read_rankings(path) -> list[RankedList]:
    """Parse the TSV written by ``search``; rows may come in any order."""
    per_query: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 4:
                raise UsageError(f"{path}:{lineno}: expected query_id, rank, doc_id, score")
            try:
                per_query.setdefault(parts[0], []).append((int(parts[1]), int(parts[2]), float(parts[3])))
            except ValueError:
                raise UsageError(f"{path}:{lineno}: malformed numeric column") from None
    return [RankedList(q, tuple((d, s) for _, d, s in sorted(rows)))
            for q, rows in per_query.items()]


def _cmd_ingest_check(cfg, out):
    recs = read_embeddings(cfg.input)
    if not recs:
        out.write("records 0\n")
        return
    s = recs[0][1]
    ids = [d for d, _ in recs]
    dup = len(ids) - len(set(ids))
    out.write(f"records {len(recs)}\nvectors_per_record {s.R}\ndim {s.D}\nduplicate_ids {dup}\n")
    if dup:
        raise DuplicateDocId(f"{dup} duplicate doc ids in {cfg.input}")


def _cmd_build_index(cfg, out):
    recs = read_embeddings(cfg.input, Side.CANDIDATE)
    if not recs:
        raise UsageError("input holds no records")
    r_c = cfg.r_c or recs[0][1].R
    idx = build_index(recs, r_c, cfg.dtype)
    save_index(idx, cfg.output)
    out.write(f"wrote {cfg.output}: N={idx.n} R_c={idx.r_c} D={idx.dim} dtype={idx.dtype} "
              f"payload_bytes={memory_report(idx).bytes}\n")


def _cmd_truncate(cfg, out):
    idx = truncate_index(load_index(cfg.index), cfg.r_c)
    save_index(idx, cfg.output)
    out.write(f"wrote {cfg.output}: N={idx.n} R_c={idx.r_c} D={idx.dim}\n")


def _cmd_search(cfg, out):
    idx = load_index(cfg.index)
    qids, queries = _load_queries(cfg.queries)
    ranked = search(idx, queries, cfg.budget, cfg.k, cfg.batch_size, qids)
    fh = _out(cfg.output)
    try:
        fh.write(_format_rankings(ranked))
    finally:
        if fh is not sys.stdout:
            fh.close()


def _cmd_eval(cfg, out):
    qrels = read_qrels(cfg.qrels)
    names = cfg.metric or ["precision@1", "ndcg@5"]
    depth = max(resolve_metric(m)[1] for m in names)
    if cfg.rankings:
        ranked = read_rankings(cfg.rankings)
    else:
        idx = load_index(cfg.index)
        qids, queries = _load_queries(cfg.queries)
        ranked = search(idx, queries, cfg.budget, min(depth, idx.n), cfg.batch_size, qids)
    for m in names:
        fn, _ = resolve_metric(m)
        out.write(f"{m}\t{fn(ranked, qrels):.6f}\n")


def _cmd_sweep(cfg, out):
    idx = load_index(cfg.index)
    qids, queries = _load_queries(cfg.queries)
    pts = budget_sweep(idx, queries, read_qrels(cfg.qrels), cfg.ladder, cfg.metric,
                       cfg.batch_size, qids)
    text = sweep_to_csv(pts) if cfg.format == "csv" else sweep_to_json(pts)
    fh = _out(cfg.output)
    try:
        fh.write(text)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _cmd_flops(cfg, out):
    budgets = [cfg.budget] if cfg.budget else list(cfg.ladder)
    out.write("budget\tscoring_flops\tgflops\tindex_bytes\tindex_gib\n")
    for b in budgets:
        f = scoring_flops(b, cfg.dim, cfg.n)
        mem = MemoryReport(payload_bytes(cfg.n, b.r_c, cfg.dim, cfg.dtype))
        out.write(f"({b.r_q},{b.r_c})\t{f:.3e}\t{f / 1e9:.2f}\t{mem.bytes}\t{mem.gib:.2f}\n")


def _cmd_bench(cfg, out):
    idx = load_index(cfg.index)
    _, queries = _load_queries(cfg.queries)
    times = []
    for _ in range(cfg.repeats + 1):
        t0 = time.perf_counter()
        top_k(score_batch(queries, idx, cfg.budget, cfg.batch_size), 1)
        times.append((time.perf_counter() - t0) * 1e3)
    times = times[1:]      # first run is warm-up
    sd = statistics.stdev(times) if len(times) > 1 else 0.0
    f = scoring_flops(cfg.budget, idx.dim, idx.n) * len(queries)
    out.write(f"budget {cfg.budget} queries {len(queries)} candidates {idx.n}\n"
              f"scoring_ms {statistics.fmean(times):.3f} +- {sd:.3f} over {cfg.repeats} runs\n"
              f"scoring_flops {f:.3e}\n")


def _cmd_train_toy(cfg, out):
    conf = ToyConfig.from_file(cfg.config) if cfg.config else ToyConfig()
    if cfg.seed is not None:
        conf.seed = cfg.seed
    if cfg.steps is not None:
        conf.steps = cfg.steps
    run = train_toy(conf)
    os.makedirs(cfg.output_dir, exist_ok=True)
    d = cfg.output_dir
    with open(os.path.join(d, "loss_history.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(loss_history_csv(run.loss_history))
    with open(os.path.join(d, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(sweep_to_csv(run.metrics))
    with open(os.path.join(d, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(conf.to_text())
    np.savez(os.path.join(d, "params.npz"), W_q=run.params_q.W, M_q=run.params_q.M,
             W_c=run.params_c.W, M_c=run.params_c.M)
    out.write(f"loss {run.initial_loss:.6f} -> {run.final_loss:.6f} after {conf.steps} steps\n")
    for p in run.metrics:
        out.write(f"{p.metric_name}\t{p.budget}\t{p.value:.6f}\n")


_DISPATCH = {
    "ingest-check": _cmd_ingest_check,
    "build-index": _cmd_build_index,
    "truncate": _cmd_truncate,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "flops": _cmd_flops,
    "bench": _cmd_bench,
    "train-toy": _cmd_train_toy,
}


def run(config: RunConfig, out=None) -> int:
    """Execute a parsed command; errors become exit codes and a stderr line."""
    out = out or sys.stdout
    try:
        _DISPATCH[config.command](config, out)
    except NestMVError as exc:
        print(f"nestmv {config.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nestmv {config.command}: Io: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
