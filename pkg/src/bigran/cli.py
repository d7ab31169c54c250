"""``bigran`` command line.

Exit codes: 0 success, 2 usage, 3 validation, 4 I/O or format, 5 numerical.
Every output directory receives ``config.resolved`` (the fully resolved
config), ``manifest.json`` (content hashes of outputs and consumed inputs)
and ``meta.json`` (timestamps; the only non-deterministic file).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .binio import file_hash
from .config import PipelineConfig, load_config
from .errors import BigranError, ContractError, FormatError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4, 5


class UsageError(BigranError):
    exit_code = EXIT_USAGE


# --------------------------------------------------------------------------
# helpers


def _overrides(args, mapping: dict[str, str]) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    return out


def _config(args, mapping: dict[str, str]) -> PipelineConfig:
    return load_config(args.config, _overrides(args, mapping))


def _finish(out_dir: Path, cfg: PipelineConfig, artifacts: dict, inputs: dict, started: float, command: str) -> None:
    from .pipeline import write_manifest

    cfg.write(out_dir)
    artifacts = dict(artifacts)
    artifacts["config.resolved"] = file_hash(out_dir / "config.resolved")
    write_manifest(out_dir, artifacts, inputs)
    meta = {"command": command, "version": __version__, "started": started, "finished": time.time()}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _check_inputs(upstream_dir: Path, recorded: dict[str, str], prefix: str) -> None:
    """Refuse to proceed when an upstream artifact changed since it was consumed."""
    for rel, h in recorded.items():
        if not rel.startswith(prefix):
            continue
        p = upstream_dir / rel[len(prefix) :]
        if not p.exists() or file_hash(p) != h:
            raise ContractError(f"hash chain broken: {p} differs from the version recorded upstream")


def _model_hashes(model_dir: Path) -> dict[str, str]:
    from .pipeline import verify_manifest

    man = verify_manifest(model_dir)
    return {f"model/{k}": v for k, v in man["artifacts"].items() if k != "config.resolved"}


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    from .pipeline import make_dataset, save_dataset

    started = time.time()
    cfg = _config(args, {"dim": "dim", "answers": "n_answers", "queries": "n_queries", "clusters": "n_clusters",
                         "noise": "noise_sigma", "seed": "data_seed"})
    out = Path(args.out)
    hashes = save_dataset(make_dataset(cfg), out)
    _finish(out, cfg, hashes, {}, started, "gen")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import dataset_hashes, load_dataset, save_model, split, train_all, verify_manifest

    started = time.time()
    cfg = _config(args, {"strategy": "strategy", "steps3": "s3_steps", "seed": "seed"})
    if args.unify:
        cfg = cfg.with_overrides({"unify": "true"}).validate()
    data_dir = Path(args.data)
    verify_manifest(data_dir)
    data = load_dataset(data_dir)
    train, _ = split(data, cfg)
    model = train_all(train, cfg, stages=args.stages)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = save_model(model, out)
    _finish(out, cfg, written, dataset_hashes(data_dir), started, "train")
    return EXIT_OK


def cmd_graph(args) -> int:
    from .lcs import epoch_batches, load_graph, save_graph
    from .pipeline import build_graph, dataset_hashes, load_dataset, load_model, split

    if args.action == "dump-batches":
        graph = load_graph(args.graph)
        batches, _ = epoch_batches(graph, args.strategy, args.batch, args.seed, args.epoch)
        out = sys.stdout
        for b in batches:
            for t in b:
                out.write(f"{t.query_id}\t{t.positive_id}\t{t.negative_id}\n")
        return EXIT_OK
    if args.data is None or args.model is None or args.out is None:
        raise UsageError("graph build needs --data, --model and --out")
    started = time.time()
    cfg = _config(args, {"N": "graph_N"})
    model_dir = Path(args.model)
    inputs = _model_hashes(model_dir) | dataset_hashes(args.data)
    data = load_dataset(args.data)
    train, _ = split(data, cfg)
    graph = build_graph(train, load_model(model_dir), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out / "graph.bgg")
    _finish(out, cfg, {"graph.bgg": file_hash(out / "graph.bgg")}, inputs, started, "graph")
    return EXIT_OK


def cmd_build(args) -> int:
    from .core import load_vectors
    from .hnsw import build_hnsw, save_hnsw
    from .pipeline import build_serving, load_dataset, load_model, read_manifest
    from .pq import load_codebooks, load_codes, save_codebooks, save_codes
    from .store import write_dense_store

    started = time.time()
    cfg = _config(args, {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.codes or args.books:
        if not (args.codes and args.books):
            raise UsageError("--codes and --books go together")
        books = load_codebooks(args.books)
        codes, P = load_codes(args.codes)
        if P != books.P or codes.shape[1] != books.M:
            raise ContractError("codes do not match the codebooks")
        index = build_hnsw(codes, books, cfg.hnsw())
        save_hnsw(index, out / "index.bgh")
        save_codes(codes, P, out / "codes.bgc")
        save_codebooks(books, out / "books.bgb")
        names = ["index.bgh", "codes.bgc", "books.bgb"]
        inputs = {"codes": file_hash(args.codes), "books": file_hash(args.books)}
        if args.dense:
            write_dense_store(load_vectors(args.dense), out / "dense.bgd")
            names.append("dense.bgd")
            inputs["dense"] = file_hash(args.dense)
        _finish(out, cfg, {n: file_hash(out / n) for n in names}, inputs, started, "build-index")
        return EXIT_OK
    if args.model is None or args.data is None:
        raise UsageError("build-index needs --model and --data (or --codes and --books)")
    model_dir, data_dir = Path(args.model), Path(args.data)
    inputs = _model_hashes(model_dir)
    _check_inputs(data_dir, read_manifest(model_dir)["inputs"], "data/")
    model = load_model(model_dir)
    if model.f_d is None:
        raise ContractError(f"{model_dir}: no dense answer encoder (train stage 2 first)")
    build_serving(model, load_dataset(data_dir).answers, cfg, out)
    names = ["index.bgh", "codes.bgc", "books.bgb", "dense.bgd"]
    _finish(out, cfg, {n: file_hash(out / n) for n in names}, inputs, started, "build-index")
    return EXIT_OK


def _serving_from(args, cfg):
    from .pipeline import load_model, load_serving, verify_manifest

    index_dir, model_dir = Path(args.index), Path(args.model)
    man = verify_manifest(index_dir)
    _check_inputs(model_dir, man["inputs"], "model/")
    index, store = load_serving(index_dir, args.store)
    model = load_model(model_dir)
    if cfg.mode == "dual" and model.g_prime is None:
        raise ContractError(f"dual mode needs {model_dir}/g_prime.bge")
    if cfg.mode == "unified" and model.g_unified is None:
        raise ContractError(f"unified mode needs {model_dir}/g_unified.bge (train with --unify, or use --mode dual)")
    return index, store, model


def _check_search_params(parser, cfg):
    if cfg.ef_search < cfg.N:
        parser.error(f"--ef ({cfg.ef_search}) must be >= -N ({cfg.N})")
    if cfg.K > cfg.N:
        parser.error(f"-K ({cfg.K}) must be <= -N ({cfg.N})")


def cmd_search(args) -> int:
    from .core import load_vectors
    from .serving import search

    over = _overrides(args, {"N": "N", "K": "K", "ef": "ef_search", "mode": "mode"})
    base = load_config(args.config, {k: v for k, v in over.items() if k not in ("N", "K", "ef_search")})
    cfg = base.with_overrides({k: over[k] for k in ("N", "K", "ef_search") if k in over})
    _check_search_params(args._parser, cfg)
    cfg.validate()
    index, store, model = _serving_from(args, cfg)
    enc = model.encoders(cfg.mode)
    queries = load_vectors(args.queries)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for q in range(queries.count):
            res = search(index, store, queries.vectors[q], enc, cfg.N, cfg.K, cfg.ef_search, args.exhaustive)
            for r, (a, s) in enumerate(zip(res.ids, res.scores)):
                out.write(f"{q}\t{r}\t{int(a)}\t{float(s):.6f}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation as ev
    from .pipeline import ServingPipeline, codes_for, load_dataset, load_model, split

    started = time.time()
    cfg = _config(args, {"mode": "mode"})
    data = load_dataset(args.data)
    train, test = split(data, cfg)
    model_dir = Path(args.model)
    inputs = _model_hashes(model_dir)
    model = load_model(model_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    studies = ["quantizers", "candidates", "bits"] if args.study == "all" else [args.study]
    A, X = data.answers, test.queries.vectors
    written = {}
    if "quantizers" in studies:
        if model.pq is None or model.opq is None or model.warm_g is None:
            raise FormatError(f"{model_dir}: baseline artifacts missing")
        runs = []
        for name in ("pq", "opq", "contrastive"):
            codes, books = codes_for(model, A, name)
            qg = model.g if name == "contrastive" else model.warm_g
            runs.append(ev.QuantizerRun(name, qg(X), codes, books))
        table = ev.compare_quantizers(runs, test.positives, cfg.int_list("eval_Ns"),
                                      dense=(model.g(X), model.f_s.tower(A.vectors)))
        ev.write_quantizer_table(table, out, args.plot)
        written["quantizers.tsv"] = file_hash(out / "quantizers.tsv")
    if "candidates" in studies:
        if args.index is None:
            raise UsageError("the candidates study needs --index")
        from .pipeline import load_serving, verify_manifest

        verify_manifest(args.index)
        index, store = load_serving(args.index)
        pipe = ServingPipeline(index, store, model.encoders(cfg.mode), test.queries, test.positives)
        rep = ev.sweep_candidates(pipe, cfg.int_list("eval_Ns"), cfg.eval_K, exhaustive=args.exhaustive)
        ev.write_sweep(rep, out, args.plot)
        # latency columns vary run to run, so they stay out of the manifest
    if "bits" in studies:
        qv = (model.g_prime or model.g)(X)
        rep = ev.sweep_bits(model.dense_tower(A.vectors), qv, test.positives, cfg.int_list("bits_Ms"), cfg.bits_K,
                            seed=cfg.seed)
        ev.write_sweep(rep, out, args.plot)
        written["sweep_bits.tsv"] = file_hash(out / "sweep_bits.tsv")
    _finish(out, cfg, written, inputs, started, "eval")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .pipeline import load_serving
    from .serving import stats

    index, store = load_serving(args.index)
    print(json.dumps(stats(index, store), indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bigran", description="Bi-granular PQ + dense retrieval pipeline")
    p.add_argument("--version", action="version", version=f"bigran {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--answers", type=int)
    sp.add_argument("--queries", type=int)
    sp.add_argument("--clusters", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="run the training stages")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stages", type=int, choices=[1, 2, 3], default=3)
    sp.add_argument("--unify", action="store_true", help="run query unification after stage 2")
    sp.add_argument("--strategy", choices=["snowball", "randomwalk"])
    sp.add_argument("--steps3", type=int, help="unification steps (overrides epochs)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("graph", help="build the bipartite graph or dump sampled batches")
    common(sp)
    sp.add_argument("action", choices=["build", "dump-batches"])
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp.add_argument("-N", type=int, dest="N")
    sp.add_argument("--graph", help="BGG1 file (dump-batches)")
    sp.add_argument("--strategy", choices=["snowball", "randomwalk"], default="snowball")
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epoch", type=int, default=0)
    sp.set_defaults(func=cmd_graph)

    sp = sub.add_parser("build-index", help="encode the corpus, build HNSW and the dense store")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--codes")
    sp.add_argument("--books")
    sp.add_argument("--dense", help="BGV1 dense vectors for the store (with --codes/--books)")
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("search", help="two-phase search for a file of query features")
    common(sp)
    sp.add_argument("--index", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--store", help="BGD1 dense store (default: INDEX/dense.bgd)")
    sp.add_argument("--out")
    sp.add_argument("-N", type=int, dest="N")
    sp.add_argument("-K", type=int, dest="K")
    sp.add_argument("--ef", type=int)
    sp.add_argument("--mode", choices=["unified", "dual"])
    sp.add_argument("--exhaustive", action="store_true", help="exhaustive ADC instead of HNSW in phase 1")
    sp.set_defaults(func=cmd_search, _parser=sp)

    sp = sub.add_parser("eval", help="quantizer comparison and sweeps")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--index")
    sp.add_argument("--out", required=True)
    sp.add_argument("--study", choices=["quantizers", "candidates", "bits", "all"], default="all")
    sp.add_argument("--mode", choices=["unified", "dual"])
    sp.add_argument("--exhaustive", action="store_true")
    sp.add_argument("--plot", action="store_true", help="also write gnuplot data files")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stats", help="memory accounting of a built index")
    sp.add_argument("--index", required=True)
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bigran: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BigranError as exc:
        print(f"bigran: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BrokenPipeError:
        # downstream reader (e.g. `head`) closed the pipe early
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except OSError as exc:
        print(f"bigran: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
