"""End-to-end Recall@K and per-query latency as the candidate count N grows.

    python scripts/sweep_candidates.py --answers 50000 --ns 100,200,500,1000 --out runs/cand
"""

import argparse
import os

from bigran.config import load_config
from bigran.evaluation import sweep_candidates, write_sweep
from bigran.pipeline import ServingPipeline, build_serving, make_dataset, split, train_all


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--answers", type=int, default=50_000)
    ap.add_argument("--ns", default="100,200,500,1000")
    ap.add_argument("--mode", choices=["unified", "dual"], default="dual")
    ap.add_argument("--exhaustive", action="store_true", help="exhaustive ADC instead of HNSW")
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, {"n_answers": str(args.answers), "eval_Ns": args.ns,
                                    "unify": str(args.mode == "unified")})
    data = make_dataset(cfg)
    train, test = split(data, cfg)
    model = train_all(train, cfg)
    index, store = build_serving(model, data.answers, cfg)
    try:
        pipe = ServingPipeline(index, store, model.encoders(args.mode), test.queries, test.positives)
        rep = sweep_candidates(pipe, cfg.int_list("eval_Ns"), cfg.eval_K, args.exhaustive, cfg.ef_search)
    finally:
        os.unlink(store.path)
    for row in rep.records():
        print(row)
    if args.out:
        write_sweep(rep, args.out, plot=True)


if __name__ == "__main__":
    main()
