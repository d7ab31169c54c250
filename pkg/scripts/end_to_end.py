"""Train every stage on the standard synthetic benchmark and report recall.

Prints one JSON document: quantizer Recall@N (exhaustive ADC), and sparse-only
versus post-verified Recall@K for dual and unified serving.

    python scripts/end_to_end.py --seed 1 --ann-depth 0 --out runs/seed1
"""

import argparse
import json
import os
import sys
import time

from bigran.config import load_config
from bigran.evaluation import QuantizerRun, compare_quantizers, save_json, write_quantizer_table
from bigran.pipeline import build_serving, codes_for, end_to_end_recall, make_dataset, split, train_all


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=1, help="data seed")
    ap.add_argument("--ann-depth", type=int, default=0, help="stage-1 ANN-mined negatives per query (0: off)")
    ap.add_argument("--out", help="directory for quantizers.tsv and metrics.json")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, {"data_seed": str(args.seed), "s1_ann_depth": str(args.ann_depth), "unify": "true"})
    t0 = time.perf_counter()
    data = make_dataset(cfg)
    train, test = split(data, cfg)
    model = train_all(train, cfg)
    t_train = time.perf_counter() - t0

    X, A = test.queries.vectors, data.answers
    runs = []
    for name in ("pq", "opq", "contrastive"):
        codes, books = codes_for(model, A, name)
        runs.append(QuantizerRun(name, (model.g if name == "contrastive" else model.warm_g)(X), codes, books))
    table = compare_quantizers(runs, test.positives, cfg.int_list("eval_Ns"), dense=(model.g(X), model.f_s.tower(A.vectors)))

    index, store = build_serving(model, A, cfg)
    try:
        serving = {
            mode: end_to_end_recall(index, store, model.encoders(mode), test.queries, test.positives, cfg.N, cfg.K, cfg.ef_search)
            for mode in ("dual", "unified")
        }
    finally:
        os.unlink(store.path)

    metrics = {
        "seed": args.seed,
        "ann_depth": args.ann_depth,
        "train_seconds": round(t_train, 1),
        "quantizers": {m: {str(n): r for n, r in row.items()} for m, row in table.rows.items()},
        f"recall@{cfg.K}": serving,
    }
    json.dump(metrics, sys.stdout, indent=2)
    print()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_quantizer_table(table, args.out)
        save_json(metrics, os.path.join(args.out, "metrics.json"))
        cfg.write(args.out)


if __name__ == "__main__":
    main()
