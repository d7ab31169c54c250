"""Recall@100 of exhaustive ADC search as the code length grows from 64 to 1024 bits.

Embeddings come from the dense two-tower warm-up; each point trains its own
OPQ quantizer with P=256.

    python scripts/sweep_bits.py --answers 20000 --alternations 3 --out runs/bits
"""

import argparse

from bigran.config import load_config
from bigran.evaluation import sweep_bits, write_sweep
from bigran.pipeline import make_dataset, split
from bigran.training import lexical_negatives, train_dense


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--answers", type=int, default=20_000)
    ap.add_argument("--alternations", type=int, default=3, help="OPQ rotation updates per point")
    ap.add_argument("--method", choices=["opq", "pq"], default="opq")
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    cfg = load_config(args.config, {"dim": str(args.dim), "n_answers": str(args.answers)})
    data = make_dataset(cfg)
    train, test = split(data, cfg)
    g, f = train_dense(train, lexical_negatives(train), cfg.warmup())
    rep = sweep_bits(f(data.answers.vectors), g(test.queries.vectors), test.positives, cfg.int_list("bits_Ms"),
                     K=cfg.bits_K, method=args.method, seed=cfg.seed, opq_alternations=args.alternations)
    for row in rep.records():
        print(row)
    for note in rep.notes:
        print("note:", note)
    if args.out:
        write_sweep(rep, args.out, plot=True)


if __name__ == "__main__":
    main()
