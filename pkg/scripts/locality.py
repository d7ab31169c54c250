"""Within-batch answer similarity of Snowball/RandomWalk batches versus uniform random batches.

Runs on planted-cluster data over many seeds and prints one line per seed.

    python scripts/locality.py --seeds 50
"""

import argparse

import numpy as np

from bigran.core import SyntheticSpec, gen_synthetic
from bigran.lcs import batch_answer_similarity, build_bipartite_graph, epoch_batches, random_batches
from bigran.pq import encode_batch, reconstruct_batch, train_pq


def mean_similarity(batches, vecs) -> float:
    return float(np.nanmean([batch_answer_similarity(b, vecs) for b in batches]))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--answers", type=int, default=2000)
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--clusters", type=int, default=16)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("-N", type=int, default=200, dest="N")
    args = ap.parse_args(argv)

    wins = {"snowball": 0, "randomwalk": 0}
    print("seed\tsnowball\trandomwalk\trandom")
    for s in range(args.seeds):
        ds = gen_synthetic(SyntheticSpec(dim=64, n_answers=args.answers, n_queries=args.queries,
                                         n_clusters=args.clusters), s)
        books = train_pq(ds.answers.vectors, 8, 64, 10, s)
        codes = encode_batch(ds.answers.vectors, books)
        rec = reconstruct_batch(codes, books)
        graph = build_bipartite_graph(ds.queries.vectors, codes, books, ds.positives, args.N)
        base = mean_similarity(random_batches(graph, args.batch, s), rec)
        row = {k: mean_similarity(epoch_batches(graph, k, args.batch, s)[0], rec) for k in wins}
        for k, v in row.items():
            wins[k] += v > base
        print(f"{s}\t{row['snowball']:.3f}\t{row['randomwalk']:.3f}\t{base:.3f}")
    print("wins over random:", wins, f"of {args.seeds}")


if __name__ == "__main__":
    main()
