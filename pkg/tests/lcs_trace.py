"""Hand-built 3-query / 4-answer graph and its hand-traced batches.

    q0: positive a0, candidates [a0, a2, a3]   -> negatives {a2, a3}
    q1: positive a1, candidates [a1, a2]       -> negatives {a2}
    q2: positives a2, a3, candidates [a2, a3, a1] -> negatives {a1}
    backward: a0 [q0], a1 [q1, q2], a2 [q0, q1, q2], a3 [q0, q2]

With seed 1 the sampler stream draws integers(3) -> 1, then every
integers(2) -> 1 (integers(1) consumes nothing).  Tracing the pseudocode:

snowball:   entry q1 -> (1, 1, 2), queue [0, 1, 2]
            pop oldest q0 -> negs [2, 3][1] = 3 -> (0, 0, 3), queue [1, 2, 0, 2]
            pop 1 (visited, dropped), pop q2 -> pos [2, 3][1] = 3, neg 1 -> (2, 3, 1)
randomwalk: entry q1 -> (1, 1, 2), queue [0, 1, 2]
            pop newest q2 -> pos 3, neg 1 -> (2, 3, 1), queue [0, 1, 1, 2]
            pop 2, 1, 1 (visited), pop q0 -> neg 3 -> (0, 0, 3)
"""

from bigran.lcs import BipartiteGraph

SEED = 1
EXPECTED = {
    "snowball": [(1, 1, 2), (0, 0, 3), (2, 3, 1)],
    "randomwalk": [(1, 1, 2), (2, 3, 1), (0, 0, 3)],
}


def trace_graph() -> BipartiteGraph:
    forward = [[0, 2, 3], [1, 2], [2, 3, 1]]
    positives = {0: frozenset([0]), 1: frozenset([1]), 2: frozenset([2, 3])}
    return BipartiteGraph.from_forward(forward, positives, n_answers=4, N=3)
