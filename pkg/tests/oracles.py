"""Independent reference computations shared by the test modules."""

import itertools
import random

import numpy as np


def naive_contraction(c, s, ws):
    """Sum over every index assignment with plain loops."""
    A = ws.array(c.A.name).reshape([s[d] for d in c.A.dims], order="F")
    B = ws.array(c.B.name).reshape([s[d] for d in c.B.dims], order="F")
    C = np.zeros([s[d] for d in c.C.dims], order="F")
    for point in itertools.product(*(range(s[i]) for i in c.indices)):
        env = dict(zip(c.indices, point))
        C[tuple(env[d] for d in c.C.dims)] += (A[tuple(env[d] for d in c.A.dims)]
                                              * B[tuple(env[d] for d in c.B.dims)])
    return C.ravel(order="F")


def random_contraction(rng: random.Random, max_per_class: int = 2) -> str:
    """A random statement with 1..max_per_class indices in each class."""
    names = rng.sample("abcdefghjk", 3 * max_per_class)
    k, fa, fb = (rng.randint(1, max_per_class) for _ in range(3))
    con, free_a, free_b = names[:k], names[k:k + fa], names[k + fa:k + fa + fb]

    def shuffled(xs):
        xs = list(xs)
        rng.shuffle(xs)
        return ",".join(xs)

    return f"C[{shuffled(free_a + free_b)}] = A[{shuffled(con + free_a)}] * B[{shuffled(con + free_b)}]"
