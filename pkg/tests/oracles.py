"""Direct-definition reference implementations used as test oracles.

Written as plain loops, independent of the vectorized kernels they check.
"""

import math


def sqdist(p, q):
    return sum((a - b) ** 2 for a, b in zip(p, q))


def fps_oracle(points, g, start=0):
    pts = [tuple(map(float, p)) for p in points]
    chosen = [start]
    while len(chosen) < g:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(sqdist(p, pts[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(points, center, k):
    dists = [(sqdist(tuple(map(float, p)), tuple(map(float, center))), i) for i, p in enumerate(points)]
    dists.sort()
    return [i for _, i in dists[:k]]


def chamfer_oracle(a, b):
    a = [tuple(map(float, p)) for p in a]
    b = [tuple(map(float, q)) for q in b]
    ab = sum(min(sqdist(p, q) for q in b) for p in a) / len(a)
    ba = sum(min(sqdist(p, q) for p in a) for q in b) / len(b)
    return ab + ba


def matvec(w, x, b=None):
    out = [sum(wij * xj for wij, xj in zip(row, x)) for row in w]
    if b is not None:
        out = [o + bi for o, bi in zip(out, b)]
    return out


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def layer_norm(x, w, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * wi + bi for v, wi, bi in zip(x, w, b)]


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (max(na, 1e-12) * max(nb, 1e-12))
