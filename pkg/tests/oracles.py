"""Independent reference computations used by the test suite."""
import math

import numpy as np


def brute_force_dtw(cost):
    """Minimum path cost over every monotone path, enumerated depth-first.

    Costs are summed from (0, 0) along the path, the same order a DP uses,
    so float results are comparable exactly.
    """
    n, m = cost.shape
    best = math.inf
    best_path = None
    stack = [((0, 0), cost[0, 0], ((0, 0),))]
    while stack:
        (i, j), acc, path = stack.pop()
        if (i, j) == (n - 1, m - 1):
            if acc < best:
                best, best_path = acc, path
            continue
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                stack.append(((a, b), acc + cost[a, b], path + ((a, b),)))
    return best, best_path


def euclidean_costs(a, b):
    n, m = len(a), len(b)
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = math.sqrt(sum((x - y) ** 2 for x, y in zip(a[i], b[j])))
    return out


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_step_reference(P, x, h, c, literal=False):
    """Straight-line, per-unit evaluation of the peephole LSTM step."""
    H = len(h)

    def aff(W, U, b, k):
        return sum(W[k][q] * x[q] for q in range(len(x))) + sum(U[k][q] * h[q] for q in range(H)) + b[k]

    i = [sig(aff(P["W_xi"], P["W_hi"], P["b_i"], k) + P["p_ci"][k] * c[k]) for k in range(H)]
    f = [sig(aff(P["W_xf"], P["W_hf"], P["b_f"], k) + P["p_cf"][k] * c[k]) for k in range(H)]
    g = [math.tanh(aff(P["W_xc"], P["W_hc"], P["b_c"], k)) for k in range(H)]
    c_new = [f[k] * c[k] + i[k] * g[k] for k in range(H)]
    o = [sig(aff(P["W_xo"], P["W_ho"], P["b_o"], k) + P["p_co"][k] * c_new[k]) for k in range(H)]
    gate = i if literal else o
    h_new = [gate[k] * math.tanh(c_new[k]) for k in range(H)]
    return dict(i=i, f=f, g=g, o=o, c=c_new, h=h_new)


def rnn_step_reference(W_xh, W_hh, b_h, x, h):
    return [sig(sum(W_xh[k][q] * x[q] for q in range(len(x)))
                + sum(W_hh[k][q] * h[q] for q in range(len(h))) + b_h[k]) for k in range(len(b_h))]
