"""Independent reference implementations used only by the tests.

Nothing here imports the code paths it checks: loops over scalars instead
of matrix products, brute-force pairwise searches instead of KD-trees,
exact rationals / mpmath instead of float64 reductions.
"""
from __future__ import annotations

import math
from fractions import Fraction

import mpmath
import numpy as np

# ---------------------------------------------------------------- neural


def naive_mlp(layers, x):
    """layers: list of (weight (out,in), bias, activation). x: list of floats."""
    a = [float(v) for v in x]
    for w, b, act in layers:
        out = []
        for r in range(len(b)):
            s = float(b[r])
            for c in range(len(a)):
                s += float(w[r][c]) * a[c]
            out.append(max(s, 0.0) if act == "relu" else s)
        a = out
    return a


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_lstm_step(layers, x, S_prev, h_prev):
    """layers: list of (w_x (4H,in), w_h (4H,H), b (4H,)). Pure-Python loops."""
    S_out, h_out = [], []
    inp = [float(v) for v in x]
    for k, (wx, wh, b) in enumerate(layers):
        H = len(h_prev[k])
        z = []
        for r in range(4 * H):
            s = float(b[r])
            for c in range(len(inp)):
                s += float(wx[r][c]) * inp[c]
            for c in range(H):
                s += float(wh[r][c]) * float(h_prev[k][c])
            z.append(s)
        S, h = [], []
        for j in range(H):
            i = _sig(z[j])
            f = _sig(z[H + j])
            o = _sig(z[2 * H + j])
            g = math.tanh(z[3 * H + j])
            s = f * float(S_prev[k][j]) + i * g
            S.append(s)
            h.append(o * math.tanh(s))
        S_out.append(S)
        h_out.append(h)
        inp = h
    return S_out, h_out


def mp_softmax(logits, dps=50):
    with mpmath.workdps(dps):
        es = [mpmath.e ** mpmath.mpf(float(v)) for v in logits]
        z = mpmath.fsum(es)
        return [float(e / z) for e in es]


def central_diff(f, tensors, eps=1e-5):
    """Numerical gradient of scalar f() w.r.t. every entry of each array (in place perturbation)."""
    out = []
    for t in tensors:
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = t[idx]
            t[idx] = old + eps
            fp = f()
            t[idx] = old - eps
            fm = f()
            t[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor) over every tensor entry."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a)
        n = np.asarray(n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


# ---------------------------------------------------------------- fusion


def mp_bayes_product(likelihoods, dps=60, floor=1e-12):
    """normalize(prod of floored likelihoods) starting from a uniform prior."""
    with mpmath.workdps(dps):
        n = len(likelihoods[0])
        acc = [mpmath.mpf(1) / n] * n
        for lik in likelihoods:
            acc = [max(a, mpmath.mpf(floor)) * mpmath.mpf(max(float(l), floor))
                   for a, l in zip(acc, lik)]
            z = mpmath.fsum(acc)
            acc = [a / z for a in acc]
        return [float(a) for a in acc]


# ---------------------------------------------------------------- metrics


def exact_metrics(cm):
    """Exact-rational overall / mean accuracy / mIoU over supported classes."""
    n = len(cm)
    rows = [sum(int(v) for v in cm[i]) for i in range(n)]
    cols = [sum(int(cm[j][i]) for j in range(n)) for i in range(n)]
    diag = [int(cm[i][i]) for i in range(n)]
    support = [i for i in range(n) if rows[i] > 0]
    overall = Fraction(sum(diag), sum(rows))
    mean_acc = sum((Fraction(diag[i], rows[i]) for i in support), Fraction(0)) / len(support)
    miou = sum((Fraction(diag[i], rows[i] + cols[i] - diag[i]) for i in support),
               Fraction(0)) / len(support)
    return overall, mean_acc, miou


def naive_confusion(pred, gt, n_classes, dont_care):
    """pred: dict key->prob list; gt: dict key->label."""
    cm = [[0] * n_classes for _ in range(n_classes)]
    for key, label in gt.items():
        if label == dont_care:
            continue
        if key in pred:
            p = list(pred[key])
            j = p.index(max(p))
        else:
            j = 0
        cm[label][j] += 1
    return cm


# ---------------------------------------------------------------- perception


def union_find_clusters(points, base, gain, min_points):
    """O(n^2) single linkage: i~j iff |pi-pj| <= base + gain*max(ri, rj)."""
    n = len(points)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    r = [math.sqrt(sum(float(c) ** 2 for c in p)) for p in points]
    for i in range(n):
        for j in range(i + 1, n):
            d = math.sqrt(sum((float(points[i][k]) - float(points[j][k])) ** 2 for k in range(3)))
            if d <= base + gain * max(r[i], r[j]):
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(sorted(g) for g in groups.values() if len(g) >= min_points)


# ---------------------------------------------------------------- voxel map


def group_mean_oracle(points, features, resolution):
    """dict key -> mean feature, summing members in canonical (coords, features) order."""
    groups = {}
    for p, f in zip(points, features):
        key = tuple(int(math.floor(float(c) / resolution)) for c in p)
        groups.setdefault(key, []).append((tuple(float(c) for c in p), tuple(float(v) for v in f)))
    out = {}
    for key, members in groups.items():
        members.sort()
        acc = np.zeros(len(members[0][1]))
        for _, f in members:
            acc = acc + np.array(f)
        out[key] = acc / len(members)
    return out
