"""Slow, obviously-correct reference computations used to check the library."""

import math
from fractions import Fraction

import numpy as np

from cxrnet import functional as F
from cxrnet.tensor import Tensor
from cxrnet.training import bce_loss


def auc_pairs(scores, truths):
    """Count every positive/negative pair: win 1, tie 1/2."""
    pos = [s for s, t in zip(scores, truths) if t]
    neg = [s for s, t in zip(scores, truths) if not t]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


def average_ranks(values):
    """1-based ranks; each group of equal values gets the mean of its positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_direct(a, b):
    ra, rb = average_ranks(list(a)), average_ranks(list(b))
    n = len(ra)
    ma, mb = math.fsum(ra) / n, math.fsum(rb) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = math.fsum((x - ma) ** 2 for x in ra)
    vb = math.fsum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


def confusion_loop(scores, truths, threshold):
    tp = fn = tn = fp = 0
    for s, t in zip(scores, truths):
        hit = s >= threshold
        if t and hit:
            tp += 1
        elif t:
            fn += 1
        elif hit:
            fp += 1
        else:
            tn += 1
    return tp, fn, tn, fp


def youden_enumerate(scores, truths):
    """Best J over thresholds at every distinct score plus +inf; lowest threshold among ties."""
    best = None
    for th in sorted(set(scores)) + [math.inf]:
        tp, fn, tn, fp = confusion_loop(scores, truths, th)
        j = Fraction(tp, tp + fn) + Fraction(tn, tn + fp) - 1
        if best is None or j > best[0]:
            best = (j, th)
    return best


def bce_fd_error(seed, step=1e-6):
    """Library backward against central differences of the float64 loss value."""
    r = np.random.default_rng([seed, 1])
    y = (r.random((4, 15)) < 0.5).astype(np.float32)
    f = (0.05 + 0.9 * r.random((4, 15))).astype(np.float32)
    p = Tensor(f, requires_grad=True)
    bce_loss(y, p).total.backward()
    analytic = p.grad.astype(np.float64)
    x = f.astype(np.float64)
    numeric = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        numeric[i] = (F.bce_elements(up, y).mean() - F.bce_elements(down, y).mean()) / (2 * step)
    return np.abs(analytic - numeric).max() / max(np.abs(analytic).max(), np.abs(numeric).max())
