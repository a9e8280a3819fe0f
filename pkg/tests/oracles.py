"""Independent scalar/brute-force oracles used by the test suite.

Everything here is written with plain Python loops and the math module, never
with the package's vectorized code paths, so an agreement between the two is
evidence rather than tautology.
"""

from __future__ import annotations

import bisect
import math


def softmax_row_scalar(row, scale):
    shifted = [scale * x for x in row]
    m = max(shifted)
    exps = [math.exp(x - m) for x in shifted]
    total = sum(exps)
    return [e / total for e in exps]


def cross_entropy_scalar(targets, probs):
    rows = len(targets)
    if rows == 0:
        return 0.0
    total = 0.0
    for trow, prow in zip(targets, probs):
        for t, p in zip(trow, prow):
            total -= t * math.log(max(p, 1e-300))
    return total / rows


def info_nce_scalar(v, t, scale):
    """Triple-loop InfoNCE: per-query softmax over similarities, both
    directions, mean reduction each."""
    n = len(v)
    loss = 0.0
    for rows, cols in ((v, t), (t, v)):
        for i in range(n):
            sims = [scale * sum(a * b for a, b in zip(rows[i], cols[j])) for j in range(n)]
            m = max(sims)
            denom = sum(math.exp(s - m) for s in sims)
            loss -= (sims[i] - m - math.log(denom)) / n
    return loss


def psd_scalar(v, t, scale, aligned, unaligned, alpha, image_targets, text_targets):
    """Term-by-term evaluation of the partitioned objective."""
    n = len(v)

    def ce_block(query_rows, keys, targets):
        if not query_rows:
            return 0.0
        total = 0.0
        for r, qi in enumerate(query_rows):
            sims = [scale * sum(a * b for a, b in zip(qi, keys[j])) for j in range(n)]
            m = max(sims)
            log_denom = m + math.log(sum(math.exp(s - m) for s in sims))
            for j in range(n):
                total -= targets[r][j] * (sims[j] - log_denom)
        return total / len(query_rows)

    hard_v = ce_block([v[i] for i in aligned], t,
                      [[1.0 if j == i else 0.0 for j in range(n)] for i in aligned])
    hard_t = ce_block([t[i] for i in aligned], v,
                      [[1.0 if j == i else 0.0 for j in range(n)] for i in aligned])
    soft_v = ce_block([v[i] for i in unaligned], t, image_targets)
    soft_t = ce_block([t[i] for i in unaligned], v, text_targets)
    return alpha * (hard_v + hard_t) + (1.0 - alpha) * (soft_v + soft_t)


def swapped_targets_scalar(v, t, scale, unaligned):
    """A^v[u, j] = exp(s_ji)/sum_k exp(s_jk) with s_jk = scale*sim(t_j, v_k),
    then row renormalization; A^t with modalities exchanged."""
    n = len(v)

    def sim(a, b):
        return sum(x * y for x, y in zip(a, b))

    image_targets = []
    for i in unaligned:
        raw = []
        for j in range(n):
            num = math.exp(scale * sim(t[j], v[i]))
            den = sum(math.exp(scale * sim(t[j], v[k])) for k in range(n))
            raw.append(num / den)
        total = sum(raw)
        image_targets.append([x / total for x in raw])
    text_targets = []
    for i in unaligned:
        raw = []
        for j in range(n):
            num = math.exp(scale * sim(v[j], t[i]))
            den = sum(math.exp(scale * sim(v[j], t[k])) for k in range(n))
            raw.append(num / den)
        total = sum(raw)
        text_targets.append([x / total for x in raw])
    return image_targets, text_targets


def bootstrap_targets_scalar(v, t, scale, unaligned):
    def sim(a, b):
        return sum(x * y for x, y in zip(a, b))

    n = len(v)
    image_targets = [softmax_row_scalar([sim(v[i], t[j]) for j in range(n)], scale)
                     for i in unaligned]
    text_targets = [softmax_row_scalar([sim(t[i], v[j]) for j in range(n)], scale)
                    for i in unaligned]
    return image_targets, text_targets


def retrieval_scalar(v, t, k_list):
    """Brute-force ranking: sort each query's candidates by (-score, index)."""
    n = len(v)

    def sim(a, b):
        return sum(x * y for x, y in zip(a, b))

    results = {}
    for name, queries, keys in (("image_to_text", v, t), ("text_to_image", t, v)):
        ranks = []
        for i in range(n):
            scored = sorted(((-sim(queries[i], keys[j]), j) for j in range(n)))
            ranks.append([j for _, j in scored].index(i) + 1)
        results[name] = {
            "recall_at": {k: 100.0 * sum(r <= k for r in ranks) / n for k in k_list},
            "mean_rank": sum(ranks) / n,
        }
    return results


def zero_shot_scalar(emb, prototypes, labels):
    def sim(a, b):
        return sum(x * y for x, y in zip(a, b))

    hits = 0
    for row, label in zip(emb, labels):
        best, best_score = 0, sim(row, prototypes[0])
        for k in range(1, len(prototypes)):
            s = sim(row, prototypes[k])
            if s > best_score:
                best, best_score = k, s
        hits += best == label
    return 100.0 * hits / len(labels)


def histogram_scalar(values, bins):
    """Equal-width binning over [-1, 1]: left-closed right-open, last bin
    closed (numpy.histogram convention, replicated via bisect on edges)."""
    edges = [-1.0 + 2.0 * i / bins for i in range(bins + 1)]
    counts = [0] * bins
    for x in values:
        x = min(1.0, max(-1.0, x))
        idx = bisect.bisect_right(edges, x) - 1
        counts[min(idx, bins - 1)] += 1
    return counts


def adam_scalar_trajectory(p0, grads_per_step, lr, beta1, beta2, eps, wd):
    """Decoupled-decay Adam reference on plain Python lists."""
    p = list(p0)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    out = []
    for step, g in enumerate(grads_per_step, start=1):
        p = [x * (1.0 - lr * wd) for x in p]
        m = [beta1 * mi + (1 - beta1) * gi for mi, gi in zip(m, g)]
        v = [beta2 * vi + (1 - beta2) * gi * gi for vi, gi in zip(v, g)]
        mh = [mi / (1 - beta1 ** step) for mi in m]
        vh = [vi / (1 - beta2 ** step) for vi in v]
        p = [x - lr * mi / (math.sqrt(vi) + eps) for x, mi, vi in zip(p, mh, vh)]
        out.append(list(p))
    return out
