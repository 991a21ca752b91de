"""Independent reference implementations used to check the package.

Everything here is written with plain Python loops and the ``math`` module
so that it shares no code path with the vectorized implementations under test.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict


def entropy(items, base=2.0):
    counts = Counter(items)
    total = sum(counts.values())
    if total == 0:
        return 0.0
    h = 0.0
    for c in counts.values():
        if c:
            p = c / total
            h -= p * math.log(p, base)
    return h


def entropy_counts(counts, base=2.0):
    total = sum(counts)
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / total
            h -= p * math.log(p) / math.log(base)
    return h


def aggregate_node(flows, node_map, node, payload=False, other="other"):
    """Per-node flow features recomputed field by field."""

    def owner(ip):
        return node_map.get(ip, other)

    out_f = [f for f in flows if owner(f.src_ip) == node]
    in_f = [f for f in flows if owner(f.dst_ip) == node]
    feats = [
        float(len(out_f)),
        float(len(in_f)),
        float(sum(f.frame_len for f in out_f)),
        float(sum(f.frame_len for f in in_f)),
        entropy([f.src_port for f in out_f]),
        entropy([f.proto for f in flows if node in (owner(f.src_ip), owner(f.dst_ip))]),
        float(len({f.src_ip for f in in_f})),
        float(len({f.dst_ip for f in out_f})),
    ]
    if payload:
        sent_bytes, words = [], []
        for f in out_f:
            sent_bytes.extend(f.cip_bytes or b"")
            words.extend(f.cip_values or ())
        feats += [entropy(sent_bytes), (sum(words) / len(words)) if words else 0.0,
                  entropy(words)]
    return feats


def bucket_means(records, interval, t0, n_buckets):
    """Group (t, value) pairs by bucket; mean per bucket, None where empty."""
    groups = defaultdict(list)
    for t, v in records:
        k = int((t - t0) // interval)
        if 0 <= k < n_buckets:
            groups[k].append(v)
    return [sum(groups[k]) / len(groups[k]) if groups[k] else None for k in range(n_buckets)]


def fill_forward(values):
    first = next(v for v in values if v is not None)
    out, cur = [], first
    for v in values:
        if v is not None:
            cur = v
        out.append(cur)
    return out


def minmax(x, lo, hi):
    return 0.0 if hi == lo else (x - lo) / (hi - lo)


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


def topk_renorm(row, k):
    """Sort, truncate, renormalize; ties keep the lower index."""
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))[:k]
    keep = set(order)
    z = sum(row[j] for j in keep)
    return [row[j] / z if j in keep else 0.0 for j in range(len(row))]


def gram_cosine(rows):
    normed = []
    for r in rows:
        n = math.sqrt(sum(v * v for v in r))
        normed.append([v / n for v in r])
    return [[sum(a * b for a, b in zip(x, y)) for y in normed] for x in normed]


def conformal_quantile(scores, alpha):
    """Sort, count up to the ceil((1-alpha)(T+1))-th element, inf past the end."""
    T = len(scores)
    need = (1 - alpha) * (T + 1)
    k = int(need)
    if k < need - 1e-9:
        k += 1
    k = max(k, 1)
    s = sorted(scores)
    return math.inf if k > T else s[k - 1]


def confusion(pred, labels):
    tp = fp = tn = fn = 0
    for p, y in zip(pred, labels):
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def f1(tp, fp, fn):
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def best_f1_scan(scores, labels):
    """Try every distinct score as a threshold; keep the largest among the best."""
    best_thr, best = math.inf, 0.0
    for thr in sorted(set(scores), reverse=True):
        tp, fp, _, fn = confusion([s >= thr for s in scores], labels)
        v = f1(tp, fp, fn)
        if v > best + 1e-15:
            best, best_thr = v, thr
    return best_thr, best


def gcs_edges(S, per_node=5):
    """Top ``per_node`` off-diagonal entries per row, undirected, max weight per pair."""
    n = len(S)
    best = {}
    for i in range(n):
        others = sorted((j for j in range(n) if j != i), key=lambda j: (-S[i][j], j))
        for j in others[:per_node]:
            key = (min(i, j), max(i, j))
            best[key] = max(best.get(key, -math.inf), S[i][j])
    return best


def ga_edges(A, anomalous):
    out = {}
    n = len(A)
    for i in range(n):
        for j in range(n):
            if i != j and A[i][j] > 0 and (i in anomalous or j in anomalous):
                out[(j, i)] = A[i][j]
    return out


def central_diff(f, arr, step=1e-5):
    """Finite-difference gradient of scalar ``f()`` w.r.t. the float array ``arr`` (in place)."""
    flat = arr.reshape(-1)
    out = [0.0] * flat.size
    for i in range(flat.size):
        orig = float(flat[i])
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out


def rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, abs(a - n) / max(abs(a) + abs(n), floor))
    return worst
