"""Slow, obviously-correct reference implementations used as test oracles."""
import itertools
import math


def frame_iou(a, b):
    fa, fb = set(range(a[0], a[1])), set(range(b[0], b[1]))
    return len(fa & fb) / len(fa | fb)


def ap(ranked, relevant):
    items = list(ranked)
    precisions = []
    for r in relevant:
        if r in items:
            k = items.index(r) + 1
            precisions.append(sum(1 for x in items[:k] if x in relevant) / k)
        else:
            precisions.append(0.0)
    return sum(precisions) / len(relevant)


def best_prefix_f1(ranked, relevant):
    best = 0.0
    for n in range(1, len(ranked) + 1):
        hits = sum(1 for x in ranked[:n] if x in relevant)
        if hits:
            p, r = hits / n, hits / len(relevant)
            best = max(best, 2 * p * r / (p + r))
    return best


def p_r_at(ranked, relevant, n):
    top = set(ranked[:n])
    hits = len(top & set(relevant))
    best = min(n, len(relevant))
    return hits / n, hits / len(relevant), best / n, best / len(relevant)


def ap_at_iou(preds, gt, thr):
    """Greedy matching then the area under the interpolated precision envelope.

    ``preds`` are ``(clip, (s, t), score)``; ``gt`` maps clip to ``[(s, t)]``.
    """
    order = sorted(preds, key=lambda p: (-p[2], p[0], p[1][0], p[1][1]))
    used = {k: [False] * len(v) for k, v in gt.items()}
    flags = []
    for clip, seg, _ in order:
        cands = [(frame_iou(seg, g), -j, j) for j, g in enumerate(gt.get(clip, [])) if not used[clip][j]]
        if cands:
            v, _, j = max(cands)
            if v >= thr:
                used[clip][j] = True
                flags.append(1)
                continue
        flags.append(0)
    n_gt = sum(len(v) for v in gt.values())
    points = []
    hits = 0
    for k, f in enumerate(flags, start=1):
        hits += f
        points.append((hits / n_gt, hits / k))
    # interpolated precision at each recall level: max precision at any recall >= it
    area, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            area += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return area


def expected_random_ap(n_relevant, n_candidates):
    """Exact expectation by enumerating every placement of the relevant items."""
    total, count = 0.0, 0
    for pos in itertools.combinations(range(n_candidates), n_relevant):
        total += sum((i + 1) / (p + 1) for i, p in enumerate(pos)) / n_relevant
        count += 1
    return total / count


def ctc_log_likelihood(log_probs, target, blank):
    """Log of the summed probability of every frame path that collapses to ``target``."""
    T, C = len(log_probs), len(log_probs[0])
    terms = [sum(log_probs[t][c] for t, c in enumerate(path))
             for path in itertools.product(range(C), repeat=T) if collapse(path, blank) == tuple(target)]
    if not terms:
        return -math.inf
    top = max(terms)
    return top + math.log(sum(math.exp(x - top) for x in terms))


def exhaustive_decode(log_probs, blank):
    """Label sequence with the highest total probability over all its paths."""
    T, C = len(log_probs), len(log_probs[0])
    totals = {}
    for path in itertools.product(range(C), repeat=T):
        key = collapse(path, blank)
        totals[key] = totals.get(key, 0.0) + math.exp(sum(log_probs[t][c] for t, c in enumerate(path)))
    return max(totals.items(), key=lambda kv: kv[1])


def collapse(path, blank):
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


def nms(bounds, scores, thr, max_out):
    order = sorted(range(len(bounds)), key=lambda i: (-scores[i], bounds[i][0], -(bounds[i][1] - bounds[i][0])))
    kept = []
    for i in order:
        if all(frame_iou(bounds[i], bounds[k]) < thr for k in kept):
            kept.append(i)
        if len(kept) == max_out:
            break
    return kept
