"""Independent straight-line reimplementations used as test oracles.

Written with explicit Python loops over scalars so they share no code paths
with the vectorized package implementations.
"""
import math


def _softmax(v):
    mx = max(v)
    ex = [math.exp(x - mx) for x in v]
    s = sum(ex)
    return [x / s for x in ex]


def _matvec(M, v):
    return [sum(M[i][j] * v[j] for j in range(len(v))) for i in range(len(M))]


def enhance(x, C, V_rows, alpha):
    """coefficient -> knowledge -> attention -> scaled feature, one stream."""
    p_hat = _softmax(_matvec(C, x))
    P = len(x)
    k = [sum(p_hat[r] * V_rows[r][j] for r in range(len(V_rows))) for j in range(P)]
    a = [max(math.tanh(x[j] + k[j]), 0.0) for j in range(P)]
    m = max(p_hat)
    return [alpha * m * (x[j] + a[j] * k[j]) for j in range(P)], p_hat, m


def head_probs(e, u, z, head, V_e, V_u, alpha, knowledge_transfer=True):
    """Final probability vector of one classifier head for a single sample."""
    e, u, z = list(e), list(u), list(z)
    if knowledge_transfer:
        rows = range(len(V_e)) if head.mem_subset is None else sorted(head.mem_subset)
        e, _, _ = enhance(e, head.C_e.tolist(), [list(V_e[r]) for r in rows], alpha)
        u, _, _ = enhance(u, head.C_u.tolist(), [list(V_u[r]) for r in rows], alpha)
    le = _matvec(head.W_e.tolist(), e)
    lu = _matvec(head.W_u.tolist(), u)
    lz = _matvec(head.W_z.tolist(), z)
    return _softmax([le[i] + lu[i] + lz[i] for i in range(len(le))])


def brute_force_recall(scores, g, scene_id, K, A):
    """Per-class recall@K by enumerating every (scene, candidate, label) triple."""
    hits = [0] * A
    total = [0] * A
    scenes = {}
    for i, s in enumerate(scene_id):
        scenes.setdefault(int(s), []).append(i)
    for members in scenes.values():
        triples = []
        for pos, i in enumerate(members):
            for lab in range(A):
                triples.append((-float(scores[i][lab]), lab, pos, i))
        triples.sort()
        top = {(t[3], t[1]) for t in triples[:K]}
        for i in members:
            total[int(g[i])] += 1
            if (i, int(g[i])) in top:
                hits[int(g[i])] += 1
    return [hits[c] / total[c] if total[c] else None for c in range(A)]


def brute_force_mean_recall(scores, g, scene_id, K, A):
    vals = [r for r in brute_force_recall(scores, g, scene_id, K, A) if r is not None]
    return sum(vals) / len(vals)
