"""Loop-based reference implementations used as test oracles."""

import math

import numpy as np


def naive_standardize(vec, eps=1e-5):
    n = len(vec)
    mean = sum(vec) / n
    var = sum((v - mean) ** 2 for v in vec) / n
    return [(v - mean) / math.sqrt(var + eps) for v in vec]


def naive_attention(nodes, base, w1, w2, scale=True, normalize=True):
    t_len, c_len, d_len = nodes.shape
    e_len = w1.shape[1]
    x = np.array(nodes, dtype=float)
    if normalize:
        for t in range(t_len):
            for i in range(c_len):
                x[t, i] = naive_standardize(list(nodes[t, i]))
    scores = np.zeros((c_len, c_len))
    for i in range(c_len):
        for j in range(c_len):
            acc = 0.0
            for t in range(t_len):
                for e in range(e_len):
                    a = sum(x[t, i, d] * w1[d, e] for d in range(d_len))
                    b = sum(x[t, j, d] * w2[d, e] for d in range(d_len))
                    acc += a * b
            scores[i, j] = acc / math.sqrt(e_len * t_len) if scale else acc
    out = np.zeros_like(scores)
    for i in range(c_len):
        m = max(scores[i])
        ex = [math.exp(s - m) for s in scores[i]]
        tot = sum(ex)
        for j in range(c_len):
            out[i, j] = base[i, j] + ex[j] / tot
    return out


def naive_graph_conv(nodes, adj, w3):
    t_len, c_len, d_len = nodes.shape
    out = np.zeros((t_len, c_len, w3.shape[1]))
    for t in range(t_len):
        for i in range(c_len):
            for o in range(w3.shape[1]):
                out[t, i, o] = sum(
                    adj[i, j] * nodes[t, j, k] * w3[k, o] for j in range(c_len) for k in range(d_len)
                )
    return out


def naive_noun_logits(nodes, weight, bias):
    t_len, c_len, d_len = nodes.shape
    out = []
    for c in range(c_len):
        acc = bias[c]
        for d in range(d_len):
            pooled = sum(nodes[t, c, d] for t in range(t_len)) / t_len
            acc += pooled * weight[c, d]
        out.append(acc)
    return np.array(out)


def naive_verb_logits(adj, weight, bias):
    heads, c_len = adj.shape[1], adj.shape[2]
    flat = []
    for i in range(c_len):
        for j in range(c_len):
            flat.append(sum(adj[-1, h, i, j] for h in range(heads)) / heads)
    return np.array([bias[v] + sum(weight[v, k] * flat[k] for k in range(len(flat))) for v in range(len(bias))])


def naive_nll(logits, label):
    m = max(logits)
    return -(logits[label] - m - math.log(sum(math.exp(z - m) for z in logits)))


def naive_filter(scene, weight, bias):
    t_len, f_len = scene.shape
    c_len, _, d_len = weight.shape
    out = np.zeros((t_len, c_len, d_len))
    for t in range(t_len):
        for c in range(c_len):
            for d in range(d_len):
                acc = bias[c, d]
                for f in range(f_len):
                    acc += scene[t, f] * weight[c, f, d]
                out[t, c, d] = max(acc, 0.0)
    return out


def naive_classify(nodes, weight, bias):
    t_len, c_len, d_len = nodes.shape
    out = np.zeros((t_len, c_len))
    for t in range(t_len):
        for c in range(c_len):
            out[t, c] = bias[c] + sum(nodes[t, c, d] * weight[c, d] for d in range(d_len))
    return out


def naive_bce(logits, presence):
    total = 0.0
    for z, y in zip(np.ravel(logits), np.ravel(presence)):
        p = 1.0 / (1.0 + math.exp(-z))
        total -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return total / np.size(logits)
