"""Independent brute-force references used by the test suite.

Everything here is deliberately written as plain loops over numpy basics,
sharing no code path with the package: rankings are re-derived from raw
logits, statistics are recounted with dictionaries, and the full fused
forward pass is restated as one straight-line function over the parameter
arrays. These stay dumb on purpose.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# metric references


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def rank_constrained(pairs, logits):
    cands = []
    for (i, j), row in zip(pairs, logits):
        probs = softmax_row(list(row))
        best_p, best_v = None, -1.0
        for p in range(1, len(probs)):
            if probs[p] > best_v:
                best_p, best_v = p, probs[p]
        cands.append((i, j, best_p, best_v))
    return sorted(cands, key=lambda c: (-c[3], c[0], c[1], c[2]))


def rank_unconstrained(pairs, logits):
    cands = []
    for (i, j), row in zip(pairs, logits):
        probs = softmax_row(list(row))
        for p in range(1, len(probs)):
            cands.append((i, j, p, probs[p]))
    return sorted(cands, key=lambda c: (-c[3], c[0], c[1], c[2]))


def mean_recall(ranked_per_scene, gt_per_scene, k, n_predicates):
    """ranked_per_scene: list of candidate lists; gt_per_scene: triplet lists."""
    hits = {p: 0 for p in range(n_predicates)}
    totals = {p: 0 for p in range(n_predicates)}
    for cands, gts in zip(ranked_per_scene, gt_per_scene):
        top = {(s, o, p) for s, o, p, _ in cands[:k]}
        for s, o, p in gts:
            totals[p] += 1
            if (s, o, p) in top:
                hits[p] += 1
    recalls = [hits[p] / totals[p] for p in range(n_predicates) if totals[p] > 0]
    per_pred = {p: hits[p] / totals[p] for p in range(n_predicates) if totals[p] > 0}
    mean = sum(recalls) / len(recalls) if recalls else 0.0
    return mean, per_pred


def zero_shot_recall(ranked_per_scene, scenes, train_combos, k):
    hits = total = 0
    for cands, scene in zip(ranked_per_scene, scenes):
        top = {(s, o, p) for s, o, p, _ in cands[:k]}
        for s, o, p in scene.triplets:
            if (scene.categories[s], scene.categories[o], p) in train_combos:
                continue
            total += 1
            if (s, o, p) in top:
                hits += 1
    return (None, 0) if total == 0 else (hits / total, total)


# ---------------------------------------------------------------------------
# statistics references


def marginals(scenes, n_objects, n_predicates, alpha):
    s_counts = {}
    o_counts = {}
    for scene in scenes:
        for s, o, p in scene.triplets:
            sc, oc = scene.categories[s], scene.categories[o]
            s_counts[(sc, p)] = s_counts.get((sc, p), 0) + 1
            o_counts[(oc, p)] = o_counts.get((oc, p), 0) + 1

    def table(counts):
        out = np.zeros((n_objects, n_predicates))
        for c in range(n_objects):
            row_total = sum(v for (cc, _), v in counts.items() if cc == c)
            for p in range(n_predicates):
                out[c, p] = (counts.get((c, p), 0) + alpha) / (
                    row_total + alpha * n_predicates)
        return out

    return table(s_counts), table(o_counts)


def freq_counts(scenes, n_objects, n_predicates):
    freq = np.zeros((n_objects, n_objects, n_predicates), dtype=int)
    for scene in scenes:
        for s, o, p in scene.triplets:
            freq[scene.categories[s], scene.categories[o], p] += 1
    return freq


# ---------------------------------------------------------------------------
# numeric references


def broadcast_add(edge, channel_bias):
    """edge: C×D×D, channel_bias: C×1×1, via explicit loops."""
    c, d, _ = edge.shape
    out = np.zeros_like(edge)
    for ch in range(c):
        for y in range(d):
            for x in range(d):
                out[ch, y, x] = edge[ch, y, x] + channel_bias[ch, 0, 0]
    return out


def conv2d_loops(x, kernels, stride=1, padding=1):
    """Plain 6-loop cross-correlation; x: C_in×H×W, kernels: C_out×C_in×kh×kw."""
    ci, h, w = x.shape
    co, ci2, kh, kw = kernels.shape
    assert ci == ci2
    xp = np.zeros((ci, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for c in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            acc += kernels[o, c, u, v] * xp[c, y * stride + u,
                                                            xx * stride + v]
                out[o, y, xx] = acc
    return out


def avg_pool_loops(x, kernel):
    c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for y in range(ho):
            for xx in range(wo):
                block = x[ch, y * kernel:(y + 1) * kernel,
                          xx * kernel:(xx + 1) * kernel]
                out[ch, y, xx] = block.mean()
    return out


def relu_np(x):
    return np.maximum(0.0, x)


def cosine_ref(a, b, eps=1e-12):
    na = math.sqrt(float((a * a).sum()))
    nb = math.sqrt(float((b * b).sum()))
    return float((a * b).sum()) / ((na + eps) * (nb + eps))


# ---------------------------------------------------------------------------
# straight-line restatement of the fused forward pass


def _layer_norm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def straight_line_forward(scene, arrays, model_cfg, pipe_cfg, stats, pairs):
    """Fused logits recomputed without the autodiff stack.

    ``arrays`` maps parameter name to a plain numpy array (store snapshot).
    Returns an array len(pairs) × N_r.
    """
    sem = model_cfg.sem
    n = scene.n_entities
    coords = np.stack([b.as_array() for b in scene.boxes])

    if pipe_cfg.use_sem:
        emb = arrays["sem.w_c"][scene.categories]
        pos = relu_np(coords @ arrays["sem.pos.w"] + arrays["sem.pos.b"])
        x = np.concatenate([emb, pos], axis=1) @ arrays["sem.in_proj.w"] \
            + arrays["sem.in_proj.b"]
        for layer in range(sem.layers):
            base = f"sem.layer{layer}."
            heads = []
            for head in range(sem.heads):
                hb = base + f"head{head}."
                q = x @ arrays[hb + "wq"]
                k = x @ arrays[hb + "wk"]
                v = x @ arrays[hb + "wv"]
                logits = q @ k.T / math.sqrt(sem.head_dim)
                attn = np.stack([softmax_row(list(row)) for row in logits])
                heads.append(attn @ v)
            merged = np.concatenate(heads, axis=1) @ arrays[base + "merge.w"] \
                + arrays[base + "merge.b"]
            if sem.attention_residual:
                merged = merged + x
            ffn = relu_np(merged @ arrays[base + "ffn1.w"] + arrays[base + "ffn1.b"])
            ffn = ffn @ arrays[base + "ffn2.w"] + arrays[base + "ffn2.b"]
            x = _layer_norm_np(merged + ffn, arrays[base + "ln.gain"],
                               arrays[base + "ln.bias"])
        reps = x @ arrays["sem.out.w"] + arrays["sem.out.b"]
        nhat = np.concatenate([reps, scene.node_features], axis=1)
    else:
        nhat = np.concatenate(
            [np.zeros((n, sem.out_dim)), scene.node_features], axis=1)

    out = np.zeros((len(pairs), model_cfg.n_predicates))
    for row_idx, (i, j) in enumerate(pairs):
        ci, cj = scene.categories[i], scene.categories[j]
        edge = scene.edge_features[(i, j)].copy()
        if pipe_cfg.use_lmm:
            if model_cfg.lmm.share_embeddings:
                es, eo = arrays["eem.w_s"][ci], arrays["eem.w_o"][cj]
            else:
                es, eo = arrays["lmm.w_s"][ci], arrays["lmm.w_o"][cj]
            lang = np.outer(es, eo)[None]
            pooled_map = avg_pool_loops(lang, lang.shape[-1] // model_cfg.lmm.pool_size) \
                if lang.shape[-1] != model_cfg.lmm.pool_size else lang
            h = relu_np(conv2d_loops(pooled_map, arrays["lmm.conv1.w"])
                        + arrays["lmm.conv1.b"][:, None, None])
            h = relu_np(conv2d_loops(h, arrays["lmm.conv2.w"])
                        + arrays["lmm.conv2.b"][:, None, None])
            f_lm = h.mean(axis=(1, 2), keepdims=True)
            edge = broadcast_add(edge, f_lm)
        pooled = edge.mean(axis=(1, 2))

        feats = np.concatenate([nhat[i], nhat[j], pooled])
        hidden = relu_np(feats @ arrays["base.cls1.w"] + arrays["base.cls1.b"])
        logits = hidden @ arrays["base.cls2.w"] + arrays["base.cls2.b"]

        if pipe_cfg.use_eem:
            geo = np.concatenate([coords[i], coords[j]])
            p_emb = relu_np(geo @ arrays["eem.phi_p.w"] + arrays["eem.phi_p.b"])
            fs = relu_np(arrays["eem.w_s"][ci] @ arrays["eem.phi_s.w"]
                         + arrays["eem.phi_s.b"])
            fo = relu_np(arrays["eem.w_o"][cj] @ arrays["eem.phi_o.w"]
                         + arrays["eem.phi_o.b"])
            hh = np.concatenate([fs, fo, p_emb])
            hh = relu_np(hh @ arrays["eem.head1.w"] + arrays["eem.head1.b"])
            d = hh @ arrays["eem.head2.w"] + arrays["eem.head2.b"]
            logits = logits + d
        elif pipe_cfg.use_freq_baseline:
            counts = stats.freq.astype(float)
            nr = counts.shape[2]
            prior = (counts[ci, cj] + stats.alpha) / (
                counts[ci, cj].sum() + stats.alpha * nr)
            logits = logits + np.log(prior)
        out[row_idx] = logits
    return out
