"""Independent straight-line reference computations used as test oracles.

Nothing here imports the engine's math; only the weight containers are shared.
"""

import math

import numpy as np


def _ln(x, g, b, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)])


def _gelu(x, kind):
    if kind == "gelu":
        return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _logits(w, h):
    c = w.config
    x = _ln(h, w.lnf_g, w.lnf_b, c.ln_epsilon)
    return np.array([float(np.dot(row, x)) for row in np.asarray(w.w_lm, dtype=np.float64)])


def _log_softmax(z):
    m = max(z)
    s = math.log(sum(math.exp(v - m) for v in z))
    return np.array([v - m - s for v in z])


def reference_forward(w, tokens=None, embeddings=None, zeroed=()):
    """Return (final hidden rows, per-layer dict) with neurons in ``zeroed`` having
    their fc2 column zeroed in a private copy of the weights."""
    c = w.config
    d, H = c.d_model, c.n_heads
    dh = d // H
    if tokens is not None:
        hs = [np.asarray(w.wte[t], dtype=np.float64) + np.asarray(w.wpe[i], dtype=np.float64)
              for i, t in enumerate(tokens)]
    else:
        hs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    T = len(hs)
    layers = []
    for l, L in enumerate(w.layers):
        fc2 = np.array(L.w_fc2, dtype=np.float64)
        for (zl, zj) in zeroed:
            if zl == l:
                fc2[:, zj] = 0.0
        xs = [_ln(h, L.ln1_g, L.ln1_b, c.ln_epsilon) for h in hs]
        q = [L.w_q @ x + L.b_q for x in xs]
        k = [L.w_k @ x + L.b_k for x in xs]
        v = [L.w_v @ x + L.b_v for x in xs]
        attn = []
        for i in range(T):
            ctx = np.zeros(d)
            for head in range(H):
                sl = slice(head * dh, (head + 1) * dh)
                sc = [float(np.dot(q[i][sl], k[p][sl])) / math.sqrt(dh) for p in range(i + 1)]
                m = max(sc)
                e = [math.exp(s - m) for s in sc]
                z = sum(e)
                for p in range(i + 1):
                    ctx[sl] += e[p] / z * v[p][sl]
            attn.append(L.w_o @ ctx + L.b_o)
        rs = [h + a for h, a in zip(hs, attn)]
        coeffs, outs = [], []
        for r in rs:
            x = _ln(r, L.ln2_g, L.ln2_b, c.ln_epsilon)
            m = np.array([_gelu(float(np.dot(L.w_fc1[k_], x)) + float(L.b_fc1[k_]), c.activation)
                          for k_ in range(c.d_ffn)])
            coeffs.append(m)
            outs.append(fc2 @ m + L.b_fc2)
        hs = [r + f for r, f in zip(rs, outs)]
        layers.append({"resid_mid": rs, "coeffs": coeffs, "ffn_out": outs, "hidden": list(hs)})
    return hs, layers


def reference_logits(w, tokens=None, embeddings=None, zeroed=()):
    hs, _ = reference_forward(w, tokens, embeddings, zeroed)
    return _logits(w, hs[-1])


def brute_force_effects(w, concept, target_ids):
    """Per-neuron target deltas by rebuilding W_fc2 with the column zeroed and
    recomputing the layer output from scratch. Returns [L, N, K] deltas."""
    c = w.config
    _, layers = reference_forward(w, embeddings=[concept])
    out = np.zeros((c.n_layers, c.d_ffn, len(target_ids)))
    for l, L in enumerate(w.layers):
        r = layers[l]["resid_mid"][0]
        x = _ln(r, L.ln2_g, L.ln2_b, c.ln_epsilon)
        a = np.array([_gelu(float(np.dot(L.w_fc1[k_], x)) + float(L.b_fc1[k_]), c.activation)
                      for k_ in range(c.d_ffn)])
        o_orig = r + np.asarray(L.w_fc2, dtype=np.float64) @ a + L.b_fc2
        lp_orig = _log_softmax(_logits(w, o_orig))
        for j in range(c.d_ffn):
            W = np.array(L.w_fc2, dtype=np.float64)
            W[:, j] = 0.0
            o_mod = r + W @ a + L.b_fc2
            lp_mod = _log_softmax(_logits(w, o_mod))
            out[l, j] = [lp_mod[t] - lp_orig[t] for t in target_ids]
    return out


def brute_force_ranking(scores):
    """Sort (layer, index) pairs by descending score, ties by (layer, index)."""
    L, N = scores.shape
    items = [(-scores[l, j], l, j) for l in range(L) for j in range(N)]
    items.sort()
    return [(l, j) for _, l, j in items]
