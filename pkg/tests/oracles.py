"""Independent reference implementations used as test oracles.

Everything here is written straight from the defining formulas (loops where
that makes the independence obvious), in float64, with no imports from the
package's kernel internals. Oracles stay independent of the code paths they
check.
"""

import numpy as np


def matmul_ref(a, b):
    """Triple-loop matrix multiply."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    m, kk = a.shape
    k2, n = b.shape
    assert kk == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(kk):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_ref(row):
    row = np.asarray(row, np.float64)
    e = np.exp(row - row.max())
    return e / e.sum()


def cross_entropy_ref(logits, targets):
    """Direct softmax-then-log per row, mean over rows."""
    logits = np.asarray(logits, np.float64)
    total = 0.0
    for row, t in zip(logits, targets):
        total += -np.log(softmax_ref(row)[t])
    return total / len(logits)


def shared_head_loss_ref(logits, targets2d):
    """Mean of -log p over all (row, k) target pairs: k-term sum over K."""
    logits = np.asarray(logits, np.float64)
    targets2d = np.asarray(targets2d)
    n, k = targets2d.shape
    total = 0.0
    for i in range(n):
        p = softmax_ref(logits[i])
        for j in range(k):
            total += -np.log(p[targets2d[i, j]])
    return total / (n * k)


def rmsnorm_ref(x, weight, eps):
    x = np.asarray(x, np.float64)
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * np.asarray(weight, np.float64)


def silu_ref(x):
    x = np.asarray(x, np.float64)
    return x / (1.0 + np.exp(-x))


def swiglu_ref(x, w1, w3, w2):
    x = np.asarray(x, np.float64)
    return (silu_ref(x @ np.asarray(w1, np.float64)) * (x @ np.asarray(w3, np.float64))) @ np.asarray(w2, np.float64)


def rope_ref(x, positions, base):
    """Per-vector 2x2 rotations, looped."""
    x = np.asarray(x, np.float64)
    out = np.array(x)
    s, h, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    lead = x.reshape(-1, s, h, dh)
    out = np.empty_like(lead)
    for b in range(lead.shape[0]):
        for si in range(s):
            pos = positions[si]
            for hi in range(h):
                for i in range(dh // 2):
                    theta = pos * base ** (-2.0 * i / dh)
                    c, sn = np.cos(theta), np.sin(theta)
                    xe, xo = lead[b, si, hi, 2 * i], lead[b, si, hi, 2 * i + 1]
                    out[b, si, hi, 2 * i] = xe * c - xo * sn
                    out[b, si, hi, 2 * i + 1] = xe * sn + xo * c
    return out.reshape(x.shape)


def patch_mean_ref(emb, k):
    emb = np.asarray(emb, np.float64)
    b, length, d = emb.shape
    t = length // k
    out = np.zeros((b, t, d))
    for bi in range(b):
        for ti in range(t):
            out[bi, ti] = emb[bi, ti * k : (ti + 1) * k].mean(axis=0)
    return out


def transformer_forward_ref(weights, cfg, x, positions):
    """Clean-room forward pass: python loops over layers and heads.

    weights: {name: float64 ndarray} with the package's naming scheme;
    x: [B, S, d] embeddings. Returns [B, S, V] logits.
    """
    x = np.asarray(x, np.float64)
    b, s, d = x.shape
    heads = cfg.n_heads
    dh = d // heads
    for li in range(cfg.n_layers):
        h = rmsnorm_ref(x, weights[f"layers.{li}.norm_attn.weight"], cfg.norm_eps)
        q = h @ weights[f"layers.{li}.attn.wq"]
        k = h @ weights[f"layers.{li}.attn.wk"]
        v = h @ weights[f"layers.{li}.attn.wv"]
        q = rope_ref(q.reshape(b, s, heads, dh), positions, cfg.rope_base)
        k = rope_ref(k.reshape(b, s, heads, dh), positions, cfg.rope_base)
        v = v.reshape(b, s, heads, dh)
        attn = np.zeros((b, s, heads, dh))
        for bi in range(b):
            for hi in range(heads):
                for i in range(s):
                    scores = np.array([
                        q[bi, i, hi] @ k[bi, j, hi] / np.sqrt(dh) for j in range(i + 1)
                    ])
                    w = softmax_ref(scores)
                    attn[bi, i, hi] = sum(w[j] * v[bi, j, hi] for j in range(i + 1))
        x = x + attn.reshape(b, s, d) @ weights[f"layers.{li}.attn.wo"]
        h = rmsnorm_ref(x, weights[f"layers.{li}.norm_ffn.weight"], cfg.norm_eps)
        x = x + swiglu_ref(h, weights[f"layers.{li}.ffn.w1"],
                           weights[f"layers.{li}.ffn.w3"], weights[f"layers.{li}.ffn.w2"])
    x = rmsnorm_ref(x, weights["final_norm.weight"], cfg.norm_eps)
    return x @ weights["head.weight"]


def gradcheck(loss_fn, params_named, h=1e-5, rtol=1e-4, atol=1e-8, sample=None, rng=None):
    """Central finite differences against analytic gradients.

    loss_fn() must rebuild the forward pass and return (loss, tape). Checks
    every element unless `sample` limits the count per tensor. Returns a list
    of (name, index, analytic, numeric) failures.
    """
    from patchlm.tensor import backward

    loss, tape = loss_fn()
    backward(loss, tape)
    grads = {name: np.array(t.grad) for name, t in params_named}
    failures = []
    for name, t in params_named:
        flat = t.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        idxs = range(flat.size)
        if sample is not None and flat.size > sample:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()[0].item()
            flat[i] = orig - h
            lm = loss_fn()[0].item()
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            if abs(numeric - gflat[i]) > rtol * max(abs(numeric), abs(gflat[i])) + atol:
                failures.append((name, int(i), float(gflat[i]), float(numeric)))
        t.grad = None
    return failures
