"""A plain-numpy encoder written step by step, independent of the autodiff graph.

It reads a parameter dict and (alpha, beta) per site and mirrors the
package's op order so that, at full precision, results agree bit for bit.
Quantized products are evaluated as (code @ code) * (scale * scale).
"""
import math

import numpy as np

F = np.float32


def ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + F(eps))) * g + b


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Q:
    """Value with optional integer codes and a scalar scale."""

    def __init__(self, data, code=None, scale=None):
        self.data, self.code, self.scale = data, code, scale


def act(x, site, bits, unsigned):
    if site is None or bits == 32:
        return Q(x)
    alpha, beta = F(site[0]), F(site[1])
    if bits == 1 and not unsigned:
        code = np.where(x - beta >= 0, F(1), F(-1))
        return Q(code * alpha, code, alpha)
    n = 1 if bits == 1 else (2 ** bits - 1 if unsigned else 2 ** (bits - 1) - 1)
    u = (x - beta) / alpha
    if unsigned:
        code = np.floor(np.clip(u, 0, 1) * F(n) + F(0.5))
    else:
        v = np.clip(u, -1, 1) * F(n)
        code = np.sign(v) * np.floor(np.abs(v) + F(0.5))
    scale = F(alpha / F(n))
    return Q(code * scale, code, scale)


def wq(w, bits):
    if bits == 32:
        return Q(w)
    c = w - w.mean(dtype=F)
    code = np.where(c >= 0, F(1), F(-1))
    scale = F(np.abs(w.astype(np.float64)).mean())
    return Q(code * scale, code, scale)


def emb_q(w, bits):
    if bits == 32:
        return w
    c = w - w.mean(axis=1, keepdims=True, dtype=F)
    code = np.where(c >= 0, F(1), F(-1))
    return code * np.abs(w).mean(axis=1, keepdims=True, dtype=F)


def mm(a, b):
    if a.code is not None and b.code is not None:
        return np.matmul(a.code, b.code) * (F(a.scale) * F(b.scale))
    return np.matmul(a.data, b.data)


def encode(p, sites, ids, cfg, spec=(32, 32, 32), two_set=True):
    e, wb, ab = spec
    B, S = ids.shape
    H, d = cfg.num_heads, cfg.d_model
    dk = d // H

    def site(name):
        return None if sites is None else sites[name]

    def lin(x, name):
        bits = wb if name != "cls" else 32
        return mm(x, wq(p[name + ".w"], bits)) + p[name + ".b"]

    x = emb_q(p["emb.word"], e)[ids] + emb_q(p["emb.pos"], e)[np.arange(S)].reshape(1, S, d)
    x = ln(x, p["emb.ln.g"], p["emb.ln.b"])
    mask = np.where(ids == 0, F(-1e9), F(0))[:, None, None, :]
    blocks = []
    for i in range(cfg.num_layers):
        pre = f"L{i}."
        x2 = x.reshape(B * S, d)
        xin = act(x2, site(pre + "qkv_in"), ab, False)

        def heads(t, name):
            t = t.reshape(B, S, H, dk).transpose(0, 2, 1, 3)
            return act(t, site(pre + name), ab, False)

        q = heads(lin(xin, pre + "attn.q"), "q")
        k = heads(lin(xin, pre + "attn.k"), "k")
        v = heads(lin(xin, pre + "attn.v"), "v")
        kt = Q(k.data.transpose(0, 1, 3, 2), None if k.code is None else k.code.transpose(0, 1, 3, 2), k.scale)
        scores = mm(q, kt) * F(1.0 / math.sqrt(dk)) + mask
        probs = act(softmax(scores), site(pre + "probs"), ab, two_set)
        ctx = mm(probs, v).transpose(0, 2, 1, 3).reshape(B * S, d)
        ctx = act(ctx, site(pre + "ctx"), ab, False)
        h = ln(x2 + lin(ctx, pre + "attn.o"), p[pre + "ln1.g"], p[pre + "ln1.b"])
        fin = act(h, site(pre + "ffn_in"), ab, False)
        hid = np.maximum(lin(fin, pre + "ffn.w1"), F(0))
        hid = act(hid, site(pre + "ffn_hidden"), ab, two_set)
        out = ln(h + lin(hid, pre + "ffn.w2"), p[pre + "ln2.g"], p[pre + "ln2.b"])
        x = out.reshape(B, S, d)
        blocks.append(x)
    logits = np.matmul(x[:, 0], p["cls.w"]) + p["cls.b"]
    return logits, blocks
