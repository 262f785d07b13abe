"""Straight-line numpy references, written independently of the package code."""

import math

import numpy as np
from scipy.special import erf


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def mlp(x, fc1_w, fc1_b, fc2_w, fc2_b):
    return gelu(x @ fc1_w + fc1_b) @ fc2_w + fc2_b


def conv3x3_depthwise(x, k):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for ch in range(c):
        for y in range(h):
            for x_ in range(w):
                out[ch, y, x_] = np.sum(k[ch] * xp[ch, y:y + 3, x_:x_ + 3])
    return out


def avg_pool(x, oh, ow):
    c, h, w = x.shape
    fy, fx = h // oh, w // ow
    out = np.zeros((c, oh, ow))
    for y in range(oh):
        for x_ in range(ow):
            out[:, y, x_] = x[:, y * fy:(y + 1) * fy, x_ * fx:(x_ + 1) * fx].mean(axis=(1, 2))
    return out


def max_pool(x, oh, ow):
    c, h, w = x.shape
    fy, fx = h // oh, w // ow
    out = np.zeros((c, oh, ow))
    for y in range(oh):
        for x_ in range(ow):
            out[:, y, x_] = x[:, y * fy:(y + 1) * fy, x_ * fx:(x_ + 1) * fx].max(axis=(1, 2))
    return out


def upsample_bilinear(x, oh, ow):
    """Half-pixel-centre bilinear resize, evaluated pixel by pixel."""
    c, h, w = x.shape
    out = np.zeros((c, oh, ow))
    for y in range(oh):
        sy = min(max((y + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy)); y1 = min(y0 + 1, h - 1); wy = sy - y0
        for x_ in range(ow):
            sx = min(max((x_ + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx)); x1 = min(x0 + 1, w - 1); wx = sx - x0
            out[:, y, x_] = ((1 - wy) * (1 - wx) * x[:, y0, x0] + (1 - wy) * wx * x[:, y0, x1]
                             + wy * (1 - wx) * x[:, y1, x0] + wy * wx * x[:, y1, x1])
    return out


def scale_aware_fusion(high, low, dw, pw, pw_b, att_dw, att_pw, att_b, at_high_res=False):
    """Blend of a convolved high-res grid with a low-res grid through a sigmoid gate."""
    detail = np.einsum("oc,chw->ohw", pw, conv3x3_depthwise(high, dw)) + pw_b[:, None, None]
    logits = np.einsum("oc,chw->ohw", att_pw, conv3x3_depthwise(high, att_dw)) + att_b[:, None, None]
    if at_high_res:
        a = sigmoid(logits)
        return a * detail + (1 - a) * upsample_bilinear(low, *high.shape[1:]), a
    _, lh, lw = low.shape
    a = sigmoid(avg_pool(logits, lh, lw))
    return a * avg_pool(detail, lh, lw) + (1 - a) * low, a


def mask_product(q_f, pix):
    """``M[n, y, x] = sum_c Q_f[n, c] * H_pix[y, x, c]``."""
    n, d = q_f.shape
    h, w, _ = pix.shape
    out = np.zeros((n, h, w))
    for i in range(n):
        for y in range(h):
            for x in range(w):
                out[i, y, x] = sum(q_f[i, c] * pix[y, x, c] for c in range(d))
    return out


def transposed_conv(x, k, stride=2):
    c, h, w = x.shape
    _, co, kh, kw = k.shape
    out = np.zeros((co, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for y in range(h):
        for x_ in range(w):
            for i in range(kh):
                for j in range(kw):
                    out[:, y * stride + i, x_ * stride + j] += k[:, :, i, j].T @ x[:, y, x_]
    return out


def head_masks(q_f, feats, heads):
    """``M[h, n, l] = sum over the h-th channel group of q_f[n] * feats[l]``."""
    n, d = q_f.shape
    dh = d // heads
    out = np.zeros((heads, n, feats.shape[0]))
    for h in range(heads):
        for i in range(n):
            for l in range(feats.shape[0]):
                out[h, i, l] = sum(q_f[i, c] * feats[l, c] for c in range(h * dh, (h + 1) * dh))
    return out


def decoupled_masks(H, q_f, low_hw, heads, mlp_global, mlp_local):
    gh, gw, d = H.shape
    h_bar = max_pool(H.transpose(2, 0, 1), *low_hw).transpose(1, 2, 0).reshape(-1, d)
    return (head_masks(q_f, mlp(h_bar, *mlp_global), heads),
            head_masks(q_f, mlp(H.reshape(gh * gw, d), *mlp_local), heads))


def compose(C, M):
    """``S[k, y, x] = sum_n softmax(C)[n, k] * sigmoid(M)[n, y, x]``."""
    n, k = C.shape
    prob = np.exp(C - C.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    _, h, w = M.shape
    S = np.zeros((k, h, w))
    for c in range(k):
        for i in range(n):
            S[c] += prob[i, c] * sigmoid(M[i])
    return S


def block_weights(block):
    g = lambda t: np.asarray(t.data, dtype=np.float64)
    a = block.attn
    return {
        "ln1": (g(block.ln1.gamma), g(block.ln1.beta)), "ln2": (g(block.ln2.gamma), g(block.ln2.beta)),
        "q": (g(a.q.weight), g(a.q.bias)), "k": (g(a.k.weight), g(a.k.bias)),
        "v": (g(a.v.weight), g(a.v.bias)), "out": (g(a.out.weight), g(a.out.bias)),
        "mlp": (g(block.mlp.fc1.weight), g(block.mlp.fc1.bias),
                g(block.mlp.fc2.weight), g(block.mlp.fc2.bias)),
        "heads": a.heads,
    }


def masked_cross_attention(x, memory, bias, layers):
    """Proposal refinement with an explicit loop over heads, queries and keys."""
    x = np.array(x, dtype=np.float64)
    for w in layers:
        heads = w["heads"]
        xn = layer_norm(x, *w["ln1"])
        mn = layer_norm(memory, *w["ln1"])
        q = xn @ w["q"][0] + w["q"][1]
        k = mn @ w["k"][0] + w["k"][1]
        v = mn @ w["v"][0] + w["v"][1]
        n, d = q.shape
        dh = d // heads
        ctx = np.zeros((n, d))
        for h in range(heads):
            cs = slice(h * dh, (h + 1) * dh)
            for i in range(n):
                scores = np.empty(len(memory))
                for l in range(len(memory)):
                    scores[l] = q[i, cs] @ k[l, cs] / math.sqrt(dh) + bias[h, i, l]
                e = np.exp(scores - scores.max())
                p = e / e.sum()
                for l in range(len(memory)):
                    ctx[i, cs] += p[l] * v[l, cs]
        x = x + ctx @ w["out"][0] + w["out"][1]
        x = x + mlp(layer_norm(x, *w["ln2"]), *w["mlp"])
    return x
