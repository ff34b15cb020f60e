"""Slow, loop-based reference computations used to cross-check the fast paths.

Nothing here imports the autodiff tape or the vectorised mask code; each
function recomputes its quantity directly from the definition.
"""

from __future__ import annotations

import math

import numpy as np


def chain_mask(a) -> np.ndarray:
    """Nested-product mask for a chain with edge affinities ``a``."""
    a = [float(x) for x in a]
    n = len(a) + 1
    c = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            prod = 1.0
            for k in range(i, j):
                prod *= a[k]
            c[i, j] = c[j, i] = prod
    return c


def _walk(horiz, vert, start, stop, first: str) -> float:
    """Product of edge affinities along a single-turn path from ``start`` to ``stop``."""
    (r, c), (r2, c2) = start, stop
    prod = 1.0
    legs = ("v", "h") if first == "v" else ("h", "v")
    for leg in legs:
        if leg == "v":
            step = 1 if r2 > r else -1
            while r != r2:
                prod *= vert[min(r, r + step), c]
                r += step
        else:
            step = 1 if c2 > c else -1
            while c != c2:
                prod *= horiz[r, min(c, c + step)]
                c += step
    return prod


def single_turn_paths(horiz, vert, p, q):
    """(vertical-first, horizontal-first) path products between grid nodes ``p`` and ``q``."""
    return _walk(horiz, vert, p, q, "v"), _walk(horiz, vert, p, q, "h")


def grid_mask(horiz, vert) -> np.ndarray:
    """Max over the two single-turn paths, by explicit path enumeration."""
    horiz, vert = np.asarray(horiz), np.asarray(vert)
    h, w = horiz.shape[0], vert.shape[1]
    n = h * w
    c = np.ones((n, n))
    for u in range(n):
        for v in range(n):
            if u != v:
                p, q = divmod(u, w), divmod(v, w)
                c[u, v] = max(single_turn_paths(horiz, vert, p, q))
    return c


def chain_affinity(tokens, wq, wk, sigma) -> np.ndarray:
    """Scalar recomputation of the chain affinity estimate."""
    tokens = np.asarray(tokens)
    n = len(tokens)
    q = [tokens[i] @ wq for i in range(n)]
    k = [tokens[i] @ wk for i in range(n)]

    def probs(i):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < n]
        s = {j: float(np.dot(q[i], k[j])) / sigma for j in nbrs}
        m = max(s.values())
        z = sum(math.exp(v - m) for v in s.values())
        return {j: math.exp(v - m) / z for j, v in s.items()}

    p = [probs(i) for i in range(n)]
    return np.array([math.sqrt(p[i][i + 1] * p[i + 1][i]) for i in range(n - 1)])


def grid_affinity(patches, wq, wk, sigma):
    """Scalar recomputation of the grid affinity estimate; returns (horiz, vert)."""
    patches = np.asarray(patches)
    h, w = patches.shape[:2]

    def nbrs(r, c):
        return [(rr, cc) for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                if 0 <= rr < h and 0 <= cc < w]

    p = {}
    for r in range(h):
        for c in range(w):
            q = patches[r, c] @ wq
            s = {nb: float(np.dot(q, patches[nb] @ wk)) / sigma for nb in nbrs(r, c)}
            m = max(s.values())
            z = sum(math.exp(v - m) for v in s.values())
            for nb, v in s.items():
                p[(r, c), nb] = math.exp(v - m) / z
    horiz = np.array([[math.sqrt(p[(r, c), (r, c + 1)] * p[(r, c + 1), (r, c)]) for c in range(w - 1)]
                      for r in range(h)]).reshape(h, w - 1)
    vert = np.array([[math.sqrt(p[(r, c), (r + 1, c)] * p[(r + 1, c), (r, c)]) for c in range(w)]
                     for r in range(h - 1)]).reshape(h - 1, w)
    return horiz, vert


# ---------------------------------------------------------------------------
# plain transformer forward (no hierarchy mask), numpy only

_GELU_C = math.sqrt(2.0 / math.pi)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def vanilla_block(x, params: dict, prefix: str, heads: int, mask=None) -> np.ndarray:
    """Pre-norm transformer layer on one ``(T, d)`` sequence; ``mask`` scales attention weights."""
    t, d = x.shape
    dh = d // heads
    h = _ln(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    qv_b = params[f"{prefix}.attn.qv.b"]
    qkv = h @ params[f"{prefix}.attn.qkv.w"] + np.concatenate([qv_b[:d], np.zeros(d), qv_b[d:]])
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    heads_out = []
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        w = _softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dh))
        if mask is not None:
            w = w * mask
        heads_out.append(w @ v[:, sl])
    att = np.concatenate(heads_out, axis=1) @ params[f"{prefix}.attn.out.w"] + params[f"{prefix}.attn.out.b"]
    x = x + att
    h = _ln(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return x + _gelu(h @ params[f"{prefix}.mlp.fc.w"] + params[f"{prefix}.mlp.fc.b"]) @ params[f"{prefix}.mlp.proj.w"] \
        + params[f"{prefix}.mlp.proj.b"]


def _head(x_row, params, prefix):
    z = _ln(x_row, params[f"{prefix}.ln_final.g"], params[f"{prefix}.ln_final.b"]) @ params[f"{prefix}.proj"]
    return z / np.linalg.norm(z)


def vanilla_text(params: dict, ids, layers: int, heads: int, prefix: str = "text") -> np.ndarray:
    ids = list(ids)
    x = np.stack([params[f"{prefix}.tok_emb"][t] for t in ids]) + params[f"{prefix}.pos_emb"][: len(ids)]
    for l in range(layers):
        x = vanilla_block(x, params, f"{prefix}.layers.{l}", heads)
    return _head(x[-1], params, prefix)


def vanilla_image(params: dict, patches, layers: int, heads: int, prefix: str = "vision") -> np.ndarray:
    patches = np.asarray(patches)
    flat = patches.reshape(-1, patches.shape[-1])
    x = np.concatenate([params[f"{prefix}.cls"][None], flat @ params[f"{prefix}.patch_proj"]])
    x = x + params[f"{prefix}.pos_emb"]
    for l in range(layers):
        x = vanilla_block(x, params, f"{prefix}.layers.{l}", heads)
    return _head(x[0], params, prefix)


def contrastive_loss(v, u, tau) -> float:
    """Symmetric cross-entropy written out with scalar loops."""
    n = len(v)
    sims = [[float(np.dot(v[i], u[j])) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = sims[i]
        col = [sims[j][i] for j in range(n)]
        total -= row[i] - math.log(sum(math.exp(s) for s in row))
        total -= col[i] - math.log(sum(math.exp(s) for s in col))
    return total / n
