"""Tree-Transformer text encoder and Group-Transformer image encoder.

Both are pre-layer-norm transformers whose post-softmax attention weights are
multiplied by a hierarchy mask built from neighbour affinities that are
re-estimated (and only ever strengthened) at every layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .masks import (
    AffinityGrid,
    affinity_1d,
    affinity_2d,
    extend_with_class_slot,
    mask_1d,
    mask_2d,
    nonsplittable_update,
)

MASK_MODES = ("hier", "ones")


@dataclass
class EncoderConfig:
    kind: str = "text"
    layers: int = 4
    width: int = 64
    heads: int = 4
    d_c: Optional[int] = None
    sigma: float = 256.0
    max_tokens: int = 16
    vocab_size: int = 64
    grid_h: int = 8
    grid_w: int = 8
    patch_dim: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_c is None:
            self.d_c = self.width
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("text", "vision"):
            raise ValueError(f"kind must be 'text' or 'vision', got {self.kind!r}")
        counts = dict(layers=self.layers, width=self.width, heads=self.heads, d_c=self.d_c,
                      embed_dim=self.embed_dim, mlp_ratio=self.mlp_ratio)
        if self.kind == "text":
            counts.update(max_tokens=self.max_tokens, vocab_size=self.vocab_size)
        else:
            counts.update(grid_h=self.grid_h, grid_w=self.grid_w, patch_dim=self.patch_dim)
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kind == "vision" and self.grid_h * self.grid_w < 2:
            raise ValueError("vision grid needs at least two patches")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def n_slots(self) -> int:
        return self.max_tokens if self.kind == "text" else self.grid_h * self.grid_w + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def init_params(cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore, prefix: str) -> ParamStore:
    """Register freshly initialised encoder weights under ``prefix``."""
    d, dc = cfg.width, cfg.d_c
    hidden = cfg.mlp_ratio * d
    if cfg.kind == "text":
        store.add(f"{prefix}.tok_emb", _normal(rng, (cfg.vocab_size, d), 0.02))
        store.add(f"{prefix}.pos_emb", _normal(rng, (cfg.max_tokens, d), 0.01))
    else:
        store.add(f"{prefix}.patch_proj", _normal(rng, (cfg.patch_dim, d), cfg.patch_dim ** -0.5))
        store.add(f"{prefix}.cls", _normal(rng, (d,), 0.02))
        store.add(f"{prefix}.pos_emb", _normal(rng, (cfg.n_slots, d), 0.01))
    for l in range(cfg.layers):
        p = f"{prefix}.layers.{l}"
        store.add(f"{p}.ln1.g", np.ones(d))
        store.add(f"{p}.ln1.b", np.zeros(d))
        store.add(f"{p}.attn.qkv.w", _normal(rng, (d, 3 * d), d ** -0.5))
        # no key bias: it shifts every score in a row equally, so its gradient is identically zero
        store.add(f"{p}.attn.qv.b", np.zeros(2 * d))
        store.add(f"{p}.attn.out.w", _normal(rng, (d, d), d ** -0.5 / math.sqrt(2 * cfg.layers)))
        store.add(f"{p}.attn.out.b", np.zeros(d))
        store.add(f"{p}.ln2.g", np.ones(d))
        store.add(f"{p}.ln2.b", np.zeros(d))
        store.add(f"{p}.mlp.fc.w", _normal(rng, (d, hidden), d ** -0.5))
        store.add(f"{p}.mlp.fc.b", np.zeros(hidden))
        store.add(f"{p}.mlp.proj.w", _normal(rng, (hidden, d), hidden ** -0.5 / math.sqrt(2 * cfg.layers)))
        store.add(f"{p}.mlp.proj.b", np.zeros(d))
        store.add(f"{p}.aff.wq", _normal(rng, (d, dc), d ** -0.5))
        store.add(f"{p}.aff.wk", _normal(rng, (d, dc), d ** -0.5))
    store.add(f"{prefix}.ln_final.g", np.ones(d))
    store.add(f"{prefix}.ln_final.b", np.zeros(d))
    store.add(f"{prefix}.proj", _normal(rng, (d, cfg.embed_dim), d ** -0.5))
    return store


# ---------------------------------------------------------------------------
# embeddings


def embed_text(cfg: EncoderConfig, params: ParamStore, ids, prefix: str = "text") -> Tensor:
    """Token plus positional embedding; ``ids`` is ``(n,)`` or ``(batch, n)``."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    n = ids.shape[-1]
    if n > cfg.max_tokens:
        raise ValueError(f"sequence of {n} tokens exceeds max_tokens={cfg.max_tokens}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = int(np.flatnonzero((ids.reshape(-1) < 0) | (ids.reshape(-1) >= cfg.vocab_size))[0])
        raise ValueError(f"token id {int(ids.reshape(-1)[bad])} out of vocabulary (size {cfg.vocab_size})")
    tok = ad.take(params[f"{prefix}.tok_emb"], ids, axis=0)
    return tok + params[f"{prefix}.pos_emb"][:n]


def embed_image(cfg: EncoderConfig, params: ParamStore, patches, prefix: str = "vision") -> Tensor:
    """Class row followed by projected patches; ``patches`` is ``(..., h, w, patch_dim)``."""
    patches = np.asarray(patches, dtype=np.float64)
    expected = (cfg.grid_h, cfg.grid_w, cfg.patch_dim)
    if patches.shape[-3:] != expected:
        raise ad.ShapeError("embed_image", expected, patches.shape[-3:])
    batch = patches.shape[:-3]
    flat = Tensor(patches.reshape(batch + (cfg.grid_h * cfg.grid_w, cfg.patch_dim)))
    tokens = flat @ params[f"{prefix}.patch_proj"]
    cls = ad.reshape(params[f"{prefix}.cls"], (1,) * len(batch) + (1, cfg.width))
    if batch:
        cls = cls + Tensor(np.zeros(batch + (1, cfg.width)))
    x = ad.concat([cls, tokens], axis=-2)
    return x + params[f"{prefix}.pos_emb"]


# ---------------------------------------------------------------------------
# blocks


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.layer_norm(x) * g + b


def _linear(x: Tensor, params: ParamStore, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def attention(x: Tensor, params: ParamStore, prefix: str, heads: int, mask: Optional[Tensor]) -> Tensor:
    """Multi-head self-attention; ``mask`` (``(..., T, T)``) scales every head's weights."""
    *batch, t, d = x.shape
    batch = tuple(batch)
    dh = d // heads
    nb = len(batch)
    qv_b = params[f"{prefix}.qv.b"]
    bias = ad.concat([qv_b[:d], Tensor(np.zeros(d)), qv_b[d:]], axis=0)
    qkv = ad.reshape(x @ params[f"{prefix}.qkv.w"] + bias, batch + (t, 3, heads, dh))
    # -> (3, *batch, heads, t, dh)
    perm = (nb + 1,) + tuple(range(nb)) + (nb + 2, nb, nb + 3)
    qkv = ad.transpose(qkv, perm)
    q, k, v = qkv[0], qkv[1], qkv[2]
    weights = ad.softmax((q @ ad.transpose(k)) * (1.0 / math.sqrt(dh)))
    if mask is not None:
        weights = weights * ad.reshape(mask, batch + (1, t, t))
    out = weights @ v
    out = ad.transpose(out, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    out = ad.reshape(out, batch + (t, d))
    return _linear(out, params, f"{prefix}.out")


def mlp(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return _linear(ad.gelu(_linear(x, params, f"{prefix}.fc")), params, f"{prefix}.proj")


def hier_attention_block(cfg: EncoderConfig, params: ParamStore, prefix: str, x: Tensor,
                         a_prev=None, mask_mode: str = "hier"):
    """One hierarchy-aware transformer layer.

    Returns the updated representation and the accumulated affinities.  With
    ``mask_mode="ones"`` the mask is skipped and the block is a plain pre-norm
    transformer layer; affinities are still tracked.
    """
    if mask_mode not in MASK_MODES:
        raise ValueError(f"mask_mode must be one of {MASK_MODES}")
    batch = x.shape[:-2]
    # affinities are read from the same normalised tokens the attention sees
    h = _affine_ln(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    if cfg.kind == "text":
        a_hat = affinity_1d(h, params[f"{prefix}.aff.wq"], params[f"{prefix}.aff.wk"], cfg.sigma)
        if a_prev is not None and tuple(a_prev.shape) != tuple(a_hat.shape):
            raise ad.ShapeError("hier_attention_block", a_hat.shape, a_prev.shape)
        a = nonsplittable_update(a_prev, a_hat)
        mask = mask_1d(a) if mask_mode == "hier" else None
    else:
        content = ad.reshape(h[..., 1:, :], batch + (cfg.grid_h, cfg.grid_w, cfg.width))
        a_hat = affinity_2d(content, params[f"{prefix}.aff.wq"], params[f"{prefix}.aff.wk"], cfg.sigma)
        if a_prev is not None and (a_prev.horiz.shape != a_hat.horiz.shape or a_prev.vert.shape != a_hat.vert.shape):
            raise ad.ShapeError("hier_attention_block", a_hat.horiz.shape, a_prev.horiz.shape)
        a = nonsplittable_update(a_prev, a_hat)
        mask = extend_with_class_slot(mask_2d(a)) if mask_mode == "hier" else None
    x = x + attention(h, params, f"{prefix}.attn", cfg.heads, mask)
    h = _affine_ln(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    x = x + mlp(h, params, f"{prefix}.mlp")
    return x, a


@dataclass
class Encoded:
    embedding: Tensor
    trace: list = field(default_factory=list)


def _pool_and_project(cfg, params, prefix, row: Tensor) -> Tensor:
    h = _affine_ln(row, params[f"{prefix}.ln_final.g"], params[f"{prefix}.ln_final.b"])
    if len(h.shape) == 1:
        z = ad.reshape(ad.reshape(h, (1, -1)) @ params[f"{prefix}.proj"], (-1,))
    else:
        z = h @ params[f"{prefix}.proj"]
    return z / ad.sqrt(ad.sum_(z * z, axis=-1, keepdims=True))


def _run_layers(cfg, params, prefix, x, mask_mode):
    trace = []
    a = None
    for l in range(cfg.layers):
        x, a = hier_attention_block(cfg, params, f"{prefix}.layers.{l}", x, a, mask_mode)
        trace.append(a)
    return x, trace


def encode_text(cfg: EncoderConfig, params: ParamStore, ids, mask_mode: str = "hier",
                prefix: str = "text") -> Encoded:
    """Encode token ids (``(n,)`` or ``(batch, n)``; end marker last) to unit vectors."""
    ids = np.asarray(ids)
    if ids.shape[-1] < 2:
        raise ValueError("text sequences need at least two tokens")
    x = embed_text(cfg, params, ids, prefix)
    x, trace = _run_layers(cfg, params, prefix, x, mask_mode)
    return Encoded(_pool_and_project(cfg, params, prefix, x[..., -1, :]), trace)


def encode_image(cfg: EncoderConfig, params: ParamStore, patches, mask_mode: str = "hier",
                 prefix: str = "vision") -> Encoded:
    """Encode ``(..., h, w, patch_dim)`` patch grids to unit vectors (class-row pooling)."""
    x = embed_image(cfg, params, patches, prefix)
    x, trace = _run_layers(cfg, params, prefix, x, mask_mode)
    return Encoded(_pool_and_project(cfg, params, prefix, x[..., 0, :]), trace)


def trace_arrays(trace: Sequence) -> list:
    """Detach an affinity trace to numpy arrays / :class:`AffinityGrid` values."""
    out = []
    for a in trace:
        out.append(a.numpy() if isinstance(a, AffinityGrid) else np.array(a.data))
    return out


def layer_masks(trace: Sequence, with_class_slot: bool = False) -> List[np.ndarray]:
    """Hierarchy mask of every layer, recomputed from a detached trace."""
    masks = []
    for a in trace_arrays(trace):
        if isinstance(a, AffinityGrid):
            c = mask_2d(a)
            if with_class_slot:
                c = extend_with_class_slot(Tensor(c)).data
        else:
            c = mask_1d(a)
        masks.append(c)
    return masks
