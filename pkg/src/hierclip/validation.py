"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .encoders import EncoderConfig


def check_images(X, cfg: EncoderConfig) -> np.ndarray:
    """Coerce ``X`` to a float64 ``(N, h, w, patch_dim)`` array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    expected = (cfg.grid_h, cfg.grid_w, cfg.patch_dim)
    if X.ndim != 4 or X.shape[1:] != expected:
        raise ValueError(f"expected images of shape (N, {', '.join(map(str, expected))}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


def check_captions(captions, cfg: EncoderConfig) -> List[List[int]]:
    """Validate token id sequences against the text encoder configuration."""
    out = []
    for k, cap in enumerate(captions):
        ids = [int(t) for t in cap]
        if len(ids) < 2:
            raise ValueError(f"caption {k} has fewer than two tokens")
        if len(ids) > cfg.max_tokens:
            raise ValueError(f"caption {k} has {len(ids)} tokens, max_tokens is {cfg.max_tokens}")
        for pos, t in enumerate(ids):
            if not 0 <= t < cfg.vocab_size:
                raise ValueError(f"caption {k}: token id {t} at position {pos} outside vocabulary")
        out.append(ids)
    return out


def check_paired(X: np.ndarray, captions: Sequence) -> None:
    if len(X) != len(captions):
        raise ValueError(f"{len(X)} images but {len(captions)} captions")


def tokenize(text: str, vocab: Dict[str, int], bos: str = "<s>", eos: str = "</s>") -> List[int]:
    """Whitespace tokenisation; adds begin/end markers when the text lacks them."""
    words = text.split()
    if not words or words[0] != bos:
        words = [bos] + words
    if words[-1] != eos:
        words = words + [eos]
    ids = []
    for pos, w in enumerate(words):
        if w not in vocab:
            raise KeyError(f"unknown token {w!r} at position {pos}")
        ids.append(vocab[w])
    return ids
