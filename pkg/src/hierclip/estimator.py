"""scikit-learn style front end for the hierarchy-aware dual encoder."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import pretrain
from .encoders import EncoderConfig, encode_image, encode_text, trace_arrays
from .induction import (
    GroupSegmentation,
    ParseTree,
    ThresholdSchedule,
    content_trace,
    parse_text_tree,
    segment_image_groups,
)
from .masks import AffinityGrid
from .validation import check_captions, check_images, check_paired


class HierCLIP(BaseEstimator):
    """Dual encoder trained with the symmetric contrastive objective.

    ``fit(X, y)`` takes images ``X`` of shape ``(N, grid_h, grid_w, patch_dim)``
    and index-aligned token-id captions ``y``.  ``hierarchy=False`` trains the
    same architecture with the mask fixed to ones (a plain CLIP baseline).
    """

    def __init__(self, layers=4, width=64, heads=4, embed_dim=64, d_c=None,
                 sigma_t=256.0, sigma_v=256.0, grid_h=8, grid_w=8, patch_dim=4,
                 vocab_size=64, max_tokens=16, batch_size=64, steps=3000, lr=1e-3,
                 warmup_steps=250, weight_decay=0.1, tau_init=0.07, hierarchy=True,
                 eval_every=250, seed=0):
        self.layers = layers
        self.width = width
        self.heads = heads
        self.embed_dim = embed_dim
        self.d_c = d_c
        self.sigma_t = sigma_t
        self.sigma_v = sigma_v
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.patch_dim = patch_dim
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.tau_init = tau_init
        self.hierarchy = hierarchy
        self.eval_every = eval_every
        self.seed = seed

    def make_config(self) -> pretrain.TrainConfig:
        shared = dict(layers=self.layers, width=self.width, heads=self.heads,
                      embed_dim=self.embed_dim, d_c=self.d_c)
        text = EncoderConfig(kind="text", sigma=self.sigma_t, vocab_size=self.vocab_size,
                             max_tokens=self.max_tokens, **shared)
        vision = EncoderConfig(kind="vision", sigma=self.sigma_v, grid_h=self.grid_h,
                               grid_w=self.grid_w, patch_dim=self.patch_dim, **shared)
        return pretrain.TrainConfig(
            batch_size=self.batch_size, steps=self.steps, lr=self.lr,
            warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
            tau_init=self.tau_init, seed=self.seed,
            mask_mode="hier" if self.hierarchy else "ones", text=text, vision=vision)

    def fit(self, X, y, probe=None, callback=None):
        """Train on paired images/captions; ``probe=(X_held, y_held)`` adds retrieval metrics to ``history_``."""
        cfg = self.make_config()
        X = check_images(X, cfg.vision)
        y = check_captions(y, cfg.text)
        check_paired(X, y)
        if probe is not None:
            probe = (check_images(probe[0], cfg.vision), check_captions(probe[1], cfg.text))
        result = pretrain.fit(cfg, X, y, probe=probe, eval_every=self.eval_every, callback=callback)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = result.history
        self.n_steps_ = cfg.steps
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: pretrain.Checkpoint) -> "HierCLIP":
        # run-level keys such as the dataset description ride along in CLI checkpoints
        cfg = pretrain.TrainConfig.from_dict({k: v for k, v in ckpt.config.items() if k != "data"})
        est = cls(layers=cfg.text.layers, width=cfg.text.width, heads=cfg.text.heads,
                  embed_dim=cfg.text.embed_dim, d_c=cfg.text.d_c, sigma_t=cfg.text.sigma,
                  sigma_v=cfg.vision.sigma, grid_h=cfg.vision.grid_h, grid_w=cfg.vision.grid_w,
                  patch_dim=cfg.vision.patch_dim, vocab_size=cfg.text.vocab_size,
                  max_tokens=cfg.text.max_tokens, batch_size=cfg.batch_size, steps=cfg.steps,
                  lr=cfg.lr, warmup_steps=cfg.warmup_steps, weight_decay=cfg.weight_decay,
                  tau_init=cfg.tau_init, hierarchy=cfg.mask_mode == "hier", seed=cfg.seed)
        est.config_ = cfg
        est.params_ = ckpt.params
        est.history_ = []
        est.n_steps_ = ckpt.step
        return est

    def to_checkpoint(self) -> pretrain.Checkpoint:
        check_is_fitted(self, "params_")
        return pretrain.Checkpoint(self.params_, self.n_steps_, self.config_.to_dict())

    # -- embeddings -----------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Unit-norm image embeddings."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.config_.vision)
        out = [encode_image(self.config_.vision, self.params_, X[start:start + 128],
                            self.config_.mask_mode).embedding.data
               for start in range(0, len(X), 128)]
        return np.concatenate(out) if out else np.zeros((0, self.embed_dim))

    def encode_text(self, y) -> np.ndarray:
        """Unit-norm caption embeddings."""
        check_is_fitted(self, "params_")
        y = check_captions(y, self.config_.text)
        out = []
        for start in range(0, len(y), 128):
            out.append(pretrain.encode_texts(self.config_, self.params_, y[start:start + 128])[0].data)
        return np.concatenate(out) if out else np.zeros((0, self.embed_dim))

    def predict(self, y, X) -> np.ndarray:
        """Index of the best-matching image in ``X`` for each caption in ``y``."""
        return np.argmax(self.encode_text(y) @ self.transform(X).T, axis=1)

    def retrieval_metrics(self, X, y) -> dict:
        return pretrain.retrieval_metrics(self.transform(X), self.encode_text(y))

    def score(self, X, y) -> float:
        """Text-to-image recall@1 over index-aligned pairs."""
        return self.retrieval_metrics(X, y)["t2i_r1"]

    # -- hierarchy induction --------------------------------------------

    def text_traces(self, caption: Sequence[int]) -> List[np.ndarray]:
        check_is_fitted(self, "params_")
        ids = np.asarray(check_captions([caption], self.config_.text)[0])
        enc = encode_text(self.config_.text, self.params_, ids, self.config_.mask_mode)
        return trace_arrays(enc.trace)

    def image_traces(self, image) -> List[AffinityGrid]:
        check_is_fitted(self, "params_")
        x = check_images(image, self.config_.vision)[0]
        enc = encode_image(self.config_.vision, self.params_, x, self.config_.mask_mode)
        return trace_arrays(enc.trace)

    def parse_captions(self, captions, strip_markers: bool = True) -> List[ParseTree]:
        """Induced binary trees; by default over the caption words without begin/end markers."""
        trees = []
        for cap in captions:
            trace = self.text_traces(cap)
            if strip_markers:
                trace = content_trace(trace)
                n = len(cap) - 2
            else:
                n = len(cap)
            trees.append(parse_text_tree(trace, n))
        return trees

    def segment_images(self, X, schedule: Optional[ThresholdSchedule] = None) -> List[GroupSegmentation]:
        schedule = schedule or ThresholdSchedule.for_layers(self.layers)
        X = check_images(X, self.make_config().vision)
        return [segment_image_groups(self.image_traces(x), schedule) for x in X]


class CaptionParser(BaseEstimator, TransformerMixin):
    """Transformer wrapper: captions in, induced parse trees out."""

    def __init__(self, model: Optional[HierCLIP] = None, strip_markers: bool = True):
        self.model = model
        self.strip_markers = strip_markers

    def fit(self, X=None, y=None):
        check_is_fitted(self.model, "params_")
        return self

    def transform(self, X) -> List[ParseTree]:
        return self.model.parse_captions(X, self.strip_markers)


class ImageGrouper(BaseEstimator, TransformerMixin):
    """Transformer wrapper: patch grids in, nested group segmentations out."""

    def __init__(self, model: Optional[HierCLIP] = None, thresholds: Optional[Sequence[float]] = None):
        self.model = model
        self.thresholds = thresholds

    def fit(self, X=None, y=None):
        check_is_fitted(self.model, "params_")
        return self

    def transform(self, X) -> List[GroupSegmentation]:
        schedule = ThresholdSchedule(tuple(self.thresholds)) if self.thresholds is not None else None
        return self.model.segment_images(X, schedule)
