"""Symmetric contrastive objective, AdamW training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoders import EncoderConfig, encode_image, encode_text, init_params

logger = logging.getLogger(__name__)

TAU_FLOOR = 0.01
LOG_TAU = "log_tau"


# ---------------------------------------------------------------------------
# loss


def contrastive_loss(v, u, tau) -> Tensor:
    """Image-to-text plus text-to-image cross entropy over an ``N x N`` similarity matrix.

    ``v`` and ``u`` are unit-norm ``(N, e)`` rows (arrays or tensors); ``tau``
    is a positive float or a scalar tensor holding the temperature itself.
    """
    v, u = ad.as_tensor(v), ad.as_tensor(u)
    if v.ndim != 2 or v.shape != u.shape:
        raise ad.ShapeError("contrastive_loss", "two (N, e) matrices", (v.shape, u.shape))
    for name, rows in (("v", v), ("u", u)):
        norms = np.linalg.norm(rows.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"rows of {name} must have unit norm")
    tau = ad.as_tensor(tau)
    if np.any(tau.data <= 0):
        raise ValueError("temperature must be positive")
    n = v.shape[0]
    logits = (v @ ad.transpose(u)) / tau
    eye = Tensor(np.eye(n) / n)
    image_to_text = ad.sum_(ad.log_softmax(logits) * eye)
    text_to_image = ad.sum_(ad.log_softmax(ad.transpose(logits)) * eye)
    return -(image_to_text + text_to_image)


# ---------------------------------------------------------------------------
# configuration and model


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 3000
    lr: float = 1e-3
    warmup_steps: int = 250
    weight_decay: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    tau_init: float = 0.07
    seed: int = 0
    mask_mode: str = "hier"
    text: EncoderConfig = field(default_factory=lambda: EncoderConfig(kind="text"))
    vision: EncoderConfig = field(default_factory=lambda: EncoderConfig(kind="vision"))

    def __post_init__(self):
        if isinstance(self.text, dict):
            self.text = EncoderConfig(**{"kind": "text", **self.text})
        if isinstance(self.vision, dict):
            self.vision = EncoderConfig(**{"kind": "vision", **self.vision})
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("steps and warmup_steps must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.text.embed_dim != self.vision.embed_dim:
            raise ValueError("text and vision encoders must share embed_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def init_model(cfg: TrainConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    init_params(cfg.text, rng, store, "text")
    init_params(cfg.vision, rng, store, "vision")
    store.add(LOG_TAU, np.array(math.log(cfg.tau_init)))
    return store


def encode_texts(cfg: TrainConfig, params: ParamStore, captions: Sequence[Sequence[int]],
                 mask_mode: Optional[str] = None):
    """Encode variable-length captions by running one batch per distinct length.

    Returns the ``(N, e)`` embedding tensor in input order and the affinity
    traces per length bucket as ``{length: (indices, trace)}``.
    """
    mask_mode = mask_mode or cfg.mask_mode
    buckets: Dict[int, List[int]] = {}
    for i, cap in enumerate(captions):
        buckets.setdefault(len(cap), []).append(i)
    parts, order, traces = [], [], {}
    for length in sorted(buckets):
        idx = buckets[length]
        ids = np.array([captions[i] for i in idx], dtype=np.int64)
        enc = encode_text(cfg.text, params, ids, mask_mode)
        parts.append(enc.embedding)
        order.extend(idx)
        traces[length] = (idx, enc.trace)
    emb = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inverse = np.argsort(np.array(order))
    if not np.array_equal(inverse, np.arange(len(order))):
        emb = ad.take(emb, inverse, axis=0)
    return emb, traces


def batch_loss(cfg: TrainConfig, params: ParamStore, images: np.ndarray,
               captions: Sequence[Sequence[int]], mask_mode: Optional[str] = None) -> Tensor:
    mask_mode = mask_mode or cfg.mask_mode
    v = encode_image(cfg.vision, params, images, mask_mode).embedding
    u, _ = encode_texts(cfg, params, captions, mask_mode)
    return contrastive_loss(v, u, ad.exp(params[LOG_TAU]))


# ---------------------------------------------------------------------------
# optimisation


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero at ``cfg.steps``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, value: np.ndarray) -> bool:
    # no decay on the temperature, gains, biases or the class/positional rows
    return name != LOG_TAU and value.ndim >= 2 and not name.endswith("pos_emb")


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamWState":
        return cls(0, {k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def adamw_update(cfg: TrainConfig, params: ParamStore, grads: Dict[str, np.ndarray],
                 state: AdamWState, lr: float) -> Tuple[ParamStore, AdamWState]:
    """Decoupled-weight-decay Adam step; returns new params and state (inputs untouched)."""
    b1, b2 = cfg.betas
    t = state.step + 1
    new_params = ParamStore()
    new_state = AdamWState(t)
    for name, tensor in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        new_state.m[name], new_state.v[name] = m, v
        if lr == 0.0:
            new_params.add(name, tensor.data.copy())
            continue
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        value = tensor.data
        if cfg.weight_decay and decays(name, value):
            value = value * (1 - lr * cfg.weight_decay)
        value = value - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if name == LOG_TAU:
            value = np.maximum(value, math.log(TAU_FLOOR))
        new_params.add(name, value)
    return new_params, new_state


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


def train_step(cfg: TrainConfig, params: ParamStore, opt_state: AdamWState,
               images: np.ndarray, captions: Sequence[Sequence[int]]):
    """Forward both encoders, backpropagate, apply one AdamW update.

    Returns ``(params', opt_state', loss)``.
    """
    step = opt_state.step
    try:
        loss = batch_loss(cfg, params, images, captions)
    except ad.NonFiniteError as err:
        biggest = max(float(np.max(np.abs(t.data))) for _, t in params.items())
        raise TrainingDiverged(step, f"{err}; max |param| {biggest:.3e}") from err
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(step, "loss is not finite")
    grads = ad.backward(loss, params)
    new_params, new_state = adamw_update(cfg, params, grads, opt_state, lr_at(cfg, step))
    return new_params, new_state, value


# ---------------------------------------------------------------------------
# retrieval metrics


def embed_corpus(cfg: TrainConfig, params: ParamStore, images: np.ndarray,
                 captions: Sequence[Sequence[int]], mask_mode: Optional[str] = None,
                 chunk: int = 128):
    vs, us = [], []
    for start in range(0, len(captions), chunk):
        stop = start + chunk
        vs.append(encode_image(cfg.vision, params, images[start:stop], mask_mode or cfg.mask_mode).embedding.data)
        us.append(encode_texts(cfg, params, captions[start:stop], mask_mode)[0].data)
    return np.concatenate(vs), np.concatenate(us)


def recall_at_k(sim: np.ndarray, k: int) -> float:
    """Fraction of rows whose diagonal entry ranks within the top ``k`` (ties count against)."""
    diag = np.diag(sim)[:, None]
    rank = (sim > diag).sum(axis=1) + ((sim == diag).sum(axis=1) - 1)
    return float(np.mean(rank < k))


def retrieval_metrics(v: np.ndarray, u: np.ndarray) -> Dict[str, float]:
    sim_t2i = u @ v.T
    sim_i2t = sim_t2i.T
    out = {}
    for k in (1, 5, 10):
        out[f"t2i_r{k}"] = recall_at_k(sim_t2i, k)
        out[f"i2t_r{k}"] = recall_at_k(sim_i2t, k)
    out["rsum"] = 100.0 * sum(out[f"{d}_r{k}"] for d in ("t2i", "i2t") for k in (1, 5, 10))
    return out


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"HICLIPCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    step: int = 0
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def log_tau(self) -> float:
        return float(self.params[LOG_TAU].data)


# reserved record names carrying metadata rather than weights
_STEP = "__step__"
_CONFIG = "__config__"


def _pack_record(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    array = np.asarray(array, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.tobytes()


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    for name, tensor in ckpt.params.items():
        parts.append(_pack_record(name, tensor.data))
    parts.append(_pack_record(_STEP, np.array([float(ckpt.step)])))
    config = np.frombuffer(json.dumps(ckpt.config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    parts.append(_pack_record(_CONFIG, config.astype(np.float64)))
    return b"".join(parts)


def loads_checkpoint(blob: bytes, required: Optional[Sequence[str]] = None) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if len(blob) < 12:
        raise CheckpointError("corrupt length: truncated header")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {FORMAT_VERSION}")
    pos = 12
    params = ParamStore()
    step, config = 0, {}

    def need(count: int) -> None:
        if pos + count > len(blob):
            raise CheckpointError(f"corrupt length: record needs {count} bytes at offset {pos}")

    while pos < len(blob):
        need(2)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len + 1)
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) * 8
        need(count)
        array = np.frombuffer(blob, dtype="<f8", count=count // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += count
        if name == _STEP:
            step = int(array[0])
        elif name == _CONFIG:
            config = json.loads(array.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            params.add(name, array)
    missing = [n for n in (required or ()) if n not in params]
    if LOG_TAU not in params:
        missing.append(LOG_TAU)
    if missing:
        raise CheckpointError(f"missing tensor(s): {', '.join(missing)}")
    return Checkpoint(params, step, config, version)


def atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    atomic_write(path, dumps_checkpoint(ckpt))


def load_checkpoint(path: str, required: Optional[Sequence[str]] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read(), required)


def expected_param_names(cfg: TrainConfig) -> List[str]:
    return init_model(cfg).names()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParamStore
    opt_state: AdamWState
    history: List[dict] = field(default_factory=list)


def iterate_batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches; reshuffled every epoch, short tails dropped."""
    rng = np.random.default_rng([seed, 1])
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield order


def fit(cfg: TrainConfig, images: np.ndarray, captions: Sequence[Sequence[int]],
        probe: Optional[Tuple[np.ndarray, Sequence[Sequence[int]]]] = None,
        eval_every: int = 250, params: Optional[ParamStore] = None,
        callback=None, on_step=None) -> TrainResult:
    """Run ``cfg.steps`` AdamW steps over the paired corpus.

    Every ``eval_every`` steps (and after the last) a history record with the
    loss, temperature and, given a ``probe`` set, held-out retrieval metrics is
    appended and passed to ``callback(step, params, record)``.  ``on_step(step,
    params)`` runs after every update.
    """
    if len(images) != len(captions):
        raise ValueError("images and captions must be index-aligned")
    if len(captions) < 2:
        raise ValueError("need at least two pairs")
    params = params if params is not None else init_model(cfg)
    state = AdamWState.zeros_like(params)
    batches = iterate_batches(len(captions), min(cfg.batch_size, len(captions)), cfg.seed)
    history = []
    for step in range(cfg.steps):
        idx = next(batches)
        params, state, loss = train_step(cfg, params, state, images[idx], [captions[i] for i in idx])
        if on_step is not None:
            on_step(step + 1, params)
        if (step + 1) % eval_every == 0 or step + 1 == cfg.steps:
            record = {"step": step + 1, "loss": loss, "tau": float(np.exp(params[LOG_TAU].data))}
            if probe is not None:
                v, u = embed_corpus(cfg, params, probe[0], probe[1])
                record.update(retrieval_metrics(v, u))
            history.append(record)
            logger.info("step %d loss %.4f", step + 1, loss)
            if callback is not None:
                callback(step + 1, params, record)
    return TrainResult(params, state, history)
