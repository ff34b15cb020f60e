"""Neighbour affinities and the hierarchy mask they induce.

Chains (text) and 4-adjacency grids (image patches) share one recipe: score
each node against its neighbours, softmax per node, take the geometric mean of
the two directed probabilities of an edge, accumulate across layers so edges
only ever strengthen, then propagate edge affinities to every node pair by
multiplying along paths.

All functions accept either numpy arrays or :class:`~hierclip.autodiff.Tensor`
values.  Array inputs give array outputs; tensor inputs stay on the tape so the
same code path is used for training and for inspection.  Leading batch axes
are allowed everywhere.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from . import _mutants
from . import autodiff as ad
from .autodiff import Tensor

ArrayLike = Union[np.ndarray, Tensor]

LOG_FLOOR = 1e-12
# added to the scores of absent neighbours so their softmax weight is exactly 0
_ABSENT = -1e30


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_unit_interval(name: str, values, low_open: bool = True) -> None:
    v = _data(values)
    bad = (v <= 0.0) if low_open else (v < 0.0)
    if v.size and (np.any(bad) or np.any(v > 1.0) or not np.all(np.isfinite(v))):
        interval = "(0, 1]" if low_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}")


@dataclass
class AffinityGrid:
    """Edge affinities of an ``h x w`` 4-adjacency grid.

    ``horiz[..., i, j]`` joins (i, j)-(i, j+1); ``vert[..., i, j]`` joins
    (i, j)-(i+1, j).
    """

    horiz: ArrayLike
    vert: ArrayLike

    def __post_init__(self):
        hs, vs = self.horiz.shape, self.vert.shape
        if hs[:-2] != vs[:-2] or hs[-2] != vs[-2] + 1 or vs[-1] != hs[-1] + 1:
            raise ValueError(f"horizontal {hs} and vertical {vs} edge arrays do not form a grid")

    @property
    def h(self) -> int:
        return self.horiz.shape[-2]

    @property
    def w(self) -> int:
        return self.vert.shape[-1]

    @property
    def is_tensor(self) -> bool:
        return isinstance(self.horiz, Tensor)

    def numpy(self) -> "AffinityGrid":
        return AffinityGrid(_data(self.horiz), _data(self.vert))

    def validate(self) -> None:
        _check_unit_interval("grid affinities", self.horiz)
        _check_unit_interval("grid affinities", self.vert)

    def edges(self):
        """Yield ``((r0, c0), (r1, c1), value)`` for every edge; unbatched grids only."""
        horiz, vert = _data(self.horiz), _data(self.vert)
        for i in range(self.h):
            for j in range(self.w - 1):
                yield (i, j), (i, j + 1), float(horiz[i, j])
        for i in range(self.h - 1):
            for j in range(self.w):
                yield (i, j), (i + 1, j), float(vert[i, j])


# ---------------------------------------------------------------------------
# affinity estimation


def _neighbour_softmax(scores: Tensor, present: np.ndarray) -> Tensor:
    return ad.softmax(scores + Tensor(np.where(present, 0.0, _ABSENT)))


def _stop_grad_if_mutated(x: Tensor) -> Tensor:
    if "drop-affinity-grad" in _mutants.ACTIVE:
        return Tensor(x.data)
    return x


def affinity_1d(tokens: ArrayLike, wq: ArrayLike, wk: ArrayLike, sigma_t: float = 256.0) -> ArrayLike:
    """Per-edge affinity estimate for a chain of ``n`` token vectors.

    ``tokens`` is ``(..., n, d)``; returns ``(..., n - 1)`` values in (0, 1].
    """
    raw = not isinstance(tokens, Tensor)
    x, wq, wk = ad.as_tensor(tokens), ad.as_tensor(wq), ad.as_tensor(wk)
    n = x.shape[-2]
    if n < 2:
        raise ValueError("affinity_1d needs at least two tokens")
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    q = x @ wq
    k = x @ wk
    # right[i] = q_i . k_{i+1}, left[i] = q_{i+1} . k_i
    right = ad.sum_(q[..., :-1, :] * k[..., 1:, :], axis=-1) * (1.0 / sigma_t)
    left = ad.sum_(q[..., 1:, :] * k[..., :-1, :], axis=-1) * (1.0 / sigma_t)
    batch = x.shape[:-2]
    pad = Tensor(np.zeros(batch + (1,)))
    # slot 0: score toward the left neighbour, slot 1: toward the right
    to_left = ad.concat([pad, left], axis=-1)
    to_right = ad.concat([right, pad], axis=-1)
    scores = ad.concat([ad.reshape(to_left, batch + (n, 1)), ad.reshape(to_right, batch + (n, 1))], axis=-1)
    present = np.ones((n, 2), dtype=bool)
    present[0, 0] = False
    present[-1, 1] = False
    p = _neighbour_softmax(scores, present)
    p_fwd = p[..., :-1, 1]
    p_back = p[..., 1:, 0]
    a_hat = _stop_grad_if_mutated(ad.sqrt(p_fwd * p_back))
    return a_hat.data if raw else a_hat


@lru_cache(maxsize=None)
def _grid_neighbour_index(h: int, w: int):
    """Neighbour node index and presence flag per (node, direction).

    Directions are up, down, left, right.  Absent neighbours point at the node
    itself and are masked out.
    """
    n = h * w
    idx = np.zeros((n, 4), dtype=np.intp)
    present = np.zeros((n, 4), dtype=bool)
    for r in range(h):
        for c in range(w):
            u = r * w + c
            for d, (dr, dc) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    idx[u, d] = rr * w + cc
                    present[u, d] = True
                else:
                    idx[u, d] = u
    return idx, present


def affinity_2d(patches: ArrayLike, wq: ArrayLike, wk: ArrayLike, sigma_v: float = 256.0) -> AffinityGrid:
    """Per-edge affinity estimate on an ``h x w`` grid of patch vectors.

    ``patches`` is ``(..., h, w, d)``.
    """
    raw = not isinstance(patches, Tensor)
    x, wq, wk = ad.as_tensor(patches), ad.as_tensor(wq), ad.as_tensor(wk)
    h, w, d = x.shape[-3:]
    if h * w < 2:
        raise ValueError("affinity_2d needs a grid with at least two patches")
    if sigma_v <= 0:
        raise ValueError("sigma_v must be positive")
    batch = x.shape[:-3]
    flat = ad.reshape(x, batch + (h * w, d))
    q = flat @ wq
    k = flat @ wk
    idx, present = _grid_neighbour_index(h, w)
    k_nb = ad.take(k, idx, axis=-2)  # (..., n, 4, dc)
    scores = ad.sum_(ad.reshape(q, batch + (h * w, 1, q.shape[-1])) * k_nb, axis=-1) * (1.0 / sigma_v)
    p = ad.reshape(_neighbour_softmax(scores, present), batch + (h, w, 4))
    up, down, left, right = 0, 1, 2, 3
    horiz = ad.sqrt(p[..., :, :-1, right] * p[..., :, 1:, left])
    vert = ad.sqrt(p[..., :-1, :, down] * p[..., 1:, :, up])
    horiz, vert = _stop_grad_if_mutated(horiz), _stop_grad_if_mutated(vert)
    grid = AffinityGrid(horiz, vert)
    return grid.numpy() if raw else grid


# ---------------------------------------------------------------------------
# layer accumulation


def nonsplittable_update(a_prev, a_hat):
    """``a_prev + (1 - a_prev) * a_hat`` elementwise.

    Works on arrays, tensors, or :class:`AffinityGrid` pairs.  ``a_prev=None``
    is the first-layer base case (previous affinity zero).
    """
    if isinstance(a_hat, AffinityGrid):
        if a_prev is None:
            return a_hat
        return AffinityGrid(
            nonsplittable_update(a_prev.horiz, a_hat.horiz),
            nonsplittable_update(a_prev.vert, a_hat.vert),
        )
    if a_prev is None:
        return a_hat
    if isinstance(a_prev, Tensor) or isinstance(a_hat, Tensor):
        a_prev, a_hat = ad.as_tensor(a_prev), ad.as_tensor(a_hat)
        if a_prev.shape != a_hat.shape:
            raise ad.ShapeError("nonsplittable_update", a_prev.shape, a_hat.shape)
        return a_prev + (1.0 - a_prev) * a_hat
    a_prev = np.asarray(a_prev, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if a_prev.shape != a_hat.shape:
        raise ValueError(f"shape mismatch {a_prev.shape} vs {a_hat.shape}")
    _check_unit_interval("previous affinity", a_prev, low_open=False)
    _check_unit_interval("affinity estimate", a_hat)
    return a_prev + (1.0 - a_prev) * a_hat


# ---------------------------------------------------------------------------
# mask propagation


def _log_affinity(a: Tensor) -> Tensor:
    return ad.log(ad.maximum(a, Tensor(LOG_FLOOR)))


@lru_cache(maxsize=None)
def _chain_pair_index(n: int):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.minimum(i, j), np.maximum(i, j)


def mask_1d(a: ArrayLike) -> ArrayLike:
    """Chain mask: ``c[i, j]`` is the product of edge affinities between i and j.

    ``a`` is ``(..., n - 1)``; returns ``(..., n, n)``.  Computed from prefix
    sums of log-affinities so long products do not underflow.
    """
    raw = not isinstance(a, Tensor)
    if raw:
        _check_unit_interval("chain affinities", a)
    a = ad.as_tensor(a)
    batch = a.shape[:-1]
    n = a.shape[-1] + 1
    prefix = ad.concat([Tensor(np.zeros(batch + (1,))), ad.cumsum(_log_affinity(a), axis=-1)], axis=-1)
    lo, hi = _chain_pair_index(n)
    log_c = ad.take(prefix, hi, axis=-1) - ad.take(prefix, lo, axis=-1)
    c = ad.exp(log_c)
    return c.data if raw else c


@lru_cache(maxsize=None)
def _grid_pair_index(h: int, w: int):
    """Flat prefix-table indices for both single-turn paths between all node pairs."""
    rows, cols = np.divmod(np.arange(h * w), w)
    i1, i2 = np.meshgrid(rows, rows, indexing="ij")
    j1, j2 = np.meshgrid(cols, cols, indexing="ij")
    ilo, ihi = np.minimum(i1, i2), np.maximum(i1, i2)
    jlo, jhi = np.minimum(j1, j2), np.maximum(j1, j2)
    # path 1: down column j1, then along row i2.  path 2: along row i1, then down column j2.
    return {
        "v1": (ihi * w + j1, ilo * w + j1),
        "h1": (i2 * w + jhi, i2 * w + jlo),
        "h2": (i1 * w + jhi, i1 * w + jlo),
        "v2": (ihi * w + j2, ilo * w + j2),
    }


def _segment(prefix: Tensor, pair) -> Tensor:
    hi, lo = pair
    return ad.take(prefix, hi, axis=-1) - ad.take(prefix, lo, axis=-1)


def single_turn_log_paths(a: AffinityGrid):
    """Log products along the vertical-first and horizontal-first paths.

    Returns two tensors of shape ``(..., h*w, h*w)``.
    """
    horiz, vert = ad.as_tensor(a.horiz), ad.as_tensor(a.vert)
    h, w = a.h, a.w
    batch = horiz.shape[:-2]
    row_prefix = ad.concat([Tensor(np.zeros(batch + (h, 1))), ad.cumsum(_log_affinity(horiz), axis=-1)], axis=-1)
    col_prefix = ad.concat([Tensor(np.zeros(batch + (1, w))), ad.cumsum(_log_affinity(vert), axis=-2)], axis=-2)
    row_prefix = ad.reshape(row_prefix, batch + (h * w,))
    col_prefix = ad.reshape(col_prefix, batch + (h * w,))
    idx = _grid_pair_index(h, w)
    path1 = _segment(col_prefix, idx["v1"]) + _segment(row_prefix, idx["h1"])
    path2 = _segment(row_prefix, idx["h2"]) + _segment(col_prefix, idx["v2"])
    return path1, path2


def mask_2d(a: AffinityGrid) -> ArrayLike:
    """Grid mask over ``h*w`` nodes in row-major order.

    Each pair takes the larger of its two single-turn path products.
    """
    raw = not a.is_tensor
    if raw:
        a.validate()
    path1, path2 = single_turn_log_paths(a)
    if "min-path" in _mutants.ACTIVE:
        log_c = -ad.maximum(-path1, -path2)
    else:
        log_c = ad.maximum(path1, path2)
    c = ad.exp(log_c)
    return c.data if raw else c


def shortest_path_bound(a: AffinityGrid) -> np.ndarray:
    """``exp(-d(p, q))`` with ``d`` the grid shortest path under ``-log a`` weights.

    Reference bound for :func:`mask_2d`; unbatched grids only.
    """
    a = a.numpy()
    a.validate()
    h, w = a.h, a.w
    src, dst, wts = [], [], []
    for (r0, c0), (r1, c1), value in a.edges():
        src.append(r0 * w + c0)
        dst.append(r1 * w + c1)
        wts.append(-np.log(max(value, LOG_FLOOR)))
    # -log(1) == 0 must remain an edge; scipy keeps explicit zeros in sparse input
    graph = coo_matrix((np.abs(wts), (src, dst)), shape=(h * w, h * w)).tocsr()
    dist = dijkstra(graph, directed=False)
    return np.exp(-dist)


def extend_with_class_slot(c: Tensor) -> Tensor:
    """Prepend a row and column of ones (the class token attends freely)."""
    batch = c.shape[:-2]
    n = c.shape[-1]
    c = ad.concat([Tensor(np.ones(batch + (n, 1))), c], axis=-1)
    return ad.concat([Tensor(np.ones(batch + (1, n + 1))), c], axis=-2)


def export_mask(c: np.ndarray) -> bytes:
    """CSV rendering of a mask, row-major, 17 significant digits."""
    c = _data(c)
    if c.ndim != 2:
        raise ValueError("export_mask expects a single n x n mask")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in c:
        writer.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue().encode("ascii")


def read_mask_csv(data: bytes) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(data.decode("ascii"))))
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
