"""Deterministic synthetic image/caption corpus with gold trees and object masks.

Scenes are ``grid_h x grid_w`` patch grids; every patch is a ``patch x patch``
grayscale tile flattened to ``patch*patch`` values.  Each colour is a distinct
tile texture, each object is a small axis-aligned block of patches, and objects
never touch (4-adjacency), so every object is its own connected group.

Captions follow ``color shape (relation color shape)*`` with objects listed in
raster order of their top-left patch; each relation word describes the object
before it relative to the object after it.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

BOS, EOS = "<s>", "</s>"

# tile textures for a 2x2 patch; larger patches repeat them
_TEXTURES = {
    "red": (1.0, 0.0, 0.0, 1.0),
    "green": (0.0, 1.0, 1.0, 0.0),
    "blue": (1.0, 1.0, 0.0, 0.0),
    "yellow": (1.0, 0.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5, 0.5),
    "purple": (0.0, 0.0, 1.0, 1.0),
    "orange": (0.0, 1.0, 0.0, 1.0),
}

SHAPES = {"square": (2, 2), "bar-h": (1, 3), "bar-v": (3, 1)}
RELATIONS = ("left-of", "right-of", "above", "below")


@dataclass
class ShapesWorldSpec:
    grid_h: int = 8
    grid_w: int = 8
    patch: int = 2
    palette_size: int = 4
    shape_kinds: Tuple[str, ...] = ("square", "bar-h", "bar-v")
    min_objects: int = 1
    max_objects: int = 3
    # relative frequency of 1, 2, 3, ... objects per scene
    count_weights: Optional[Tuple[float, ...]] = (0.2, 0.4, 0.4)

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        if self.count_weights is not None:
            self.count_weights = tuple(self.count_weights)
        self.validate()

    def validate(self) -> None:
        if self.patch != 2:
            raise ValueError("only 2x2-pixel patches are supported")
        if not 1 <= self.palette_size <= len(_TEXTURES):
            raise ValueError(f"palette_size must be in 1..{len(_TEXTURES)}")
        unknown = set(self.shape_kinds) - set(SHAPES)
        if unknown or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        tallest = max(SHAPES[s][0] for s in self.shape_kinds)
        widest = max(SHAPES[s][1] for s in self.shape_kinds)
        if tallest > self.grid_h or widest > self.grid_w:
            raise ValueError("grid too small for the requested shapes")
        # objects plus their one-patch moat must fit without overlap
        footprint = max((SHAPES[s][0] + 1) * (SHAPES[s][1] + 1) for s in self.shape_kinds)
        if self.max_objects * footprint > (self.grid_h + 1) * (self.grid_w + 1):
            raise ValueError("impossible spec: objects exceed grid capacity")
        if self.count_weights is not None and len(self.count_weights) != self.max_objects - self.min_objects + 1:
            raise ValueError("count_weights needs one entry per object count")

    @property
    def colors(self) -> List[str]:
        return list(_TEXTURES)[: self.palette_size]

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def vocabulary(self) -> List[str]:
        return [BOS, EOS] + self.colors + list(self.shape_kinds) + list(RELATIONS)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneObject:
    color: str
    shape: str
    row: int
    col: int

    @property
    def cells(self) -> List[Tuple[int, int]]:
        hh, ww = SHAPES[self.shape]
        return [(self.row + r, self.col + c) for r in range(hh) for c in range(ww)]

    @property
    def center(self) -> Tuple[float, float]:
        hh, ww = SHAPES[self.shape]
        return self.row + (hh - 1) / 2.0, self.col + (ww - 1) / 2.0


@dataclass
class Sample:
    patches: np.ndarray          # (grid_h, grid_w, patch_dim)
    words: List[str]             # caption with begin/end markers
    token_ids: List[int]
    tree: object                 # nested tuple over caption content positions
    groups: np.ndarray           # (grid_h, grid_w) int; 0 background, k+1 object k
    objects: List[SceneObject] = field(default_factory=list)

    @property
    def content_words(self) -> List[str]:
        return self.words[1:-1]

    def to_json(self) -> str:
        from .induction import tree_to_brackets

        return json.dumps({
            "patches": self.patches.tolist(),
            "tokens": self.token_ids,
            "words": self.words,
            "tree": tree_to_brackets(self.tree),
            "groups": self.groups.tolist(),
        })


def relation(a: SceneObject, b: SceneObject) -> str:
    """Where ``a`` sits relative to ``b``."""
    (ay, ax), (by, bx) = a.center, b.center
    dy, dx = by - ay, bx - ax
    if abs(dx) > abs(dy):
        return "left-of" if dx > 0 else "right-of"
    return "above" if dy > 0 else "below"


def gold_tree(n_objects: int):
    """Right-nested noun phrase tree over the caption's content positions."""

    def phrase(k: int, start: int):
        np_ = (start, start + 1)
        if k == n_objects - 1:
            return np_
        return (np_, (start + 2, phrase(k + 1, start + 3)))

    return phrase(0, 0)


def render(objects: Sequence[SceneObject], spec: ShapesWorldSpec) -> Tuple[np.ndarray, np.ndarray]:
    patches = np.zeros((spec.grid_h, spec.grid_w, spec.patch_dim))
    groups = np.zeros((spec.grid_h, spec.grid_w), dtype=np.int64)
    for k, obj in enumerate(objects):
        for r, c in obj.cells:
            patches[r, c] = _TEXTURES[obj.color]
            groups[r, c] = k + 1
    return patches, groups


def _touches(obj: SceneObject, occupied: np.ndarray) -> bool:
    h, w = occupied.shape
    for r, c in obj.cells:
        for dr, dc in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and occupied[rr, cc]:
                return True
    return False


def _place(rng: np.random.Generator, spec: ShapesWorldSpec, count: int) -> Optional[List[SceneObject]]:
    occupied = np.zeros((spec.grid_h, spec.grid_w), dtype=bool)
    placed = []
    for _ in range(count):
        shape = spec.shape_kinds[rng.integers(len(spec.shape_kinds))]
        color = spec.colors[rng.integers(spec.palette_size)]
        hh, ww = SHAPES[shape]
        spots = [(r, c) for r in range(spec.grid_h - hh + 1) for c in range(spec.grid_w - ww + 1)
                 if not _touches(SceneObject(color, shape, r, c), occupied)]
        if not spots:
            return None
        r, c = spots[rng.integers(len(spots))]
        obj = SceneObject(color, shape, r, c)
        for cell in obj.cells:
            occupied[cell] = True
        placed.append(obj)
    placed.sort(key=lambda o: (o.row, o.col))
    return placed


def caption_words(objects: Sequence[SceneObject]) -> List[str]:
    words = [BOS]
    for k, obj in enumerate(objects):
        if k:
            words.append(relation(objects[k - 1], obj))
        words += [obj.color, obj.shape]
    words.append(EOS)
    return words


def caption_objects(words: Sequence[str]) -> Counter:
    """Object multiset named by a caption (markers optional)."""
    content = [w for w in words if w not in (BOS, EOS)]
    if (len(content) - 2) % 3:
        raise ValueError(f"malformed caption: {' '.join(words)}")
    objs = [(content[0], content[1])]
    for k in range(2, len(content), 3):
        if content[k] not in RELATIONS:
            raise ValueError(f"expected a relation word at position {k}, got {content[k]!r}")
        objs.append((content[k + 1], content[k + 2]))
    return Counter(objs)


def generate_sample(spec: ShapesWorldSpec, seed: int, index: int) -> Sample:
    """Sample ``index`` of the corpus for ``seed``; pure in (spec, seed, index)."""
    rng = np.random.default_rng([seed, index])
    counts = np.arange(spec.min_objects, spec.max_objects + 1)
    weights = None
    if spec.count_weights is not None:
        weights = np.asarray(spec.count_weights, dtype=np.float64)
        weights = weights / weights.sum()
    while True:
        count = int(rng.choice(counts, p=weights))
        objects = _place(rng, spec, count)
        if objects is not None:
            break
    patches, groups = render(objects, spec)
    words = caption_words(objects)
    vocab = {w: i for i, w in enumerate(spec.vocabulary())}
    return Sample(patches, words, [vocab[w] for w in words], gold_tree(len(objects)), groups, objects)


def generate_shapes_world(spec: ShapesWorldSpec, seed: int, count: int, start: int = 0) -> List[Sample]:
    if count < 0:
        raise ValueError("count must be non-negative")
    spec.validate()
    return [generate_sample(spec, seed, start + i) for i in range(count)]


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, List[List[int]]]:
    """Model-ready arrays: ``(N, h, w, patch_dim)`` patches and token id lists."""
    images = np.stack([s.patches for s in samples]) if samples else np.zeros((0,))
    return images, [list(s.token_ids) for s in samples]


def export_jsonl(samples: Sequence[Sample]) -> bytes:
    return "".join(s.to_json() + "\n" for s in samples).encode("utf-8")


def write_vocabulary(spec: ShapesWorldSpec) -> str:
    return "".join(w + "\n" for w in spec.vocabulary())


def read_vocabulary(text: str) -> Dict[str, int]:
    words = [line.strip() for line in text.splitlines() if line.strip()]
    return {w: i for i, w in enumerate(words)}
