"""Corpus assembly and the masked-vs-unmasked comparison run."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import pretrain
from .shapes_world import Sample, ShapesWorldSpec, generate_shapes_world, stack

# held-out samples are drawn from a disjoint index range of the same seed
HELD_OUT_OFFSET = 1_000_000


@dataclass
class DataConfig:
    spec: ShapesWorldSpec = field(default_factory=ShapesWorldSpec)
    train_pairs: int = 2000
    probe_pairs: int = 256
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        spec_keys = {f.name for f in dataclasses.fields(ShapesWorldSpec)}
        spec = ShapesWorldSpec(**{k: d.pop(k) for k in list(d) if k in spec_keys})
        return cls(spec=spec, **d)

    def to_dict(self) -> dict:
        out = self.spec.to_dict()
        out.update(train_pairs=self.train_pairs, probe_pairs=self.probe_pairs, seed=self.seed)
        return out


@dataclass
class Corpus:
    train: List[Sample]
    probe: List[Sample]

    def arrays(self):
        return stack(self.train), stack(self.probe)


def build_corpus(data: DataConfig) -> Corpus:
    return Corpus(
        generate_shapes_world(data.spec, data.seed, data.train_pairs),
        generate_shapes_world(data.spec, data.seed, data.probe_pairs, start=HELD_OUT_OFFSET),
    )


def check_compatible(cfg: pretrain.TrainConfig, data: DataConfig) -> None:
    spec = data.spec
    v, t = cfg.vision, cfg.text
    if (v.grid_h, v.grid_w, v.patch_dim) != (spec.grid_h, spec.grid_w, spec.patch_dim):
        raise ValueError("vision encoder grid/patch size does not match the dataset")
    if t.vocab_size < len(spec.vocabulary()):
        raise ValueError(f"vocab_size {t.vocab_size} smaller than the dataset vocabulary")
    longest = 2 + 3 * spec.max_objects - 1
    if t.max_tokens < longest:
        raise ValueError(f"max_tokens {t.max_tokens} shorter than the longest caption ({longest})")


def train_on(cfg: pretrain.TrainConfig, corpus: Corpus, eval_every: int = 250, callback=None, on_step=None):
    (X, y), (Xp, yp) = corpus.arrays()
    return pretrain.fit(cfg, X, y, probe=(Xp, yp), eval_every=eval_every, callback=callback, on_step=on_step)


def hierarchy_benefit(cfg: pretrain.TrainConfig, corpus: Corpus, seeds: Sequence[int],
                      steps: Optional[int] = None) -> Dict[str, object]:
    """Train masked and mask-free models per seed; report held-out Rsum side by side."""
    runs = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for mode in ("hier", "ones"):
            run_cfg = dataclasses.replace(cfg, seed=int(seed), mask_mode=mode,
                                          steps=cfg.steps if steps is None else steps)
            result = train_on(run_cfg, corpus, eval_every=max(1, run_cfg.steps))
            row[f"rsum_{mode}"] = result.history[-1]["rsum"] if result.history else float("nan")
        runs.append(row)
    med_h = float(np.median([r["rsum_hier"] for r in runs]))
    med_o = float(np.median([r["rsum_ones"] for r in runs]))
    return {"runs": runs, "median_rsum_hier": med_h, "median_rsum_ones": med_o,
            "within_tolerance": bool(med_h >= med_o - 5.0)}
