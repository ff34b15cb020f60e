"""Oracle and invariant battery behind the ``selfcheck`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad
from . import oracles
from .encoders import EncoderConfig, encode_image, encode_text, init_params
from .induction import (
    ThresholdSchedule,
    is_valid_bracketing,
    parse_text_tree,
    refines,
    segment_image_groups,
)
from .masks import AffinityGrid, mask_1d, mask_2d, nonsplittable_update, shortest_path_bound
from .pretrain import LOG_TAU, contrastive_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_grid(rng, h, w, low=0.05) -> AffinityGrid:
    return AffinityGrid(rng.uniform(low, 1.0, (h, w - 1)), rng.uniform(low, 1.0, (h - 1, w)))


def _check_mask_1d(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(200):
        a = rng.uniform(0.05, 1.0, rng.integers(1, 32))
        worst = max(worst, np.abs(mask_1d(a) - oracles.chain_mask(a)).max())
    return worst < 1e-12, f"max abs err {worst:.2e} over 200 chains"


def _check_mask_2d(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(1, 7, size=2)
        if h * w < 2:
            w = 2
        g = random_grid(rng, h, w)
        worst = max(worst, np.abs(mask_2d(g) - oracles.grid_mask(g.horiz, g.vert)).max())
    return worst < 1e-12, f"max abs err {worst:.2e} over 100 grids vs path enumeration"


def _check_bound(rng) -> Tuple[bool, str]:
    worst = 0.0
    strict = 0
    for _ in range(200):
        g = random_grid(rng, 6, 6)
        c, b = mask_2d(g), shortest_path_bound(g)
        worst = max(worst, (c - b).max())
        strict += int(np.any(c < b - 1e-12))
    # between opposite corners of a 2x2 grid the only simple paths are the two single-turn ones
    tight = 0.0
    corners = ([0, 3], [3, 0])
    for _ in range(100):
        g = random_grid(rng, 2, 2)
        tight = max(tight, np.abs(mask_2d(g)[corners] - shortest_path_bound(g)[corners]).max())
    ok = worst <= 1e-12 and strict > 0 and tight < 1e-12
    return ok, f"max violation {worst:.2e}, {strict}/200 strict, tightness err {tight:.2e}"


def _check_max_dominance(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        g = random_grid(rng, 4, 5)
        c = mask_2d(g)
        for u in range(20):
            for v in range(20):
                p1, p2 = oracles.single_turn_paths(g.horiz, g.vert, divmod(u, 5), divmod(v, 5))
                worst = max(worst, max(p1, p2) - c[u, v])
    return worst <= 1e-12, f"max shortfall {worst:.2e}"


def _check_monotone(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        a1, g1 = None, None
        for _layer in range(4):
            a_hat = rng.uniform(0.01, 1.0, 7)
            g_hat = random_grid(rng, 3, 3, low=0.01)
            a2 = nonsplittable_update(a1, a_hat)
            g2 = nonsplittable_update(g1, g_hat)
            if a1 is not None:
                worst = max(worst, (a1 - a2).max(), (mask_1d(a1) - mask_1d(a2)).max(),
                            (mask_2d(g1) - mask_2d(g2)).max())
            a1, g1 = a2, g2
    return worst <= 1e-12, f"max decrease {worst:.2e}"


def _check_primitives(rng) -> Tuple[bool, str]:
    cases = {
        "matmul": lambda p: ad.sum_(ad.matmul(p["x"], p["y"]) * ad.matmul(p["x"], p["y"])),
        "softmax": lambda p: ad.sum_(ad.softmax(p["x"]) * p["x"]),
        "layer_norm": lambda p: ad.sum_(ad.layer_norm(p["x"]) * p["y"][:3, :3]),
        "gelu+exp+log": lambda p: ad.sum_(ad.log(ad.exp(ad.gelu(p["x"])) + 1.0)),
        "sqrt+div": lambda p: ad.sum_(ad.sqrt(p["x"] * p["x"] + 1.0) / (p["y"][:3, :3] * p["y"][:3, :3] + 2.0)),
        "take+cumsum": lambda p: ad.sum_(ad.take(ad.cumsum(p["x"], axis=-1), np.array([[0, 2], [1, 1]]), axis=-1)),
    }
    worst = 0.0
    for name, f in cases.items():
        params = ad.ParamStore({"x": rng.normal(size=(3, 3)), "y": rng.normal(size=(3, 4))})
        rep = ad.finite_diff_check(f, params, h=1e-5, tol=1e-5, max_coords=None)
        worst = max(worst, rep.worst)
    return worst < 1e-5, f"worst rel err {worst:.2e} over {len(cases)} primitive groups"


def tiny_model(seed: int = 0, sigma: float = 256.0, layers: int = 2, width: int = 16):
    text = EncoderConfig(kind="text", layers=layers, width=width, heads=2, sigma=sigma,
                         max_tokens=6, vocab_size=10, embed_dim=8)
    vision = EncoderConfig(kind="vision", layers=layers, width=width, heads=2, sigma=sigma,
                           grid_h=2, grid_w=3, patch_dim=4, embed_dim=8)
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    init_params(text, rng, store, "text")
    init_params(vision, rng, store, "vision")
    store.add(LOG_TAU, np.array(np.log(0.07)))
    return text, vision, store


def tiny_loss(text, vision, images, captions):
    def f(p):
        v = encode_image(vision, p, images).embedding
        u = encode_text(text, p, captions).embedding
        return contrastive_loss(v, u, ad.exp(p[LOG_TAU]))

    return f


def affinity_step_scale(names, sigma: float) -> dict:
    """Affinity weights reach the scores only through ``Wq Wk^T / sigma``; scaling
    their probe step by ``sigma`` perturbs the scores by O(h) like any other weight."""
    return {n: sigma for n in names if ".aff." in n}


def gradient_suite(seed: int = 0, max_coords: int = 64, names=None, tol: float = 1e-4) -> ad.FDReport:
    """Finite-difference check of the full loss through both 2-layer, width-16 encoders on 3 pairs."""
    rng = np.random.default_rng([seed, 99])
    text, vision, store = tiny_model(seed=seed)
    images = rng.normal(size=(3, 2, 3, 4))
    captions = rng.integers(0, 10, size=(3, 5))
    f = tiny_loss(text, vision, images, captions)
    return ad.finite_diff_check(f, store, h=1e-5, tol=tol, max_coords=max_coords, seed=seed, names=names,
                                step_scale=affinity_step_scale(store.names(), text.sigma))


def _check_encoder_grads(rng) -> Tuple[bool, str]:
    _, _, store = tiny_model()
    names = [n for n in store.names() if ".aff." in n or n.endswith("qkv.w") or n == LOG_TAU]
    rep = gradient_suite(int(rng.integers(1 << 30)), max_coords=16, names=names)
    return rep.passed, f"worst rel err {rep.worst:.2e} over {len(names)} tensors"


def _check_clip_reduction(rng) -> Tuple[bool, str]:
    text, vision, store = tiny_model(seed=int(rng.integers(1 << 30)))
    arrays = store.arrays()
    worst = 0.0
    for _ in range(5):
        ids = rng.integers(0, 10, size=5)
        img = rng.normal(size=(2, 3, 4))
        got_t = encode_text(text, store, ids, mask_mode="ones").embedding.data
        got_v = encode_image(vision, store, img, mask_mode="ones").embedding.data
        worst = max(worst,
                    np.abs(got_t - oracles.vanilla_text(arrays, ids, text.layers, text.heads)).max(),
                    np.abs(got_v - oracles.vanilla_image(arrays, img, vision.layers, vision.heads)).max())
    return worst < 1e-12, f"max abs err {worst:.2e} vs plain transformer"


def _check_induction(rng) -> Tuple[bool, str]:
    worked = segment_image_groups(
        [AffinityGrid(np.array([[0.9], [0.3]]), np.array([[0.3, 0.8]]))], ThresholdSchedule((0.35,)))
    ok = worked.breaks[0] == {("h", 1, 0), ("v", 0, 0)} and worked.labels[0].tolist() == [[0, 0], [1, 0]]
    schedule = ThresholdSchedule.for_layers(4)
    for _ in range(30):
        a, traces = None, []
        for _layer in range(4):
            a = nonsplittable_update(a, random_grid(rng, 8, 8, low=0.01))
            traces.append(a)
        seg = segment_image_groups(traces, schedule)
        ok &= all(refines(seg.labels[l], seg.labels[l + 1]) for l in range(3))
    for _ in range(100):
        n = int(rng.integers(1, 12))
        tree = parse_text_tree(rng.uniform(0.01, 1, size=(4, n - 1)), n)
        ok &= is_valid_bracketing(tree)
    return bool(ok), "worked example, nesting over 30 stacks, 100 parses"


CHECKS: List[Tuple[str, Callable]] = [
    ("mask_1d = nested products", _check_mask_1d),
    ("mask_2d = two-path enumeration", _check_mask_2d),
    ("mask_2d <= shortest-path bound", _check_bound),
    ("max dominance", _check_max_dominance),
    ("monotone layering", _check_monotone),
    ("primitive gradients", _check_primitives),
    ("encoder gradients", _check_encoder_grads),
    ("CLIP reduction", _check_clip_reduction),
    ("induction validity", _check_induction),
]


def run_selfcheck(seed: int = 0) -> List[CheckResult]:
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng([seed, len(results)])
        start = time.perf_counter()
        try:
            passed, detail = fn(rng)
        except Exception as err:  # a crashing check is a failing check
            passed, detail = False, f"{type(err).__name__}: {err}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results


def format_report(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.detail} ({r.seconds:.1f}s)")
    return "\n".join(lines)
