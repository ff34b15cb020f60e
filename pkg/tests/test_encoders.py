import numpy as np
import pytest

from hierclip import autodiff as ad
from hierclip import oracles
from hierclip.autodiff import ParamStore, ShapeError, Tensor
from hierclip.encoders import (
    EncoderConfig,
    encode_image,
    encode_text,
    hier_attention_block,
    init_params,
    layer_masks,
    trace_arrays,
)
from hierclip.masks import AffinityGrid, mask_1d, mask_2d
from hierclip.selfcheck import tiny_model


@pytest.fixture(scope="module")
def tiny():
    return tiny_model(seed=11)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(kind="audio")
    with pytest.raises(ValueError):
        EncoderConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(kind="vision", grid_h=1, grid_w=1)
    with pytest.raises(ValueError):
        EncoderConfig(sigma=0)
    assert EncoderConfig(width=32, heads=2).d_c == 32


def test_parameter_names_unique_and_complete(tiny):
    text, vision, store = tiny
    names = store.names()
    assert len(names) == len(set(names))
    for prefix in ("text", "vision"):
        for l in range(2):
            for leaf in ("aff.wq", "aff.wk", "attn.qkv.w", "attn.qv.b", "mlp.fc.w"):
                assert f"{prefix}.layers.{l}.{leaf}" in names


def test_embeddings_unit_norm_and_batched_agrees(tiny):
    text, vision, store = tiny
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 10, size=(3, 5))
    imgs = rng.normal(size=(3, 2, 3, 4))
    et = encode_text(text, store, ids).embedding.data
    ev = encode_image(vision, store, imgs).embedding.data
    np.testing.assert_allclose(np.linalg.norm(et, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(ev, axis=-1), 1.0, atol=1e-12)
    for b in range(3):
        np.testing.assert_allclose(encode_text(text, store, ids[b]).embedding.data, et[b], atol=1e-12)
        np.testing.assert_allclose(encode_image(vision, store, imgs[b]).embedding.data, ev[b], atol=1e-12)


def test_clip_reduction_matches_plain_transformer(tiny):
    text, vision, store = tiny
    arrays = store.arrays()
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 10, size=6)
    img = rng.normal(size=(2, 3, 4))
    got = encode_text(text, store, ids, mask_mode="ones").embedding.data
    np.testing.assert_allclose(got, oracles.vanilla_text(arrays, ids, 2, 2), rtol=0, atol=1e-12)
    got = encode_image(vision, store, img, mask_mode="ones").embedding.data
    np.testing.assert_allclose(got, oracles.vanilla_image(arrays, img, 2, 2), rtol=0, atol=1e-12)


def test_hier_block_matches_masked_oracle(tiny):
    text, _, store = tiny
    arrays = store.arrays()
    x = np.random.default_rng(2).normal(size=(5, 16))
    out, a = hier_attention_block(text, store, "text.layers.0", Tensor(x))
    c = mask_1d(np.asarray(a.data))
    ref = oracles.vanilla_block(x, arrays, "text.layers.0", 2, mask=c)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_affinity_reads_normalised_tokens(tiny):
    text, _, store = tiny
    arrays = store.arrays()
    x = np.random.default_rng(6).normal(3.0, 5.0, size=(5, 16))
    _, a = hier_attention_block(text, store, "text.layers.0", Tensor(x))
    h = oracles._ln(x, arrays["text.layers.0.ln1.g"], arrays["text.layers.0.ln1.b"])
    ref = oracles.chain_affinity(h, arrays["text.layers.0.aff.wq"], arrays["text.layers.0.aff.wk"], text.sigma)
    np.testing.assert_allclose(a.data, ref, atol=1e-12)


def test_mask_changes_output(tiny):
    text, _, store = tiny
    ids = np.arange(6) % 10
    hier = encode_text(text, store, ids).embedding.data
    plain = encode_text(text, store, ids, mask_mode="ones").embedding.data
    assert np.abs(hier - plain).max() > 1e-6


def test_traces_are_monotone(tiny):
    text, vision, store = tiny
    rng = np.random.default_rng(3)
    tr = trace_arrays(encode_text(text, store, rng.integers(0, 10, size=6)).trace)
    assert len(tr) == 2 and tr[0].shape == (5,)
    assert np.all(tr[1] >= tr[0])
    gr = trace_arrays(encode_image(vision, store, rng.normal(size=(2, 3, 4))).trace)
    assert isinstance(gr[0], AffinityGrid)
    assert np.all(gr[1].horiz >= gr[0].horiz) and np.all(gr[1].vert >= gr[0].vert)
    masks = layer_masks(encode_image(vision, store, rng.normal(size=(2, 3, 4))).trace, with_class_slot=True)
    assert masks[0].shape == (7, 7)
    assert np.all(masks[1] >= masks[0] - 1e-12)


def test_masks_recomputed_from_trace_match(tiny):
    _, vision, store = tiny
    tr = encode_image(vision, store, np.random.default_rng(4).normal(size=(2, 3, 4))).trace
    np.testing.assert_array_equal(layer_masks(tr)[1], mask_2d(trace_arrays(tr)[1]))


def test_input_validation(tiny):
    text, vision, store = tiny
    with pytest.raises(ValueError):
        encode_text(text, store, [1])
    with pytest.raises(ValueError):
        encode_text(text, store, [1, 2, 3, 4, 5, 6, 7])
    with pytest.raises(ValueError):
        encode_text(text, store, [1, 99])
    with pytest.raises(ShapeError):
        encode_image(vision, store, np.zeros((3, 3, 4)))


def test_gradients_reach_affinity_weights(tiny):
    text, _, store = tiny
    ids = np.array([[1, 2, 3, 4, 5], [5, 4, 3, 2, 1]])
    emb = encode_text(text, store, ids).embedding
    g = ad.backward(ad.sum_(emb * Tensor(np.random.default_rng(5).normal(size=emb.shape))), store)
    assert np.abs(g["text.layers.1.aff.wq"]).max() > 0
    assert np.abs(g["vision.layers.0.aff.wq"]).max() == 0


def test_init_is_seeded():
    cfg = EncoderConfig(kind="text", layers=1, width=8, heads=2)
    a = init_params(cfg, np.random.default_rng(0), ParamStore(), "t").arrays()
    b = init_params(cfg, np.random.default_rng(0), ParamStore(), "t").arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
