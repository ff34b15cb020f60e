import math
import struct

import numpy as np
import pytest

from hierclip import autodiff as ad
from hierclip import oracles
from hierclip import pretrain as pt
from hierclip.encoders import EncoderConfig


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def small_config(**kw):
    text = EncoderConfig(kind="text", layers=1, width=8, heads=2, max_tokens=6, vocab_size=10, embed_dim=4)
    vision = EncoderConfig(kind="vision", layers=1, width=8, heads=2, grid_h=2, grid_w=2, patch_dim=4, embed_dim=4)
    base = dict(batch_size=4, steps=6, warmup_steps=2, lr=1e-2, text=text, vision=vision)
    base.update(kw)
    return pt.TrainConfig(**base)


def toy_data(n=8, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, 2, 2, 4))
    captions = [list(rng.integers(0, 10, size=int(rng.integers(3, 6)))) for _ in range(n)]
    return images, captions


# ---------------------------------------------------------------- loss

def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    v, u = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    got = pt.contrastive_loss(v, u, 0.2).item()
    assert got == pytest.approx(oracles.contrastive_loss(v, u, 0.2), abs=1e-12)


def test_perfect_alignment_low_loss_and_symmetry():
    rng = np.random.default_rng(1)
    v = np.eye(4)
    assert pt.contrastive_loss(v, v, 0.01).item() < 1e-10
    a, b = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    assert pt.contrastive_loss(a, b, 0.1).item() == pytest.approx(pt.contrastive_loss(b, a, 0.1).item(), abs=1e-12)


def test_uniform_similarity_gives_log_n_twice():
    v = np.tile([1.0, 0.0], (6, 1))
    assert pt.contrastive_loss(v, v, 0.5).item() == pytest.approx(2 * math.log(6), abs=1e-12)


def test_loss_validation():
    rng = np.random.default_rng(2)
    v = unit_rows(rng, 3, 4)
    with pytest.raises(ValueError):
        pt.contrastive_loss(v * 2, v, 0.1)
    with pytest.raises(ValueError):
        pt.contrastive_loss(v, v, 0.0)
    with pytest.raises(ad.ShapeError):
        pt.contrastive_loss(v, v[:2], 0.1)


def test_loss_gradient_wrt_encoder_outputs():
    rng = np.random.default_rng(3)
    p = ad.ParamStore({"v": rng.normal(size=(4, 6)), "u": rng.normal(size=(4, 6))})

    def unit(t):
        return t / ad.sqrt(ad.sum_(t * t, axis=-1, keepdims=True))

    rep = ad.finite_diff_check(lambda q: pt.contrastive_loss(unit(q["v"]), unit(q["u"]), 0.07), p, max_coords=None)
    assert rep.worst < 1e-5


# ---------------------------------------------------------------- schedule and optimiser

def test_lr_schedule_shape():
    cfg = small_config(steps=100, warmup_steps=10, lr=1.0)
    assert pt.lr_at(cfg, 0) == pytest.approx(0.1)
    assert pt.lr_at(cfg, 9) == pytest.approx(1.0)
    assert pt.lr_at(cfg, 10) == pytest.approx(1.0)
    assert pt.lr_at(cfg, 55) == pytest.approx(0.5)
    assert pt.lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-15)


def test_decay_selection():
    assert pt.decays("text.layers.0.attn.qkv.w", np.zeros((2, 2)))
    assert not pt.decays("text.layers.0.attn.qv.b", np.zeros(2))
    assert not pt.decays("text.pos_emb", np.zeros((2, 2)))
    assert not pt.decays(pt.LOG_TAU, np.zeros(()))


def test_zero_lr_leaves_params_unchanged():
    cfg = small_config()
    params = pt.init_model(cfg)
    grads = {k: np.ones_like(v.data) for k, v in params.items()}
    new, state = pt.adamw_update(cfg, params, grads, pt.AdamWState.zeros_like(params), 0.0)
    for name, t in params.items():
        assert np.array_equal(new[name].data, t.data)
    assert state.step == 1


def test_temperature_clamped():
    cfg = small_config()
    params = pt.init_model(cfg)
    params.set_array(pt.LOG_TAU, np.array(math.log(0.0101)))
    grads = {k: np.zeros_like(v.data) for k, v in params.items()}
    grads[pt.LOG_TAU] = np.array(1e3)
    new, _ = pt.adamw_update(cfg, params, grads, pt.AdamWState.zeros_like(params), 1.0)
    assert math.exp(float(new[pt.LOG_TAU].data)) == pytest.approx(0.01)


def test_config_round_trip_and_validation():
    cfg = small_config()
    assert pt.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        small_config(batch_size=1)
    with pytest.raises(ValueError):
        small_config(tau_init=0)
    with pytest.raises(TypeError):
        pt.TrainConfig.from_dict({"bogus": 1})


def test_bucketed_text_encoding_preserves_order():
    cfg = small_config()
    params = pt.init_model(cfg)
    _, captions = toy_data()
    emb, traces = pt.encode_texts(cfg, params, captions)
    for i, cap in enumerate(captions):
        from hierclip.encoders import encode_text

        single = encode_text(cfg.text, params, cap).embedding.data
        np.testing.assert_allclose(emb.data[i], single, atol=1e-12)
    assert sorted(traces) == sorted({len(c) for c in captions})


def test_training_lowers_loss_and_is_deterministic():
    cfg = small_config(steps=30, lr=3e-2)
    images, captions = toy_data()
    first = pt.batch_loss(cfg, pt.init_model(cfg), images[:4], captions[:4]).item()
    a = pt.fit(cfg, images, captions, eval_every=10)
    b = pt.fit(cfg, images, captions, eval_every=10)
    assert [r["step"] for r in a.history] == [10, 20, 30]
    assert a.history == b.history
    final = pt.batch_loss(cfg, a.params, images[:4], captions[:4]).item()
    assert final < first


def test_non_finite_loss_raises_diverged():
    cfg = small_config()
    params = pt.init_model(cfg)
    images, captions = toy_data()
    images[0, 0, 0, 0] = np.inf
    with pytest.raises(pt.TrainingDiverged):
        pt.train_step(cfg, params, pt.AdamWState.zeros_like(params), images[:4], captions[:4])


def test_iterate_batches_covers_epoch():
    it = pt.iterate_batches(10, 5, seed=0)
    seen = np.concatenate([next(it), next(it)])
    assert sorted(seen.tolist()) == list(range(10))


# ---------------------------------------------------------------- retrieval metrics

def test_recall_ties_count_against():
    assert pt.recall_at_k(np.ones((3, 3)), 1) == 0.0
    assert pt.recall_at_k(np.ones((3, 3)), 3) == 1.0
    assert pt.recall_at_k(np.eye(4), 1) == 1.0


def test_retrieval_metrics_perfect():
    m = pt.retrieval_metrics(np.eye(5), np.eye(5))
    assert m["t2i_r1"] == m["i2t_r1"] == 1.0
    assert m["rsum"] == pytest.approx(600.0)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    params = pt.init_model(cfg)
    path = tmp_path / "ck.bin"
    pt.save_checkpoint(str(path), pt.Checkpoint(params, 17, cfg.to_dict()))
    back = pt.load_checkpoint(str(path), required=pt.expected_param_names(cfg))
    assert back.step == 17 and back.config == cfg.to_dict()
    assert back.params.names() == params.names()
    for name, t in params.items():
        assert np.array_equal(back.params[name].data, t.data)
    assert back.log_tau == pytest.approx(math.log(cfg.tau_init))


def test_checkpoint_errors():
    cfg = small_config()
    blob = pt.dumps_checkpoint(pt.Checkpoint(pt.init_model(cfg), 0, {}))
    with pytest.raises(pt.CheckpointError, match="magic"):
        pt.loads_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(pt.CheckpointError, match="version"):
        pt.loads_checkpoint(blob[:8] + struct.pack("<I", 99) + blob[12:])
    with pytest.raises(pt.CheckpointError, match="corrupt length"):
        pt.loads_checkpoint(blob[:-5])
    with pytest.raises(pt.CheckpointError, match="missing"):
        pt.loads_checkpoint(blob, required=["text.nonexistent"])


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "x.bin"
    pt.atomic_write(str(target), b"abc")
    pt.atomic_write(str(target), b"defg")
    assert target.read_bytes() == b"defg"
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]
