import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hierclip.estimator import CaptionParser, HierCLIP, ImageGrouper
from hierclip.induction import GroupSegmentation, ParseTree, is_valid_bracketing, refines
from hierclip.pretrain import dumps_checkpoint, loads_checkpoint
from hierclip.shapes_world import ShapesWorldSpec, generate_shapes_world, stack

SPEC = ShapesWorldSpec(grid_h=4, grid_w=4, max_objects=1, count_weights=None, shape_kinds=("square",))


def small(**kw):
    base = dict(layers=2, width=8, heads=2, embed_dim=8, grid_h=4, grid_w=4, vocab_size=16,
                max_tokens=8, batch_size=4, steps=4, warmup_steps=1, lr=1e-2, eval_every=2)
    base.update(kw)
    return HierCLIP(**base)


@pytest.fixture(scope="module")
def data():
    return stack(generate_shapes_world(SPEC, 0, 12))


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return small().fit(X, y, probe=(X[:6], y[:6]))


def test_get_params_and_clone():
    est = small(seed=5)
    params = est.get_params()
    assert params["seed"] == 5 and params["hierarchy"] is True
    assert clone(est).get_params() == params


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().transform(np.zeros((1, 4, 4, 4)))


def test_input_validation(data):
    X, y = data
    with pytest.raises(ValueError):
        small().fit(X[:, :3], y)
    with pytest.raises(ValueError):
        small().fit(X, y[:-1])
    with pytest.raises(ValueError):
        small().fit(X, [[0, 99, 1]] * len(X))
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        small().fit(bad, y)


def test_fit_outputs(fitted, data):
    X, y = data
    assert [h["step"] for h in fitted.history_] == [2, 4]
    assert "t2i_r1" in fitted.history_[-1]
    v, u = fitted.transform(X), fitted.encode_text(y)
    assert v.shape == u.shape == (12, 8)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    pred = fitted.predict(y[:3], X)
    assert pred.shape == (3,) and pred.dtype.kind == "i"
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_checkpoint_round_trip(fitted, data):
    X, _ = data
    again = HierCLIP.from_checkpoint(loads_checkpoint(dumps_checkpoint(fitted.to_checkpoint())))
    np.testing.assert_array_equal(again.transform(X), fitted.transform(X))


def test_baseline_flag_changes_model(data):
    X, y = data
    plain = small(hierarchy=False).fit(X, y)
    hier = small().fit(X, y)
    assert plain.config_.mask_mode == "ones"
    assert not np.allclose(plain.transform(X), hier.transform(X))


def test_induction_wrappers(fitted, data):
    X, y = data
    trees = CaptionParser(fitted).fit().transform(y[:5])
    assert all(isinstance(t, ParseTree) and is_valid_bracketing(t) for t in trees)
    assert trees[0].n == len(y[0]) - 2
    segs = ImageGrouper(fitted, thresholds=(0.3, 0.6)).fit().transform(X[:3])
    assert all(isinstance(s, GroupSegmentation) and refines(s.labels[0], s.labels[1]) for s in segs)
    assert len(fitted.segment_images(X[:2])) == 2
