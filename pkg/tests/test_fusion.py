import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from hatsim.errors import InvalidInputError
from hatsim.fusion import (
    FeatureCache,
    LabelMap,
    MixerState,
    StaticFusion,
    attention_weights,
    export_weights,
    fuse,
    map_prediction,
    mixer_loss,
    mixer_parameters,
    mixer_update,
    precompute_source_features,
)
from hatsim.nn import SGD, Dense, LayerSpec, NetModel, make_skeleton, softmax
from hatsim.transport import TrafficLedger


def lin(W, b):
    W = np.asarray(W, float)
    return Dense(LayerSpec(W.shape[1], W.shape[0], "identity"), W, np.asarray(b, float))


def random_setup(rng, n_sources=3, C=4, d_t=5):
    dims = rng.integers(2, 7, size=n_sources).tolist()
    spaces = [tuple(sorted(rng.choice(C, size=int(rng.integers(1, C + 1)), replace=False).tolist()))
              for _ in range(n_sources)]
    mixer = MixerState(d_t, dims, d_common=4, rng=rng)
    cls = [Dense(LayerSpec(d, len(s), "identity"), rng=rng) for d, s in zip(dims, spaces)]
    return mixer, cls, LabelMap(tuple(spaces), C), dims


# -- attention -------------------------------------------------------------------


def test_identical_keys_give_uniform_weights():
    q = lin(np.eye(2), [0, 0])
    keys = [lin([[1.0, 2.0], [0.0, 1.0]], [0.5, 0.0]) for _ in range(3)]
    mixer = MixerState(2, [2, 2, 2], d_common=2, query=q, keys=keys)
    h = np.array([0.3, -1.0])
    np.testing.assert_allclose(attention_weights(mixer, h, [h, h, h]), [1 / 3] * 3, rtol=1e-15)


def test_engineered_dot_products_give_closed_form_weights():
    q = lin([[1.0]], [0.0])
    keys = [lin([[math.log(2)]], [0.0]), lin([[0.0]], [0.0])]
    mixer = MixerState(1, [1, 1], d_common=1, query=q, keys=keys)
    w = attention_weights(mixer, np.array([1.0]), [np.array([1.0]), np.array([1.0])])
    np.testing.assert_allclose(w, [2 / 3, 1 / 3], rtol=1e-15)


@given(st.integers(0, 10_000))
def test_attention_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    mixer, _, _, dims = random_setup(rng)
    ht = rng.normal(size=5)
    hs = [rng.normal(size=d) for d in dims]
    w = attention_weights(mixer, ht, hs)
    q = oracles.dense(mixer.query.W.tolist(), mixer.query.b.tolist(), ht.tolist(), "identity")
    dots = [sum(a * b for a, b in zip(q, oracles.dense(k.W.tolist(), k.b.tolist(), h.tolist(), "identity")))
            for k, h in zip(mixer.keys, hs)]
    np.testing.assert_allclose(w, oracles.softmax(dots), rtol=1e-9, atol=1e-15)
    assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= 0)


def test_attention_dimension_checks():
    rng = np.random.default_rng(0)
    mixer, _, _, dims = random_setup(rng)
    with pytest.raises(InvalidInputError):
        attention_weights(mixer, np.zeros(5), [np.zeros(d) for d in dims[:-1]])
    with pytest.raises(InvalidInputError):
        attention_weights(mixer, np.zeros(4), [np.zeros(d) for d in dims])
    with pytest.raises(InvalidInputError):
        MixerState(2, [2], d_common=3, query=lin(np.ones((3, 2)), np.zeros(3)), keys=[lin(np.ones((2, 2)), [0, 0])])


# -- label mapping ---------------------------------------------------------------


def test_map_prediction_examples():
    m = LabelMap(((0, 2), (0, 1, 2)), 3)
    np.testing.assert_array_equal(map_prediction([0.7, 0.3], m, 0), [0.7, 0.0, 0.3])
    np.testing.assert_array_equal(map_prediction([0.2, 0.5, 0.3], m, 1), [0.2, 0.5, 0.3])
    with pytest.raises(InvalidInputError):
        map_prediction([0.2, 0.5, 0.3], m, 0)
    with pytest.raises(InvalidInputError):
        LabelMap(((0, 3),), 3)
    with pytest.raises(InvalidInputError):
        LabelMap(((1, 1),), 3)


@given(st.integers(0, 10_000))
def test_map_preserves_mass_exactly(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 9))
    space = tuple(rng.choice(C, size=int(rng.integers(1, C + 1)), replace=False).tolist())
    p = softmax(rng.normal(size=len(space)))
    out = map_prediction(p, LabelMap((space,), C), 0)
    assert math.fsum(out) == math.fsum(p)
    assert sorted(out[list(space)].tolist()) == sorted(p.tolist())


# -- fuse ------------------------------------------------------------------------


def test_fuse_convex_combination_example():
    mixer = MixerState(2, [2, 2], d_common=2, query=lin(np.zeros((2, 2)), [0, 0]),
                       keys=[lin(np.eye(2), [0, 0]), lin(np.eye(2), [0, 0])])
    # logits (1000, 0) softmax to exactly (1, 0)
    cls = [lin(np.zeros((2, 2)), [1000.0, 0.0]), lin(np.zeros((2, 2)), [1000.0, 0.0])]
    out = fuse(mixer, np.ones(2), [np.ones(2), np.ones(2)], cls, LabelMap(((0, 1), (2, 0)), 3))
    np.testing.assert_array_equal(out.weights, [0.5, 0.5])
    np.testing.assert_array_equal(out.p_mix, [0.5, 0.0, 0.5])


def test_single_source_fusion_is_its_mapped_prediction():
    rng = np.random.default_rng(4)
    mixer, cls, lm, dims = random_setup(rng, n_sources=1)
    hs = rng.normal(size=(6, dims[0]))
    out = fuse(mixer, rng.normal(size=(6, 5)), [hs], cls, lm)
    assert np.array_equal(out.p_mix, map_prediction(softmax(cls[0].forward(hs)[0], axis=1), lm, 0))
    assert np.array_equal(out.weights, np.ones((6, 1)))


def test_fuse_hand_set_parameters_match_frozen_oracle():
    mixer = MixerState(2, [2, 3], d_common=2, query=lin([[1.0, 0.5], [-0.5, 1.0]], [0.1, 0.0]),
                       keys=[lin([[0.3, 0.2], [0.0, 1.0]], [0.0, 0.1]),
                             lin([[1.0, 0.0, 0.5], [0.2, -0.3, 0.1]], [0.2, 0.0])])
    cls = [lin([[1.0, -1.0], [0.5, 0.5]], [0.0, 0.2]), lin([[0.2, 0.1, -0.4], [-0.3, 0.6, 0.2]], [0.1, 0.0])]
    out = fuse(mixer, np.array([0.4, -0.2]), [np.array([1.0, 2.0]), np.array([0.5, -1.0, 1.5])],
               cls, LabelMap(((0, 1), (1, 0)), 2))
    # frozen from the loop oracle (oracles.dense / oracles.softmax)
    np.testing.assert_allclose(out.weights, [0.28495789429901025, 0.7150421057009897], rtol=1e-12)
    np.testing.assert_allclose(out.p_mix, [0.38440197248728836, 0.6155980275127116], rtol=1e-12)


@given(st.integers(0, 10_000))
def test_fused_prediction_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    mixer, cls, lm, dims = random_setup(rng, n_sources=int(rng.integers(1, 5)))
    out = fuse(mixer, rng.normal(size=(8, 5)) * 3, [rng.normal(size=(8, d)) * 3 for d in dims], cls, lm)
    for dist in (out.weights, out.p_mix):
        assert np.all(dist >= 0)
        assert np.all(np.abs(dist.sum(axis=1) - 1) <= 1e-9)


# -- mixer training -----------------------------------------------------------------


def _flat(ps):
    return np.concatenate([p.ravel() for p in ps])


def _assign(ps, flat):
    off = 0
    for p in ps:
        p[...] = flat[off:off + p.size].reshape(p.shape)
        off += p.size


@pytest.mark.parametrize("seed", range(5))
def test_mixer_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mixer, cls, lm, dims = random_setup(rng)
    ht = rng.normal(size=(6, 5))
    hs = [rng.normal(size=(6, d)) for d in dims]
    y = rng.integers(0, 4, size=6)
    _, grads = mixer_loss(mixer, cls, lm, ht, hs, y)
    params = mixer_parameters(mixer, cls)
    base = _flat(params)

    def f(v):
        _assign(params, np.asarray(v))
        return mixer_loss(mixer, cls, lm, ht, hs, y)[0]

    num = np.asarray(oracles.central_diff(f, base.tolist()))
    _assign(params, base)
    ana = _flat(grads)
    assert np.linalg.norm(ana - num) / (np.linalg.norm(ana) + np.linalg.norm(num)) < 1e-4


def _toy(seed=0):
    rng = np.random.default_rng(seed)
    srcs = [NetModel.build(make_skeleton(3, [4]), space, rng).freeze() for space in ((0, 1), (1, 2))]
    X = rng.normal(size=(12, 3))
    y = rng.integers(0, 3, size=12)
    mixer = MixerState(4, [4, 4], d_common=3, rng=rng)
    cls = [s.classifier.copy() for s in srcs]
    return srcs, X, y, mixer, cls, LabelMap.from_models(srcs, 3), rng.normal(size=(12, 4))


def test_zero_learning_rate_leaves_parameters_unchanged():
    srcs, X, y, mixer, cls, lm, ht = _toy()
    before = [p.copy() for p in mixer_parameters(mixer, cls)]
    opt = SGD(mixer_parameters(mixer, cls), 0.0)
    mixer_update(mixer, cls, lm, ht, [s.encode(X) for s in srcs], y, opt)
    opt.release()
    for a, b in zip(before, mixer_parameters(mixer, cls)):
        assert np.array_equal(a, b)


def test_mixer_step_reduces_loss_and_leaves_encoders_untouched():
    srcs, X, y, mixer, cls, lm, ht = _toy(1)
    enc_before = [p.tobytes() for s in srcs for p in s.encoder_parameters()]
    hs = [s.encode(X) for s in srcs]
    opt = SGD(mixer_parameters(mixer, cls), 0.05)
    before = mixer_update(mixer, cls, lm, ht, hs, y, opt)
    after, _ = mixer_loss(mixer, cls, lm, ht, hs, y)
    opt.release()
    assert after < before
    assert enc_before == [p.tobytes() for s in srcs for p in s.encoder_parameters()]
    with pytest.raises(InvalidInputError):
        mixer_update(mixer, cls, lm, ht[:0], [h[:0] for h in hs], y[:0], SGD([], 0.1))


# -- feature cache ------------------------------------------------------------------


def test_precompute_counts_and_cache_hits():
    srcs, X, *_ = _toy()
    ledger = TrafficLedger()
    ids = np.arange(100, 112)
    cache = precompute_source_features(srcs, X, ids, ledger)
    assert ledger.source_encoder_inference_count == 12 * 2
    for i, s in enumerate(srcs):
        assert cache.get(i, [105]).tobytes() == s.encode(X[5:6]).tobytes()
    for _ in range(3):
        cache.batch(ids[::2])
    assert ledger.source_encoder_inference_count == 24
    # callers get copies; the stored features themselves are read-only
    got = cache.get(0, [100])
    got[...] = 0.0
    assert cache.get(0, [100]).tobytes() == srcs[0].encode(X[:1]).tobytes()
    assert not any(f.flags.writeable for f in cache._features)


def test_cache_rejects_unfrozen_encoders():
    rng = np.random.default_rng(0)
    m = NetModel.build(make_skeleton(3, [4]), (0, 1), rng)
    with pytest.raises(InvalidInputError):
        precompute_source_features([m], rng.normal(size=(3, 3)), [0, 1, 2])


# -- static fusion and the debug dump --------------------------------------------------


def test_static_fusion_validates_weights():
    cls = [lin(np.eye(2), [0, 0]), lin(np.eye(2), [0, 0])]
    lm = LabelMap(((0, 1), (1, 2)), 3)
    for bad in ([0.7, 0.7], [1.0], [-0.5, 1.5]):
        with pytest.raises(InvalidInputError):
            StaticFusion(bad, cls, lm)
    out = StaticFusion([0.25, 0.75], cls, lm).predict([np.zeros((2, 2)), np.zeros((2, 2))])
    np.testing.assert_allclose(out.p_mix, [[0.125, 0.5, 0.375]] * 2, rtol=1e-15)


def test_export_weights(tmp_path):
    path = tmp_path / "w.csv"
    export_weights(path, [4, 9], np.array([[0.25, 0.75], [1.0, 0.0]]), [17, 3])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["sample_id", "w_17", "w_3"]
    assert rows[1] == ["4", "0.25", "0.75"]
    with pytest.raises(InvalidInputError):
        export_weights(path, [1], np.ones((2, 2)) / 2)
