import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from habmap.forest import fit_forest
from habmap.inference import (
    UNCLASSIFIED,
    EnsembleConfig,
    InferenceError,
    MapModels,
    class_heatmap,
    classify_map,
    ensemble_combine,
    ensemble_predict,
    tta_predict,
    tta_predict_batch,
    write_maps,
)
from habmap.nnet import Network, NetworkConfig, TrainConfig, predict_proba, train
from habmap.raster import GeoTransform, RasterStack, extract_patch, read_raster
from habmap.synth import two_texture_raster

simplex = hnp.arrays(np.float64, 4, elements=st.floats(0, 1)).filter(lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


def net3(seed=0, classes=3):
    return Network(NetworkConfig(classes, 2, (4,)), seed=seed)


def raster(data, nodata=-9999.0):
    data = np.asarray(data, dtype=np.float32)
    return RasterStack(data, GeoTransform(0.0, data.shape[1] * 10.0, 10.0, 10.0), nodata, standardized=True)


class TestTTA:
    def test_identity_augmentation(self):
        net = net3()
        x = np.random.default_rng(0).normal(size=(2, 5, 5))
        np.testing.assert_allclose(tta_predict(net, x, rounds=1, ops=()), predict_proba(net, x[None])[0])

    def test_symmetric_patch_flip_invariant(self):
        net = net3()
        a = np.random.default_rng(1).normal(size=(2, 3, 3))
        sym = a + a[..., ::-1] + a[..., ::-1, :] + a[..., ::-1, ::-1]
        out = tta_predict(net, sym, rounds=6, ops=("hflip", "vflip"), seed=3)
        np.testing.assert_allclose(out, predict_proba(net, sym[None])[0], atol=1e-6)

    @given(st.integers(1, 6), st.sampled_from([(), ("hflip",), ("hflip", "vflip", "blur")]), st.integers(0, 99))
    @settings(max_examples=20)
    def test_output_on_simplex(self, rounds, ops, seed):
        p = tta_predict_batch(net3(), np.random.default_rng(seed).normal(size=(3, 2, 5, 5)), rounds, ops, seed)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)

    def test_rounds_checked(self):
        with pytest.raises(InferenceError):
            tta_predict(net3(), np.zeros((2, 3, 3)), rounds=0)
        with pytest.raises(InferenceError):
            EnsembleConfig(alpha=1.5)


class TestEnsemble:
    def test_examples(self):
        np.testing.assert_allclose(ensemble_combine([1, 0], [0, 1], 0.5), [0.5, 0.5])
        y = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(ensemble_combine(y, y, 0.37), y)
        np.testing.assert_array_equal(ensemble_combine(y, [1, 0, 0], 1.0), y)
        with pytest.raises(InferenceError):
            ensemble_combine([1, 0], [1, 0, 0], 0.5)

    @given(simplex, simplex, st.floats(0, 1))
    def test_simplex_and_shared_argmax(self, a, b, alpha):
        y = ensemble_combine(a, b, alpha)
        assert (y >= 0).all() and y.sum() == pytest.approx(1.0)
        if np.argmax(a) == np.argmax(b) and a.max() > np.sort(a)[-2] and b.max() > np.sort(b)[-2]:
            assert np.argmax(y) == np.argmax(a)

    @given(simplex, simplex, st.integers(0, 3), st.floats(0, 0.5))
    def test_monotone_in_rf(self, rf, cnn, k, bump):
        up = rf.copy()
        up[k] += bump
        assert (ensemble_combine(up, cnn, 0.5) >= ensemble_combine(rf, cnn, 0.5)).all()

    def test_ensemble_predict(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 2))
        rf = fit_forest(X, rng.integers(0, 3, 30), n_classes=3, n_trees=5)
        patch = rng.normal(size=(2, 5, 5))
        cfg = EnsembleConfig(alpha=1.0, input_size=5)
        np.testing.assert_allclose(ensemble_predict(rf, net3(), X[0], patch, cfg), rf.predict_proba(X[0]))
        with pytest.raises(InferenceError):
            ensemble_predict(rf, net3(classes=4), X[0], patch, cfg)


def check_map_invariants(maps):
    cls = maps.classified
    probs = maps.probabilities[:, cls]
    np.testing.assert_allclose(probs.sum(0), 1.0, atol=1e-5)
    np.testing.assert_array_equal(maps.class_map[cls], probs.argmax(0))
    np.testing.assert_array_equal(maps.max_confidence[cls], probs.max(0))
    for k in range(maps.n_classes):
        h = class_heatmap(maps, k)
        assert (h[~cls] == maps.nodata).all()
        hit = cls & (maps.class_map == k)
        np.testing.assert_array_equal(h[hit], maps.max_confidence[hit])


class TestClassifyMap:
    def test_single_pixel_rf(self):
        rng = np.random.default_rng(0)
        rf = fit_forest(rng.normal(size=(20, 2)), rng.integers(0, 3, 20), n_classes=3, n_trees=5)
        r = raster([[[0.3]], [[-1.2]]])
        m = classify_map(MapModels(rf=rf), r, patch_size=3)
        assert m.class_map.shape == (1, 1)
        assert m.class_map[0, 0] == rf.predict(r.data[:, 0, 0])

    def test_constant_raster_constant_maps(self):
        r = raster(np.full((2, 9, 11), 0.4))
        m = classify_map(MapModels(net=net3(), ensemble=EnsembleConfig(input_size=5)), r, patch_size=5)
        assert m.class_map.shape == (9, 11)
        assert len(np.unique(m.class_map)) == 1
        np.testing.assert_allclose(m.probabilities, np.broadcast_to(m.probabilities[:, :1, :1], m.probabilities.shape), atol=1e-6)

    def test_nodata_center_unclassified(self):
        data = np.random.default_rng(0).normal(size=(2, 6, 6))
        data[:, 2, 3] = -9999.0
        m = classify_map(MapModels(net=net3(), ensemble=EnsembleConfig(input_size=3)), raster(data), patch_size=3)
        assert m.class_map[2, 3] == UNCLASSIFIED
        assert m.classified.sum() == 35
        check_map_invariants(m)

    def test_tiles_workers_and_stride(self):
        rng = np.random.default_rng(2)
        r = raster(rng.normal(size=(2, 13, 10)))
        rf = fit_forest(rng.normal(size=(40, 2)), rng.integers(0, 3, 40), n_classes=3, n_trees=4)
        models = MapModels(rf=rf, net=net3(), ensemble=EnsembleConfig(tta_rounds=3, input_size=5))
        one = classify_map(models, r, 5, seed=4)
        tiled = classify_map(models, r, 5, seed=4, tile_rows=3, workers=3)
        np.testing.assert_array_equal(one.class_map, tiled.class_map)
        assert one.probabilities.tobytes() == tiled.probabilities.tobytes()
        check_map_invariants(one)
        coarse = classify_map(models, r, 5, stride=4)
        assert coarse.class_map.shape == (4, 3)
        assert coarse.geotransform.pixel_size_x == 40.0

    def test_errors(self):
        r = raster(np.zeros((2, 3, 3)))
        with pytest.raises(InferenceError):
            classify_map(MapModels(), r)
        with pytest.raises(InferenceError):
            classify_map(MapModels(net=net3()), r, patch_size=4)
        with pytest.raises(InferenceError):
            class_heatmap(classify_map(MapModels(net=net3(), ensemble=EnsembleConfig(input_size=3)), r, 3), 3)

    def test_texture_boundary_located(self):
        r, truth = two_texture_raster(40, 40, 3, seed=1)
        rng = np.random.default_rng(0)
        S = 9
        half = S // 2
        cols = list(rng.integers(4, 14, 100)) + list(rng.integers(26, 36, 100))
        pts = [(int(rng.integers(4, 36)), int(c)) for c in cols]
        X = np.stack([extract_patch(r, a, b, S).values for a, b in pts])
        y = np.array([truth[a, b] for a, b in pts])
        net = Network(NetworkConfig(2, 3, (8, 16)), seed=0)
        train(net, X, y, TrainConfig(epochs=30, batch_size=32, lr=3e-3, input_size=S))

        test, _ = two_texture_raster(24, 48, 3, seed=2, boundary_col=24)
        m = classify_map(MapModels(net=net, ensemble=EnsembleConfig(input_size=S, tta_rounds=1)), test, S)
        W = m.class_map.shape[1]
        for row in m.class_map:
            # best single step 0 -> 1 fitted to the row
            errs = [(row[:b] != 0).sum() + (row[b:] != 1).sum() for b in range(W + 1)]
            assert abs(int(np.argmin(errs)) - 24) <= half


def test_write_maps(tmp_path):
    data = np.random.default_rng(0).normal(size=(2, 4, 5))
    data[:, 0, 0] = -9999.0
    m = classify_map(MapModels(net=net3(), ensemble=EnsembleConfig(input_size=3)), raster(data), 3)
    paths = write_maps(tmp_path, m, ["A", "B", "C"])
    cm = read_raster(paths["class_map"])
    assert cm.data.shape == (1, 4, 5)
    np.testing.assert_array_equal(cm.data[0], m.class_map.astype(np.float32))
    assert read_raster(paths["probabilities"]).data.shape == (3, 4, 5)
    assert paths["classes"].read_text().splitlines() == ["0\tA", "1\tB", "2\tC", "255\tunclassified"]
