import numpy as np
import pytest
from scipy.stats import ks_2samp

from habmap.dataset import class_histogram
from habmap.synth import (
    CONTEXT_PAIR,
    SynthConfig,
    class_counts,
    coarse_mapping,
    context_texture,
    generate,
    two_texture_patches,
    two_texture_raster,
)


@pytest.fixture(scope="module")
def bench():
    return generate(SynthConfig())


def test_class_counts_default_ratio():
    c = class_counts(8, 400, 472.0)
    assert c[0] == c[1] == 400
    assert c.min() == 1
    assert (np.diff(c[1:]) <= 0).all()
    assert class_counts(8, 472, 472.0).max() / class_counts(8, 472, 472.0).min() == 472


def test_coarse_mapping():
    assert coarse_mapping(8).tolist() == [0, 1, 2, 3, 4, 4, 5, 5]
    assert coarse_mapping(3).tolist() == [0, 1, 2]
    m = coarse_mapping(25)
    assert m.max() + 1 < 25 and (np.diff(m) >= 0).all()


def test_context_textures_same_state_share():
    h = context_texture("horizontal", (8, 8))
    v = context_texture("vertical", (8, 8))
    assert h.mean() == v.mean() == 0.5
    np.testing.assert_array_equal(h.T, v)


def test_context_pair_marginals_identical(bench):
    L, d = bench.labels, bench.raster.data
    rng = np.random.default_rng(0)
    a, b = CONTEXT_PAIR
    for ch in range(d.shape[0]):
        x = rng.choice(d[ch][L == a], 100_000)
        y = rng.choice(d[ch][L == b], 100_000)
        assert ks_2samp(x, y).statistic < 0.02, ch


def test_benchmark_shape(bench):
    cfg = bench.config
    assert bench.raster.data.shape == (14, cfg.height + cfg.pretrain_rows, cfg.width)
    assert bench.raster.channel_names[-3:] == ("ndvi_amplitude", "ndvi_sum", "ndvi_max")
    hist = class_histogram(bench.points, bench.taxonomy)
    assert hist.max() == 400 and hist.min() >= 1
    assert len(bench.coarse_points) == cfg.pretrain_points
    # coarse points stay in the lower strip, fine points in the study area
    top = bench.raster.geotransform.origin_y - cfg.height * cfg.pixel_size
    assert max(p.y for p in bench.coarse_points) < top
    assert min(p.y for p in bench.points) > top


def test_deterministic(tmp_path):
    cfg = SynthConfig(height=96, width=96, pretrain_rows=64, pretrain_points=20, pretrain_min_dist=20, n_regions=20)
    pa = generate(cfg).write(tmp_path / "a")
    pb = generate(cfg).write(tmp_path / "b")
    for key in pa:
        assert pa[key].read_bytes() == pb[key].read_bytes(), key
    other = generate(SynthConfig(**{**cfg.__dict__, "seed": 1})).write(tmp_path / "c")
    assert other["raster"].read_bytes() != pa["raster"].read_bytes()


def test_config_checks():
    with pytest.raises(ValueError):
        SynthConfig(n_classes=2)
    with pytest.raises(ValueError):
        SynthConfig(channels=3)


def test_two_texture_corpus():
    X, y = two_texture_patches(40, 9, 3, seed=0, noise=0.0)
    assert X.shape == (40, 3, 9, 9) and y.sum() == 20
    # the center pixel carries no texture information
    assert (X[:, :, 4, 4] == -1).all()
    for i in range(40):
        rows_const = (np.ptp(X[i, 0], axis=1) == 0).all()
        assert rows_const == (y[i] == 0)


def test_two_texture_raster():
    r, truth = two_texture_raster(10, 12, 2, boundary_col=5, noise=0.0)
    assert r.data.shape == (2, 10, 12)
    assert (truth[:, :5] == 0).all() and (truth[:, 5:] == 1).all()
    assert set(np.unique(r.data)) == {-1.0, 1.0}
