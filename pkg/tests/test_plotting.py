import numpy as np

from habmap import plotting
from habmap.inference import UNCLASSIFIED, ClassificationMaps
from habmap.metrics import evaluate
from habmap.raster import GeoTransform


def report(seed=0):
    rng = np.random.default_rng(seed)
    return evaluate(rng.dirichlet(np.ones(3), 30), rng.integers(0, 3, 30), 3)


def maps():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(3), (6, 7)).astype(np.float32)
    cm = probs.argmax(2)
    cm[0, 0] = UNCLASSIFIED
    return ClassificationMaps(cm, probs.transpose(2, 0, 1), probs.max(2), GeoTransform(0, 60, 10, 10))


def test_report_figures_deterministic(tmp_path):
    r = report()
    a = plotting.plot_pr_roc(r, tmp_path / "a.svg", "x")
    b = plotting.plot_pr_roc(r, tmp_path / "b.svg", "x")
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.lstrip().startswith("<?xml") and "precision-recall" in text
    c = plotting.plot_confusion(r, ["A", "B", "C"], tmp_path / "sub" / "c.svg")
    assert "predicted" in c.read_text()


def test_fold_scores(tmp_path):
    p = plotting.plot_fold_scores({"rf": [0.4, 0.5], "cnn": [0.8, 0.9]}, [0, 1], tmp_path / "f.svg")
    assert "2-fold scores" in p.read_text()


def test_map_pngs(tmp_path):
    m = maps()
    for p in (plotting.plot_class_map(m, ["A", "B", "C"], tmp_path / "m.png"),
              plotting.plot_confidence(m, tmp_path / "c.png")):
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
