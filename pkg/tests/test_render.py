import numpy as np

from maskdistill import render
from maskdistill.metrics import DeletionCurve

PNG_MAGIC = b"\x89PNG"


def test_colormap_luminance_monotone():
    lut = render.saliency_colormap().colors
    luminance = lut @ np.array([0.299, 0.587, 0.114])
    assert np.all(np.diff(luminance) >= 0)


def test_apply_colormap_matches_anchor_table():
    for pos, r, g, b in render.COLORMAP_TABLE:
        rgb = render.apply_colormap(np.array([[pos]]))[0, 0]
        assert np.allclose(rgb, np.array([r, g, b]) / 255.0, atol=1 / 255)


def test_heatmap_overlay_written(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "overlay.png"
    render.render_heatmap_overlay(rng.random((8, 8, 1)), rng.random((8, 8)), path)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_heatmap_overlay_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    image, saliency = rng.random((8, 8, 1)), rng.random((8, 8))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    render.render_heatmap_overlay(image, saliency, a)
    render.render_heatmap_overlay(image, saliency, b)
    assert a.read_bytes() == b.read_bytes()


def test_explanation_panel_written(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "panel.png"
    render.render_explanation_panel(rng.random((8, 8, 1)), rng.random((8, 8)),
                                    rng.random((8, 8)) > 0.5, path)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_loss_curves_written(tmp_path):
    history = [(1, 0.5, 0.6), (2, 0.4, 0.5), (3, 0.35, 0.45)]
    path = tmp_path / "loss.png"
    render.render_loss_curves(history, path)
    assert path.read_bytes()[:4] == PNG_MAGIC


def test_deletion_curves_written(tmp_path):
    fr = np.linspace(0, 1, 5)
    curves = {"rise": DeletionCurve(fr, np.linspace(0.8, 0.1, 5), 0.4),
              "lime": DeletionCurve(fr, np.linspace(0.8, 0.2, 5), 0.5)}
    path = tmp_path / "deletion.png"
    render.render_deletion_curves(curves, path)
    assert path.read_bytes()[:4] == PNG_MAGIC
