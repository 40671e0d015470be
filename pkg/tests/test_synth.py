import numpy as np
import pytest

from xstereo.dataset import load_dataset
from xstereo.synth import SynthConfig, SynthError, generate_dataset, generate_scene, render_scene


def shift_cols(mask, d):
    out = np.zeros_like(mask)
    if d >= 0:
        out[:, d:] = mask[:, :mask.shape[1] - d]
    else:
        out[:, :d] = mask[:, -d:]
    return out


def test_deterministic():
    cfg = SynthConfig(d_max=32, max_disparity=8, seed=3)
    a, pa = generate_scene(cfg, 7)
    b, pb = generate_scene(cfg, 7)
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.lwir.tobytes() == b.lwir.tobytes()
    assert pa == pb
    c, _ = generate_scene(cfg, 8)
    assert c.rgb.tobytes() != a.rgb.tobytes()


def test_zero_shift_support_equal():
    cfg = SynthConfig(n_shapes=1, max_disparity=0, d_max=32, blur_sigma=0, noise_std=0)
    scene = render_scene(cfg, 0)
    assert scene.disparities == [0]
    np.testing.assert_array_equal(scene.pair.lwir[:, :, 0] > 0.45, scene.masks[0])


@pytest.mark.parametrize("index", range(5))
def test_silhouette_consistency(index):
    cfg = SynthConfig(d_max=32, max_disparity=8, blur_sigma=0, noise_std=0)
    scene = render_scene(cfg, index)
    expected = np.zeros_like(scene.masks[0])
    for m, d in zip(scene.masks, scene.disparities):
        expected |= shift_cols(m, d)
    np.testing.assert_array_equal(scene.pair.lwir[:, :, 0] > 0.45, expected)


def template_match(rgb_mask, lwir_binary, max_d):
    """Brute force: the shift whose shifted silhouette best overlaps the thermal blobs."""
    best, best_iou = None, -1.0
    for d in range(-max_d, max_d + 1):
        s = shift_cols(rgb_mask, d)
        iou = (s & lwir_binary).sum() / (s | lwir_binary).sum()
        if iou > best_iou:
            best, best_iou = d, iou
    return best


@pytest.mark.parametrize("index", range(4))
def test_template_matching_recovers_disparities(index):
    cfg = SynthConfig(height=128, width=192, n_shapes=5, d_max=32, max_disparity=8, shape_scale=0.8)
    scene = render_scene(cfg, index)
    assert len(scene.points) >= 5
    lwir_binary = scene.pair.lwir[:, :, 0] > 0.45
    for mask, d in zip(scene.masks, scene.disparities):
        assert template_match(mask, lwir_binary, 8) == d
        # every emitted point inside this shape carries its disparity
        inside = [p for p in scene.points if mask[p.y, p.x]]
        assert inside and all(p.d == d for p in inside)


def test_spectra_are_dissimilar():
    cfg = SynthConfig(d_max=32, max_disparity=8)
    corrs = []
    for i in range(10):
        scene = render_scene(cfg, i)
        gray = scene.pair.rgb @ np.array([0.299, 0.587, 0.114])
        for mask, d in zip(scene.masks, scene.disparities):
            ys, xs = np.nonzero(mask)
            a, b = gray[ys, xs], scene.pair.lwir[ys, xs + d, 0]
            corrs.append(abs(np.corrcoef(a, b)[0, 1]))
    assert np.mean(corrs) < 0.5


def test_disparity_range_validated():
    with pytest.raises(SynthError):
        generate_scene(SynthConfig(max_disparity=20, d_max=32), 0)


def test_generate_dataset_roundtrip(tmp_path):
    cfg = SynthConfig(d_max=32, max_disparity=8, points_per_shape=2)
    generate_dataset(cfg, 10, tmp_path)
    assert len(list((tmp_path / "rgb").glob("*.png"))) == 10
    assert len(list((tmp_path / "lwir").glob("*.png"))) == 10
    m = load_dataset(tmp_path, d_max=32)
    assert len(m.pairs) == 10
    assert len(m.points) == sum(len(generate_scene(cfg, i)[1]) for i in range(10))
    # the stored 8-bit images keep the silhouettes: recover d from disk
    scene = render_scene(cfg, 0)
    lwir_binary = m.pairs["synth_00000"].lwir[:, :, 0] > 0.45
    for mask, d in zip(scene.masks, scene.disparities):
        assert template_match(mask, lwir_binary, 8) == d


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SynthError):
        generate_dataset(SynthConfig(d_max=32, max_disparity=8), 1, blocker / "sub")
