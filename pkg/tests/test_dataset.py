import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xstereo.dataset import (DatasetError, DisparityPoint, FoldSpec, augment_points, crop_batch,
                             extract_patch, load_dataset, load_folds, mirror_points, save_folds,
                             split_folds)
from conftest import write_frame


def test_load_counts(tiny_dataset):
    m = load_dataset(tiny_dataset)
    assert len(m.pairs) == 2
    assert len(m.points) == 5
    assert m.points[0] == DisparityPoint("f1", 10, 20, 5)
    for pair in m.pairs.values():
        assert pair.rgb.shape == (40, 60, 3) and pair.lwir.shape == (40, 60, 1)
        assert pair.rgb.min() >= 0 and pair.rgb.max() <= 1


def test_load_rejects_out_of_range_disparity(tiny_dataset):
    m = load_dataset(tiny_dataset, d_max=10)
    assert len(m.points) == 4
    assert m.rejected == 1


def test_dimension_mismatch(tmp_path):
    write_frame(tmp_path, "a", np.zeros((48, 64, 3), np.uint8), np.zeros((48, 63), np.uint8))
    (tmp_path / "points.csv").write_text("frame_id,x,y,d\n")
    with pytest.raises(DatasetError, match="frame a"):
        load_dataset(tmp_path)


def test_unknown_frame(tiny_dataset):
    with open(tiny_dataset / "points.csv", "a") as fh:
        fh.write("nope,1,1,1\n")
    with pytest.raises(DatasetError, match="unknown frame"):
        load_dataset(tiny_dataset)


def test_bad_row_names_line(tiny_dataset):
    with open(tiny_dataset / "points.csv", "a") as fh:
        fh.write("f1,1,oops,1\n")
    with pytest.raises(DatasetError, match="line 7"):
        load_dataset(tiny_dataset)


@pytest.mark.parametrize("missing", ["rgb", "lwir", "points.csv"])
def test_missing_layout(tiny_dataset, missing):
    import shutil
    target = tiny_dataset / missing
    shutil.rmtree(target) if target.is_dir() else target.unlink()
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(tiny_dataset)


def test_augment_neighbourhood():
    out = augment_points([DisparityPoint("f", 10, 20, 5)], 100, 50)
    plain = {(p.x, p.y, p.d) for p in out if not p.mirrored}
    assert plain == {(10, 20, 5), (9, 20, 5), (11, 20, 5), (10, 19, 5), (10, 21, 5)}
    assert DisparityPoint("f", 89, 20, -5, mirrored=True) in out
    assert len(out) == 10


def test_augment_drops_boundary_neighbours():
    out = augment_points([DisparityPoint("f", 0, 0, 1)], 100, 50)
    assert len(out) == 6


def test_mirror_holds_correspondence_pixel_exactly():
    # build a pair whose LWIR is the RGB shifted by d, then mirror both frames
    rng = np.random.default_rng(1)
    w, d = 40, 5
    rgb = rng.random((8, w))
    lwir = np.zeros_like(rgb)
    lwir[:, d:] = rgb[:, :w - d]
    p = DisparityPoint("f", 12, 3, d)
    assert lwir[p.y, p.x + p.d] == rgb[p.y, p.x]
    (q,) = mirror_points([p], w)
    assert (q.x, q.d) == (w - 1 - 12, -5)
    assert lwir[:, ::-1][q.y, q.x + q.d] == rgb[:, ::-1][q.y, q.x]


def test_augment_cardinality_1000():
    rng = np.random.default_rng(0)
    pts = [DisparityPoint("f", int(x), int(y), int(d)) for x, y, d in
           zip(rng.integers(1, 99, 1000), rng.integers(1, 49, 1000), rng.integers(-10, 11, 1000))]
    assert len(augment_points(pts, 100, 50)) == 10000


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 31), st.integers(-16, 16)), max_size=30))
def test_mirror_involution(raw):
    pts = [DisparityPoint("f", x, y, d) for x, y, d in raw]
    assert mirror_points(mirror_points(pts, 64), 64) == pts


def test_split_and_augment_train_only(tiny_dataset, tmp_path):
    m = load_dataset(tiny_dataset)
    tr, va, te = split_folds(m, FoldSpec("0", ["f1"], ["f2"], []), patch_size=8)
    assert len(tr.points) == 30 and len(va.points) == 2 and len(te.points) == 0
    assert tr.stats == va.stats
    tr2, _, _ = split_folds(m, FoldSpec("0", ["f1"], ["f2"], []), augment=False, patch_size=8)
    assert len(tr2.points) == 3


def test_split_one_frame_each(tmp_path):
    rng = np.random.default_rng(0)
    pts = []
    for i, fid in enumerate(["a", "b", "c"]):
        write_frame(tmp_path, fid, rng.integers(0, 256, (20, 20, 3), dtype=np.uint8),
                    rng.integers(0, 256, (20, 20), dtype=np.uint8))
        pts.append(DisparityPoint(fid, 5 + i, 5, i))
    from xstereo.dataset import write_points
    write_points(tmp_path / "points.csv", pts)
    tr, va, te = split_folds(load_dataset(tmp_path), FoldSpec("0", ["a"], ["b"], ["c"]), augment=False)
    assert [p.frame_id for p in tr.points] == ["a"]
    assert [p.frame_id for p in va.points] == ["b"]
    assert [p.frame_id for p in te.points] == ["c"]


def test_split_errors(tiny_dataset):
    m = load_dataset(tiny_dataset)
    with pytest.raises(DatasetError, match="overlap"):
        split_folds(m, FoldSpec("0", ["f1"], ["f2"], ["f1"]))
    with pytest.raises(DatasetError, match="not in dataset"):
        split_folds(m, FoldSpec("0", ["f1"], ["f2"], ["zz"]))
    with pytest.raises(DatasetError, match="not assigned"):
        split_folds(m, FoldSpec("0", ["f1"], [], []))


def test_fold_file_roundtrip(tmp_path):
    folds = [FoldSpec("1", ["a"], ["b"], ["c"]), FoldSpec("2", ["b"], ["c"], ["a"])]
    save_folds(tmp_path / "folds.json", folds)
    loaded = load_folds(tmp_path / "folds.json")
    assert loaded["2"] == folds[1]


def test_extract_patch_centre_is_raw_window():
    rng = np.random.default_rng(0)
    img = rng.random((100, 120, 3)).astype(np.float32)
    patch = extract_patch(img, 60, 50, 36, 36)
    np.testing.assert_array_equal(patch, img[32:68, 42:78].transpose(2, 0, 1))
    mean, std = np.array([0.1, 0.2, 0.3]), np.array([2.0, 4.0, 0.5])
    standardized = extract_patch(img, 60, 50, 36, 36, stats=(mean, std))
    np.testing.assert_allclose(standardized, (patch - mean[:, None, None]) / std[:, None, None], rtol=1e-6, atol=1e-6)


def test_extract_patch_corner_replicates_edges():
    img = np.arange(20 * 30, dtype=np.float32).reshape(20, 30, 1)
    patch = extract_patch(img, 0, 0, 8, 8)[0]
    # rows/cols 0..4 of the patch replicate row/col 0; the rest is the image
    assert (patch[:4, :4] == img[0, 0, 0]).all()
    np.testing.assert_array_equal(patch[4:, 4:], img[:4, :4, 0])
    np.testing.assert_array_equal(patch[4], img[0, np.r_[0, 0, 0, 0, 0:4], 0])


def test_wide_patch_shape_and_determinism():
    img = np.random.default_rng(0).random((80, 200, 1)).astype(np.float32)
    a = extract_patch(img, 100, 40, 36, 100)
    assert a.shape == (1, 36, 100)
    assert a.tobytes() == extract_patch(img, 100, 40, 36, 100).tobytes()


def test_extract_patch_rejects_odd_sizes():
    with pytest.raises(ValueError):
        extract_patch(np.zeros((10, 10, 1)), 5, 5, 7, 8)


def test_crop_batch_matches_extract_patch():
    img = np.random.default_rng(3).random((30, 40, 3)).astype(np.float32)
    xs, ys = np.array([0, 20, 39]), np.array([5, 29, 0])
    batch = crop_batch(img.transpose(2, 0, 1), xs, ys, 10, 14)
    for k in range(3):
        np.testing.assert_array_equal(batch[k], extract_patch(img, xs[k], ys[k], 10, 14))


def test_standardized_training_patches(tmp_path):
    from xstereo.synth import SynthConfig, generate_dataset
    generate_dataset(SynthConfig(d_max=32, max_disparity=8), 12, tmp_path)
    m = load_dataset(tmp_path, d_max=32, patch_size=12)
    ids = m.frame_ids()
    tr, _, _ = split_folds(m, FoldSpec("0", ids[:8], ids[8:10], ids[10:]), augment=False, patch_size=12)
    rgb = np.stack([extract_patch(tr.image(p.frame_id, "rgb"), p.x, p.y, 12, 12, tr.stats, "rgb")
                    for p in tr.points])
    lwir = np.stack([extract_patch(tr.image(p.frame_id, "lwir"), p.x + p.d, p.y, 12, 12, tr.stats, "lwir")
                     for p in tr.points])
    for arr in (rgb, lwir):
        flat = arr.transpose(1, 0, 2, 3).reshape(arr.shape[1], -1)
        assert np.all(np.abs(flat.mean(1)) < 0.05)
        assert np.all(np.abs(flat.std(1) - 1) < 0.1)
