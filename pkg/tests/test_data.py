import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from edgenat.data import (
    Sample,
    augment,
    load_dataset,
    outline,
    read_gray,
    save_dataset,
    synth_dataset,
    write_pgm,
)
from edgenat.tensor import ContractError, Tensor, bilinear_resize


def _write_pair(root, key, h, w, gt_value=255):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    rgb = np.random.default_rng(0).integers(0, 256, (h, w, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(root / "images" / f"{key}.png")
    gt = np.zeros((h, w), np.uint8)
    gt[h // 2, :] = gt_value
    Image.fromarray(gt).save(root / "gt" / f"{key}.pgm")
    return rgb


def test_empty_directory_gives_empty_list(tmp_path, caplog):
    assert load_dataset(tmp_path) == []
    assert "no samples" in caplog.text


def test_padding_and_crop(tmp_path):
    rgb = _write_pair(tmp_path, "a", 70, 70)
    (s,) = load_dataset(tmp_path)
    assert s.image.shape == (3, 96, 96) and s.gt_prob.shape == (1, 96, 96)
    assert s.orig_size == (70, 70)
    np.testing.assert_allclose(s.crop(s.image), rgb.transpose(2, 0, 1) / 255.0, atol=1e-6)
    # edge replication: padded columns copy the last real one
    np.testing.assert_array_equal(s.image[:, :70, 95], s.image[:, :70, 69])


def test_gt_value_is_probability(tmp_path):
    _write_pair(tmp_path, "a", 32, 32, gt_value=128)
    (s,) = load_dataset(tmp_path)
    assert s.gt_prob.max() == pytest.approx(0.502, abs=1e-3)


def test_lexicographic_order(tmp_path):
    for key in ("b", "a10", "a2"):
        _write_pair(tmp_path, key, 32, 32)
    assert [s.id for s in load_dataset(tmp_path)] == ["a10", "a2", "b"]


def test_unpaired_files_are_listed(tmp_path):
    _write_pair(tmp_path, "a", 32, 32)
    (tmp_path / "gt" / "a.pgm").rename(tmp_path / "gt" / "z.pgm")
    with pytest.raises(ValueError, match=r"\['a', 'z'\]"):
        load_dataset(tmp_path)


def test_unreadable_file_names_path(tmp_path):
    _write_pair(tmp_path, "a", 32, 32)
    (tmp_path / "images" / "a.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="a.png"):
        load_dataset(tmp_path)


def test_pgm_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((5, 7))
    path = write_pgm(tmp_path / "x.pgm", arr)
    assert path.read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_allclose(read_gray(path), np.rint(arr * 255) / 255, atol=1e-7)


def test_sample_shape_contract():
    with pytest.raises(ContractError):
        Sample(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)), "bad")


def test_synth_is_deterministic():
    a = synth_dataset(8, 64, 7)
    b = synth_dataset(8, 64, 7)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.gt_prob.tobytes() == y.gt_prob.tobytes()
    assert synth_dataset(1, 64, 8)[0].image.tobytes() != a[0].image.tobytes()


@settings(max_examples=10)
@given(st.integers(0, 1000), st.sampled_from([32, 64]))
def test_synth_contract(seed, size):
    (s,) = synth_dataset(1, size, seed)
    npos = int(s.gt_prob.sum())
    assert 1 <= npos <= size * size // 4
    assert set(np.unique(s.gt_prob)) <= {0.0, 1.0}
    assert s.image.min() >= 0 and s.image.max() <= 1


def test_synth_requires_multiple_of_32():
    with pytest.raises(ContractError):
        synth_dataset(1, 50)


def test_outline_marks_inner_boundary():
    label = np.zeros((6, 6), int)
    label[2:4, 2:4] = 1
    np.testing.assert_array_equal(outline(label), label > 0)


@pytest.fixture(scope="module")
def fixture():
    return synth_dataset(4, 64, 7)


@pytest.mark.parametrize("ops,times", [("hflip", 2), ("vflip", 2), (("rot90", 1), 4)])
def test_group_identities(fixture, ops, times):
    s = fixture[0]
    out = augment(s, [ops] * times)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.gt_prob, s.gt_prob)


def test_rot90_moves_image_and_gt_together(fixture):
    s = fixture[1]
    r = augment(s, [("rot90", 1)])
    np.testing.assert_array_equal(r.image, np.rot90(s.image, 1, axes=(1, 2)))
    np.testing.assert_array_equal(r.gt_prob, np.rot90(s.gt_prob, 1, axes=(1, 2)))


def test_scale_shapes(fixture):
    s = fixture[0]
    assert augment(s, [("scale", 1.5)]).image.shape == (3, 96, 96)
    assert augment(s, [("scale", 0.5)]).gt_prob.shape == (1, 32, 32)
    with pytest.raises(ContractError):
        augment(s, [("scale", 2.0)])
    with pytest.raises(ContractError):
        augment(s, ["shear"])


def test_half_scale_round_trip_keeps_edges(fixture):
    for s in fixture:
        half = augment(s, [("scale", 0.5)])
        back = bilinear_resize(Tensor(half.gt_prob), 64, 64).data[0] > 0.3
        g = s.gt_prob[0] > 0
        near = ndimage.binary_dilation(back, np.ones((3, 3), bool))
        assert (g & near).sum() >= 0.8 * g.sum(), s.id


def test_save_then_load(tmp_path, fixture):
    save_dataset(fixture, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in fixture]
    for a, b in zip(loaded, fixture):
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-6)
        np.testing.assert_array_equal(a.gt_prob, b.gt_prob)
