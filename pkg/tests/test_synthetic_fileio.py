import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aotvos.errors import ConfigError, FormatError, GenerationError
from aotvos.fileio import (decode_pnm, dumps_record, encode_pnm, image_to_bytes, image_to_float, load_checkpoint,
                           loads_record, read_frames, read_label_dir, read_pnm, save_checkpoint, write_pnm)
from aotvos.synthetic import Shape, SyntheticSpec, gen_synthetic, render_frame, write_sequence
from aotvos.tensor import Tensor


# -- PNM ---------------------------------------------------------------------

@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(a):
    assert np.array_equal(decode_pnm(encode_pnm(a)), a)


@given(arrays(np.uint16, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip_wide(a):
    assert np.array_equal(decode_pnm(encode_pnm(a)), a)


def test_pnm_header_with_comment():
    buf = b"P5\n# made by hand\n3 2\n255\n" + bytes(range(6))
    np.testing.assert_array_equal(decode_pnm(buf), np.arange(6).reshape(2, 3))


@pytest.mark.parametrize("buf", [b"P3\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2 x\n255\n0000",
                                 b"P5\n1 1\n0\n\x00", b"P5\n1 1\n9\n\x0a", b"P5 1"])
def test_pnm_rejects_garbage(buf):
    with pytest.raises(FormatError):
        decode_pnm(buf)


def test_pnm_errors_name_the_file(tmp_path):
    f = tmp_path / "broken.pgm"
    f.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError, match="broken.pgm"):
        read_pnm(f)
    with pytest.raises(FormatError):
        encode_pnm(np.zeros((2, 2, 2)))
    with pytest.raises(FormatError):
        encode_pnm(np.array([[-1]]))


def test_image_conversions():
    img = np.array([[[0.0, 0.5, 1.0]]])
    np.testing.assert_array_equal(image_to_bytes(img), [[[0, 128, 255]]])
    assert image_to_float(np.array([[255]])).shape == (1, 1, 3)


# -- records and checkpoints -------------------------------------------------

def test_record_round_trip():
    rec = {"a": 1, "b": 0.1, "c": "x y", "d": True}
    back = loads_record(dumps_record(rec))
    assert back == {"a": "1", "b": "0.1", "c": "x y", "d": "True"}
    assert float(back["b"]) == 0.1
    with pytest.raises(FormatError):
        dumps_record({"a=b": 1})
    with pytest.raises(FormatError):
        loads_record("no equals sign")


def test_checkpoint_round_trip(tmp_path):
    params = {"enc.0.w": Tensor(np.arange(6.0).reshape(2, 3)), "x": Tensor(np.ones(2), dtype="single")}
    save_checkpoint(tmp_path, {"variant": "aot-s"}, params)
    cfg, back = load_checkpoint(tmp_path)
    assert cfg == {"variant": "aot-s"}
    for k in params:
        assert back[k].dtype == params[k].dtype
        assert back[k].data.tobytes() == params[k].data.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.txt").write_text("gone\n")
    with pytest.raises(FormatError, match="gone.aott"):
        load_checkpoint(tmp_path)
    (tmp_path / "gone.aott").write_bytes(b"nonsense")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
    with pytest.raises(FormatError):
        save_checkpoint(tmp_path / "c", {}, {"../evil": Tensor(np.ones(1))})


# -- synthetic videos --------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(objects=11)
    with pytest.raises(ConfigError):
        SyntheticSpec(shapes=("triangle",))
    with pytest.raises(ConfigError):
        SyntheticSpec(objects=3, velocities=((0, 0),))
    with pytest.raises(ConfigError):
        SyntheticSpec(size=(4, 64))


def test_static_scene():
    seq = gen_synthetic(SyntheticSpec(objects=2, velocities=((0, 0),), seed=4))
    assert seq.n_objects == 2
    for f, l in zip(seq.frames[1:], seq.labels[1:]):
        np.testing.assert_array_equal(l, seq.labels[0])
    noiseless = gen_synthetic(SyntheticSpec(objects=2, velocities=((0, 0),), seed=4, noise=0.0))
    assert all(np.array_equal(f, noiseless.frames[0]) for f in noiseless.frames)


def test_z_order_front_shape_owns_the_overlap():
    a = Shape("rectangle", 0, 0, 6, 6, (1.0, 0.0, 0.0), (0, 0))
    b = Shape("rectangle", 3, 3, 6, 6, (0.0, 0.0, 1.0), (0, 0))
    img, lab = render_frame([a, b], [(0, 0), (3, 3)], (12, 12))
    assert lab[4, 4] == 2 and tuple(img[4, 4]) == (0.0, 0.0, 1.0)
    assert lab[1, 1] == 1 and lab[10, 10] == 0


def test_crossing_shapes_with_occlusion():
    overlapped = 0
    for seed in range(30):
        spec = SyntheticSpec(size=(32, 32), frames=12, objects=3, velocities=((2, 3), (-2, -3)), occlusion=True,
                             seed=seed)
        seq = gen_synthetic(spec)
        for img, lab in zip(seq.frames, seq.labels):
            masks = [s.mask((32, 32), *pos) for s, pos in zip(seq.shapes, _positions(seq, lab))]
            both = masks[0] & masks[1]
            if both.any():
                overlapped += 1
                assert np.all(lab[both] == 2)
                assert np.abs(img[both].mean(0) - np.array(seq.shapes[1].colour)).max() < 0.05
    assert overlapped > 0


def _positions(seq, lab):
    # recover each shape's placement from the frame index of this label raster
    t = next(i for i, l in enumerate(seq.labels) if l is lab)
    from aotvos.synthetic import _trajectory
    return [_trajectory(s, (32, 32), len(seq.labels))[t] for s in seq.shapes]


def test_labels_agree_with_rendering():
    seq = gen_synthetic(SyntheticSpec(seed=11, noise=0.0))
    for img, lab in zip(seq.frames, seq.labels):
        for i, s in enumerate(seq.shapes, start=1):
            assert np.all(img[lab == i] == np.array(s.colour))
        assert np.all(img[lab == 0] == 0.08)


def test_generation_error_when_crowded():
    with pytest.raises(GenerationError):
        gen_synthetic(SyntheticSpec(size=(8, 8), objects=10, retries=3))


def test_every_object_stays_visible():
    for seed in range(5):
        seq = gen_synthetic(SyntheticSpec(seed=seed, objects=4, max_speed=3))
        for lab in seq.labels:
            assert set(np.unique(lab)) == {0, 1, 2, 3}


def test_regeneration_is_byte_identical(tmp_path):
    spec = SyntheticSpec(size=(32, 48), frames=3, seed=9)
    a = write_sequence(gen_synthetic(spec), tmp_path / "a")
    b = write_sequence(gen_synthetic(spec), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*.p?m"))
    assert len(files) == 6
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    frames = read_frames(a / "frames")
    labels = read_label_dir(a / "labels")
    assert frames[0].shape == (32, 48, 3) and labels[0].shape == (32, 48)
    np.testing.assert_array_equal(labels[1], gen_synthetic(spec).labels[1])
