import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hlfd.data import (KIDNEY_WINDOW, LIVER_WINDOW, SEGV1_MAGIC, BadMagicError, LabelRangeError, SegSample,
                       SynthConfig, TruncatedError, augment, decode_segv, dihedral, encode_segv, load_segv,
                       save_segv, split, synth_generate, window_hu)
from hlfd.metrics import dsc

SMALL = SynthConfig(count=12, size=(32, 32), seed=4)


def test_synth_is_seeded():
    a, b = synth_generate(SMALL), synth_generate(SMALL)
    assert all(x.equals(y) for x, y in zip(a, b))
    c = synth_generate(SynthConfig(count=12, size=(32, 32), seed=5))
    assert not all(x.equals(y) for x, y in zip(a, c))


def test_synth_invariants():
    for s in synth_generate(SynthConfig(count=40, seed=1)):
        assert s.image.shape == (1, 64, 64) and s.mask.shape == (64, 64)
        assert 0.0 < s.mask.mean() < 0.5
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {0, 1}


def test_noiseless_high_contrast_thresholds_exactly():
    cfg = SynthConfig(count=10, noise_sigma=0.0, intensity_contrast=1.0, seed=2)
    for s in synth_generate(cfg):
        img, m = s.image[0], s.mask.astype(bool)
        # clamping puts every blob pixel at 1.0, above the background maximum
        assert np.array_equal(img > img[~m].max(), m)


def test_window_hu_examples():
    assert window_hu(-40, *LIVER_WINDOW) == 0.0
    assert window_hu(160, *LIVER_WINDOW) == 1.0
    assert window_hu(300, *LIVER_WINDOW) == 1.0
    assert window_hu(50, *KIDNEY_WINDOW) == 0.5
    with pytest.raises(ValueError):
        window_hu(0, 10, 10)


@given(st.lists(st.floats(-2000, 3000), min_size=2, max_size=20))
def test_window_hu_monotone_and_idempotent(vals):
    raw = np.sort(np.array(vals))
    out = window_hu(raw, *KIDNEY_WINDOW)
    assert np.all(np.diff(out) >= 0)
    assert np.array_equal(window_hu(out, 0.0, 1.0), out)


def test_dihedral_group_structure():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert np.array_equal(dihedral(x, 0), x)
    for k in range(8):
        y = x
        for _ in range(4 if k < 4 else 2):
            y = dihedral(y, k)
        assert np.array_equal(y, x)
    images = {dihedral(x, k).tobytes() for k in range(8)}
    assert len(images) == 8


def test_dihedral_rejects_non_square_rotation():
    with pytest.raises(ValueError):
        dihedral(np.zeros((3, 5)), 1)
    assert dihedral(np.zeros((3, 5)), 2).shape == (3, 5)


@settings(max_examples=25)
@given(k=st.integers(0, 7), seed=st.integers(0, 2 ** 16))
def test_augment_is_a_mask_safe_isometry(k, seed):
    rng = np.random.default_rng(seed)
    a = SegSample(rng.random((1, 8, 8)), (rng.random((8, 8)) < 0.4).astype(np.uint8), "a")
    b_mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
    ta = augment(a, rng, k)
    assert ta.mask.sum() == a.mask.sum()
    # image and mask move together
    assert np.array_equal(ta.image, dihedral(a.image, k)) and np.array_equal(ta.mask, dihedral(a.mask, k))
    assert sorted(ta.image[0][ta.mask == 1]) == sorted(a.image[0][a.mask == 1])
    assert dsc(dihedral(a.mask, k), dihedral(b_mask, k)) == dsc(a.mask, b_mask)


def test_augment_draws_uniformly_from_all_eight():
    rng = np.random.default_rng(0)
    s = SegSample(np.arange(16.0).reshape(1, 4, 4) / 16, np.eye(4, dtype=np.uint8), "x")
    seen = {augment(s, rng).image.tobytes() for _ in range(200)}
    assert len(seen) == 8


def test_split_examples():
    samples = [SegSample(np.zeros((1, 2, 2)), np.zeros((2, 2)), str(i)) for i in range(210)]
    train, test = split(samples, 0.8, seed=3)
    assert (len(train), len(test)) == (168, 42)
    assert sorted(s.id for s in train + test) == sorted(s.id for s in samples)
    again = split(samples, 0.8, seed=3)
    assert [s.id for s in again[0]] == [s.id for s in train]
    with pytest.raises(ValueError):
        split(samples[:1], 0.5)
    with pytest.raises(ValueError):
        split(samples, 1.0)


def test_default_split_is_500_100():
    samples = [SegSample(np.zeros((1, 2, 2)), np.zeros((2, 2)), str(i)) for i in range(600)]
    train, test = split(samples, 5 / 6)
    assert (len(train), len(test)) == (500, 100)


def test_segv_round_trip_is_bitwise(tmp_path):
    samples = synth_generate(SMALL)
    path = tmp_path / "d.segv1"
    save_segv(path, samples)
    back = load_segv(path)
    assert all(a.equals(b) for a, b in zip(samples, back)) and len(back) == len(samples)
    assert encode_segv(back) == path.read_bytes()


def test_segv_layout():
    s = SegSample(np.array([[[0.25, 0.5]]]), np.array([[0, 1]]), "ab")
    buf = encode_segv([s])
    expected = (SEGV1_MAGIC + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<II", 1, 2)
                + np.array([0.25, 0.5], "<f8").tobytes() + bytes([0, 1]))
    assert buf == expected


def test_segv_errors():
    buf = encode_segv(synth_generate(SMALL)[:3])
    with pytest.raises(BadMagicError) as err:
        decode_segv(b"SEGV2\0" + buf[6:])
    assert err.value.kind == "bad magic"
    per_sample = (len(buf) - 10) // 3
    with pytest.raises(TruncatedError) as err:
        decode_segv(buf[:10 + per_sample + 40])
    assert err.value.index == 1 and err.value.kind == "truncated"
    bad = bytearray(buf)
    bad[-1] = 2
    with pytest.raises(LabelRangeError) as err:
        decode_segv(bytes(bad))
    assert err.value.kind == "label range"
