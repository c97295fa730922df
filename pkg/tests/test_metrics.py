import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hlfd import autodiff as ad
from hlfd.autodiff import Tensor
from hlfd.metrics import (EmptyGroundTruth, aggregate, binarize, dsc, focal_dice_loss, gradcam, heatmap_contrast,
                          read_pnm, rvd, write_pgm, write_ppm_heat, write_ppm_overlay)
from hlfd.nets import FeatureTaps, NetConfig, build_student

masks = st.integers(0, 2 ** 16).map(lambda s: np.random.default_rng(s).random((6, 6)) < 0.4)


def brute_dsc(p, g):
    inter = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a and b)
    total = sum(map(bool, p.ravel())) + sum(map(bool, g.ravel()))
    return 1.0 if total == 0 else 2 * inter / total


def test_dsc_examples():
    g = np.zeros((4, 4), bool)
    g[0, :4] = True
    p = np.zeros_like(g)
    p[0, :2] = True
    assert dsc(p, g) == pytest.approx(0.6667, abs=5e-5)
    assert dsc(g, g) == 1.0
    assert dsc(np.roll(g, 2, axis=0), g) == 0.0
    assert dsc(np.zeros_like(g), np.zeros_like(g)) == 1.0
    with pytest.raises(ValueError):
        dsc(g, g[:3])


def test_rvd_examples():
    g = np.zeros((4, 4), bool)
    g[1, :4] = True
    p = np.zeros_like(g)
    p[1, :3] = True
    assert rvd(p, g) == -0.25
    assert rvd(g, g) == 0.0
    assert rvd(np.zeros_like(g), g) == -1.0
    with pytest.raises(EmptyGroundTruth):
        rvd(g, np.zeros_like(g))


@given(masks, masks)
def test_dsc_symmetric_bounded_and_counted(p, g):
    assert dsc(p, g) == dsc(g, p) == brute_dsc(p, g)
    assert 0.0 <= dsc(p, g) <= 1.0
    if g.any():
        assert rvd(p, g) == (int(p.sum()) - int(g.sum())) / int(g.sum())


def test_binarize_rules():
    probs = np.array([[[0.5, 0.1]], [[0.5, 0.9]]])  # K x 1 x 2
    assert binarize(probs).tolist() == [[0, 1]]
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 2, 5, 5))
    soft = ad.softmax_channels(Tensor(logits)).data
    assert np.array_equal(binarize(soft), (logits.argmax(axis=1) == 1).astype(np.uint8))
    shifted = ad.softmax_channels(Tensor(logits + rng.standard_normal((2, 1, 5, 5)))).data
    assert np.array_equal(binarize(shifted), binarize(soft))


def test_focal_dice_perfect_prediction_is_near_zero():
    mask = np.zeros((1, 8, 8), np.int64)
    mask[0, 2:5, 2:5] = 1
    logits = np.stack([np.where(mask == 0, 40.0, -40.0), np.where(mask == 1, 40.0, -40.0)], axis=1)
    assert focal_dice_loss(Tensor(logits), mask).item() < 1e-6


def test_focal_term_at_uniform_prediction():
    mask = np.zeros((2, 4, 4), np.int64)
    mask[:, 0, 0] = 1
    loss = focal_dice_loss(Tensor(np.zeros((2, 2, 4, 4))), mask, gamma=2.0, smooth=1.0).item()
    n_fg = 2
    dice = 1 - (2 * 0.5 * n_fg + 1) / (0.5 * 32 + n_fg + 1)
    assert loss == pytest.approx(0.25 * math.log(2) + dice, abs=1e-12)


def test_focal_dice_decreases_as_prediction_improves():
    mask = np.zeros((1, 4, 4), np.int64)
    mask[0, :2] = 1
    values = []
    for margin in np.linspace(0.0, 6.0, 13):
        fg = np.where(mask == 1, margin, 0.0)
        values.append(focal_dice_loss(Tensor(np.stack([np.zeros_like(fg), fg], axis=1)), mask).item())
    assert all(b < a for a, b in zip(values, values[1:]))


def test_focal_dice_rejects_bad_labels_and_shapes():
    with pytest.raises(ValueError):
        focal_dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        focal_dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 2)))


def test_aggregate_excludes_undefined_rvd_and_is_order_free():
    rows = [("a", 0.5, 0.1), ("b", 1.0, None), ("c", 0.25, -0.3)]
    res = aggregate(rows)
    assert res.dsc == pytest.approx(1.75 / 3) and res.rvd == pytest.approx(-0.1)
    assert res.rvd_excluded == 1
    rng = np.random.default_rng(1)
    many = [(str(i), float(d), float(r)) for i, (d, r) in enumerate(rng.random((50, 2)))]
    base = aggregate(many)
    for _ in range(5):
        perm = [many[i] for i in rng.permutation(50)]
        again = aggregate(perm)
        assert (again.dsc, again.rvd) == (base.dsc, base.rvd)


class OneChannelNet:
    """The tap is one channel; class-1 logits are that channel upsampled."""

    def __init__(self):
        self.scale = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)

    def parameters(self):
        return [self.scale]

    def forward(self, x):
        z = ad.bilinear_resize(x, 4, 4) * self.scale
        up = ad.bilinear_resize(z, 8, 8)
        logits = ad.concat_channels([up * 0.0, up])
        return FeatureTaps(z, [], z), None, logits


def test_gradcam_single_channel_is_normalized_relu():
    x = np.random.default_rng(3).standard_normal((1, 1, 8, 8))
    heat = gradcam(OneChannelNet(), Tensor(x), tap="early")
    z = ad.bilinear_resize(Tensor(x), 4, 4).data
    r = np.maximum(z, 0)
    expected = ad.bilinear_resize(Tensor((r - r.min()) / (r.max() - r.min())), 8, 8).data[0, 0]
    np.testing.assert_allclose(heat, expected, atol=1e-12)


def test_gradcam_range_and_grad_restoration():
    net = build_student(NetConfig(encoder_channels=(2, 4, 8), num_mid_layers=1, input_size=(16, 16)))
    p = net.parameters()[0]
    p.grad = np.full_like(p.data, 7.0)
    for tap in ("early", "late"):
        heat = gradcam(net, Tensor(np.random.default_rng(0).random((1, 16, 16))), tap=tap)
        assert heat.shape == (16, 16) and heat.min() >= 0.0 and heat.max() <= 1.0
    assert np.all(p.grad == 7.0)
    with pytest.raises(ValueError):
        gradcam(net, Tensor(np.zeros((1, 16, 16))), tap="middle")


def test_gradcam_all_zero_is_valid():
    net = build_student(NetConfig(encoder_channels=(2, 4, 8), num_mid_layers=1, input_size=(16, 16)))
    heat = gradcam(net, Tensor(np.zeros((1, 16, 16))), tap="late")
    assert np.all(heat == 0.0)


def test_heatmap_contrast():
    heat = np.zeros((4, 4))
    heat[:2] = 1.0
    mask = np.zeros((4, 4), bool)
    mask[0] = True
    assert heatmap_contrast(heat, mask) == (1.0, pytest.approx(4 / 12))


def test_netpbm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pnm(tmp_path / "a.pgm")
    assert back.shape == (3, 4) and back[0, 0] == 0 and back[-1, -1] == 255
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    mask = img > 0.5
    write_ppm_overlay(tmp_path / "b.ppm", img, mask)
    rgb = read_pnm(tmp_path / "b.ppm")
    assert rgb.shape == (3, 4, 3)
    assert np.all(rgb[mask][:, 1] >= rgb[mask][:, 0])
    assert np.array_equal(rgb[~mask][:, 0], rgb[~mask][:, 1])
    write_ppm_heat(tmp_path / "c.ppm", img, img, mask)
    assert read_pnm(tmp_path / "c.ppm").shape == (3, 4, 3)
