import math

import numpy as np
import pytest

import protofed as pf

pf.set_quiet(True)
rng = np.random.default_rng(0)


def conv_oracle(x, k, b, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            win = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            y[:, :, i, j] = np.einsum("ncuv,ocuv->no", win, k)
    return y + b[None, :, None, None]


def test_conv2d_matches_numpy():
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    k = rng.uniform(-1, 1, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, 4)
    y = pf.conv2d(x, k, b, stride=2, padding=1)
    assert y.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(y, conv_oracle(x, k, b, 2, 1), rtol=0, atol=1e-12)


def test_small_kernels():
    np.testing.assert_array_equal(pf.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert pf.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 4.0
    x, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 2))
    np.testing.assert_allclose(pf.linear(x, w), x @ w, atol=1e-12)
    z, p = rng.normal(size=(1, 5, 6, 6)), rng.normal(size=(3, 5, 1, 1))
    want = ((z[:, None] - p[None, :, :, :, :]) ** 2).sum(axis=2)
    np.testing.assert_allclose(pf.sliding_sq_l2(z, p), want, atol=1e-12)


def test_shape_errors_raise():
    with pytest.raises(pf.ConfigError):
        pf.linear(np.zeros((2, 3)), np.zeros((4, 2)))


def test_gradcheck_passes():
    results = pf.gradcheck(seed=3)
    names = {name for name, _, _ in results}
    assert "local_loss" in names and "conv2d" in names
    assert all(ok for _, _, ok in results)
    assert max(err for _, err, _ in results) <= 1e-5


def test_aggregation_weights():
    w = pf.aggregation_weights([8962, 7601, 5099, 4080])
    assert w == pytest.approx([0.3482, 0.2953, 0.1981, 0.1585], abs=1e-4)
    assert math.isclose(sum(w), 1.0, abs_tol=1e-12)


def test_payload_round_trip():
    alpha = {"adapter1.down": rng.normal(size=(2, 8, 1, 1))}
    phi = {"prototypes": rng.normal(size=(10, 8, 1, 1)), "head": rng.normal(size=(10, 2))}
    raw = pf.serialize_payload(2, 5, 300, alpha, phi)
    back = pf.deserialize_payload(raw)
    assert (back["client"], back["round"], back["samples"]) == (2, 5, 300)
    for k, v in phi.items():
        np.testing.assert_array_equal(back["phi"][k], v)
    with pytest.raises(pf.ProtocolError):
        pf.deserialize_payload(raw[:-3])


def test_synthetic_site_and_boxes():
    images, labels, boxes = pf.generate_site(40, healthy_fraction=0.5, seed=1, size=32, glyph_size=8)
    assert images.shape == (40, 1, 32, 32)
    assert 0.0 <= images.min() and images.max() <= 1.0
    assert [b is None for b in boxes] == [y == 0 for y in labels]
    heat = np.zeros((8, 8))
    heat[2, 5] = 1.0
    assert pf.activation_bbox(heat) == ((5, 2, 1, 1), False)
    assert pf.iou((0, 0, 2, 1), (1, 0, 2, 1)) == pytest.approx(1 / 3)
    up = pf.upsample_bilinear(np.array([[0.0, 1.0], [1.0, 2.0]]), 3, 3)
    assert up[1, 1] == pytest.approx(1.0)


def test_config_rejects_unknown_keys():
    text = pf.resolve_config(overrides={"fed.rounds": "7"})
    assert "rounds = 7" in text
    with pytest.raises(pf.ConfigError):
        pf.resolve_config(overrides={"fed.roundz": "7"})


def test_tiny_training_run(tmp_path):
    overrides = {
        "data.height": "32", "data.width": "32", "data.glyph_size": "8",
        "model.channels": "4,8", "model.freeze_mode": "frozen-random",
        "model.prototypes_per_class": "2", "fed.num_clients": "2", "fed.rounds": "1",
        "fed.batch_size": "8", "site.1.samples": "20", "site.2.samples": "24",
        "test.samples": "16", "run.output_dir": str(tmp_path / "run"),
    }
    [(variant, acc)] = pf.train(overrides)
    assert variant == "custom" and 0.0 <= acc <= 1.0
    [row] = pf.report([str(tmp_path / "run")])
    assert row["avg"] == pytest.approx(sum(row["client_acc"]) / 2)
    assert 0 < row["payload_ratio"] < 1
    ckpt = pf.load_checkpoint(str(tmp_path / "run" / "client_0.ckpt"))
    assert set(ckpt) == {"omega", "alpha", "phi"}
    assert ckpt["phi"]["head"].shape == (4, 2)
