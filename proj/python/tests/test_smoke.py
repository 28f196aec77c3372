import math

import numpy as np
import pytest

import mocpy


def test_kernel_sums_to_one_and_peaks_at_centre():
    k = mocpy.gaussian_kernel(2.0, 5)
    assert k.shape == (5, 5)
    assert abs(k.sum() - 1.0) < 1e-12
    assert k[2, 2] == k.max()
    assert k[2, 2] / k[0, 0] == pytest.approx(math.e, rel=1e-12)
    with pytest.raises(mocpy.ValidationError):
        mocpy.gaussian_kernel(2.0, 4)


def test_render_channel_conserves_corner_mass():
    m = mocpy.render_channel([(0, 0), (31, 31), (5, 7)], 32, 32, 4.0, 15)
    assert m.shape == (32, 32)
    assert abs(m.sum() - 3.0) < 1e-12


def test_synth_group_and_density_conservation():
    cfg = {"category_intensities": {"Tree": 6, "Car": 4, "Boat": 2, "Vessel": 1, "Pool": 2},
           "seed": 3}
    scene = mocpy.synth_scene(cfg, "s0")
    assert scene["rgb"].shape == (3, 64, 64)
    assert scene["nir"].shape == (1, 64, 64)
    grouped = mocpy.group_to_moc6(scene["annotations"])
    fine = scene["annotations"]["points"]
    assert len(grouped["points"]["Ship"]) == len(fine["Boat"]) + len(fine["Vessel"])
    assert "Pool" not in grouped["points"]

    density, mask, order = mocpy.generate_gt(grouped, 2.0, 5, 4)
    assert order == mocpy.moc6_categories()
    assert density.shape == (6, 16, 16)
    got = mocpy.count_from_density(density, mask)
    want = [len(grouped["points"][c]) for c in order]
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    again = mocpy.synth_scene(cfg, "s0")
    assert np.array_equal(again["rgb"], scene["rgb"])


def test_losses_match_numpy_and_finite_differences():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0, 1, (3, 4, 4))
    gt = rng.uniform(0, 1, (3, 4, 4))
    value, grad = mocpy.counting_loss(pred, gt)
    assert value == pytest.approx(np.mean((pred - gt) ** 2), rel=1e-12)
    np.testing.assert_allclose(grad, 2 * (pred - gt) / pred.size, rtol=1e-12)

    flat = pred.reshape(3, -1)
    unit = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    ls, g = mocpy.spatial_contrast_loss(pred)
    assert ls == pytest.approx(np.mean(unit @ unit.T), abs=1e-12)
    np.testing.assert_allclose(mocpy.similarity_matrix(pred), unit @ unit.T, atol=1e-12)

    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 3), (2, 3, 1)]:
        up, down = pred.copy(), pred.copy()
        up[idx] += h
        down[idx] -= h
        fd = (mocpy.spatial_contrast_loss(up)[0] - mocpy.spatial_contrast_loss(down)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    t = mocpy.total_loss(pred, gt, gamma=0.5)
    assert t["total"] == pytest.approx(t["counting"] + 0.5 * t["spatial"], rel=1e-15)
    assert t["grad"].shape == pred.shape


def test_weights_and_report():
    w, median = mocpy.category_weights(list("abcdef"), [10, 50, 100, 400, 2000, 100000])
    assert median == 250.0
    assert sum(w) == pytest.approx(1.0, abs=1e-12)
    fr = np.array([1 / math.log((c + 1) / 251) for c in [10, 50, 100, 400, 2000, 100000]])
    np.testing.assert_allclose(w, np.exp(fr) / np.exp(fr).sum(), rtol=1e-12)

    uniform, _ = mocpy.category_weights(["a", "b", "c"], [7, 7, 7])
    np.testing.assert_allclose(uniform, [1 / 3] * 3, atol=1e-12)

    gt = np.array([[4.0, 0.0], [4.0, 0.0]])
    pred = np.array([[3.0, 2.0], [5.0, 4.0]])
    r = mocpy.build_report(["a", "b"], gt, pred)
    assert r["categories"][0]["mae"] == 1.0
    assert r["categories"][1]["mse"] == 10.0
    assert r["mse_bar"] == pytest.approx((1.0 + 10.0) / 2)
    csv = mocpy.report_csv(r).splitlines()
    assert csv[0] == "category,MAE,RMSE,MSE,weight"
    assert csv[-2].startswith("mean-MSE,,,")
    assert csv[-1].startswith("WMSE,,,")


def test_model_shapes_trace_and_checkpoint(tmp_path):
    cfg = {"base_channels": 4, "input_size": 32, "num_categories": 6}
    model = mocpy.Model(cfg, seed=3)
    rng = np.random.default_rng(1)
    rgb, nir = rng.uniform(0, 1, (3, 32, 32)), rng.uniform(0, 1, (1, 32, 32))
    out = model.forward(rgb, nir)
    assert out.shape == (6, 8, 8)

    tr = model.trace(rgb, nir)
    assert tr["f3"].shape == (16, 2, 2)
    np.testing.assert_allclose(tr["position_map"].sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tr["channel_map"].sum(axis=1), 1.0, atol=1e-12)

    params = model.parameters()
    assert params["attention.alpha"].item() == 0.0
    model.set_parameter("attention.alpha", np.array(0.5))
    with pytest.raises(mocpy.DimensionError):
        model.set_parameter("attention.alpha", np.zeros(2))

    model.save(str(tmp_path / "ck"))
    back = mocpy.Model.load(str(tmp_path / "ck"))
    assert back.parameters()["attention.alpha"].item() == 0.5
    np.testing.assert_array_equal(back.forward(rgb, nir), model.forward(rgb, nir))
    with pytest.raises(mocpy.DimensionError):
        model.forward(rgb[:, :20, :20], nir[:, :20, :20])


def test_gradcheck_losses():
    units = mocpy.gradcheck_units("losses")
    assert "losses/spatial_contrast_loss" in units
    results = mocpy.run_gradcheck("losses")
    assert len(results) == len(units)
    assert all(r["passed"] and r["worst_error"] <= 1e-4 for r in results)
