import numpy as np
import pytest

from pmnet import dataset as ds, geo, metrics
from pmnet.geo import TxLocation
from pmnet.metrics import (
    BUILDING_THRESHOLD,
    channel_prediction_error,
    render_heatmap,
    rmse,
    roi_segmentation_error,
)
from pmnet.propagation import pathloss_map_3gpp


# ---------------------------------------------------------------- oracles

def rmse_oracle(pred, gt):
    total = 0.0
    n = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += (pred[i, j] - gt[i, j]) ** 2
            n += 1
    return (total / n) ** 0.5


def roi_err_oracle(pred, gt):
    errors = 0
    bld = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p_b = pred[i, j] < BUILDING_THRESHOLD
            g_b = gt[i, j] < BUILDING_THRESHOLD
            if p_b != g_b:
                errors += 1
            if g_b:
                bld += 1
    if bld == 0:
        return 0.0 if errors == 0 else float("nan")
    return errors / bld


def chan_err_oracle(pred, gt):
    total = 0.0
    n = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if pred[i, j] >= BUILDING_THRESHOLD and gt[i, j] >= BUILDING_THRESHOLD:
                p = pred[i, j] * 255.0 - 255.0
                g = gt[i, j] * 255.0 - 255.0
                total += (p - g) ** 2
                n += 1
    if n == 0:
        return float("nan")
    return (total / n) ** 0.5


def random_pair(rng):
    gt = rng.random((8, 8))
    gt[rng.random((8, 8)) < 0.3] = 0.0
    pred = np.clip(gt + rng.normal(0, 0.1, (8, 8)), 0, 1)
    pred[rng.random((8, 8)) < 0.1] = 0.0
    return pred, gt


def test_metrics_match_bruteforce_oracles():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred, gt = random_pair(rng)
        assert abs(rmse(pred, gt) - rmse_oracle(pred, gt)) <= 1e-12
        a, b = roi_segmentation_error(pred, gt), roi_err_oracle(pred, gt)
        assert (np.isnan(a) and np.isnan(b)) or abs(a - b) <= 1e-12
        a, b = channel_prediction_error(pred, gt), chan_err_oracle(pred, gt)
        assert (np.isnan(a) and np.isnan(b)) or abs(a - b) <= 1e-12


# ---------------------------------------------------------------- rmse

def test_rmse_identity_and_offset():
    a = np.random.default_rng(1).random((16, 16))
    assert rmse(a, a) == 0.0
    assert rmse(np.clip(a, 0, 0.9) + 0.1, np.clip(a, 0, 0.9)) == pytest.approx(0.1)


def test_rmse_hand_2x2():
    gt = np.zeros((2, 2))
    pred = np.array([[0.0, 0.0], [0.0, 0.2]])
    assert rmse(pred, gt) == pytest.approx(0.1)


def test_rmse_symmetric_and_triangle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b, c = rng.random((3, 8, 8))
        assert rmse(a, b) == rmse(b, a)
        assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12


def test_rmse_shape_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros((2, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------- roi error

def test_roi_error_identity():
    gt = np.random.default_rng(3).random((8, 8))
    gt[:2] = 0.0
    assert roi_segmentation_error(gt, gt) == 0.0


def test_roi_error_hand_counts():
    gt = np.ones((5, 5)) * 0.5
    gt[0, :2] = 0.0  # 2 building pixels... use 10 for the worked example
    gt = np.ones((5, 5)) * 0.5
    gt[0, :5] = 0.0
    gt[1, :5] = 0.0  # 10 building pixels
    pred = gt.copy()
    pred[0, 0] = 0.5  # one building pixel read as RoI
    assert roi_segmentation_error(pred, gt) == pytest.approx(0.1)
    pred = gt.copy()
    pred[3, 3] = 0.0  # one RoI pixel read as building: same denominator
    assert roi_segmentation_error(pred, gt) == pytest.approx(0.1)


def test_roi_error_zero_building_cases():
    gt = np.ones((4, 4)) * 0.5
    assert roi_segmentation_error(gt, gt) == 0.0
    pred = gt.copy()
    pred[0, 0] = 0.0
    with pytest.warns(UserWarning):
        assert np.isnan(roi_segmentation_error(pred, gt))


# ---------------------------------------------------------------- channel error

def test_channel_error_identity_and_one_gray():
    gt = np.random.default_rng(4).integers(1, 256, (8, 8)).astype(np.float64) / 255.0
    assert channel_prediction_error(gt, gt) == 0.0
    pred = np.clip(gt + 1.0 / 255.0, 0, 1)
    ok = gt <= 254.0 / 255.0  # clipped pixels would not shift a full step
    gt2 = np.where(ok, gt, 100.0 / 255.0)
    pred2 = gt2 + 1.0 / 255.0
    assert channel_prediction_error(pred2, gt2) == pytest.approx(1.0)


def test_channel_error_ignores_building_values():
    rng = np.random.default_rng(5)
    gt = rng.random((8, 8)) * 0.8 + 0.1
    gt[0:2, :] = 0.0
    pred = gt + 0.01
    pred[0:2, :] = 0.0
    base = channel_prediction_error(pred, gt)
    poisoned = pred.copy()
    poisoned[0:2, :] = 0.0  # building region stays classified as building
    assert channel_prediction_error(poisoned, gt) == base


def test_channel_error_empty_intersection():
    gt = np.zeros((4, 4))
    with pytest.warns(UserWarning):
        assert np.isnan(channel_prediction_error(gt + 1.0, gt))


def test_channel_error_gt_mask_mode():
    rng = np.random.default_rng(6)
    gt = rng.random((8, 8)) * 0.5 + 0.5
    pred = gt.copy()
    pred[0, 0] = 0.0  # predicted building inside gt RoI
    inter = channel_prediction_error(pred, gt, intersection=True)
    gt_only = channel_prediction_error(pred, gt, intersection=False)
    assert gt_only > inter  # the mispredicted pixel enters only in gt-mask mode


def test_quantization_bound():
    rng = np.random.default_rng(7)
    float_gt = rng.uniform(-254, 0, (16, 16))
    quantized = ds.from_gray(ds.to_gray(float_gt))
    err = rmse((quantized + 255) / 255.0, (float_gt + 255) / 255.0) * 255.0
    assert err < 0.5  # quantizing costs less than half a gray level RMS


# ---------------------------------------------------------------- evaluate

def _tiny_dataset(tmp_path, n_maps=3):
    man = ds.DatasetManifest()
    rng = np.random.default_rng(0)
    for i in range(n_maps):
        m = geo.generate_map(seed=i, size=64, density=0.2)
        tx = TxLocation(*geo.random_free_cell(m, rng))
        grid = pathloss_map_3gpp(m, tx)
        man.samples.append(ds.save_sample(ds.scene_to_sample(m, grid, tx), tmp_path))
    ds.split_by_map(man, train_fraction=0.5, seed=0)
    ds.save_manifest(man, tmp_path)
    return man


def test_evaluate_gt_against_itself(tmp_path):
    man = _tiny_dataset(tmp_path)

    def oracle_predictor(sample):
        return sample.target.astype(np.float64) / 255.0

    report = metrics.evaluate_model(oracle_predictor, man, tmp_path, split=ds.VAL, model_id="gt")
    assert report.rmse == 0.0
    assert report.roi_segmentation_err == 0.0
    assert report.channel_prediction_err_db == 0.0
    assert report.n_samples >= 1
    assert report.latency_ms_p95 >= report.latency_ms_p50 >= 0


def test_evaluate_baseline_deterministic(tmp_path):
    man = _tiny_dataset(tmp_path)
    a = metrics.evaluate_model("3gpp", man, tmp_path, split=ds.VAL)
    b = metrics.evaluate_model("3gpp", man, tmp_path, split=ds.VAL)
    assert a.rmse == b.rmse == 0.0  # ground truth was generated by the same model
    assert a.model_id == "3gpp"


def test_evaluate_report_io(tmp_path):
    man = _tiny_dataset(tmp_path)
    report = metrics.evaluate_model("3gpp", man, tmp_path, split=ds.VAL)
    report.write(tmp_path / "report.json")
    import json

    payload = json.loads((tmp_path / "report.json").read_text())
    assert set(payload) == {
        "model_id", "dataset_id", "rmse", "roi_err", "chan_err_db", "rmse_gray",
        "latency_ms", "n",
    }
    report.write_csv(tmp_path / "report.csv")
    assert (tmp_path / "report.csv").read_text().startswith("metric,value")


# ---------------------------------------------------------------- rendering

def test_render_constant_uniform():
    img = render_heatmap(np.full((16, 16), 0.5))
    from PIL import Image
    import io

    arr = np.asarray(Image.open(io.BytesIO(img)))
    assert (arr == arr[0, 0]).all()


def test_render_pure():
    rng = np.random.default_rng(8)
    g = rng.random((16, 16))
    assert render_heatmap(g, tx=(4, 4)) == render_heatmap(g, tx=(4, 4))


def test_render_diff_neutral_midtone():
    g = np.random.default_rng(9).random((16, 16))
    img = render_heatmap(g, compare=g, mode="diff")
    from PIL import Image
    import io

    arr = np.asarray(Image.open(io.BytesIO(img)))
    assert (arr == 128).all()


def test_render_side_by_side():
    g = np.random.default_rng(10).random((16, 16))
    img = render_heatmap(g, compare=g)
    from PIL import Image
    import io

    arr = np.asarray(Image.open(io.BytesIO(img)))
    assert arr.shape == (16, 34)
