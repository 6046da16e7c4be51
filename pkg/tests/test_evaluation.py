import csv
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mtnet.data import phantom_samples
from mtnet.evaluation import (
    ConfusionMatrix4,
    bland_altman,
    classification_metrics,
    emit_report,
    evaluate_fold,
    evaluate_predictions,
    image_metrics,
    nrmse,
    pearson,
    validate_report,
    windowed_ssim,
)
from mtnet.networks import DiagnosisConfig, ModelConfig, SynthesisConfig, build_model, save_checkpoint
from oracles import REFERENCE_CM, REFERENCE_METRICS, bland_altman_oracle, nrmse_oracle, pearson_oracle

DIMS = (16, 16, 8)


# -- classification ---------------------------------------------------------------


def test_reference_confusion_matrix_rates():
    m = classification_metrics(ConfusionMatrix4(REFERENCE_CM))
    for cls, expected in REFERENCE_METRICS.items():
        got = m.average if cls == "average" else m.per_class[cls]
        for k, v in expected.items():
            assert abs(got[k] - v) <= 0.01, (cls, k, got[k], v)
    assert m.undefined == []


def test_perfect_and_empty_class():
    m = classification_metrics(ConfusionMatrix4(np.diag([3, 2, 0, 1])))
    assert m.per_class["HC"]["acc"] == 100.0 and m.per_class["HC"]["mcc"] == pytest.approx(1.0)
    assert m.per_class["ICSD"]["sens"] == 0.0
    assert any("ICSD" in u for u in m.undefined)


def test_confusion_from_labels():
    cm = ConfusionMatrix4.from_labels([0, 1, 1, 3], [0, 1, 2, 3])
    assert cm.tolist() == [[1, 0, 0, 0], [0, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 1]]
    assert cm.total == 4


@pytest.mark.parametrize("bad", [np.zeros((3, 3)), -np.ones((4, 4)), np.full((4, 4), 0.5)])
def test_confusion_validation(bad):
    with pytest.raises(ValueError):
        ConfusionMatrix4(bad)


def test_mcc_against_sklearn_one_vs_rest():
    from sklearn.metrics import matthews_corrcoef

    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, 80)
    p = np.where(rng.random(80) < 0.7, y, rng.integers(0, 4, 80))
    m = classification_metrics(ConfusionMatrix4.from_labels(y, p))
    for c, name in enumerate(["HC", "MMD", "ICSD", "Stroke"]):
        assert m.per_class[name]["mcc"] == pytest.approx(matthews_corrcoef(y == c, p == c), abs=1e-12)


# -- agreement -------------------------------------------------------------------


def test_bland_altman_constant_difference():
    pairs = [(t, t - 2.5) for t in np.linspace(30, 60, 10)]
    s = bland_altman(pairs)
    assert s.bias == pytest.approx(2.5)
    assert s.loa_low == pytest.approx(2.5) and s.loa_high == pytest.approx(2.5)
    assert s.sd == pytest.approx(0.0, abs=1e-12)


def test_bland_altman_against_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        t = rng.uniform(20, 80, n)
        pairs = list(zip(t, t + rng.normal(0, 3, n)))
        s = bland_altman(pairs)
        bias, lo, hi = bland_altman_oracle(pairs)
        assert s.bias == pytest.approx(bias, rel=1e-6, abs=1e-12)
        assert s.loa_low == pytest.approx(lo, rel=1e-6) and s.loa_high == pytest.approx(hi, rel=1e-6)
    with pytest.raises(ValueError):
        bland_altman([(1.0, 2.0)])


def test_bland_altman_formatted_text():
    text = bland_altman([(50.0, 48.0), (40.0, 41.0), (45.0, 45.5)]).formatted()
    assert "ml/100g/min" in text and "bias" in text.lower()


def test_pearson_exact_linear_and_oracle():
    x = np.linspace(0, 1, 20)
    assert pearson(list(zip(x, 3 * x + 1))) == 1.0
    assert pearson(list(zip(x, -2 * x))) == -1.0
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.standard_normal(15), rng.standard_normal(15)
        assert pearson(list(zip(a, b))) == pytest.approx(pearson_oracle(a, b), rel=1e-6)
    with pytest.raises(ValueError):
        pearson(list(zip(x, np.ones(20))))


# -- image metrics ------------------------------------------------------------------


def test_nrmse_identity_and_oracle():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.5, 2, (6, 6, 4))
    assert nrmse(x, x) == 0.0
    for _ in range(100):
        x = rng.uniform(0.5, 2, (5, 4, 3))
        y = x + rng.normal(0, 0.1, x.shape)
        mask = rng.random(x.shape) < 0.7
        assert nrmse(x, y, mask) == pytest.approx(nrmse_oracle(x, y, mask), rel=1e-6)


def test_nrmse_errors_and_range_mode():
    x = np.array([1.0, 2.0, 3.0])
    y = x + 0.5
    assert nrmse(x, y, normalization="range") == pytest.approx(0.25)
    with pytest.raises(ValueError, match="empty"):
        nrmse(x, y, np.zeros(3, bool))
    with pytest.raises(ValueError):
        nrmse(np.zeros(3), y)


def test_windowed_ssim_identity():
    x = np.random.default_rng(4).uniform(0, 1, (12, 12, 6))
    assert windowed_ssim(x, x) == pytest.approx(1.0)
    assert windowed_ssim(x, x[::-1]) < 0.9


def test_image_metrics_masked():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.5, 2, (6, 6, 6))
    mask = np.zeros(x.shape, bool)
    mask[1:5, 1:5, 1:5] = True
    y = x.copy()
    y[~mask] = 100.0  # outside the mask must not count
    m = image_metrics(x, y, mask)
    assert m["ssim"] == pytest.approx(1.0) and m["nrmse"] == 0.0 and m["psnr"] == math.inf


# -- fold evaluation and reports --------------------------------------------------------


@pytest.fixture(scope="module")
def samples():
    return phantom_samples((2, 1, 1, 1), DIMS, seed=4)


def noisy_predictions(samples, seed=0):
    rng = np.random.default_rng(seed)
    cbf = np.stack([s.pet * rng.uniform(0.9, 1.1) for s in samples])
    probs = np.full((len(samples), 4), 0.1)
    for i, s in enumerate(samples):
        probs[i, s.label if i % 4 else (s.label + 1) % 4] = 0.7
    return cbf, probs


def test_evaluate_predictions(samples):
    cbf, probs = noisy_predictions(samples)
    res = evaluate_predictions(samples, cbf, probs)
    assert len(res.per_scan) == len(samples)
    assert res.confusion.total == len(samples)
    row = res.per_scan[0]
    s = samples[0]
    assert row["true_mean_cbf"] == pytest.approx(s.pet_scale * s.pet[0][s.mask].mean(), rel=1e-6)
    assert row["scan_id"] == s.record.scan_id and row["true_label"] == "HC"
    assert res.image["ssim"] == pytest.approx(np.mean([r["ssim"] for r in res.per_scan]))
    assert res.agreement.n == len(samples)
    with pytest.raises(ValueError):
        evaluate_predictions(samples, cbf[:2], probs)


def test_emit_report_files(samples, tmp_path):
    cbf, probs = noisy_predictions(samples)
    paths = emit_report(evaluate_predictions(samples, cbf, probs), tmp_path, config={"seed": 0})
    doc = json.loads(paths["metrics"].read_text())
    validate_report(doc)
    assert doc["schema_version"] == 1 and doc["config"] == {"seed": 0}
    with open(paths["per_scan"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(samples)
    assert {"scan_id", "subject_id", "true_label", "pred_label", "ssim", "psnr", "nrmse"} <= set(rows[0])
    for key in ("bland_altman", "joint_plot", "confusion_matrix"):
        root = ET.parse(paths[key]).getroot()
        assert root.tag.endswith("svg")


def test_svg_output_is_reproducible(samples, tmp_path):
    cbf, probs = noisy_predictions(samples)
    res = evaluate_predictions(samples, cbf, probs)
    a = emit_report(res, tmp_path / "a")
    b = emit_report(res, tmp_path / "b")
    for key in ("bland_altman", "joint_plot", "confusion_matrix"):
        assert a[key].read_bytes() == b[key].read_bytes()


def test_report_schema_rejects_bad_matrix():
    import jsonschema

    doc = {"schema_version": 1, "n_scans": 1, "image": {"ssim": 1, "psnr": 1, "nrmse": 0},
           "confusion_matrix": [[1, 0, 0]], "classification": {"per_class": {}, "average": {}}, "agreement": None}
    with pytest.raises(jsonschema.ValidationError):
        validate_report(doc)


def test_evaluate_fold_from_checkpoint(samples, tmp_path):
    cfg = ModelConfig(
        synthesis=SynthesisConfig(input_dims=DIMS, base_width=4, num_scales=2, spatial_kernel=3, reduction_ratio=2),
        diagnosis=DiagnosisConfig(input_dims=DIMS, path_widths=(2, 2, 2), post_widths=(4, 4), fc_hidden=8),
    )
    model = build_model(cfg)
    save_checkpoint(model, tmp_path / "m.mtck")
    a = evaluate_fold(model, samples)
    b = evaluate_fold(tmp_path / "m.mtck", samples, batch_size=2)
    assert a.image == pytest.approx(b.image, rel=1e-5)
    assert a.confusion.tolist() == b.confusion.tolist()
