import json
import math

import numpy as np
import pytest

from mtnet.autodiff import Tensor, ops, precision, sum_all
from mtnet.data import phantom_records, phantom_samples
from mtnet.data.manifest import DatasetManifest
from mtnet.losses import LossReport
from mtnet.networks import DiagnosisConfig, ModelConfig, NumericError, SynthesisConfig, build_model, load_checkpoint
from mtnet.trainer import (
    NAdamState,
    TrainConfig,
    TrainHistory,
    augment_samples,
    grid_search_weights,
    nadam_step,
    run_cross_validation,
    train,
)

DIMS = (16, 16, 8)


def tiny_cfg():
    return ModelConfig(
        synthesis=SynthesisConfig(input_dims=DIMS, base_width=4, num_scales=2, spatial_kernel=3, reduction_ratio=2),
        diagnosis=DiagnosisConfig(input_dims=DIMS, path_widths=(2, 2, 2), post_widths=(4, 4), fc_hidden=8),
    )


@pytest.fixture(scope="module")
def cohort():
    train_set = phantom_samples((1, 1, 0, 0), DIMS, seed=0)
    val_set = phantom_samples((1, 0, 0, 0), DIMS, seed=1, id_prefix="v")
    return train_set, val_set


# -- NAdam ---------------------------------------------------------------------


def test_zero_gradient_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]))}
    before = p["w"].data.copy()
    state = nadam_step(p, {"w": np.zeros(3)}, NAdamState())
    np.testing.assert_array_equal(p["w"].data, before)
    assert state.t == 1


def test_quadratic_converges():
    x = Tensor(np.array([1.0]))
    state = NAdamState(lr=0.05)
    for _ in range(500):
        nadam_step({"x": x}, {"x": 2 * x.data}, state)
    assert abs(x.data[0]) < 1e-2


def hand_nadam(x, grads, lr=2e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar NAdam with the 0.96**(0.004 t) momentum schedule."""
    m = v = 0.0
    prod = 1.0
    for t, g in enumerate(grads, start=1):
        mu = b1 * (1 - 0.5 * 0.96 ** (0.004 * t))
        mu1 = b1 * (1 - 0.5 * 0.96 ** (0.004 * (t + 1)))
        prod *= mu
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mbar = (1 - mu) * g / (1 - prod) + mu1 * m / (1 - prod * mu1)
        x -= lr * mbar / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_matches_hand_stepped_reference():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(5)
        grads = rng.standard_normal((3, 5))
        p = {"w": Tensor(x0.copy())}
        state = NAdamState(lr=0.01)
        nadam_step(p, {"w": grads[0]}, state)
        for i in range(5):
            assert p["w"].data[i] == pytest.approx(hand_nadam(x0[i], grads[:1, i], lr=0.01), abs=1e-10)
        for g in grads[1:]:
            nadam_step(p, {"w": g}, state)
        for i in range(5):
            assert p["w"].data[i] == pytest.approx(hand_nadam(x0[i], grads[:, i], lr=0.01), abs=1e-10)
    assert np.all(state.v["w"] >= 0)


@pytest.mark.parametrize("lr", [1e-4, 1e-3])
def test_convex_probe_strictly_decreases(lr):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((6, 4))
    target = rng.standard_normal(6)
    w = Tensor(np.zeros((4, 1)), requires_grad=True)
    state = NAdamState(lr=lr)
    losses = []
    for _ in range(51):
        w.grad = None
        r = ops.sub(ops.dense(Tensor(a), w), Tensor(target[:, None]))
        loss = sum_all(ops.mul(r, r))
        loss.backward()
        losses.append(loss.item())
        nadam_step({"w": w}, None, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_finite_gradient_names_parameter_and_leaves_params():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    state = NAdamState()
    with pytest.raises(NumericError) as info:
        nadam_step(p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state)
    assert info.value.term == "b"
    np.testing.assert_array_equal(p["a"].data, 1.0)
    assert state.t == 0


def test_gradient_clipping_scales_step():
    p1, p2 = {"w": Tensor(np.zeros(2))}, {"w": Tensor(np.zeros(2))}
    nadam_step(p1, {"w": np.array([300.0, 400.0])}, NAdamState(), grad_clip=5.0)
    nadam_step(p2, {"w": np.array([3.0, 4.0])}, NAdamState())
    np.testing.assert_allclose(p1["w"].data, p2["w"].data)


# -- config ------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"patience": 0}, {"patience": 150}, {"batch_size": 0}, {"lr": 0.0}])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_round_trip():
    cfg = TrainConfig(lr=1e-3, max_epochs=9, patience=3, seed=4)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- training loop -------------------------------------------------------------------


def scripted(values):
    it = iter(values)

    def evaluate(model, samples):
        v = next(it)
        return LossReport(v, v, 0.0, 0.0, 0.0, v, v)
    return evaluate


@pytest.mark.parametrize("patience", [1, 3])
def test_stops_patience_plus_one_after_worsening(cohort, patience):
    train_set, val_set = cohort
    model = build_model(tiny_cfg())
    curve = [5.0, 4.0, 3.0] + [3.0 + i for i in range(1, 20)]
    cfg = TrainConfig(max_epochs=20, patience=patience, batch_size=4)
    hist = train(model, train_set, val_set, cfg, evaluate=scripted(curve))
    assert hist.best_epoch == 2
    assert len(hist) == hist.best_epoch + patience + 1
    assert hist.stop_reason == "early_stopping"
    assert hist.best_val == min(hist.column("val", "l_global"))


def test_strictly_worsening_from_start(cohort):
    train_set, val_set = cohort
    hist = train(build_model(tiny_cfg()), train_set, val_set, TrainConfig(max_epochs=10, patience=2),
                 evaluate=scripted([float(i) for i in range(10)]))
    assert len(hist) == 3 and hist.best_epoch == 0


def test_restores_best_parameters_and_checkpoint(cohort, tmp_path):
    train_set, val_set = cohort
    model = build_model(tiny_cfg())
    ckpt = tmp_path / "best.mtck"
    snapshots = []

    def evaluate(m, s):
        snapshots.append(m.state())
        v = [2.0, 1.0, 3.0, 4.0][len(snapshots) - 1]
        return LossReport(v, v, 0, 0, 0, v, v)

    hist = train(model, train_set, val_set, TrainConfig(max_epochs=4, patience=2), evaluate, ckpt)
    assert hist.best_epoch == 1 and len(hist) == 4
    best = snapshots[1]
    assert all(np.array_equal(model.params[k].data, best[k]) for k in best)
    loaded = load_checkpoint(ckpt)
    assert all(np.array_equal(loaded.params[k].data, best[k]) for k in best)


def test_max_epochs_stop_reason(cohort):
    train_set, val_set = cohort
    hist = train(build_model(tiny_cfg()), train_set, val_set, TrainConfig(max_epochs=3, patience=2),
                 evaluate=scripted([3.0, 2.0, 1.0]))
    assert hist.stop_reason == "max_epochs" and len(hist) == 3


def test_deterministic_history(cohort, tmp_path):
    train_set, val_set = cohort
    cfg = TrainConfig(max_epochs=2, patience=1, seed=3)
    a = train(build_model(tiny_cfg(), seed=1), train_set, val_set, cfg).to_csv()
    b = train(build_model(tiny_cfg(), seed=1), train_set, val_set, cfg).to_csv()
    assert a == b
    assert a.splitlines()[0].startswith("epoch,split,")
    assert len(a.splitlines()) == 1 + 2 * 2


def test_real_training_reduces_loss(cohort):
    train_set, val_set = cohort
    hist = train(build_model(tiny_cfg()), train_set, val_set, TrainConfig(lr=2e-3, max_epochs=6, patience=5))
    tr = hist.column("train", "mse")
    assert tr[-1] < tr[0]


def test_rejects_overlap_and_empty(cohort):
    train_set, _ = cohort
    with pytest.raises(ValueError, match="shares subjects"):
        train(build_model(tiny_cfg()), train_set, train_set[:1], TrainConfig(max_epochs=2, patience=1))
    with pytest.raises(ValueError, match="non-empty"):
        train(build_model(tiny_cfg()), train_set, [], TrainConfig(max_epochs=2, patience=1))


def test_non_finite_aborts_and_restores(cohort, tmp_path):
    train_set, val_set = cohort
    model = build_model(tiny_cfg())
    ckpt = tmp_path / "c.mtck"
    calls = []

    def evaluate(m, s):
        calls.append(m.state())
        return LossReport(*([1.0] * 5), 1.0, 1.0) if len(calls) == 1 else LossReport(*([np.nan] * 7))

    with pytest.raises(NumericError):
        train(model, train_set, val_set, TrainConfig(max_epochs=5, patience=2), evaluate, ckpt)
    good = calls[0]
    assert all(np.array_equal(model.params[k].data, good[k]) for k in good)
    assert ckpt.exists()


def test_augment_samples_eightfold(cohort):
    train_set, _ = cohort
    out = augment_samples(train_set[:2])
    assert len(out) == 16
    assert all(o.label == train_set[i // 8].label for i, o in enumerate(out))
    np.testing.assert_array_equal(out[0].mri, train_set[0].mri)


def test_history_csv_written(tmp_path):
    r = LossReport(1.0, 2.0, 0.5, 30.0, -1.0, 0.2, -0.8)
    from mtnet.trainer import EpochRecord

    h = TrainHistory([EpochRecord(0, r, r)], 0, "max_epochs")
    h.to_csv(tmp_path / "h.csv")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "epoch,split," + ",".join(LossReport.FIELDS)
    assert rows[1].startswith("0,train,") and rows[2].startswith("0,val,")


def test_grid_search_ranks_by_score(cohort):
    train_set, val_set = cohort
    grid = [(1.0, 0.0, 0.0, 0.0), (0.15, 0.15, 0.6, 0.2)]
    scores = iter([0.2, 0.7])
    pts = grid_search_weights(grid, train_set, val_set, tiny_cfg(), TrainConfig(max_epochs=2, patience=1),
                              score=lambda m, s: next(scores))
    assert [p.score for p in pts] == [0.7, 0.2]
    assert pts[0].weights.w3 == 0.6 and pts[1].weights.w1 == 1.0
    assert all(len(p.history) == 2 for p in pts)
    with pytest.raises(ValueError):
        grid_search_weights([], train_set, val_set, tiny_cfg(), TrainConfig(max_epochs=2, patience=1))


def test_grid_search_default_score_is_ssim(cohort):
    train_set, val_set = cohort
    pts = grid_search_weights([(0.15, 0.15, 0.6, 0.2)], train_set, val_set, tiny_cfg(),
                              TrainConfig(max_epochs=2, patience=1))
    assert -1.0 <= pts[0].score <= 1.0


# -- cross-validation ---------------------------------------------------------------


def test_cross_validation_reassembles(tmp_path):
    samples = phantom_samples((4, 4, 1, 1), DIMS, seed=5)
    manifest = DatasetManifest(phantom_records((4, 4, 1, 1)))
    cv = run_cross_validation(manifest, tiny_cfg(), TrainConfig(max_epochs=2, patience=1), tmp_path, k=4,
                              samples=samples)
    assert len(cv.histories) == 4
    tested = sorted(r.scan_id for f in cv.folds for r in f.test)
    assert tested == sorted(s.record.scan_id for s in samples)
    summary = json.loads((tmp_path / "cv_summary.json").read_text())
    assert summary["leakage_violations"] == 0 and summary["n_folds"] == 4
    for i in range(4):
        assert (tmp_path / f"fold{i}" / "best.mtck").exists()
        assert (tmp_path / f"fold{i}" / "report" / "metrics.json").exists()
    for key in ("ssim", "acc"):
        m = summary["metrics"][key]
        assert len(m["values"]) == 4
        assert abs(m["mean"] - sum(m["values"]) / 4) <= 1e-9
    assert [c.name for c in cv.checkpoints] == ["best.mtck"] * 4
