import numpy as np
import pytest

from mtnet.autodiff import ShapeError, Tensor, grad_check, precision
from mtnet.losses import LossWeights
from mtnet.networks import (
    CheckpointError,
    ClassLabel,
    DiagnosisConfig,
    ModelConfig,
    NumericError,
    SynthesisConfig,
    build_diagnosis,
    build_model,
    build_synthesis,
    compute_losses,
    diagnosis_features,
    forward_diagnosis,
    forward_multitask,
    forward_synthesis,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_step,
)

DIMS = (8, 8, 8)


def small_cfg(shared_stem=False, dims=DIMS):
    return ModelConfig(
        synthesis=SynthesisConfig(input_dims=dims, base_width=4, num_scales=2, spatial_kernel=3, reduction_ratio=2),
        diagnosis=DiagnosisConfig(input_dims=dims, path_widths=(2, 3, 4), post_widths=(4, 4), fc_hidden=8),
        shared_stem=shared_stem, stem_width=4,
    )


def batch(n=2, dims=DIMS, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0.2, 2.0, (n, 8) + dims).astype(np.float32),
            rng.uniform(0.2, 2.0, (n, 1) + dims).astype(np.float32),
            rng.integers(0, 4, n))


def test_class_labels_are_fixed():
    assert [c.name for c in ClassLabel] == ["HC", "MMD", "ICSD", "Stroke"]
    assert [int(c) for c in ClassLabel] == [0, 1, 2, 3]
    assert ClassLabel.parse("stroke") is ClassLabel.Stroke
    with pytest.raises(ValueError):
        ClassLabel.parse("tumour")


def test_synthesis_same_seed_bitwise_identical():
    cfg = small_cfg().resolved().synthesis
    a, b = build_synthesis(cfg, 3), build_synthesis(cfg, 3)
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def test_synthesis_parameter_count_by_hand():
    cfg = small_cfg().resolved().synthesis
    p = build_synthesis(cfg, 0)
    conv = lambda f, c, k=3: f * c * k**3 + f  # noqa: E731
    att = lambda c: (c * (c // 2) + c // 2 + (c // 2) * c + c) + (2 * 27 + 1)  # noqa: E731
    expected = (
        conv(4, 8) + conv(4, 4) + att(4)          # encoder scale 0
        + conv(8, 4) + conv(8, 8) + att(8)        # encoder scale 1
        + conv(4, 8) + att(4) + conv(4, 8) + conv(4, 4)  # decoder scale 0 with gated skip
        + conv(1, 4, 1)                           # head
    )
    assert sum(t.size for t in p.values()) == expected


def test_synthesis_single_scale_keeps_dims():
    cfg = SynthesisConfig(input_dims=(6, 5, 3), base_width=4, num_scales=1, spatial_kernel=3, reduction_ratio=2)
    p = build_synthesis(cfg, 0)
    out = forward_synthesis(p, Tensor(np.ones((1, 8, 6, 5, 3), np.float32)), cfg)
    assert out.shape == (1, 1, 6, 5, 3)


def test_synthesis_rejects_indivisible_dims():
    with pytest.raises(ValueError, match="divisible"):
        build_synthesis(SynthesisConfig(input_dims=(30, 32, 16), num_scales=3), 0)


def test_synthesis_desk_scale_shape_and_non_negative():
    cfg = SynthesisConfig(input_dims=(32, 32, 16), base_width=4)
    p = build_synthesis(cfg, 0)
    x = np.random.default_rng(0).standard_normal((2, 8, 32, 32, 16)).astype(np.float32)
    out = forward_synthesis(p, Tensor(x), cfg)
    assert out.shape == (2, 1, 32, 32, 16)
    assert np.all(out.data >= 0)


def test_synthesis_rejects_wrong_channels():
    cfg = small_cfg().resolved().synthesis
    with pytest.raises(ShapeError):
        forward_synthesis(build_synthesis(cfg, 0), Tensor(np.zeros((1, 7) + DIMS, np.float32)), cfg)


def test_diagnosis_softmax_rows_and_feature_width():
    cfg = small_cfg().resolved().diagnosis
    p = build_diagnosis(cfg, 0)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 8) + DIMS).astype(np.float32))
    probs = forward_diagnosis(p, x, cfg).data
    assert probs.shape == (3, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(probs > 0)
    assert diagnosis_features(p, x, cfg).shape[1] == 2 + 3 + 4


def test_diagnosis_has_three_paths_and_two_dense_layers():
    with pytest.raises(ValueError, match="three"):
        DiagnosisConfig(kernel_sizes=(3, 5), path_widths=(8, 8)).validate()
    p = build_diagnosis(small_cfg().resolved().diagnosis, 0)
    assert {k.split(".")[0] for k in p if k.startswith("fc")} == {"fc1", "fc2"}
    assert {k.split(".")[0] for k in p if k.startswith("path")} == {"path0", "path1", "path2"}


def test_multitask_shapes():
    model = build_model(small_cfg())
    cbf, probs = forward_multitask(model, batch()[0])
    assert cbf.shape == (2, 1) + DIMS and probs.shape == (2, 4)


def test_separate_branches_are_independent():
    model = build_model(small_cfg())
    mri = batch()[0]
    before = predict(model, mri)[0]
    for name, t in model.named_parameters():
        if name.startswith("dx."):
            t.data += 0.5
    after_cbf, _ = predict(model, mri)
    np.testing.assert_array_equal(before, after_cbf)


def test_shared_stem_couples_both_outputs():
    model = build_model(small_cfg(shared_stem=True))
    mri = batch()[0]
    c0, p0 = predict(model, mri)
    model.params["stem.conv.w"].data *= 1.5
    c1, p1 = predict(model, mri)
    assert not np.allclose(c0, c1) and not np.allclose(p0, p1)


def test_build_model_deterministic_parameter_count():
    a, b = build_model(small_cfg(), seed=5), build_model(small_cfg(), seed=5)
    assert a.num_parameters() == b.num_parameters()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_train_step_report_and_purity():
    model = build_model(small_cfg())
    b = batch()
    r1 = train_step(model, b)
    r2 = train_step(model, b)
    assert r1 == r2
    assert r1.l_global == pytest.approx(r1.l_trans + r1.l_class, abs=1e-6)
    assert all(t.grad is not None and np.all(np.isfinite(t.grad)) for t in model.parameters())


def test_live_global_loss_equals_sum():
    model = build_model(small_cfg())
    l_global, report = compute_losses(model, *batch())
    assert l_global.item() == pytest.approx(report.l_trans + report.l_class, abs=1e-6)


def test_full_graph_gradient():
    with precision(np.float64):
        model = build_model(small_cfg(), seed=2, dtype=np.float64)
        mri, pet, labels = batch(seed=3)
        mri, pet = mri.astype(np.float64), pet.astype(np.float64)
        rng = np.random.default_rng(4)
        names = rng.choice(list(model.params), 5, replace=False)
        for name in names:
            err = grad_check(lambda _: compute_losses(model, mri, pet, labels)[0], model.params[name],
                             eps=1e-6, n_samples=6)
            assert err < 1e-3, name


def test_non_finite_loss_names_the_term():
    model = build_model(small_cfg())
    mri, pet, labels = batch()
    pet[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        compute_losses(model, mri, pet, labels)
    assert info.value.term == "l_trans"


def test_checkpoint_round_trip(tmp_path):
    model = build_model(small_cfg(shared_stem=True), seed=9, weights=LossWeights(w4=0.1))
    path = tmp_path / "m.mtck"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MTCK"
    loaded = load_checkpoint(path)
    assert loaded.config == model.config.resolved()
    assert loaded.weights == model.weights
    assert list(loaded.params) == list(model.params)
    for k in model.params:
        assert loaded.params[k].data.tobytes() == model.params[k].data.tobytes()


def test_checkpoint_errors(tmp_path):
    model = build_model(small_cfg())
    path = tmp_path / "m.mtck"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "bad.mtck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.mtck")
    (tmp_path / "short.mtck").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.mtck")
