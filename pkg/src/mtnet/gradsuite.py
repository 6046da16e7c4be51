"""Registry of finite-difference gradient checks over every differentiable op.

Each case builds a scalar function of one input tensor from a seeded RNG
and a shape index; :func:`run_suite` evaluates them in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, losses
from .autodiff import ops
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Tensor, precision

OP_TOL = 1e-4
MODEL_TOL = 1e-3
N_SHAPES = 3


@dataclass(frozen=True)
class GradCase:
    name: str
    scope: str  # "ops", "losses", "attention" or "model"
    build: Callable[[np.random.Generator, int], tuple[Callable[[Tensor], Tensor], Tensor]]
    tol: float = OP_TOL
    eps: float = 1e-5
    n_samples: int | None = 24


@dataclass
class GradResult:
    name: str
    scope: str
    shape: tuple
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _away(rng, shape, gap=0.2):
    """Random values kept at least ``gap`` away from zero (kinks of relu/abs)."""
    v = rng.uniform(gap, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


VEC_SHAPES = [(5,), (3, 4), (2, 3, 4)]
VOL_SHAPES = [(1, 2, 4, 4, 4), (2, 3, 4, 6, 4), (1, 1, 6, 4, 8)]


def _unary(fn, positive=False, gap=0.2):
    def build(rng, i):
        shape = VEC_SHAPES[i]
        x = _t(rng.uniform(0.5, 2.0, shape) if positive else _away(rng, shape, gap))
        w = rng.standard_normal(shape)
        return (lambda t: ops.sum_all(ops.mul(fn(t), _t(w)))), x
    return build


def _binary(fn, divisor=False):
    def build(rng, i):
        shape = VEC_SHAPES[i]
        other = _t(rng.uniform(0.5, 2.0, shape) if divisor else rng.standard_normal(shape))
        w = _t(rng.standard_normal(shape))
        x = _t(rng.standard_normal(shape))
        return (lambda t: ops.sum_all(ops.mul(fn(other, t) if divisor else fn(t, other), w))), x
    return build


def _conv(i_param: str):
    configs = [((1, 2, 5, 5, 5), 3, 3, 1, 1), ((2, 2, 6, 5, 4), 2, 3, 2, 1), ((1, 3, 4, 4, 4), 4, 1, 1, 0)]

    def build(rng, i):
        shape, f, k, stride, pad = configs[i]
        x = _t(rng.standard_normal(shape))
        kern = _t(0.3 * rng.standard_normal((f, shape[1], k, k, k)))
        bias = _t(rng.standard_normal(f))
        w = None

        def fn(t):
            nonlocal w
            args = {"x": (t, kern, bias), "kernel": (x, t, bias), "bias": (x, kern, t)}[i_param]
            out = ops.conv3d(*args, stride=stride, padding=pad)
            if w is None:
                w = _t(rng.standard_normal(out.shape))
            return ops.sum_all(ops.mul(out, w))

        return fn, {"x": x, "kernel": kern, "bias": bias}[i_param]
    return build


def _volume(fn, shapes=VOL_SHAPES):
    def build(rng, i):
        x = _t(rng.standard_normal(shapes[i]))
        w = None

        def f(t):
            nonlocal w
            out = fn(t)
            if w is None:
                w = _t(rng.standard_normal(out.shape))
            return ops.sum_all(ops.mul(out, w))

        return f, x
    return build


def _dense(which):
    shapes = [(2, 3, 4), (5, 6, 2), (1, 8, 8)]

    def build(rng, i):
        n, k, m = shapes[i]
        x, wt, b = _t(rng.standard_normal((n, k))), _t(rng.standard_normal((k, m))), _t(rng.standard_normal(m))
        probe = _t(rng.standard_normal((n, m)))
        f = lambda t: ops.sum_all(ops.mul(ops.dense(*{"x": (t, wt, b), "w": (x, t, b), "b": (x, wt, t)}[which]), probe))  # noqa: E731
        return f, {"x": x, "w": wt, "b": b}[which]
    return build


def _softmax(rng, i):
    shape = [(1, 4), (3, 4), (5, 7)][i]
    w = _t(rng.standard_normal(shape))
    return (lambda t: ops.sum_all(ops.mul(ops.softmax(t), w))), _t(rng.standard_normal(shape))


def _concat(rng, i):
    shape = VOL_SHAPES[i]
    other = _t(rng.standard_normal(shape))
    w = _t(rng.standard_normal((shape[0], 2 * shape[1]) + shape[2:]))
    return (lambda t: ops.sum_all(ops.mul(ops.concat_channels(t, other), w))), _t(rng.standard_normal(shape))


def _loss_pair(fn, positive=True):
    shapes = [(4, 4, 4), (6, 5, 4), (8, 8, 2)]

    def build(rng, i):
        y = _t(rng.uniform(0.2, 2.0, shapes[i]))
        x = _t(y.data + 0.3 * _away(rng, shapes[i], 0.1))
        return (lambda t: fn(y, t)), x
    return build


def _cls_loss(rng, i):
    n = [1, 3, 6][i]
    labels = np.eye(4)[rng.integers(0, 4, n)]
    logits = _t(rng.standard_normal((n, 4)))
    return (lambda t: losses.classification_loss(ops.softmax(t), labels)), logits


def _attention(kind):
    shapes = [(1, 4, 4, 4, 4), (2, 8, 4, 6, 4), (1, 4, 6, 4, 8)]

    def build(rng, i):
        shape = shapes[i]
        cp = attention.init_channel_attention(shape[1], 2, rng, dtype=np.float64)
        sp = attention.init_spatial_attention(3, rng, dtype=np.float64)
        fn = {
            "channel": lambda t: attention.channel_attention(t, cp),
            "spatial": lambda t: attention.spatial_attention(t, sp),
            "block": lambda t: attention.attention_block(t, cp, sp),
        }[kind]
        return _volume(fn, shapes)(rng, i)
    return build


def _model_case(rng, i):
    from .networks import DiagnosisConfig, ModelConfig, SynthesisConfig, build_model, compute_losses

    dims = [(8, 8, 8), (16, 8, 8), (8, 16, 8)][i]
    cfg = ModelConfig(
        synthesis=SynthesisConfig(input_dims=dims, base_width=4, num_scales=2, spatial_kernel=3, reduction_ratio=2),
        diagnosis=DiagnosisConfig(input_dims=dims, path_widths=(2, 2, 2), post_widths=(4, 4), fc_hidden=8),
        shared_stem=(i == 2), stem_width=4,
    )
    model = build_model(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    mri = rng.uniform(0.2, 2.0, (2, 8) + dims)
    pet = rng.uniform(0.2, 2.0, (2, 1) + dims)
    labels = rng.integers(0, 4, 2)
    names = list(model.params)
    target = names[int(rng.integers(len(names)))] if i else "syn.enc0.conv1.w"
    return (lambda t: compute_losses(model, mri, pet, labels)[0]), model.params[target]


REGISTRY: list[GradCase] = [
    GradCase("add", "ops", _binary(ops.add)),
    GradCase("sub", "ops", _binary(ops.sub)),
    GradCase("mul", "ops", _binary(ops.mul)),
    GradCase("div", "ops", _binary(ops.div, divisor=True)),
    GradCase("scale", "ops", _unary(lambda t: ops.scale(t, -1.7))),
    GradCase("square", "ops", _unary(ops.square)),
    GradCase("abs", "ops", _unary(ops.abs_)),
    GradCase("log", "ops", _unary(ops.log, positive=True)),
    GradCase("clamp_min", "ops", _unary(lambda t: ops.clamp_min(t, 0.0))),
    GradCase("relu", "ops", _unary(ops.relu)),
    GradCase("sigmoid", "ops", _unary(ops.sigmoid)),
    GradCase("softmax", "ops", _softmax),
    GradCase("sum_all", "ops", _unary(lambda t: ops.scale(ops.sum_all(t), 1.0))),
    GradCase("mean_all", "ops", _unary(ops.mean_all)),
    GradCase("mean_axis", "ops", _volume(lambda t: ops.mean_axis(t, 1))),
    GradCase("max_axis", "ops", _volume(lambda t: ops.max_axis(t, 1))),
    GradCase("reshape", "ops", _volume(lambda t: ops.reshape(t, (t.shape[0], -1)))),
    GradCase("flatten", "ops", _volume(ops.flatten)),
    GradCase("select", "ops", _volume(lambda t: ops.select(t, 0))),
    GradCase("concat_channels", "ops", _concat),
    GradCase("broadcast_mul_channels", "ops",
             _volume(lambda t: ops.broadcast_mul_channels(t, ops.sigmoid(ops.global_avg_pool(t))))),
    GradCase("dense.x", "ops", _dense("x")),
    GradCase("dense.w", "ops", _dense("w")),
    GradCase("dense.b", "ops", _dense("b")),
    GradCase("conv3d.x", "ops", _conv("x")),
    GradCase("conv3d.kernel", "ops", _conv("kernel")),
    GradCase("conv3d.bias", "ops", _conv("bias")),
    GradCase("upsample3d_nearest", "ops", _volume(ops.upsample3d_nearest)),
    GradCase("avgpool3d", "ops", _volume(ops.avgpool3d)),
    GradCase("maxpool3d", "ops", _volume(ops.maxpool3d)),
    GradCase("global_avg_pool", "ops", _volume(ops.global_avg_pool)),
    GradCase("global_max_pool", "ops", _volume(ops.global_max_pool)),
    GradCase("mse", "losses", _loss_pair(losses.mse)),
    GradCase("mae", "losses", _loss_pair(losses.mae)),
    GradCase("ssim_global", "losses",
             _loss_pair(lambda y, t: losses.ssim_global(y, t, losses.SSIMConstants.from_reference(y)))),
    GradCase("psnr", "losses", _loss_pair(lambda y, t: losses.psnr(y, t, float(y.data.max())))),
    GradCase("translation_loss", "losses", _loss_pair(losses.translation_loss)),
    GradCase("classification_loss", "losses", _cls_loss),
    GradCase("channel_attention", "attention", _attention("channel")),
    GradCase("spatial_attention", "attention", _attention("spatial")),
    GradCase("attention_block", "attention", _attention("block")),
    GradCase("l_global", "model", _model_case, tol=MODEL_TOL, eps=1e-6, n_samples=12),
]

SCOPES = ("ops", "losses", "attention", "model")


def run_suite(scope: str = "all", seed: int = 0, n_shapes: int = N_SHAPES) -> list[GradResult]:
    """Run every registered case in ``scope`` ("all" or one of :data:`SCOPES`)."""
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected 'all' or one of {SCOPES}")
    results = []
    with precision(np.float64):
        for ci, case in enumerate(REGISTRY):
            if scope != "all" and case.scope != scope:
                continue
            for i in range(n_shapes):
                rng = np.random.default_rng([seed, ci, i])
                f, x = case.build(rng, i)
                err = grad_check(f, x, eps=case.eps, n_samples=case.n_samples, seed=seed + i)
                results.append(GradResult(case.name, case.scope, x.shape, err, case.tol))
    return results


def format_table(results: list[GradResult]) -> str:
    lines = [f"{'op':<24} {'scope':<10} {'shape':<20} {'rel_err':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.scope:<10} {str(r.shape):<20} {r.rel_err:>10.2e}  {'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)
