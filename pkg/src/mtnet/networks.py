"""PET-synthesis and diagnosis branches and the joint multi-task model.

Branch parameters are flat ``dict[str, Tensor]`` in declaration order, so a
checkpoint is just the config plus every tensor in that order.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import (
    ChannelAttentionParams,
    SpatialAttentionParams,
    attention_block,
    init_channel_attention,
    init_spatial_attention,
)
from .autodiff import ops
from .autodiff.tensor import Tensor, backward, get_default_dtype, no_grad
from .losses import LossReport, LossWeights, SSIMConstants, classification_loss, translation_loss

Params = dict[str, Tensor]


class ClassLabel(enum.IntEnum):
    HC = 0
    MMD = 1
    ICSD = 2
    Stroke = 3

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            for member in cls:
                if member.name.lower() == value.lower():
                    return member
            raise ValueError(f"unknown class label {value!r}; expected one of {[m.name for m in cls]}")
        return cls(int(value))


NUM_CLASSES = len(ClassLabel)


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite; ``term`` names the culprit."""

    def __init__(self, term: str, message: str | None = None):
        super().__init__(message or f"non-finite value in {term}")
        self.term = term


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# configs


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


@dataclass
class SynthesisConfig:
    in_channels: int = 8
    input_dims: tuple[int, int, int] = (32, 32, 16)
    base_width: int = 16
    num_scales: int = 3
    kernel_size: int = 3
    attention_encoder: bool = True
    attention_skip: bool = True
    reduction_ratio: int = 4
    spatial_kernel: int = 7
    attention_pooling: str = "both"
    attention_order: str = "channel_spatial"

    def widths(self) -> list[int]:
        return [self.base_width * 2**s for s in range(self.num_scales)]

    def validate(self) -> None:
        if self.num_scales < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ValueError("num_scales, base_width and in_channels must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        step = 2 ** (self.num_scales - 1)
        if any(d % step for d in self.input_dims):
            raise ValueError(
                f"input dims {tuple(self.input_dims)} not divisible by 2^(num_scales-1) = {step}"
            )
        if self.attention_encoder or self.attention_skip:
            for w in self.widths():
                if w % self.reduction_ratio:
                    raise ValueError(f"width {w} not divisible by reduction_ratio {self.reduction_ratio}")


@dataclass
class DiagnosisConfig:
    in_channels: int = 8
    input_dims: tuple[int, int, int] = (32, 32, 16)
    kernel_sizes: tuple[int, int, int] = (3, 5, 7)
    path_widths: tuple[int, int, int] = (8, 8, 8)
    path_stride: int = 2
    post_widths: tuple[int, ...] = (16, 16)
    fc_hidden: int = 32
    num_classes: int = NUM_CLASSES

    def path_output_dims(self) -> tuple[int, int, int]:
        return tuple((d - 1) // self.path_stride + 1 for d in self.input_dims)

    def flat_features(self) -> int:
        dims = self.path_output_dims()
        for _ in self.post_widths:
            dims = tuple(d // 2 for d in dims)
        width = self.post_widths[-1] if self.post_widths else sum(self.path_widths)
        return width * int(np.prod(dims))

    def validate(self) -> None:
        if len(self.kernel_sizes) != 3 or len(self.path_widths) != 3:
            raise ValueError("the diagnosis branch has exactly three parallel paths")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"path kernel sizes must be odd, got {self.kernel_sizes}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        dims = self.path_output_dims()
        for _ in self.post_widths:
            if any(d % 2 for d in dims):
                raise ValueError(f"post-concat pooling needs even dims, got {dims}")
            dims = tuple(d // 2 for d in dims)


@dataclass
class ModelConfig:
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    diagnosis: DiagnosisConfig = field(default_factory=DiagnosisConfig)
    shared_stem: bool = False
    stem_width: int = 8
    mri_channels: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        syn = _from_dict(SynthesisConfig, d.pop("synthesis", {}))
        dx = _from_dict(DiagnosisConfig, d.pop("diagnosis", {}))
        return cls(synthesis=syn, diagnosis=dx, **d)

    def resolved(self) -> "ModelConfig":
        """Copy with branch input channels wired to the stem (or the raw MRI)."""
        width = self.stem_width if self.shared_stem else self.mri_channels
        syn = SynthesisConfig(**{**asdict(self.synthesis), "in_channels": width})
        dx = DiagnosisConfig(**{**asdict(self.diagnosis), "in_channels": width})
        syn.input_dims = tuple(syn.input_dims)
        dx.input_dims = tuple(dx.input_dims)
        return ModelConfig(syn, dx, self.shared_stem, self.stem_width, self.mri_channels)


# ---------------------------------------------------------------------------
# parameter initialisation


def _conv_param(rng, f, c, k, dtype) -> tuple[Tensor, Tensor]:
    std = np.sqrt(2.0 / (c * k**3))
    w = rng.normal(0.0, std, (f, c, k, k, k)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(f, dtype), requires_grad=True)


def _dense_param(rng, k, m, dtype, gain=2.0) -> tuple[Tensor, Tensor]:
    w = rng.normal(0.0, np.sqrt(gain / k), (k, m)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(m, dtype), requires_grad=True)


def _add_conv(p: Params, name: str, rng, f, c, k, dtype) -> None:
    p[f"{name}.w"], p[f"{name}.b"] = _conv_param(rng, f, c, k, dtype)


def _add_attention(p: Params, name: str, cfg: SynthesisConfig, channels: int, rng, dtype) -> None:
    ca = init_channel_attention(channels, cfg.reduction_ratio, rng, cfg.attention_pooling, dtype)
    sa = init_spatial_attention(cfg.spatial_kernel, rng, dtype)
    for k, t in ca.tensors().items():
        p[f"{name}.ca.{k}"] = t
    for k, t in sa.tensors().items():
        p[f"{name}.sa.{k}"] = t


def _attention(p: Params, name: str, cfg: SynthesisConfig, x: Tensor) -> Tensor:
    ca = ChannelAttentionParams(
        p[f"{name}.ca.mlp1.w"], p[f"{name}.ca.mlp1.b"], p[f"{name}.ca.mlp2.w"], p[f"{name}.ca.mlp2.b"],
        cfg.reduction_ratio, cfg.attention_pooling,
    )
    sa = SpatialAttentionParams(p[f"{name}.sa.conv.w"], p[f"{name}.sa.conv.b"])
    return attention_block(x, ca, sa, cfg.attention_order)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def build_synthesis(cfg: SynthesisConfig, seed, dtype=None) -> Params:
    """Encoder-decoder with skip connections and optional attention gates."""
    cfg.validate()
    dtype = dtype or get_default_dtype()
    rng = _rng(seed)
    k = cfg.kernel_size
    widths = cfg.widths()
    p: Params = {}
    c_in = cfg.in_channels
    for s, w in enumerate(widths):
        _add_conv(p, f"enc{s}.conv1", rng, w, c_in, k, dtype)
        _add_conv(p, f"enc{s}.conv2", rng, w, w, k, dtype)
        if cfg.attention_encoder:
            _add_attention(p, f"enc{s}.att", cfg, w, rng, dtype)
        c_in = w
    for s in range(cfg.num_scales - 2, -1, -1):
        w = widths[s]
        _add_conv(p, f"dec{s}.up", rng, w, widths[s + 1], k, dtype)
        if cfg.attention_skip:
            _add_attention(p, f"skip{s}.att", cfg, w, rng, dtype)
        _add_conv(p, f"dec{s}.conv1", rng, w, 2 * w, k, dtype)
        _add_conv(p, f"dec{s}.conv2", rng, w, w, k, dtype)
    _add_conv(p, "head", rng, 1, widths[0], 1, dtype)
    # positive head bias keeps the final ReLU alive at initialisation
    p["head.b"].data[:] = 0.1
    return p


def _conv_relu(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[f"{name}.w"]
    return ops.relu(ops.conv3d(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2))


def _check_input(x: Tensor, channels: int, dims, what: str) -> None:
    if x.ndim != 5 or x.shape[1] != channels or tuple(x.shape[2:]) != tuple(dims):
        raise ops.ShapeError(
            f"{what}: expected (N, {channels}, {', '.join(map(str, dims))}), got {x.shape}"
        )


def forward_synthesis(params: Params, mri: Tensor, cfg: SynthesisConfig) -> Tensor:
    _check_input(mri, cfg.in_channels, cfg.input_dims, "forward_synthesis")
    h = mri
    skips = []
    for s in range(cfg.num_scales):
        if s > 0:
            h = ops.maxpool3d(h, 2)
        h = _conv_relu(params, f"enc{s}.conv1", h)
        h = _conv_relu(params, f"enc{s}.conv2", h)
        if cfg.attention_encoder:
            h = _attention(params, f"enc{s}.att", cfg, h)
        skips.append(h)
    for s in range(cfg.num_scales - 2, -1, -1):
        h = _conv_relu(params, f"dec{s}.up", ops.upsample3d_nearest(h, 2))
        skip = skips[s]
        if cfg.attention_skip:
            skip = _attention(params, f"skip{s}.att", cfg, skip)
        h = ops.concat_channels(skip, h)
        h = _conv_relu(params, f"dec{s}.conv1", h)
        h = _conv_relu(params, f"dec{s}.conv2", h)
    return ops.relu(ops.conv3d(h, params["head.w"], params["head.b"]))


def build_diagnosis(cfg: DiagnosisConfig, seed, dtype=None) -> Params:
    """Three parallel convolution paths, concat, conv/pool stack, two dense layers."""
    cfg.validate()
    dtype = dtype or get_default_dtype()
    rng = _rng(seed)
    p: Params = {}
    for i, (k, w) in enumerate(zip(cfg.kernel_sizes, cfg.path_widths)):
        _add_conv(p, f"path{i}", rng, w, cfg.in_channels, k, dtype)
    c_in = sum(cfg.path_widths)
    for j, w in enumerate(cfg.post_widths):
        _add_conv(p, f"post{j}", rng, w, c_in, 3, dtype)
        c_in = w
    p["fc1.w"], p["fc1.b"] = _dense_param(rng, cfg.flat_features(), cfg.fc_hidden, dtype)
    p["fc2.w"], p["fc2.b"] = _dense_param(rng, cfg.fc_hidden, cfg.num_classes, dtype, gain=1.0)
    return p


def diagnosis_features(params: Params, mri: Tensor, cfg: DiagnosisConfig) -> Tensor:
    """Channel concatenation of the three path outputs."""
    _check_input(mri, cfg.in_channels, cfg.input_dims, "forward_diagnosis")
    paths = [_conv_relu(params, f"path{i}", mri, stride=cfg.path_stride) for i in range(3)]
    return ops.concat(paths, axis=1)


def forward_diagnosis(params: Params, mri: Tensor, cfg: DiagnosisConfig) -> Tensor:
    h = diagnosis_features(params, mri, cfg)
    for j in range(len(cfg.post_widths)):
        h = ops.maxpool3d(_conv_relu(params, f"post{j}", h), 2)
    h = ops.relu(ops.dense(ops.flatten(h), params["fc1.w"], params["fc1.b"]))
    return ops.softmax(ops.dense(h, params["fc2.w"], params["fc2.b"]))


# ---------------------------------------------------------------------------
# joint model


@dataclass
class MultiTaskModel:
    config: ModelConfig
    params: Params
    weights: LossWeights = field(default_factory=LossWeights)

    def named_parameters(self):
        return self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def branch(self, prefix: str) -> Params:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data[...] = state[k]

    def astype(self, dtype) -> "MultiTaskModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return MultiTaskModel(self.config, params, self.weights)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def build_model(config: ModelConfig | None = None, seed: int = 0, weights: LossWeights | None = None,
                dtype=None) -> MultiTaskModel:
    config = (config or ModelConfig()).resolved()
    dtype = dtype or get_default_dtype()
    s_stem, s_syn, s_dx = np.random.SeedSequence(seed).spawn(3)
    params: Params = {}
    if config.shared_stem:
        w, b = _conv_param(_rng(s_stem), config.stem_width, config.mri_channels, 3, dtype)
        params["stem.conv.w"], params["stem.conv.b"] = w, b
    params.update({f"syn.{k}": v for k, v in build_synthesis(config.synthesis, s_syn, dtype).items()})
    params.update({f"dx.{k}": v for k, v in build_diagnosis(config.diagnosis, s_dx, dtype).items()})
    return MultiTaskModel(config, params, weights or LossWeights())


def _as_input(mri, dtype) -> Tensor:
    if isinstance(mri, Tensor):
        return mri
    return Tensor(np.asarray(mri, dtype=dtype))


def forward_multitask(model: MultiTaskModel, mri) -> tuple[Tensor, Tensor]:
    cfg = model.config
    x = _as_input(mri, model.dtype)
    if x.ndim != 5 or x.shape[1] != cfg.mri_channels:
        raise ops.ShapeError(f"expected (N, {cfg.mri_channels}, D, H, W) input, got {x.shape}")
    if cfg.shared_stem:
        x = _conv_relu(model.params, "stem.conv", x)
    cbf = forward_synthesis(model.branch("syn"), x, cfg.synthesis)
    probs = forward_diagnosis(model.branch("dx"), x, cfg.diagnosis)
    return cbf, probs


def batch_translation_loss(pet: Tensor, cbf: Tensor, weights: LossWeights,
                           parts: dict | None = None) -> Tensor:
    """Mean of the per-volume translation loss; ``c_max`` is each target's maximum."""
    n = pet.shape[0]
    total = None
    acc = {k: 0.0 for k in ("mse", "mae", "ssim", "psnr")}
    for i in range(n):
        xi = Tensor(pet.data[i])
        yi = ops.select(cbf, i)
        c_max = float(xi.data.max())
        c = SSIMConstants(c_max if c_max > 0 else 1.0)
        sample_parts: dict = {}
        li = translation_loss(xi, yi, weights, c, parts=sample_parts)
        for k in acc:
            acc[k] += sample_parts[k] / n
        total = li if total is None else ops.add(total, li)
    if parts is not None:
        parts.update(acc)
    return ops.scale(total, 1.0 / n)


def compute_losses(model: MultiTaskModel, mri, pet, labels, weights: LossWeights | None = None):
    """Forward pass plus every loss term; returns ``(l_global, LossReport)``."""
    weights = weights or model.weights
    cbf, probs = forward_multitask(model, mri)
    pet_t = _as_input(pet, model.dtype)
    if pet_t.shape != cbf.shape:
        raise ops.ShapeError(f"target shape {pet_t.shape} does not match prediction {cbf.shape}")
    onehot = one_hot(labels) if np.asarray(labels).ndim == 1 else np.asarray(labels)
    parts: dict = {}
    l_trans = batch_translation_loss(pet_t, cbf, weights, parts)
    l_class = classification_loss(probs, onehot.astype(model.dtype))
    for name, t in (("l_trans", l_trans), ("l_class", l_class)):
        if not np.isfinite(t.item()):
            raise NumericError(name)
    l_global = ops.add(l_trans, ops.scale(l_class, weights.class_balance)) \
        if weights.class_balance != 1.0 else ops.add(l_trans, l_class)
    report = LossReport(
        mse=parts["mse"], mae=parts["mae"], ssim=parts["ssim"], psnr=parts["psnr"],
        l_trans=l_trans.item(), l_class=l_class.item(), l_global=l_global.item(),
    )
    for name in LossReport.FIELDS:
        if name != "psnr" and not np.isfinite(getattr(report, name)):
            raise NumericError(name)
    return l_global, report


def train_step(model: MultiTaskModel, batch, weights: LossWeights | None = None) -> LossReport:
    """Forward, global loss and backward; leaves gradients in ``param.grad``."""
    mri, pet, labels = batch
    model.zero_grad()
    l_global, report = compute_losses(model, mri, pet, labels, weights)
    backward(l_global)
    for name, t in model.named_parameters():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(name, f"non-finite gradient for parameter {name}")
    return report


def evaluate_losses(model: MultiTaskModel, mri, pet, labels, weights: LossWeights | None = None) -> LossReport:
    with no_grad():
        return compute_losses(model, mri, pet, labels, weights)[1]


def predict(model: MultiTaskModel, mri) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        cbf, probs = forward_multitask(model, mri)
    return cbf.data, probs.data


# ---------------------------------------------------------------------------
# MTCK checkpoints

MTCK_MAGIC = b"MTCK"
MTCK_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_config(model: MultiTaskModel) -> dict:
    return {"model": model.config.to_dict(), "loss_weights": model.weights.to_dict()}


def save_checkpoint(model: MultiTaskModel, path) -> None:
    cfg = json.dumps(checkpoint_config(model), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MTCK_MAGIC)
    buf.write(struct.pack("<II", MTCK_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for t in model.params.values():
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _take(raw: bytes, pos: int, n: int, section: str) -> tuple[bytes, int]:
    if pos + n > len(raw):
        raise CheckpointError(f"truncated checkpoint: missing {section}")
    return raw[pos:pos + n], pos + n


def load_checkpoint(path) -> MultiTaskModel:
    raw = Path(path).read_bytes()
    magic, pos = _take(raw, 0, 4, "magic")
    if magic != MTCK_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MTCK_MAGIC!r}")
    head, pos = _take(raw, pos, 8, "header")
    version, cfg_len = struct.unpack("<II", head)
    if version != MTCK_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_raw, pos = _take(raw, pos, cfg_len, "config")
    cfg = json.loads(cfg_raw.decode("utf-8"))
    model = build_model(ModelConfig.from_dict(cfg["model"]), seed=0,
                        weights=LossWeights(**cfg["loss_weights"]), dtype=np.float32)
    count_raw, pos = _take(raw, pos, 4, "parameter count")
    (count,) = struct.unpack("<I", count_raw)
    if count != len(model.params):
        raise CheckpointError(f"checkpoint has {count} tensors, config implies {len(model.params)}")
    for name, t in model.params.items():
        nd_raw, pos = _take(raw, pos, 4, f"{name} rank")
        (ndim,) = struct.unpack("<I", nd_raw)
        shape_raw, pos = _take(raw, pos, 4 * ndim, f"{name} shape")
        shape = struct.unpack(f"<{ndim}I", shape_raw)
        if tuple(shape) != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape} != model shape {t.shape}")
        data, pos = _take(raw, pos, 4 * int(np.prod(shape)), f"{name} data")
        t.data[...] = np.frombuffer(data, dtype="<f4").reshape(shape)
    return model
