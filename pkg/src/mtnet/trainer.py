"""NAdam optimisation, the epoch loop with early stopping, and cross-validation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff.tensor import Tensor
from .data.manifest import DatasetManifest, Sample, load_sample, stack
from .data.preprocessing import eightfold_transforms
from .data.splits import Fold, leakage_violations, make_cv_folds
from .losses import LossReport, LossWeights
from .networks import (
    ModelConfig,
    MultiTaskModel,
    NumericError,
    build_model,
    evaluate_losses,
    save_checkpoint,
    train_step,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class NAdamState:
    """Moments and momentum schedule for Nesterov-accelerated Adam.

    The momentum coefficient at step t is
    ``beta1 * (1 - 0.5 * 0.96 ** (t * schedule_decay))``.
    """

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004
    t: int = 0
    m_schedule: float = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def momentum(self, t: int) -> float:
        return self.beta1 * (1.0 - 0.5 * 0.96 ** (t * self.schedule_decay))


def nadam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: NAdamState,
               grad_clip: float | None = None) -> NAdamState:
    """One in-place NAdam update of every parameter in ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero. Raises ``NumericError`` naming the first parameter with a
    non-finite gradient, before anything is modified.
    """
    g_all = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(name, f"non-finite gradient for parameter {name}")
        g_all[name] = g
    if grad_clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in g_all.values())))
        if norm > grad_clip:
            g_all = {k: g * (grad_clip / norm) for k, g in g_all.items()}

    state.t += 1
    t = state.t
    mu_t = state.momentum(t)
    mu_next = state.momentum(t + 1)
    sched = state.m_schedule * mu_t
    sched_next = sched * mu_next
    state.m_schedule = sched
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = g_all[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        g_hat = g / (1.0 - sched)
        m_hat = m / (1.0 - sched_next)
        v_hat = v / (1.0 - b2**t)
        m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat
        p.data -= (state.lr * m_bar / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# configuration and history


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 4
    max_epochs: int = 150
    patience: int = 20
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    deterministic: bool = True
    augment: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not 1 <= self.patience < self.max_epochs:
            raise ValueError(f"patience must satisfy 1 <= patience < max_epochs, got {self.patience}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train: LossReport
    val: LossReport


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def best_val(self) -> float:
        return self.epochs[self.best_epoch].val.l_global

    def column(self, split: str, key: str) -> np.ndarray:
        return np.array([getattr(getattr(e, split), key) for e in self.epochs])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "split", *LossReport.FIELDS])
        for e in self.epochs:
            for split in ("train", "val"):
                r = getattr(e, split)
                writer.writerow([e.epoch, split, *(repr(float(getattr(r, k))) for k in LossReport.FIELDS)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


# ---------------------------------------------------------------------------
# training loop

Evaluator = Callable[[MultiTaskModel, Sequence[Sample]], LossReport]


def augment_samples(samples: Sequence[Sample]) -> list[Sample]:
    """Eightfold expansion; every variant keeps its label and record."""
    out = []
    for s in samples:
        for t in eightfold_transforms():
            mask = t.forward(s.mask[None].astype(np.float32))[0] > 0.5
            out.append(s._replace(mri=np.ascontiguousarray(t.forward(s.mri)),
                                  pet=np.ascontiguousarray(t.forward(s.pet)), mask=mask))
    return out


def batch_losses(model: MultiTaskModel, samples: Sequence[Sample], batch_size: int = 4,
                 weights: LossWeights | None = None) -> LossReport:
    """Sample-weighted mean LossReport over ``samples`` without building a graph."""
    reports, sizes = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        reports.append(evaluate_losses(model, *stack(chunk), weights))
        sizes.append(len(chunk))
    return LossReport.mean(reports, sizes)


def _subjects(samples) -> set[str]:
    return {s.record.subject_id for s in samples if s.record is not None}


def train(model: MultiTaskModel, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig | None = None, evaluate: Evaluator | None = None,
          checkpoint_path=None) -> TrainHistory:
    """Mini-batch NAdam training with early stopping on validation ``l_global``.

    The best-epoch parameters are restored on return and, if
    ``checkpoint_path`` is given, written there whenever validation improves.
    ``evaluate`` replaces the validation pass (used for scripted tests).

    Raises
    ------
    NumericError
        On a non-finite loss or gradient. The model is first restored to the
        best parameters seen so far.
    """
    cfg = cfg or TrainConfig()
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    overlap = _subjects(train_set) & _subjects(val_set)
    if overlap:
        raise ValueError(f"validation shares subjects with training: {sorted(overlap)}")
    weights = cfg.weights
    model.weights = weights
    evaluate = evaluate or (lambda m, s: batch_losses(m, s, cfg.batch_size, weights))
    samples = augment_samples(train_set) if cfg.augment else list(train_set)
    state = NAdamState(lr=cfg.lr)
    history = TrainHistory()
    best_state = model.state()
    best = np.inf
    since_best = 0
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(samples))
        reports, sizes = [], []
        try:
            for i in range(0, len(order), cfg.batch_size):
                chunk = [samples[j] for j in order[i:i + cfg.batch_size]]
                reports.append(train_step(model, stack(chunk), weights))
                sizes.append(len(chunk))
                nadam_step(model.params, None, state, cfg.grad_clip)
            val = evaluate(model, val_set)
            if not np.isfinite(val.l_global):
                raise NumericError("l_global", "non-finite validation loss")
        except NumericError:
            model.load_state(best_state)
            history.stop_reason = "non_finite"
            log.error("epoch %d: non-finite value, restored epoch %d parameters", epoch, history.best_epoch)
            raise
        history.epochs.append(EpochRecord(epoch, LossReport.mean(reports, sizes), val))
        log.info("epoch %d train l_global %.5f val l_global %.5f", epoch, history.epochs[-1].train.l_global,
                 val.l_global)
        if val.l_global < best:
            best = val.l_global
            history.best_epoch = epoch
            best_state = model.state()
            since_best = 0
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stop_reason = "early_stopping"
                break
    else:
        history.stop_reason = "max_epochs"
    model.load_state(best_state)
    return history


# ---------------------------------------------------------------------------
# loss-weight grid


@dataclass
class GridPoint:
    weights: LossWeights
    history: TrainHistory
    score: float


def _val_ssim(model: MultiTaskModel, samples: Sequence[Sample]) -> float:
    from .evaluation import evaluate_fold

    return evaluate_fold(model, samples).image["ssim"]


def grid_search_weights(grid, train_set: Sequence[Sample], val_set: Sequence[Sample],
                        model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                        score: Callable[[MultiTaskModel, Sequence[Sample]], float] | None = None) -> list[GridPoint]:
    """Train one fresh model per translation-loss weighting, best first.

    ``grid`` holds ``LossWeights`` or ``(w1, w2, w3, w4)`` tuples. Validation
    ``l_global`` is not comparable across weightings, so candidates are
    ranked by ``score(model, val_set)`` (higher is better), by default the
    mean validation SSIM of the restored best-epoch model.
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    score = score or _val_ssim
    points = []
    for w in grid:
        if not isinstance(w, LossWeights):
            w = replace(train_cfg.weights, w1=w[0], w2=w[1], w3=w[2], w4=w[3])
        cfg = replace(train_cfg, weights=w)
        model = build_model(model_cfg, seed=cfg.seed, weights=w)
        history = train(model, train_set, val_set, cfg)
        points.append(GridPoint(w, history, float(score(model, val_set))))
        log.info("weights %s: score %.5f", (w.w1, w.w2, w.w3, w.w4), points[-1].score)
    if not points:
        raise ValueError("empty weight grid")
    return sorted(points, key=lambda p: -p.score)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    folds: list[Fold]
    histories: list[TrainHistory]
    metrics: list[dict]
    checkpoints: list[Path | None]

    def summary(self) -> dict:
        """Mean and sample sd of each cohort image metric and of average class metrics."""
        rows = {}
        keys = [("image", k) for k in ("ssim", "psnr", "nrmse")]
        keys += [("average", k) for k in ("acc", "sens", "spec", "prec", "fpr", "fnr", "mcc")]
        for group, k in keys:
            vals = np.array([m["image"][k] if group == "image" else m["classification"]["average"][k]
                             for m in self.metrics], dtype=float)
            rows[k] = {"values": vals.tolist(), "mean": float(vals.mean()),
                       "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
        return {"n_folds": len(self.metrics), "leakage_violations": leakage_violations(self.folds), "metrics": rows}


def _run_fold(fold: Fold, samples_by_id: dict[str, Sample], model_cfg: ModelConfig, train_cfg: TrainConfig,
              out_dir: Path | None) -> tuple[TrainHistory, dict, Path | None]:
    from .evaluation import emit_report, evaluate_fold

    model = build_model(model_cfg, seed=train_cfg.seed + fold.index, weights=train_cfg.weights)
    fold_dir = None if out_dir is None else out_dir / f"fold{fold.index}"
    ckpt = None
    if fold_dir is not None:
        fold_dir.mkdir(parents=True, exist_ok=True)
        ckpt = fold_dir / "best.mtck"
    pick = lambda recs: [samples_by_id[r.scan_id] for r in recs]  # noqa: E731
    val = pick(fold.val) or pick(fold.train)[:1]
    history = train(model, pick(fold.train), val, replace(train_cfg, seed=train_cfg.seed + fold.index),
                    checkpoint_path=ckpt)
    result = evaluate_fold(model, pick(fold.test), batch_size=train_cfg.batch_size)
    if fold_dir is not None:
        history.to_csv(fold_dir / "history.csv")
        emit_report(result, fold_dir / "report")
    return history, result.summary(), ckpt


def run_cross_validation(manifest: DatasetManifest, model_cfg: ModelConfig | None = None,
                         train_cfg: TrainConfig | None = None, out_dir=None, k: int = 4,
                         allow_small_classes: bool = True, samples: Sequence[Sample] | None = None,
                         jobs: int = 1) -> CVResult:
    """Train and test one fresh model per fold of :func:`make_cv_folds`.

    ``samples`` may supply preloaded data keyed by their records; otherwise
    volumes are read through the manifest. ``jobs > 1`` runs folds in
    worker processes.
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    folds = make_cv_folds(manifest, k=k, seed=train_cfg.seed, allow_small_classes=allow_small_classes)
    if samples is None:
        samples = [load_sample(manifest, r) for r in manifest.records]
    by_id = {s.record.scan_id: s for s in samples}
    out = Path(out_dir) if out_dir is not None else None
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, folds, [by_id] * k, [model_cfg] * k, [train_cfg] * k, [out] * k))
    else:
        results = [_run_fold(f, by_id, model_cfg, train_cfg, out) for f in folds]
    cv = CVResult(folds, [r[0] for r in results], [r[1] for r in results], [r[2] for r in results])
    if out is not None:
        (out / "cv_summary.json").write_text(json.dumps(cv.summary(), indent=2))
    return cv
