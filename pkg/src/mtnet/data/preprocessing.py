"""Brain masks, mean-one intensity normalisation and the eight-fold augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .volume import Volume

MIN_MASK_FRACTION = 0.01
SHIFT = 2


def brain_mask(mri: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Voxels of channel 0 above ``fraction`` of its maximum."""
    data = mri.data if isinstance(mri, Volume) else np.asarray(mri)
    ch0 = data[0] if data.ndim == 4 else data
    mask = ch0 > fraction * ch0.max()
    check_mask(mask)
    return mask


def check_mask(mask: np.ndarray) -> None:
    if mask.dtype != bool:
        raise ValueError("brain mask must be boolean")
    if mask.mean() < MIN_MASK_FRACTION:
        raise ValueError(f"brain mask covers {100 * mask.mean():.2f}% of voxels (< 1%)")


def normalize_mean_one(v: Volume, mask: np.ndarray) -> Volume:
    """Scale every channel so its in-mask mean is 1.

    The same factor is applied outside the mask. Returns a new volume whose
    ``meta["scale"]`` holds the per-channel in-mask means that were divided out.
    """
    check_mask(mask)
    if mask.shape != v.dims:
        raise ValueError(f"mask shape {mask.shape} does not match volume dims {v.dims}")
    means = v.data[:, mask].astype(np.float64).mean(axis=1)
    if np.any(means <= 0):
        bad = [int(c) for c in np.flatnonzero(means <= 0)]
        raise ValueError(f"non-positive in-mask mean in channel(s) {bad}")
    out = (v.data / means[:, None, None, None]).astype(np.float32)
    result = v.with_data(out)
    result.meta["scale"] = means.tolist()
    return result


# ---------------------------------------------------------------------------
# augmentation; arrays are (C, m, n, p), the axial plane is (m, n)


def _shift(a: np.ndarray, axis: int, k: int) -> np.ndarray:
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if k >= 0:
        src[axis], dst[axis] = slice(0, a.shape[axis] - k), slice(k, None)
    else:
        src[axis], dst[axis] = slice(-k, None), slice(0, a.shape[axis] + k)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _shift_valid(shape, axis: int, k: int) -> np.ndarray:
    """Region of the *original* volume that survives a shift and its inverse."""
    valid = np.ones(shape, dtype=bool)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(shape[axis] - k, None) if k > 0 else slice(0, -k)
    valid[tuple(idx)] = False
    return valid


def _flip(a):
    return a[:, ::-1].copy()


def _rot(a):
    return np.rot90(a, 1, axes=(1, 2)).copy()


def _unrot(a):
    return np.rot90(a, -1, axes=(1, 2)).copy()


@dataclass(frozen=True)
class Transform:
    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    shift: tuple[int, int] | None = None  # (axis, amount) applied before any flip

    def valid_region(self, shape) -> np.ndarray:
        """Boolean (C, m, n, p) mask of voxels recovered exactly by ``inverse(forward(.))``."""
        if self.shift is None:
            return np.ones(shape, dtype=bool)
        return _shift_valid(shape, *self.shift)


def _compose(*fs):
    def run(a):
        for f in fs:
            a = f(a)
        return a
    return run


def eightfold_transforms() -> list[Transform]:
    sm = lambda a: _shift(a, 1, SHIFT)  # noqa: E731
    sm_inv = lambda a: _shift(a, 1, -SHIFT)  # noqa: E731
    sn = lambda a: _shift(a, 2, -SHIFT)  # noqa: E731
    sn_inv = lambda a: _shift(a, 2, SHIFT)  # noqa: E731
    ident = lambda a: a.copy()  # noqa: E731
    return [
        Transform("identity", ident, ident),
        Transform("flip_lr", _flip, _flip),
        Transform("shift_m+2", sm, sm_inv, (1, SHIFT)),
        Transform("shift_n-2", sn, sn_inv, (2, -SHIFT)),
        Transform("rot90_axial", _rot, _unrot),
        Transform("flip_rot90", _compose(_rot, _flip), _compose(_flip, _unrot)),
        Transform("flip_shift_m+2", _compose(sm, _flip), _compose(_flip, sm_inv), (1, SHIFT)),
        Transform("flip_shift_n-2", _compose(sn, _flip), _compose(_flip, sn_inv), (2, -SHIFT)),
    ]


def augment_eightfold(inp: Volume, target: Volume, label) -> list[tuple[Volume, Volume, object]]:
    """Eight deterministic variants of an (input, target) pair; the first is the original."""
    if inp.dims != target.dims:
        raise ValueError(f"input dims {inp.dims} differ from target dims {target.dims}")
    m, n, _ = inp.dims
    if min(m, n) <= 2 * SHIFT:
        raise ValueError(f"axial dims {(m, n)} too small for a {SHIFT}-voxel shift")
    if m != n:
        raise ValueError(f"90-degree axial rotation needs a square axial plane, got {(m, n)}")
    out = []
    for t in eightfold_transforms():
        a, b = inp.with_data(t.forward(inp.data)), target.with_data(t.forward(target.data))
        a.meta["transform"] = b.meta["transform"] = t.name
        out.append((a, b, label))
    return out
