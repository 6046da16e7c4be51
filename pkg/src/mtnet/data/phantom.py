"""Synthetic multi-contrast MRI / PET-CBF brain phantoms.

A phantom is an ellipsoidal brain with a smooth perfusion field. Eight MRI
channels are derived from it (three structural, ATT, four ASL-like), and
the PET CBF target is a fixed function of the ASL-like channels:
a weighted sum, a 3x3x3 box smoothing, then the brain mask, in
ml/100g/min.

Pathology deficits by class:

* HC: none
* MMD: bilateral anterior reduction
* ICSD: diffuse reduction of one hemisphere
* Stroke: a sharp posterior wedge of near-zero flow
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..networks import ClassLabel
from .volume import Volume

MIN_DIMS = (16, 16, 8)
CHANNEL_NAMES = (
    "T1w", "T2w-FLAIR", "PD", "ATT",
    "ASL-single-delay", "ASL-multi-delay-mean", "CBF-single-PLD", "CBF-multi-PLD",
)
ASL_CHANNELS = (4, 5, 6, 7)
TARGET_WEIGHTS = (0.1, 0.2, 0.2, 0.5)
CBF_SCALE = 50.0
NOISE = 0.02
SESSIONS = ("baseline", "post-acetazolamide")
VASODILATOR_GAIN = 0.3


def target_from_inputs(inputs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """The phantom's PET CBF map as a function of its 8 input channels."""
    mix = sum(w * inputs[c].astype(np.float64) for w, c in zip(TARGET_WEIGHTS, ASL_CHANNELS))
    smooth = ndimage.uniform_filter(mix, size=3, mode="constant", cval=0.0)
    return (CBF_SCALE * smooth * mask).astype(np.float32)


def _grid(dims):
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    return np.meshgrid(*axes, indexing="ij")


def _texture(rng, dims, sigma) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="nearest")
    return t / (np.abs(t).max() + 1e-12)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def deficit_map(label: ClassLabel, x, y, z, r, rng) -> np.ndarray:
    """Multiplicative flow factor in (0, 1]; 1 means healthy tissue."""
    label = ClassLabel.parse(label)
    if label is ClassLabel.HC:
        return np.ones_like(x)
    if label is ClassLabel.MMD:
        edge = 0.25 + rng.uniform(-0.05, 0.05)
        return 1.0 - 0.5 * _sigmoid((y - edge) / 0.05)
    if label is ClassLabel.ICSD:
        return 1.0 - 0.35 * _sigmoid(-x / 0.08)
    centre = -np.pi / 2 + np.deg2rad(rng.uniform(-10.0, 10.0))
    theta = np.arctan2(y, x)
    delta = np.abs(np.angle(np.exp(1j * (theta - centre))))
    wedge = (delta < np.deg2rad(45.0)) & (np.hypot(x, y) > 0.2)
    return np.where(wedge, 0.05, 1.0)


def generate_phantom(seed: int, label, dims=(32, 32, 16), session: str = "baseline",
                     session_index: int = 0) -> tuple[Volume, Volume]:
    """Deterministic (8-channel MRI, 1-channel PET CBF) pair.

    ``seed`` fixes the subject anatomy and pathology placement; the session
    only changes acquisition noise and, after acetazolamide, raises flow in
    tissue that can still respond.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < lo for d, lo in zip(dims, MIN_DIMS)):
        raise ValueError(f"phantom dims {dims} below minimum {MIN_DIMS}")
    if session not in SESSIONS:
        raise ValueError(f"session must be one of {SESSIONS}, got {session!r}")
    label = ClassLabel.parse(label)
    anat = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    noise = np.random.default_rng(np.random.SeedSequence([seed, 1, session_index]))

    x, y, z = _grid(dims)
    radii = np.array([0.85, 0.9, 0.8]) * (1.0 + anat.uniform(-0.05, 0.05, 3))
    r = np.sqrt((x / radii[0]) ** 2 + (y / radii[1]) ** 2 + (z / radii[2]) ** 2)
    mask = r < 1.0
    sigma = max(1.0, min(dims) / 8)
    shell = _sigmoid((r - 0.7) / 0.06)  # cortical ribbon

    flow = (0.6 + 0.6 * shell + 0.15 * _texture(anat, dims, sigma)) * mask
    deficit = deficit_map(label, x, y, z, r, anat)
    if session == "post-acetazolamide":
        deficit = deficit * (1.0 + VASODILATOR_GAIN * deficit)
    perf = flow * deficit

    att = 1.0 + 0.8 * (1.0 - np.clip(deficit, 0.0, 1.0)) + 0.1 * _texture(anat, dims, sigma)
    stroke_core = (label is ClassLabel.Stroke) * (deficit < 0.1)
    channels = [
        1.0 - 0.4 * shell + 0.1 * _texture(anat, dims, sigma),
        0.6 + 0.3 * shell + 0.1 * _texture(anat, dims, sigma) + 0.5 * stroke_core,
        0.8 + 0.1 * _texture(anat, dims, sigma),
        att,
        perf * (0.9 - 0.3 * (att - 1.0)),
        perf * 0.95,
        perf * (1.0 - 0.25 * (att - 1.0)),
        perf,
    ]
    mri = np.stack(channels)
    mri = mri + NOISE * noise.standard_normal(mri.shape) * np.abs(mri).mean(axis=(1, 2, 3), keepdims=True)
    mri = np.clip(mri, 0.0, None) * mask
    mri = mri.astype(np.float32)
    spacing = (192.0 / dims[0], 192.0 / dims[1], 128.0 / dims[2])
    meta = {"label": label.name, "seed": seed, "session": session, "session_index": session_index}
    inp = Volume(mri, spacing, "a.u.", dict(meta))
    tgt = Volume(target_from_inputs(mri, mask)[None], spacing, "ml/100g/min", dict(meta))
    return inp, tgt
