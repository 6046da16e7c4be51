"""Scan records, JSON manifests, sample loading and phantom datasets."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ..networks import ClassLabel
from .phantom import SESSIONS, generate_phantom
from .preprocessing import brain_mask, normalize_mean_one
from .volume import Volume, load_volume, save_volume


@dataclass(frozen=True)
class ScanRecord:
    subject_id: str
    session: str
    label: ClassLabel
    input: str | None = None
    target: str | None = None
    session_index: int = 0

    @property
    def scan_id(self) -> str:
        return f"{self.subject_id}/{self.session_index}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = ClassLabel(self.label).name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanRecord":
        d = dict(d)
        d["label"] = ClassLabel.parse(d["label"])
        if d["session"] not in SESSIONS:
            raise ValueError(f"unknown session kind {d['session']!r}")
        return cls(**d)


class DatasetManifest:
    def __init__(self, records: Sequence[ScanRecord], root: str | Path | None = None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        ids = [r.scan_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate (subject_id, session_index) in manifest")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subjects(self) -> dict[str, list[ScanRecord]]:
        out: dict[str, list[ScanRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def class_counts(self) -> dict[str, dict[str, int]]:
        subj = {sid: recs[0].label for sid, recs in self.subjects().items()}
        subjects = Counter(ClassLabel(v).name for v in subj.values())
        scans = Counter(ClassLabel(r.label).name for r in self.records)
        return {c.name: {"subjects": subjects.get(c.name, 0), "scans": scans.get(c.name, 0)} for c in ClassLabel}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps([r.to_dict() for r in self.records], indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        if not isinstance(raw, list):
            raise ValueError("manifest must be a JSON array of scan records")
        return cls([ScanRecord.from_dict(d) for d in raw], root=path.parent)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p


class Sample(NamedTuple):
    mri: np.ndarray  # (8, m, n, p), in-mask mean 1 per channel
    pet: np.ndarray  # (1, m, n, p), in-mask mean 1
    label: int
    mask: np.ndarray
    pet_scale: float  # in-mask mean of the raw target
    record: ScanRecord | None = None


def prepare_sample(inp: Volume, target: Volume | None, label, record: ScanRecord | None = None) -> Sample:
    """Mask from the input, then mean-one normalisation of input and target."""
    if inp.channels != 8:
        raise ValueError(f"input volume must have 8 channels, got {inp.channels}")
    mask = brain_mask(inp.data)
    mri = normalize_mean_one(inp, mask)
    if target is None:
        pet, scale = np.zeros((1,) + inp.dims, np.float32), float("nan")
    else:
        if target.channels != 1:
            raise ValueError(f"target volume must have 1 channel, got {target.channels}")
        norm = normalize_mean_one(target, mask)
        pet, scale = norm.data, norm.meta["scale"][0]
    return Sample(mri.data, pet, int(ClassLabel.parse(label)), mask, scale, record)


def load_sample(manifest: DatasetManifest, record: ScanRecord) -> Sample:
    if record.input is None or record.target is None:
        raise ValueError(f"record {record.scan_id} has no volume paths")
    inp = load_volume(manifest.resolve(record.input))
    tgt = load_volume(manifest.resolve(record.target))
    return prepare_sample(inp, tgt, record.label, record)


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.mri for s in samples]), np.stack([s.pet for s in samples]),
            np.array([s.label for s in samples], dtype=int))


def subject_sessions(index_in_class: int) -> list[tuple[str, int]]:
    """Two of every three subjects get a second baseline scan."""
    sessions = [("baseline", 0), ("post-acetazolamide", 1)]
    if index_in_class % 3 != 2:
        sessions.append(("baseline", 2))
    return sessions


def phantom_records(subjects_per_class: Sequence[int], id_prefix: str = "") -> list[ScanRecord]:
    if len(subjects_per_class) != len(ClassLabel):
        raise ValueError(f"need one subject count per class ({len(ClassLabel)})")
    records = []
    for label, count in zip(ClassLabel, subjects_per_class):
        for i in range(int(count)):
            sid = f"{id_prefix}{label.name.lower()}{i:03d}"
            for session, idx in subject_sessions(i):
                records.append(ScanRecord(sid, session, label, session_index=idx))
    return records


# (subjects, scans) per class of the clinical cohort the fold layout is modelled on
CLINICAL_COHORT = {ClassLabel.HC: (60, 160), ClassLabel.MMD: (52, 152), ClassLabel.ICSD: (4, 12),
                ClassLabel.Stroke: (4, 8)}


def clinical_cohort_records(id_prefix: str = "") -> list[ScanRecord]:
    """Volume-less records with the subject and scan counts of ``CLINICAL_COHORT``.

    Each subject has two or three scans; the three-scan subjects come first
    within a class so that a balanced k-way split lands equal scan counts
    in every group.
    """
    records = []
    for label, (n_subj, n_scans) in CLINICAL_COHORT.items():
        n_three = n_scans - 2 * n_subj
        if not 0 <= n_three <= n_subj:
            raise ValueError(f"cannot spread {n_scans} scans over {n_subj} subjects at 2-3 each")
        for i in range(n_subj):
            sid = f"{id_prefix}{label.name.lower()}{i:03d}"
            sessions = [("baseline", 0), ("post-acetazolamide", 1)]
            if i < n_three:
                sessions.append(("baseline", 2))
            records.extend(ScanRecord(sid, s, label, session_index=k) for s, k in sessions)
    return records


def generate_dataset(out_dir, subjects_per_class=(4, 4, 1, 1), dims=(32, 32, 16), seed: int = 0,
                     id_prefix: str = "") -> DatasetManifest:
    """Write phantom MVOL volumes plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    subject_seeds: dict[str, int] = {}
    base = np.random.SeedSequence(seed)
    for rec in phantom_records(subjects_per_class, id_prefix):
        if rec.subject_id not in subject_seeds:
            child = base.spawn(1)[0]
            subject_seeds[rec.subject_id] = int(child.generate_state(1)[0])
        s = subject_seeds[rec.subject_id]
        inp, tgt = generate_phantom(s, rec.label, dims, rec.session, rec.session_index)
        stem = f"volumes/{rec.subject_id}_s{rec.session_index}"
        save_volume(inp, out / f"{stem}_mri.mvol")
        save_volume(tgt, out / f"{stem}_pet.mvol")
        records.append(ScanRecord(rec.subject_id, rec.session, rec.label,
                                  f"{stem}_mri.mvol", f"{stem}_pet.mvol", rec.session_index))
    manifest = DatasetManifest(records, root=out)
    manifest.save(out / "manifest.json")
    return manifest


def phantom_samples(subjects_per_class=(4, 4, 1, 1), dims=(32, 32, 16), seed: int = 0,
                    id_prefix: str = "") -> list[Sample]:
    """In-memory equivalent of :func:`generate_dataset` followed by loading."""
    base = np.random.SeedSequence(seed)
    seeds: dict[str, int] = {}
    samples = []
    for rec in phantom_records(subjects_per_class, id_prefix):
        if rec.subject_id not in seeds:
            seeds[rec.subject_id] = int(base.spawn(1)[0].generate_state(1)[0])
        inp, tgt = generate_phantom(seeds[rec.subject_id], rec.label, dims, rec.session, rec.session_index)
        samples.append(prepare_sample(inp, tgt, rec.label, rec))
    return samples
