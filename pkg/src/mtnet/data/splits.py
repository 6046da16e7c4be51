"""Subject-grouped, class-stratified k-fold splits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..networks import ClassLabel
from .manifest import DatasetManifest, ScanRecord


@dataclass
class Fold:
    index: int
    train: list[ScanRecord]
    val: list[ScanRecord]
    test: list[ScanRecord]

    def subject_sets(self) -> tuple[set[str], set[str], set[str]]:
        return tuple({r.subject_id for r in part} for part in (self.train, self.val, self.test))


def _group_subjects(records: Sequence[ScanRecord]) -> dict[str, list[ScanRecord]]:
    subjects: dict[str, list[ScanRecord]] = {}
    for r in records:
        subjects.setdefault(r.subject_id, []).append(r)
    for sid, recs in subjects.items():
        if len({r.label for r in recs}) != 1:
            raise ValueError(f"subject {sid} has scans with different labels")
    return subjects


def assign_subject_groups(records: Sequence[ScanRecord], k: int = 4, seed: int = 0,
                          allow_small_classes: bool = False) -> list[list[str]]:
    """Partition subjects into ``k`` groups, balancing per-class scan counts.

    Within each class, subjects are taken in decreasing scan count (ties in
    seeded random order) and each goes to the group holding the fewest scans
    of that class; remaining ties go to the group with the fewest scans
    overall, then the lowest index. Classes with fewer than ``k`` subjects
    are an error unless ``allow_small_classes``, in which case their
    subjects land in distinct groups.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    subjects = _group_subjects(records)
    rng = np.random.default_rng(seed)
    groups: list[list[str]] = [[] for _ in range(k)]
    total = np.zeros(k, dtype=int)
    for label in ClassLabel:
        ids = sorted(sid for sid, recs in subjects.items() if recs[0].label == label)
        if not ids:
            continue
        if len(ids) < k and not allow_small_classes:
            raise ValueError(
                f"class {label.name} has {len(ids)} subject(s), fewer than k={k}; "
                "pass allow_small_classes=True to pin them one per fold"
            )
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        ids.sort(key=lambda s: -len(subjects[s]))  # stable: keeps the shuffle within ties
        per_class = np.zeros(k, dtype=int)
        per_class_subj = np.zeros(k, dtype=int)
        for sid in ids:
            n = len(subjects[sid])
            g = min(range(k), key=lambda i: (per_class[i], per_class_subj[i], total[i], i))
            groups[g].append(sid)
            per_class[g] += n
            per_class_subj[g] += 1
            total[g] += n
    return groups


def make_cv_folds(manifest: DatasetManifest | Sequence[ScanRecord], k: int = 4, seed: int = 0,
                  val_fraction: float = 0.1, allow_small_classes: bool = False) -> list[Fold]:
    """``k`` (train, val, test) splits with no subject in more than one part.

    Fold ``i`` tests on group ``i``. From the remaining groups, whole
    subjects are drawn at random into validation until it holds at least
    ``val_fraction`` of their scans (at least one subject when possible).
    """
    records = list(manifest.records if isinstance(manifest, DatasetManifest) else manifest)
    groups = assign_subject_groups(records, k, seed, allow_small_classes)
    by_subject = _group_subjects(records)
    folds = []
    for i in range(k):
        test_ids = set(groups[i])
        pool = sorted(s for j, g in enumerate(groups) if j != i for s in g)
        n_pool = sum(len(by_subject[s]) for s in pool)
        rng = np.random.default_rng([seed, i])
        val_ids: set[str] = set()
        n_val = 0
        if val_fraction > 0 and len(pool) > 1:
            for idx in rng.permutation(len(pool)):
                if n_val >= val_fraction * n_pool:
                    break
                val_ids.add(pool[idx])
                n_val += len(by_subject[pool[idx]])
        folds.append(Fold(
            index=i,
            train=[r for r in records if r.subject_id not in test_ids | val_ids],
            val=[r for r in records if r.subject_id in val_ids],
            test=[r for r in records if r.subject_id in test_ids],
        ))
    return folds


def leakage_violations(folds: Sequence[Fold]) -> int:
    """Number of (fold, subject) pairs appearing in more than one split part."""
    count = 0
    for f in folds:
        tr, va, te = f.subject_sets()
        count += len(tr & va) + len(tr & te) + len(va & te)
    return count


def holdout_split(manifest: DatasetManifest | Sequence[ScanRecord], val_fraction: float = 0.1,
                  seed: int = 0) -> tuple[list[ScanRecord], list[ScanRecord]]:
    """(train, val) records with whole subjects drawn into validation.

    Subjects are taken in seeded random order until validation holds at
    least ``val_fraction`` of the scans; at least one subject is held out
    and at least one is kept for training.
    """
    records = list(manifest.records if isinstance(manifest, DatasetManifest) else manifest)
    by_subject = _group_subjects(records)
    ids = sorted(by_subject)
    if len(ids) < 2:
        raise ValueError("need at least 2 subjects for a train/validation split")
    rng = np.random.default_rng(seed)
    val_ids: set[str] = set()
    n_val = 0
    for idx in rng.permutation(len(ids)):
        if val_ids and (n_val >= val_fraction * len(records) or len(val_ids) == len(ids) - 1):
            break
        val_ids.add(ids[idx])
        n_val += len(by_subject[ids[idx]])
    return ([r for r in records if r.subject_id not in val_ids],
            [r for r in records if r.subject_id in val_ids])
