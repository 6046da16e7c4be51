from .manifest import (
    DatasetManifest,
    Sample,
    ScanRecord,
    clinical_cohort_records,
    generate_dataset,
    load_sample,
    phantom_records,
    phantom_samples,
    prepare_sample,
    stack,
)
from .phantom import generate_phantom, target_from_inputs
from .preprocessing import augment_eightfold, brain_mask, eightfold_transforms, normalize_mean_one
from .splits import Fold, holdout_split, leakage_violations, make_cv_folds
from .volume import Volume, VolumeFormatError, load_volume, save_volume
