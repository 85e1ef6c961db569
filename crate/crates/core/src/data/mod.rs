//! Preprocessing, augmentation, dataset files and the synthetic cohort.

pub mod augment;
pub mod dataset;
pub mod format;
pub mod preprocess;
pub mod split;
pub mod synth;

pub use augment::{augment, Augmentation};
pub use dataset::{NormStats, Patient, Sample, SampleData, SurvivalDataset};
pub use format::{load_dataset, read_clinical_csv, read_volume, save_dataset, write_clinical_csv, write_volume};
pub use preprocess::{impute_age, minmax_scale, normalize_volume, zscore, MinMax, ZScore};
pub use split::{split_patients, Split};
pub use synth::{generate_cohort, SynthConfig, SyntheticCohort};

use crate::error::Result;

pub const DEFAULT_DIMS: [usize; 3] = [8, 96, 96];
pub const DEFAULT_RATIOS: [f64; 3] = [6.0, 2.0, 2.0];

/// Synthetic cohort normalized to `dims`, split with the default ratios on
/// fold 0 using the same seed.
pub fn generate_synthetic(seed: u64, n_patients: usize, cfg: &SynthConfig, dims: [usize; 3]) -> Result<SurvivalDataset> {
    let cohort = generate_cohort(seed, n_patients, cfg)?;
    let splits = split_patients(n_patients, DEFAULT_RATIOS, 0, seed)?;
    SurvivalDataset::from_raw(synth::categorical_fields(), cohort.records, &cohort.volumes, dims, splits)
}
