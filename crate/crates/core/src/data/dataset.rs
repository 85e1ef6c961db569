use crate::clinical::{ClinicalRecord, ClinicalVocabulary, ContinuousField};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::augment::Augmentation;
use super::preprocess::{age_mean, normalize_volume, MinMax, ZScore};
use super::split::Split;

/// Normalization statistics, fitted on training patients only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    /// Value substituted for a missing age.
    pub age_fill: f64,
    /// Z-score of the imputed age.
    pub age: ZScore,
    /// Min-max of survival days.
    pub time: MinMax,
}

impl NormStats {
    /// Imputation runs first, so the z-score sees the filled ages.
    pub fn fit(records: &[ClinicalRecord], splits: &[Split]) -> Result<Self> {
        let train: Vec<bool> = splits.iter().map(|&s| s == Split::Train).collect();
        let age_fill = age_mean(records, &train)?;
        let ages: Vec<f64> = records
            .iter()
            .zip(&train)
            .filter(|(_, &t)| t)
            .map(|(r, _)| r.age.unwrap_or(age_fill))
            .collect();
        let days: Vec<f64> = records
            .iter()
            .zip(&train)
            .filter(|(_, &t)| t)
            .map(|(r, _)| r.survival_days)
            .collect();
        Ok(Self {
            age_fill,
            age: ZScore::fit("age", &ages)?,
            time: MinMax::fit("survival_days", &days)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub record: ClinicalRecord,
    pub tokens: Vec<usize>,
    /// Normalized, unaugmented `[f, h, w]` volume.
    pub volume: Tensor<f32>,
}

/// One of the eight augmented views of a patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub patient: usize,
    pub augmentation: Augmentation,
}

/// Model-ready tensors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleData<T> {
    pub tokens: Vec<usize>,
    pub covariates: Vec<T>,
    pub volume: Tensor<T>,
    pub target: f64,
    pub event: bool,
}

/// Patients with their normalized volumes, the item vocabulary, the split
/// assignment and the statistics fitted on its training part.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalDataset {
    dims: [usize; 3],
    fields: Vec<String>,
    patients: Vec<Patient>,
    vocab: ClinicalVocabulary,
    stats: NormStats,
    splits: Vec<Split>,
}

impl SurvivalDataset {
    /// Normalizes every raw volume to `dims` and fits statistics on the
    /// training patients of `splits`.
    pub fn from_raw(
        fields: Vec<String>,
        records: Vec<ClinicalRecord>,
        raw_volumes: &[Tensor<f32>],
        dims: [usize; 3],
        splits: Vec<Split>,
    ) -> Result<Self> {
        if records.len() != raw_volumes.len() {
            return Err(Error::Input(format!(
                "{} clinical records but {} volumes",
                records.len(),
                raw_volumes.len()
            )));
        }
        let volumes = raw_volumes
            .iter()
            .zip(&records)
            .map(|(v, r)| {
                normalize_volume(v, dims).map_err(|e| Error::Input(format!("patient {}: {e}", r.patient_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let vocab = ClinicalVocabulary::from_records(&records);
        let stats = NormStats::fit(&records, &splits)?;
        Self::from_parts(dims, fields, records, volumes, vocab, stats, splits)
    }

    /// Assemble from already-normalized volumes and stored statistics.
    pub fn from_parts(
        dims: [usize; 3],
        fields: Vec<String>,
        records: Vec<ClinicalRecord>,
        volumes: Vec<Tensor<f32>>,
        mut vocab: ClinicalVocabulary,
        stats: NormStats,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if records.len() != splits.len() || records.len() != volumes.len() {
            return Err(Error::Input("records, volumes and splits differ in length".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut patients = Vec::with_capacity(records.len());
        for (record, volume) in records.into_iter().zip(volumes) {
            record.validate()?;
            if !seen.insert(record.patient_id.clone()) {
                return Err(Error::Input(format!("duplicate patient id {}", record.patient_id)));
            }
            if volume.shape() != dims {
                return Err(Error::Input(format!(
                    "patient {}: volume shape {:?}, expected {dims:?}",
                    record.patient_id,
                    volume.shape()
                )));
            }
            let tokens = vocab.encode(&record)?;
            patients.push(Patient { record, tokens, volume });
        }
        vocab.continuous = vec![continuous_age(&patients, &splits, &stats)];
        Ok(Self {
            dims,
            fields,
            patients,
            vocab,
            stats,
            splits,
        })
    }

    /// Replace the split assignment and refit statistics on the new training
    /// patients.
    pub fn reassign(&mut self, splits: Vec<Split>) -> Result<()> {
        if splits.len() != self.patients.len() {
            return Err(Error::Input(format!(
                "{} split labels for {} patients",
                splits.len(),
                self.patients.len()
            )));
        }
        let records: Vec<ClinicalRecord> = self.patients.iter().map(|p| p.record.clone()).collect();
        self.stats = NormStats::fit(&records, &splits)?;
        self.splits = splits;
        self.vocab.continuous = vec![continuous_age(&self.patients, &self.splits, &self.stats)];
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn vocab(&self) -> &ClinicalVocabulary {
        &self.vocab
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn n_continuous(&self) -> usize {
        1
    }

    /// Patient indices in `split`.
    pub fn patients_in(&self, split: Split) -> Vec<usize> {
        (0..self.patients.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// All eight augmented samples of every patient in `split`.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.patients_in(split)
            .into_iter()
            .flat_map(|patient| {
                Augmentation::ALL.iter().map(move |&augmentation| Sample { patient, augmentation })
            })
            .collect()
    }

    pub fn target(&self, patient: usize) -> f64 {
        self.stats.time.apply(self.patients[patient].record.survival_days)
    }

    pub fn covariates(&self, patient: usize) -> Vec<f64> {
        let age = self.patients[patient].record.age.unwrap_or(self.stats.age_fill);
        vec![self.stats.age.apply(age)]
    }

    pub fn sample<T: Float>(&self, s: Sample) -> Result<SampleData<T>> {
        let p = &self.patients[s.patient];
        Ok(SampleData {
            tokens: p.tokens.clone(),
            covariates: self.covariates(s.patient).into_iter().map(T::of).collect(),
            volume: s.augmentation.apply(&p.volume)?.cast(),
            target: self.target(s.patient),
            event: p.record.event,
        })
    }
}

fn continuous_age(patients: &[Patient], splits: &[Split], stats: &NormStats) -> ContinuousField {
    let train_ages = patients
        .iter()
        .zip(splits)
        .filter(|(_, &s)| s == Split::Train)
        .map(|(p, _)| p.record.age.unwrap_or(stats.age_fill));
    let (min, max) = train_ages.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a), hi.max(a)));
    ContinuousField {
        name: "age".into(),
        min,
        max,
        mean: stats.age.mean,
        std: stats.age.std,
    }
}
