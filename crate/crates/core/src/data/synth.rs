//! Seeded synthetic cohort: categorical clinical factors and age drive one
//! prognostic score, the mean intensity of an ellipsoidal lesion drives
//! another, and the survival time is their weighted sum plus noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::clinical::ClinicalRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(field, [(value, effect)])`. Positive effects lengthen survival.
pub const FACTORS: &[(&str, &[(&str, f64)])] = &[
    ("stage", &[("I", 0.8), ("II", 0.4), ("IIIa", 0.0), ("IIIb", -0.4)]),
    (
        "histology",
        &[("adenocarcinoma", 0.2), ("squamous", 0.0), ("large_cell", -0.2), ("nos", 0.0)],
    ),
    ("t_stage", &[("T1", 0.3), ("T2", 0.1), ("T3", -0.1), ("T4", -0.3)]),
    ("n_stage", &[("N0", 0.3), ("N1", 0.1), ("N2", -0.1), ("N3", -0.3)]),
    ("sex", &[("female", 0.1), ("male", -0.1)]),
    ("smoking", &[("never", 0.15), ("former", 0.0), ("current", -0.15)]),
];

pub fn categorical_fields() -> Vec<String> {
    FACTORS.iter().map(|(f, _)| f.to_string()).collect()
}

const AGE_MEAN: f64 = 68.0;
const AGE_RANGE: (f64, f64) = (40.0, 90.0);
const AGE_EFFECT: f64 = -0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Raw `[f, h, w]` grid before resizing; `h == w`.
    pub raw_dims: [usize; 3],
    pub alpha: f64,
    pub beta: f64,
    /// Standard deviation of the latent-time noise, in score units.
    pub noise: f64,
    pub censor_fraction: f64,
    pub missing_age_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            raw_dims: [12, 48, 48],
            alpha: 0.5,
            beta: 0.5,
            noise: 0.05,
            censor_fraction: 0.12,
            missing_age_fraction: 0.08,
        }
    }
}

/// Generated patients plus the noiseless generative score of each.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub records: Vec<ClinicalRecord>,
    pub volumes: Vec<Tensor<f32>>,
    pub clinical_score: Vec<f64>,
    pub lesion_score: Vec<f64>,
    pub oracle: Vec<f64>,
}

/// Clinical score mapped so the theoretical extremes land on `[-1, 3]`,
/// centered at 1.
fn clinical_score(effect: f64) -> f64 {
    let age_span = AGE_EFFECT.abs() * (AGE_RANGE.1 - AGE_RANGE.0) / 2.0;
    let lo: f64 = FACTORS
        .iter()
        .map(|(_, v)| v.iter().map(|x| x.1).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        - age_span;
    let hi: f64 = FACTORS
        .iter()
        .map(|(_, v)| v.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        + age_span;
    1.0 + (effect - (lo + hi) / 2.0) / (hi - lo) * 4.0
}

/// Lesion intensity in image units for a lesion score in `[0, 2]`.
pub fn lesion_intensity(score: f64) -> f64 {
    0.3 + 0.25 * score
}

fn lesion_volume<R: Rng>(rng: &mut R, dims: [usize; 3], intensity: f64) -> Tensor<f32> {
    let [f, h, w] = dims;
    let texture = Normal::new(0.08, 0.03).expect("valid normal");
    let speckle = Normal::new(0.0, 0.02).expect("valid normal");
    let radius = rng.gen_range(0.29..0.31) * h as f64;
    let rz = (radius * f as f64 / h as f64).max(1.0);
    let center = [
        (f as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * f as f64,
        (h as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * h as f64,
        (w as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * w as f64,
    ];
    let marker = (h / 12).max(1);
    let mut data = Vec::with_capacity(f * h * w);
    for z in 0..f {
        for y in 0..h {
            for x in 0..w {
                let dz = (z as f64 - center[0]) / rz;
                let dy = (y as f64 - center[1]) / radius;
                let dx = (x as f64 - center[2]) / radius;
                let v = if y < marker && x < marker {
                    1.0
                } else if y >= h - marker && x >= w - marker {
                    0.0
                } else if dz * dz + dy * dy + dx * dx <= 1.0 {
                    intensity + speckle.sample(rng)
                } else {
                    texture.sample(rng)
                };
                data.push(v.clamp(0.0, 0.95) as f32);
            }
        }
        // the intensity reference block stays exactly at 1
        for y in 0..marker {
            for x in 0..marker {
                data[(z * h + y) * w + x] = 1.0;
            }
        }
    }
    Tensor::new(dims.to_vec(), data).expect("sized")
}

/// Deterministic cohort of `n` patients. Exactly `round(n * censor_fraction)`
/// patients are censored, each at a uniform time before its event.
pub fn generate_cohort(seed: u64, n: usize, cfg: &SynthConfig) -> Result<SyntheticCohort> {
    if n < 8 {
        return Err(Error::Input(format!("synthetic cohort needs at least 8 patients, got {n}")));
    }
    let [f, h, w] = cfg.raw_dims;
    if f < 2 || h != w || h < 12 {
        return Err(Error::Config(format!("unsupported synthetic volume dims {:?}", cfg.raw_dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let age_dist = Normal::new(AGE_MEAN, 9.0).expect("valid normal");

    let n_censored = (n as f64 * cfg.censor_fraction).round() as usize;
    let mut censored = vec![false; n];
    censored[..n_censored].iter_mut().for_each(|c| *c = true);
    censored.shuffle(&mut rng);

    let mut cohort = SyntheticCohort {
        records: Vec::with_capacity(n),
        volumes: Vec::with_capacity(n),
        clinical_score: Vec::with_capacity(n),
        lesion_score: Vec::with_capacity(n),
        oracle: Vec::with_capacity(n),
    };
    for (i, &is_censored) in censored.iter().enumerate() {
        let mut effect = 0.0;
        let mut items = Vec::with_capacity(FACTORS.len());
        for (field, values) in FACTORS {
            let (value, e) = values[rng.gen_range(0..values.len())];
            effect += e;
            items.push((field.to_string(), value.to_string()));
        }
        let age = age_dist.sample(&mut rng).clamp(AGE_RANGE.0, AGE_RANGE.1);
        let age = (age * 10.0).round() / 10.0;
        effect += AGE_EFFECT * (age - AGE_MEAN);
        let reported_age = (rng.gen::<f64>() >= cfg.missing_age_fraction).then_some(age);

        let c = clinical_score(effect);
        let s = rng.gen_range(0.0..2.0);
        let volume = lesion_volume(&mut rng, cfg.raw_dims, lesion_intensity(s));
        let oracle = cfg.alpha * c + cfg.beta * s;
        let latent = oracle + noise.sample(&mut rng);
        let event_days = (300.0 + 800.0 * latent).max(1.0);
        let survival_days = if is_censored {
            event_days * (1.0 - rng.gen::<f64>())
        } else {
            event_days
        };

        cohort.records.push(ClinicalRecord {
            patient_id: format!("SYN{i:04}"),
            items,
            age: reported_age,
            survival_days,
            event: !is_censored,
        });
        cohort.volumes.push(volume);
        cohort.clinical_score.push(c);
        cohort.lesion_score.push(s);
        cohort.oracle.push(oracle);
    }
    Ok(cohort)
}
