use crate::clinical::ClinicalRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max scaling fitted on the training split. Out-of-range values pass
/// through unclamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(name: &str, series: &[f64]) -> Result<Self> {
        let min = series.iter().copied().fold(f64::INFINITY, f64::min);
        let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if series.is_empty() || !(max > min) {
            return Err(Error::DegenerateFeature(name.to_string()));
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * (self.max - self.min) + self.min
    }
}

pub fn minmax_scale(name: &str, series: &[f64]) -> Result<Vec<f64>> {
    let s = MinMax::fit(name, series)?;
    Ok(series.iter().map(|&x| s.apply(x)).collect())
}

/// Standard score with population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub fn fit(name: &str, series: &[f64]) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::DegenerateFeature(name.to_string()));
        }
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::DegenerateFeature(name.to_string()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

pub fn zscore(name: &str, series: &[f64]) -> Result<Vec<f64>> {
    let s = ZScore::fit(name, series)?;
    Ok(series.iter().map(|&x| s.apply(x)).collect())
}

/// Mean of the observed ages among `train` records.
pub fn age_mean(records: &[ClinicalRecord], train: &[bool]) -> Result<f64> {
    let observed: Vec<f64> = records
        .iter()
        .zip(train)
        .filter(|(_, &t)| t)
        .filter_map(|(r, _)| r.age)
        .collect();
    if observed.is_empty() {
        return Err(Error::Pipeline("every training age is missing; nothing to impute from".into()));
    }
    Ok(observed.iter().sum::<f64>() / observed.len() as f64)
}

/// Fill missing ages with the training-split mean of observed ages.
pub fn impute_age(records: &[ClinicalRecord], train: &[bool]) -> Result<Vec<ClinicalRecord>> {
    let mean = age_mean(records, train)?;
    Ok(records
        .iter()
        .map(|r| ClinicalRecord {
            age: Some(r.age.unwrap_or(mean)),
            ..r.clone()
        })
        .collect())
}

/// Source coordinate for output index `i` when mapping `n_in` samples onto
/// `n_out` with aligned end points.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let x = source_coord(i, n_in, n_out);
            let lo = (x.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Trilinear resampling of a `[f, h, w]` grid, corners aligned.
pub fn resize_trilinear(raw: &Tensor<f32>, dims: [usize; 3]) -> Result<Tensor<f32>> {
    let s = raw.shape();
    if s.len() != 3 || s.contains(&0) || dims.contains(&0) {
        return Err(Error::Input(format!("cannot resize volume of shape {s:?} to {dims:?}")));
    }
    if s == dims {
        return Ok(raw.clone());
    }
    let (tz, ty, tx) = (taps(s[0], dims[0]), taps(s[1], dims[1]), taps(s[2], dims[2]));
    let v = raw.data();
    let at = |z: usize, y: usize, x: usize| v[(z * s[1] + y) * s[2] + x] as f64;
    let mut out = Vec::with_capacity(dims.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                out.push(lerp(c0, c1, fz) as f32);
            }
        }
    }
    Tensor::new(dims.to_vec(), out)
}

/// Resize to `dims` then map the volume's own `[min, max]` onto `[0, 1]`.
/// A constant volume maps to 0.5 everywhere.
pub fn normalize_volume(raw: &Tensor<f32>, dims: [usize; 3]) -> Result<Tensor<f32>> {
    if !raw.all_finite() {
        return Err(Error::Input("volume contains non-finite values".into()));
    }
    let resized = resize_trilinear(raw, dims)?;
    let min = resized.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = resized.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return Ok(Tensor::full(dims.to_vec(), 0.5));
    }
    let span = (max - min) as f64;
    Ok(resized.map(|x| (((x - min) as f64 / span) as f32).clamp(0.0, 1.0)))
}
