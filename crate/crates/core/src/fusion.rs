//! Late fusion head, frame-difference volumes, prediction ensembling and the
//! training objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamSet};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const DEFAULT_OMEGA: f64 = 0.4;
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Two-layer MLP over the concatenated tower features.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub input_width: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FusionHead {
    pub fn new<T: Float, R: Rng + ?Sized>(
        input_width: usize,
        hidden: usize,
        output_bias: f64,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if input_width == 0 || hidden == 0 {
            return Err(Error::Config("fusion head needs positive widths".into()));
        }
        let w1 = params.add("head.w1", uniform_fan_in(rng, &[input_width, hidden], input_width, 2f64.sqrt()), true)?;
        let b1 = params.add("head.b1", Tensor::zeros([hidden]), false)?;
        let w2 = params.add("head.w2", uniform_fan_in(rng, &[hidden, 1], hidden, 1.0), true)?;
        let b2 = params.add("head.b2", Tensor::full([1], T::of(output_bias)), false)?;
        Ok(Self {
            input_width,
            hidden,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Scalar survival-time prediction from whichever tower features are given.
pub fn fuse_predict<T: Float>(g: &mut Graph<T>, features: &[Var], head: &FusionHead, p: &Bound) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Config("fusion head received no features".into()));
    }
    let width: usize = features.iter().map(|&f| g.value(f).len()).sum();
    if width != head.input_width {
        return Err(Error::Config(format!(
            "fusion head expects width {}, got {width}",
            head.input_width
        )));
    }
    let mut rows = Vec::with_capacity(features.len());
    for &f in features {
        let n = g.value(f).len();
        rows.push(g.reshape(f, &[1, n])?);
    }
    let x = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 1)? };
    let h = g.matmul(x, p[head.w1])?;
    let h = g.add(h, p[head.b1])?;
    let h = g.relu(h);
    let out = g.matmul(h, p[head.w2])?;
    let out = g.add(out, p[head.b2])?;
    g.reshape(out, &[])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Consecutive-slice differences of a `[f, h, w]` volume, zero at the
/// boundary slice. Forward: `out[i] = v[i+1] - v[i]`; backward:
/// `out[i] = v[i-1] - v[i]`.
pub fn frame_difference<T: Float>(volume: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("frame difference needs a [f, h, w] volume, got {s:?}")));
    }
    let f = s[0];
    if f < 2 {
        return Err(Error::Input(format!("frame difference needs at least 2 slices, got {f}")));
    }
    let plane = s[1] * s[2];
    let v = volume.data();
    let mut out = vec![T::zero(); v.len()];
    for i in 0..f {
        let other = match direction {
            Direction::Forward if i + 1 < f => i + 1,
            Direction::Backward if i > 0 => i - 1,
            _ => continue,
        };
        for k in 0..plane {
            out[i * plane + k] = v[other * plane + k] - v[i * plane + k];
        }
    }
    Tensor::new(s.to_vec(), out)
}

pub fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("omega must lie in [0, 1], got {omega}")));
    }
    Ok(())
}

/// `omega * t + (1 - omega) * (t_f + t_b) / 2`.
pub fn ensemble_predict(t_hat: f64, t_forward: f64, t_backward: f64, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    Ok(omega * t_hat + (1.0 - omega) * (t_forward + t_backward) / 2.0)
}

/// Graph form of [`ensemble_predict`]. With only one difference prediction
/// it takes the place of the pair average.
pub fn ensemble<T: Float>(g: &mut Graph<T>, t_hat: Var, diffs: &[Var], omega: f64) -> Result<Var> {
    check_omega(omega)?;
    let avg = match diffs {
        [] => return Ok(t_hat),
        [one] => *one,
        [a, b] => {
            let s = g.add(*a, *b)?;
            g.scale(s, T::of(0.5))
        }
        _ => return Err(Error::Usage("at most two frame-difference predictions".into())),
    };
    let lhs = g.scale(t_hat, T::of(omega));
    let rhs = g.scale(avg, T::of(1.0 - omega));
    g.add(lhs, rhs)
}

/// One sample's share of the batch mean squared error:
/// `(t_bar - target)^2 / batch`.
pub fn squared_error_term<T: Float>(g: &mut Graph<T>, t_bar: Var, target: T, batch: usize) -> Result<Var> {
    let diff = g.add_scalar(t_bar, -target);
    let sq = g.mul(diff, diff)?;
    let sq = g.sum(sq);
    Ok(g.scale(sq, T::one() / T::of(batch as f64)))
}

/// `lambda * sum of squared entries` over the given parameters.
pub fn l2_penalty<T: Float>(g: &mut Graph<T>, params: &[Var], lambda: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in params {
        let sq = g.mul(w, w)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(g.scale(total, T::of(lambda)))
}

/// Batch objective: mean squared error plus `lambda`-weighted L2.
pub fn loss<T: Float>(g: &mut Graph<T>, t_bar: &[Var], targets: &[T], params: &[Var], lambda: f64) -> Result<Var> {
    if t_bar.is_empty() {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    if t_bar.len() != targets.len() {
        return Err(Error::dim("loss", &[t_bar.len()], &[targets.len()]));
    }
    let mut total = None;
    for (&p, &t) in t_bar.iter().zip(targets) {
        let term = squared_error_term(g, p, t, t_bar.len())?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let mse = total.expect("nonempty batch");
    let reg = l2_penalty(g, params, lambda)?;
    g.add(mse, reg)
}

/// Handles of the parameters subject to weight decay.
pub fn decayed_params<T: Float>(params: &ParamSet<T>, bound: &Bound) -> Vec<Var> {
    params
        .ids()
        .zip(params.entries())
        .filter(|(_, e)| e.decay)
        .map(|(id, _)| bound[id])
        .collect()
}
