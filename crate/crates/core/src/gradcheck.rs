//! Central finite-difference checks of tape gradients in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clinical::LiteTransformerConfig;
use crate::error::{Error, Result};
use crate::fusion;
use crate::model::{LiteProSENet, ModelConfig, SampleInput};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::visual::ProSENetConfig;

/// Denominator floor for relative errors, so entries whose gradient is
/// essentially zero are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_values: Option<(f64, f64)>,
    /// Entries whose `±step` probes fell on different sides of a relu kink
    /// and were re-probed with a smaller step.
    pub kink_rechecks: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index));
            self.worst_values = Some((analytic, numeric));
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.checked += other.checked;
        self.kink_rechecks += other.kink_rechecks;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self
    }
}

/// Scalar objective over bound parameters and leaf inputs.
pub trait Objective {
    fn eval(&self, g: &mut Graph<f64>, params: &Bound, inputs: &[Var]) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
{
    fn eval(&self, g: &mut Graph<f64>, params: &Bound, inputs: &[Var]) -> Result<Var> {
        self(g, params, inputs)
    }
}

fn value_of(obj: &impl Objective, params: &ParamSet<f64>, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = obj.eval(&mut g, &bound, &vars)?;
    if !g.shape(out).is_empty() {
        return Err(Error::Usage("gradient check objective must be scalar".into()));
    }
    Ok((g.value(out).item(), g.relu_pattern()))
}

/// Step reductions tried when a probe straddles a relu kink.
const KINK_SHRINK: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

/// Central difference along one coordinate. `set` writes the probe value.
/// Shrinks the step while the two probes and the base point disagree on any
/// relu sign, since a difference across a kink is no derivative estimate.
fn probe(
    base: &[bool],
    step: f64,
    orig: f64,
    mut eval_at: impl FnMut(f64) -> Result<(f64, Vec<bool>)>,
) -> Result<(f64, bool)> {
    let mut last = 0.0;
    for (i, shrink) in KINK_SHRINK.iter().enumerate() {
        let h = step * shrink;
        let (plus, pp) = eval_at(orig + h)?;
        let (minus, pm) = eval_at(orig - h)?;
        last = (plus - minus) / (2.0 * h);
        if pp == base && pm == base {
            return Ok((last, i > 0));
        }
    }
    Ok((last, true))
}

/// Compares tape gradients of every parameter and input entry with
/// `(f(x + h) - f(x - h)) / 2h`.
pub fn check(obj: &impl Objective, params: &ParamSet<f64>, inputs: &[Tensor<f64>], step: f64) -> Result<GradReport> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = obj.eval(&mut g, &bound, &vars)?;
    g.backward(out)?;
    let base = g.relu_pattern();

    let mut report = GradReport::default();
    let mut work = params.clone();
    for (id, entry) in params.ids().zip(params.entries()) {
        let analytic = g.grad_tensor(bound[id]).unwrap_or_else(|| Tensor::zeros(entry.value.shape().to_vec()));
        for k in 0..entry.value.len() {
            let orig = entry.value.data()[k];
            let (numeric, kinked) = probe(&base, step, orig, |x| {
                work.get_mut(id).data_mut()[k] = x;
                value_of(obj, &work, inputs)
            })?;
            work.get_mut(id).data_mut()[k] = orig;
            report.kink_rechecks += kinked as usize;
            report.record(&entry.name, k, analytic.data()[k], numeric);
        }
    }
    let mut work_inputs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            let (numeric, kinked) = probe(&base, step, orig, |x| {
                work_inputs[i].data_mut()[k] = x;
                value_of(obj, params, &work_inputs)
            })?;
            work_inputs[i].data_mut()[k] = orig;
            report.kink_rechecks += kinked as usize;
            report.record(&format!("input{i}"), k, analytic.data()[k], numeric);
        }
    }
    Ok(report)
}

/// One graph operation's check.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradReport,
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>>;

/// `sum(out * w)` for a fixed, position-dependent `w`, so every output entry
/// carries a distinct weight into the scalar.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.7).sin() + 0.1));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Finite-difference check of every differentiable graph operation on small
/// seeded inputs.
pub fn check_ops(seed: u64, step: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<Tensor<f64>>, f: OpFn| cases.push((name, inputs, f));

    case("matmul", vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])], Box::new(|g, _, x| {
        let y = g.matmul(x[0], x[1])?;
        project(g, y)
    }));
    case("transpose", vec![random(&mut rng, &[3, 5])], Box::new(|g, _, x| {
        let y = g.transpose(x[0])?;
        project(g, y)
    }));
    case("reshape", vec![random(&mut rng, &[2, 6])], Box::new(|g, _, x| {
        let y = g.reshape(x[0], &[3, 4])?;
        project(g, y)
    }));
    case("add", vec![random(&mut rng, &[2, 3, 1]), random(&mut rng, &[4])], Box::new(|g, _, x| {
        let y = g.add(x[0], x[1])?;
        project(g, y)
    }));
    case("sub", vec![random(&mut rng, &[3, 1]), random(&mut rng, &[2, 1, 4])], Box::new(|g, _, x| {
        let y = g.sub(x[0], x[1])?;
        project(g, y)
    }));
    case("mul", vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[3, 1])], Box::new(|g, _, x| {
        let y = g.mul(x[0], x[1])?;
        project(g, y)
    }));
    case("mul-self", vec![random(&mut rng, &[5])], Box::new(|g, _, x| {
        let y = g.mul(x[0], x[0])?;
        project(g, y)
    }));
    case("scale", vec![random(&mut rng, &[4])], Box::new(|g, _, x| {
        let y = g.scale(x[0], -1.7);
        project(g, y)
    }));
    case("add_scalar", vec![random(&mut rng, &[4])], Box::new(|g, _, x| {
        let y = g.add_scalar(x[0], 0.3);
        let y = g.mul(y, y)?;
        project(g, y)
    }));
    case("sigmoid", vec![random(&mut rng, &[6])], Box::new(|g, _, x| {
        let y = g.sigmoid(x[0]);
        project(g, y)
    }));
    case("relu", vec![off_zero(&mut rng, &[8])], Box::new(|g, _, x| {
        let y = g.relu(x[0]);
        project(g, y)
    }));
    case("softmax-last", vec![random(&mut rng, &[3, 4])], Box::new(|g, _, x| {
        let y = g.softmax(x[0], 1)?;
        project(g, y)
    }));
    case("softmax-middle", vec![random(&mut rng, &[2, 3, 2])], Box::new(|g, _, x| {
        let y = g.softmax(x[0], 1)?;
        project(g, y)
    }));
    case(
        "layer_norm",
        vec![random(&mut rng, &[3, 5]), random(&mut rng, &[5]), random(&mut rng, &[5])],
        Box::new(|g, _, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            project(g, y)
        }),
    );
    case(
        "concat",
        vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 1]), random(&mut rng, &[2, 2])],
        Box::new(|g, _, x| {
            let y = g.concat(x, 1)?;
            project(g, y)
        }),
    );
    case("mean_over", vec![random(&mut rng, &[2, 3, 2, 2])], Box::new(|g, _, x| {
        let y = g.mean_over(x[0], &[1, 3])?;
        project(g, y)
    }));
    case("sum", vec![random(&mut rng, &[3, 2])], Box::new(|g, _, x| {
        let y = g.sum(x[0]);
        let y = g.mul(y, y)?;
        Ok(y)
    }));
    case(
        "conv3d",
        vec![random(&mut rng, &[2, 2, 3, 5, 4]), random(&mut rng, &[3, 2, 3, 3, 3]), random(&mut rng, &[3])],
        Box::new(|g, _, x| {
            let y = g.conv3d(x[0], x[1], Some(x[2]), [1, 2, 1], [1, 1, 0])?;
            project(g, y)
        }),
    );
    case(
        "conv3d-2x2x2",
        vec![random(&mut rng, &[1, 2, 3, 4, 4]), random(&mut rng, &[2, 2, 2, 2, 2])],
        Box::new(|g, _, x| {
            let y = g.conv3d(x[0], x[1], None, [1, 1, 1], [0, 0, 0])?;
            project(g, y)
        }),
    );
    case(
        "conv3d-pointwise",
        vec![random(&mut rng, &[1, 3, 2, 4, 4]), random(&mut rng, &[2, 3, 1, 1, 1])],
        Box::new(|g, _, x| {
            let y = g.conv3d(x[0], x[1], None, [1, 2, 2], [0, 0, 0])?;
            project(g, y)
        }),
    );
    case("gather_rows", vec![random(&mut rng, &[4, 3])], Box::new(|g, _, x| {
        let y = g.gather_rows(x[0], &[2, 0, 2, 3])?;
        project(g, y)
    }));

    let empty = ParamSet::new();
    cases
        .into_iter()
        .map(|(op, inputs, f)| Ok(OpCheck { op, report: check(&f, &empty, &inputs, step)? }))
        .collect()
}

/// Model used by the end-to-end check: 4 frames of 16x16, `d = 12`, one
/// block per stage, the second stage downsampling through a projection
/// shortcut.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        clinical: LiteTransformerConfig {
            d: 12,
            heads: 2,
            layers: 1,
            mlp_hidden: 24,
        },
        visual: ProSENetConfig {
            input: [4, 16, 16],
            stem: 2,
            widths: vec![2, 4],
            blocks: vec![1, 1],
            ..ProSENetConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Checks the full batch objective (squared error of the ensembled
/// prediction plus the L2 term) on a two-sample micro-batch with respect to
/// every parameter.
///
/// Every initialized tensor is jittered first. Zero-initialized projections
/// would otherwise leave the attention weights without gradient and the
/// layer norms close to degenerate rows.
pub fn check_model(config: &ModelConfig, lambda: f64, seed: u64, step: f64) -> Result<GradReport> {
    const VOCAB: usize = 6;
    let (model, mut params) = LiteProSENet::init::<f64>(config.clone(), VOCAB, 1, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for e in params.entries_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let [f, h, w] = config.visual.input;
    let samples: Vec<(Vec<usize>, Vec<f64>, Tensor<f64>, f64)> = (0..2)
        .map(|_| {
            let tokens = (0..3).map(|_| rng.gen_range(0..VOCAB)).collect();
            let covariates = vec![rng.gen_range(-1.0..1.0)];
            let volume = Tensor::from_fn([f, h, w], |_| rng.gen_range(0.0..1.0));
            (tokens, covariates, volume, rng.gen_range(0.0..1.0))
        })
        .collect();
    let decay: Vec<bool> = params.entries().iter().map(|e| e.decay).collect();
    let objective = |g: &mut Graph<f64>, p: &Bound, _: &[Var]| -> Result<Var> {
        let mut total = None;
        for (tokens, covariates, volume, target) in &samples {
            let pred = model.forward(g, p, SampleInput { tokens, covariates, volume })?;
            let term = fusion::squared_error_term(g, pred.t_bar, *target, samples.len())?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let decayed: Vec<Var> = p.vars().iter().zip(&decay).filter(|(_, &d)| d).map(|(&v, _)| v).collect();
        let reg = fusion::l2_penalty(g, &decayed, lambda)?;
        g.add(total.expect("two samples"), reg)
    };
    check(&objective, &params, &[], step)
}
