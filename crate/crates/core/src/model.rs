//! Full two-tower model: clinical tower, visual tower, fusion head, with the
//! raw and frame-difference passes sharing one parameter set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clinical::{ClinicalTower, LiteTransformerConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{self, Direction, FusionHead};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::visual::{ProSENet, ProSENetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Towers {
    Both,
    ClinicalOnly,
    VisualOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameDiff {
    On,
    ForwardOnly,
    BackwardOnly,
    Off,
}

impl FrameDiff {
    pub fn directions(self) -> &'static [Direction] {
        match self {
            FrameDiff::On => &[Direction::Forward, Direction::Backward],
            FrameDiff::ForwardOnly => &[Direction::Forward],
            FrameDiff::BackwardOnly => &[Direction::Backward],
            FrameDiff::Off => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub clinical: LiteTransformerConfig,
    pub encoder: TextEncoder,
    pub visual: ProSENetConfig,
    pub towers: Towers,
    pub head_hidden: usize,
    pub output_bias: f64,
    pub omega: f64,
    pub frame_diff: FrameDiff,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            clinical: LiteTransformerConfig::default(),
            encoder: TextEncoder::LiteTransformer,
            visual: ProSENetConfig::default(),
            towers: Towers::Both,
            head_hidden: 64,
            output_bias: 0.5,
            omega: fusion::DEFAULT_OMEGA,
            frame_diff: FrameDiff::On,
        }
    }
}

impl ModelConfig {
    pub fn uses_clinical(&self) -> bool {
        self.towers != Towers::VisualOnly
    }

    pub fn uses_visual(&self) -> bool {
        self.towers != Towers::ClinicalOnly
    }

    pub fn validate(&self) -> Result<()> {
        fusion::check_omega(self.omega)?;
        if self.uses_clinical() {
            self.clinical.validate()?;
        }
        if self.uses_visual() {
            self.visual.validate()?;
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs of one sample. `volume` is `[f, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a, T> {
    pub tokens: &'a [usize],
    pub covariates: &'a [T],
    pub volume: &'a Tensor<T>,
}

/// Graph handles of the per-pass and ensembled predictions.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub t_hat: Var,
    pub diffs: Vec<(Direction, Var)>,
    pub t_bar: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionValues {
    pub t_hat: f64,
    pub t_forward: Option<f64>,
    pub t_backward: Option<f64>,
    pub t_bar: f64,
}

#[derive(Clone, Debug)]
pub struct LiteProSENet {
    pub config: ModelConfig,
    pub clinical: Option<ClinicalTower>,
    pub visual: Option<ProSENet>,
    pub head: FusionHead,
}

impl LiteProSENet {
    pub fn new<T: Float, R: Rng + ?Sized>(
        config: ModelConfig,
        vocab_size: usize,
        n_continuous: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let clinical = if config.uses_clinical() {
            Some(ClinicalTower::new(config.clinical, config.encoder, vocab_size, n_continuous, params, rng)?)
        } else {
            None
        };
        let visual = if config.uses_visual() {
            Some(ProSENet::new(config.visual.clone(), params, rng)?)
        } else {
            None
        };
        let width = clinical.as_ref().map_or(0, |c| c.config.d) + visual.as_ref().map_or(0, |v| v.config.feature_dim());
        let head = FusionHead::new(width, config.head_hidden, config.output_bias, params, rng)?;
        Ok(Self {
            config,
            clinical,
            visual,
            head,
        })
    }

    /// Build a model and its freshly initialized parameters from a seed.
    pub fn init<T: Float>(config: ModelConfig, vocab_size: usize, n_continuous: usize, seed: u64) -> Result<(Self, ParamSet<T>)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(config, vocab_size, n_continuous, &mut params, &mut rng)?;
        Ok((model, params))
    }

    /// Runs the raw pass and each configured frame-difference pass through
    /// the same weights. The clinical feature is computed once and reused.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, input: SampleInput<'_, T>) -> Result<Prediction> {
        let clinical = match &self.clinical {
            Some(tower) => Some(tower.forward(g, p, input.tokens, input.covariates)?),
            None => None,
        };
        let pass = |g: &mut Graph<T>, volume: Option<Tensor<T>>| -> Result<Var> {
            let mut features = Vec::with_capacity(2);
            features.extend(clinical);
            if let (Some(net), Some(vol)) = (&self.visual, volume) {
                let v = g.constant(vol);
                features.push(net.forward(g, p, v)?);
            }
            fusion::fuse_predict(g, &features, &self.head, p)
        };
        let t_hat = pass(g, self.visual.as_ref().map(|_| input.volume.clone()))?;
        let mut diffs = Vec::new();
        if self.visual.is_some() {
            for &dir in self.config.frame_diff.directions() {
                let vol = fusion::frame_difference(input.volume, dir)?;
                diffs.push((dir, pass(g, Some(vol))?));
            }
        }
        let diff_vars: Vec<Var> = diffs.iter().map(|&(_, v)| v).collect();
        let t_bar = fusion::ensemble(g, t_hat, &diff_vars, self.config.omega)?;
        Ok(Prediction { t_hat, diffs, t_bar })
    }

    /// Inference without recording gradients.
    pub fn predict<T: Float>(&self, params: &ParamSet<T>, input: SampleInput<'_, T>) -> Result<PredictionValues> {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let pred = self.forward(&mut g, &bound, input)?;
        let get = |dir: Direction| {
            pred.diffs
                .iter()
                .find(|(d, _)| *d == dir)
                .map(|&(_, v)| g.value(v).item().as_f64())
        };
        Ok(PredictionValues {
            t_hat: g.value(pred.t_hat).item().as_f64(),
            t_forward: get(Direction::Forward),
            t_backward: get(Direction::Backward),
            t_bar: g.value(pred.t_bar).item().as_f64(),
        })
    }
}
