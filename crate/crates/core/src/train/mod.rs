//! Training protocol: patient-level splits, mini-batch Adam on the MSE + L2
//! objective with step-decayed learning rate, best-validation tracking,
//! checkpoints, evaluation and ablation grids.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod results;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablate::{ablate, grid, AblationRow, Grid, Variant};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use optim::Adam;
pub use results::{append_results, ResultRow};

use crate::clinical::ClinicalVocabulary;
use crate::data::{split_patients, Augmentation, NormStats, Sample, Split, SurvivalDataset};
use crate::error::{Error, Result};
use crate::fusion;
use crate::metrics::{self, EvalRecord};
use crate::model::{LiteProSENet, SampleInput};
use crate::params::ParamSet;
use crate::tensor::Graph;

/// Per-epoch training and validation summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch objective, L2 included.
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    /// NaN when no validation pair is comparable.
    pub val_c_index: f64,
    /// Censored samples that reached a loss term; always zero.
    pub censored_in_loss: u64,
    pub steps: u64,
}

/// Snapshot of the parameters with the best validation score so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub val_c_index: f64,
    pub val_mse: f64,
    pub params: ParamSet<f32>,
}

impl BestModel {
    /// Higher concordance wins, lower MSE breaks ties; an undefined
    /// concordance ranks below every defined one.
    fn beaten_by(&self, c: f64, mse: f64) -> bool {
        let key = |c: f64| if c.is_nan() { f64::NEG_INFINITY } else { c };
        let (old, new) = (key(self.val_c_index), key(c));
        new > old || (new == old && mse < self.val_mse)
    }
}

/// Reassigns the dataset split to `config`'s fold, using its seed.
pub fn assign_fold(config: &TrainConfig, ds: &mut SurvivalDataset) -> Result<()> {
    let splits = split_patients(ds.len(), config.ratios, config.fold, config.seed)?;
    if splits != ds.splits() {
        ds.reassign(splits)?;
    }
    Ok(())
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: LiteProSENet,
    pub params: ParamSet<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best: Option<BestModel>,
    pub history: Vec<EpochRecord>,
    pub vocab: ClinicalVocabulary,
    pub stats: NormStats,
}

fn check_schema(config: &TrainConfig, vocab: &ClinicalVocabulary, stats: &NormStats, ds: &SurvivalDataset) -> Result<()> {
    if config.model.visual.input != ds.dims() {
        return Err(Error::Config(format!(
            "model expects volumes {:?}, dataset holds {:?}",
            config.model.visual.input,
            ds.dims()
        )));
    }
    if vocab.items() != ds.vocab().items() {
        return Err(Error::Config("clinical vocabulary differs from the dataset's".into()));
    }
    if stats != ds.stats() {
        return Err(Error::Config(
            "normalization statistics differ from the dataset's; was it split with another seed or fold?".into(),
        ));
    }
    Ok(())
}

impl Trainer {
    /// Fresh model for `ds` under its current split assignment.
    pub fn new(config: TrainConfig, ds: &SurvivalDataset) -> Result<Self> {
        config.validate()?;
        let (model, params) = LiteProSENet::init::<f32>(config.model.clone(), ds.vocab().len(), ds.n_continuous(), config.seed)?;
        let vocab = ds.vocab().clone();
        let stats = *ds.stats();
        check_schema(&config, &vocab, &stats, ds)?;
        Ok(Self {
            adam: Adam::new(&params),
            rng: training_rng(config.seed),
            config,
            model,
            params,
            epoch: 0,
            best: None,
            history: Vec::new(),
            vocab,
            stats,
        })
    }

    pub fn resume(ckpt: Checkpoint, ds: &SurvivalDataset) -> Result<Self> {
        let model = ckpt.model()?;
        check_schema(&ckpt.config, &ckpt.vocab, &ckpt.stats, ds)?;
        Ok(Self {
            config: ckpt.config,
            model,
            params: ckpt.params,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            rng: ckpt.rng,
            best: ckpt.best,
            history: ckpt.history,
            vocab: ckpt.vocab,
            stats: ckpt.stats,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            stats: self.stats,
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            best: self.best.clone(),
            history: self.history.clone(),
        }
    }

    /// Uncensored training samples for one epoch, in visiting order.
    fn epoch_samples(&mut self, ds: &SurvivalDataset) -> Result<Vec<Sample>> {
        let patients: Vec<usize> = ds
            .patients_in(Split::Train)
            .into_iter()
            .filter(|&i| ds.patients()[i].record.event)
            .collect();
        if patients.is_empty() {
            return Err(Error::Input("no uncensored training samples".into()));
        }
        let mut samples = Vec::with_capacity(patients.len() * self.config.views_per_epoch);
        for patient in patients {
            let mut views = Augmentation::ALL;
            if self.config.views_per_epoch < views.len() {
                views.shuffle(&mut self.rng);
            }
            for &augmentation in &views[..self.config.views_per_epoch] {
                samples.push(Sample { patient, augmentation });
            }
        }
        samples.shuffle(&mut self.rng);
        Ok(samples)
    }

    /// One optimizer step over `batch`. Returns `(mse, objective)`.
    fn step(&mut self, ds: &SurvivalDataset, batch: &[Sample], lr: f64, censored: &mut u64) -> Result<(f64, f64)> {
        let mut grads: Vec<Vec<f32>> = self.params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        let accumulate = |g: &Graph<f32>, bound: &crate::params::Bound, grads: &mut Vec<Vec<f32>>| {
            for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(gv) = g.grad(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, &x)| *a += x);
                }
            }
        };
        let mut mse = 0.0;
        for &s in batch {
            let data = ds.sample::<f32>(s)?;
            if !data.event {
                *censored += 1;
            }
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g);
            let pred = self.model.forward(
                &mut g,
                &bound,
                SampleInput {
                    tokens: &data.tokens,
                    covariates: &data.covariates,
                    volume: &data.volume,
                },
            )?;
            let term = fusion::squared_error_term(&mut g, pred.t_bar, data.target as f32, batch.len())?;
            mse += g.value(term).item() as f64;
            g.backward(term)?;
            accumulate(&g, &bound, &mut grads);
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let decayed = fusion::decayed_params(&self.params, &bound);
        let penalty = fusion::l2_penalty(&mut g, &decayed, self.config.lambda)?;
        let objective = mse + g.value(penalty).item() as f64;
        if !objective.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite objective at epoch {}, step {}",
                self.epoch,
                self.adam.step + 1
            )));
        }
        g.backward(penalty)?;
        accumulate(&g, &bound, &mut grads);
        self.adam.update(&mut self.params, &grads, lr)?;
        Ok((mse, objective))
    }

    pub fn run_epoch(&mut self, ds: &SurvivalDataset) -> Result<EpochRecord> {
        let lr = self.config.lr_at(self.epoch);
        let samples = self.epoch_samples(ds)?;
        let mut censored = 0;
        let (mut loss_sum, mut mse_sum, mut steps) = (0.0, 0.0, 0u64);
        for batch in samples.chunks(self.config.batch_size) {
            let (mse, objective) = self.step(ds, batch, lr, &mut censored)?;
            mse_sum += mse;
            loss_sum += objective;
            steps += 1;
        }
        let val = validation_records(&self.model, &self.params, ds)?;
        let val_mse = mean_squared_error(&val);
        let val_c_index = metrics::concordance_index(&val).unwrap_or(f64::NAN);
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            train_mse: mse_sum / steps as f64,
            val_mse,
            val_c_index,
            censored_in_loss: censored,
            steps,
        };
        if self.best.as_ref().is_none_or(|b| b.beaten_by(val_c_index, val_mse)) {
            self.best = Some(BestModel {
                epoch: self.epoch,
                val_c_index,
                val_mse,
                params: self.params.clone(),
            });
        }
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until `until` are complete, reporting each.
    pub fn run_until(&mut self, ds: &SurvivalDataset, until: usize, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < until {
            let r = self.run_epoch(ds)?;
            on_epoch(&r);
        }
        Ok(())
    }
}

/// Train from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, ds: &SurvivalDataset) -> Result<Checkpoint> {
    let epochs = config.epochs;
    let mut t = Trainer::new(config, ds)?;
    t.run_until(ds, epochs, |_| {})?;
    Ok(t.checkpoint())
}

/// Mean squared error over the uncensored records; NaN if there are none.
pub fn mean_squared_error(records: &[EvalRecord]) -> f64 {
    let (sum, n) = records
        .iter()
        .filter(|r| r.event)
        .fold((0.0, 0usize), |(s, n), r| (s + (r.predicted - r.observed).powi(2), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Ensembled predictions for `samples`, paired with normalized observed
/// times.
pub fn predict_samples(model: &LiteProSENet, params: &ParamSet<f32>, ds: &SurvivalDataset, samples: &[Sample]) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|&s| {
            let data = ds.sample::<f32>(s)?;
            let p = model.predict(
                params,
                SampleInput {
                    tokens: &data.tokens,
                    covariates: &data.covariates,
                    volume: &data.volume,
                },
            )?;
            Ok(EvalRecord {
                predicted: p.t_bar,
                observed: data.target,
                event: data.event,
            })
        })
        .collect()
}

/// Validation scores use each validation patient's unaugmented view.
fn validation_records(model: &LiteProSENet, params: &ParamSet<f32>, ds: &SurvivalDataset) -> Result<Vec<EvalRecord>> {
    let samples: Vec<Sample> = ds
        .patients_in(Split::Val)
        .into_iter()
        .map(|patient| Sample {
            patient,
            augmentation: Augmentation::Identity,
        })
        .collect();
    predict_samples(model, params, ds, &samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    /// `None` when no pair is comparable.
    pub c_index: Option<f64>,
    /// `None` when the split has no uncensored sample.
    pub mae: Option<f64>,
    pub records: Vec<EvalRecord>,
}

/// Scores every augmented sample of `split`: concordance over all of them,
/// MAE over the uncensored ones. Uses the best-validation parameters when
/// the checkpoint has them.
pub fn evaluate(ckpt: &Checkpoint, ds: &SurvivalDataset, split: Split) -> Result<EvalReport> {
    let model = ckpt.model()?;
    check_schema(&ckpt.config, &ckpt.vocab, &ckpt.stats, ds)?;
    let params = ckpt.best.as_ref().map_or(&ckpt.params, |b| &b.params);
    let samples = ds.samples(split);
    let records = predict_samples(&model, params, ds, &samples)?;
    Ok(EvalReport {
        split,
        samples: records.len(),
        c_index: metrics::concordance_index(&records).ok(),
        mae: metrics::mae(&records).ok(),
        records,
    })
}
