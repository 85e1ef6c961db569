//! Binary checkpoint: `b"PSNC"`, `u16` version, then in order the config
//! text, vocabulary, normalization statistics, completed epochs, named
//! parameters, Adam state, RNG state, the best-validation snapshot and the
//! epoch history. Little endian throughout; strings are `u32`-length
//! prefixed UTF-8.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::clinical::{ClinicalVocabulary, ContinuousField};
use crate::data::format::{put_f32s, put_string, ByteReader};
use crate::data::{MinMax, NormStats, ZScore};
use crate::error::{Error, Result};
use crate::model::LiteProSENet;
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::Adam;
use super::{BestModel, EpochRecord};

pub const MAGIC: &[u8; 4] = b"PSNC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: ClinicalVocabulary,
    pub stats: NormStats,
    pub params: ParamSet<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub best: Option<BestModel>,
    pub history: Vec<EpochRecord>,
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

fn read_data(r: &mut ByteReader<'_>, like: &ParamSet<f32>, what: &str) -> Result<Vec<Vec<f32>>> {
    like.entries().iter().map(|e| r.f32s(e.value.len(), what)).collect()
}

impl Checkpoint {
    /// Model structure for this checkpoint; its parameter layout must match
    /// the stored tensors name for name and shape for shape.
    pub fn model(&self) -> Result<LiteProSENet> {
        let (model, fresh) = LiteProSENet::init::<f32>(self.config.model.clone(), self.vocab.len(), self.vocab.continuous.len().max(1), 0)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, config implies {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(self.params.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_string(&mut out, &self.config.to_text());

        put_u32(&mut out, self.vocab.len());
        for item in self.vocab.items() {
            put_string(&mut out, item);
        }
        put_u32(&mut out, self.vocab.continuous.len());
        for c in &self.vocab.continuous {
            put_string(&mut out, &c.name);
            for x in [c.min, c.max, c.mean, c.std] {
                put_f64(&mut out, x);
            }
        }
        let s = &self.stats;
        for x in [s.age_fill, s.age.mean, s.age.std, s.time.min, s.time.max] {
            put_f64(&mut out, x);
        }
        put_u32(&mut out, self.epoch);

        put_u32(&mut out, self.params.len());
        for e in self.params.entries() {
            put_string(&mut out, &e.name);
            out.push(e.decay as u8);
            put_u32(&mut out, e.value.shape().len());
            for &d in e.value.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, e.value.data());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for m in self.adam.m.iter().chain(&self.adam.v) {
            put_f32s(&mut out, m);
        }

        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        match &self.best {
            None => out.push(0),
            Some(b) => {
                out.push(1);
                put_u32(&mut out, b.epoch);
                put_f64(&mut out, b.val_c_index);
                put_f64(&mut out, b.val_mse);
                for e in b.params.entries() {
                    put_f32s(&mut out, e.value.data());
                }
            }
        }
        put_u32(&mut out, self.history.len());
        for h in &self.history {
            put_u32(&mut out, h.epoch);
            for x in [h.lr, h.train_loss, h.train_mse, h.val_mse, h.val_c_index] {
                put_f64(&mut out, x);
            }
            out.extend_from_slice(&h.censored_in_loss.to_le_bytes());
            out.extend_from_slice(&h.steps.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let at = r.offset();
        let text = r.string("config")?;
        let config = TrainConfig::from_text(&text).map_err(|e| Error::format(at, format!("config snapshot: {e}")))?;

        let n = r.u32("vocabulary size")? as usize;
        let items = (0..n).map(|_| r.string("vocabulary item")).collect::<Result<Vec<_>>>()?;
        let mut vocab = ClinicalVocabulary::from_items(items.iter().cloned());
        if vocab.items() != items.as_slice() {
            return Err(Error::format(r.offset(), "vocabulary items must be sorted and unique"));
        }
        let n = r.u32("continuous field count")? as usize;
        for _ in 0..n {
            let name = r.string("continuous field")?;
            vocab.continuous.push(ContinuousField {
                name,
                min: r.f64("field min")?,
                max: r.f64("field max")?,
                mean: r.f64("field mean")?,
                std: r.f64("field std")?,
            });
        }
        let stats = NormStats {
            age_fill: r.f64("stats")?,
            age: ZScore {
                mean: r.f64("stats")?,
                std: r.f64("stats")?,
            },
            time: MinMax {
                min: r.f64("stats")?,
                max: r.f64("stats")?,
            },
        };
        let epoch = r.u32("epoch")? as usize;

        let n = r.u32("parameter count")? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let at = r.offset();
            let name = r.string("parameter name")?;
            let decay = match r.u8("decay flag")? {
                0 => false,
                1 => true,
                f => return Err(Error::format(at, format!("bad decay flag {f} for {name}"))),
            };
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(at, "parameter shape overflows"))?;
            let data = r.f32s(len, "parameter data")?;
            params
                .add(name, Tensor::new(shape, data)?, decay)
                .map_err(|e| Error::format(at, e.to_string()))?;
        }
        let step = r.u64("optimizer step")?;
        let m = read_data(&mut r, &params, "first moments")?;
        let v = read_data(&mut r, &params, "second moments")?;

        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64("rng stream")?);
        rng.set_word_pos(r.u128("rng position")?);

        let at = r.offset();
        let best = match r.u8("best flag")? {
            0 => None,
            1 => {
                let epoch = r.u32("best epoch")? as usize;
                let val_c_index = r.f64("best c-index")?;
                let val_mse = r.f64("best mse")?;
                let data = read_data(&mut r, &params, "best parameters")?;
                let mut best = params.clone();
                for (e, d) in best.entries_mut().iter_mut().zip(data) {
                    e.value.data_mut().copy_from_slice(&d);
                }
                Some(BestModel {
                    epoch,
                    val_c_index,
                    val_mse,
                    params: best,
                })
            }
            f => return Err(Error::format(at, format!("bad best-model flag {f}"))),
        };
        let n = r.u32("history length")? as usize;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            history.push(EpochRecord {
                epoch: r.u32("history epoch")? as usize,
                lr: r.f64("history")?,
                train_loss: r.f64("history")?,
                train_mse: r.f64("history")?,
                val_mse: r.f64("history")?,
                val_c_index: r.f64("history")?,
                censored_in_loss: r.u64("history")?,
                steps: r.u64("history")?,
            });
        }
        r.finish()?;
        Ok(Self {
            config,
            vocab,
            stats,
            params,
            adam: Adam { step, m, v },
            epoch,
            rng,
            best,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
