//! Clinical tower: item embedding followed by a pre-norm multi-head
//! self-attention encoder, mean-pooled to one feature vector.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamSet};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One patient's clinical row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalRecord {
    pub patient_id: String,
    /// `(field, value)` categorical items.
    pub items: Vec<(String, String)>,
    pub age: Option<f64>,
    pub survival_days: f64,
    pub event: bool,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.survival_days > 0.0 && self.survival_days.is_finite()) {
            return Err(Error::Input(format!(
                "patient {}: survival time must be positive, got {}",
                self.patient_id, self.survival_days
            )));
        }
        Ok(())
    }
}

pub fn item_key(field: &str, value: &str) -> String {
    format!("{field}={value}")
}

/// Statistics of one continuous field, taken from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousField {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Dense item index over every categorical value plus the continuous-field
/// registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClinicalVocabulary {
    items: Vec<String>,
    index: HashMap<String, usize>,
    pub continuous: Vec<ContinuousField>,
}

impl ClinicalVocabulary {
    /// Items are indexed in sorted order so the mapping does not depend on
    /// record order.
    pub fn from_items<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = items.into_iter().map(Into::into).collect();
        all.sort();
        all.dedup();
        let index = all.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            items: all,
            index,
            continuous: Vec::new(),
        }
    }

    pub fn from_records(records: &[ClinicalRecord]) -> Self {
        Self::from_items(
            records
                .iter()
                .flat_map(|r| r.items.iter().map(|(f, v)| item_key(f, v))),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn lookup(&self, key: &str) -> Result<usize> {
        self.index
            .get(key)
            .copied()
            .ok_or_else(|| Error::Vocabulary(key.to_string()))
    }

    pub fn encode(&self, record: &ClinicalRecord) -> Result<Vec<usize>> {
        record
            .items
            .iter()
            .map(|(f, v)| self.lookup(&item_key(f, v)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiteTransformerConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
}

impl Default for LiteTransformerConfig {
    fn default() -> Self {
        Self {
            d: 48,
            heads: 3,
            layers: 5,
            mlp_hidden: 4 * 48,
        }
    }
}

impl LiteTransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("lite transformer needs at least one layer".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Stack `[m + n_cont, d]` token rows: looked-up item embeddings followed by
/// one projected row per continuous covariate.
pub fn embed_record<T: Float>(
    g: &mut Graph<T>,
    tokens: &[usize],
    covariates: &[T],
    table: Var,
    projections: &[(Var, Var)],
) -> Result<Var> {
    if covariates.len() != projections.len() {
        return Err(Error::dim("embed_record", &[covariates.len()], &[projections.len()]));
    }
    let mut rows = Vec::with_capacity(1 + covariates.len());
    if !tokens.is_empty() {
        rows.push(g.gather_rows(table, tokens)?);
    }
    for (&x, &(w, b)) in covariates.iter().zip(projections) {
        let scaled = g.scale(w, x);
        let row = g.add(scaled, b)?;
        let d = g.shape(row).iter().product::<usize>();
        rows.push(g.reshape(row, &[1, d])?);
    }
    if rows.is_empty() {
        return Err(Error::Input("clinical record has no items".into()));
    }
    g.concat(&rows, 0)
}

pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Single-head scaled dot-product self-attention over the rows of `c`.
pub fn self_attention<T: Float>(g: &mut Graph<T>, c: Var, wq: Var, wk: Var, wv: Var) -> Result<Attention> {
    let h = g.shape(wq).get(1).copied().unwrap_or(0);
    for w in [wk, wv] {
        if g.shape(w) != g.shape(wq) {
            return Err(Error::dim("self_attention", g.shape(wq), g.shape(w)));
        }
    }
    let q = g.matmul(c, wq)?;
    let k = g.matmul(c, wk)?;
    let v = g.matmul(c, wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::of(1.0 / (h as f64).sqrt()));
    let weights = g.softmax(logits, 1)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: (ParamId, ParamId),
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Multi-head self-attention: per-head outputs concatenated, projected back
/// to width `d`.
pub fn multi_head_attention<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    layer: &EncoderLayer,
    p: &Bound,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let a = self_attention(g, x, p[head.wq], p[head.wk], p[head.wv])?;
        outs.push(a.output);
        weights.push(a.weights);
    }
    let cat = g.concat(&outs, 1)?;
    let proj = g.matmul(cat, p[layer.wo])?;
    Ok((g.add(proj, p[layer.bo])?, weights))
}

fn layer_forward<T: Float>(g: &mut Graph<T>, a: Var, layer: &EncoderLayer, p: &Bound, weights: &mut Vec<Var>) -> Result<Var> {
    let n1 = g.layer_norm(a, p[layer.ln1.0], p[layer.ln1.1], LAYER_NORM_EPS)?;
    let (msa, w) = multi_head_attention(g, n1, layer, p)?;
    weights.extend(w);
    let a = g.add(msa, a)?;
    let n2 = g.layer_norm(a, p[layer.ln2.0], p[layer.ln2.1], LAYER_NORM_EPS)?;
    let hdn = g.matmul(n2, p[layer.w1])?;
    let hdn = g.add(hdn, p[layer.b1])?;
    let hdn = g.relu(hdn);
    let out = g.matmul(hdn, p[layer.w2])?;
    let out = g.add(out, p[layer.b2])?;
    g.add(out, a)
}

/// Token-level output of the encoder before pooling, with every head's
/// attention matrix.
pub struct EncoderTrace {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// Residual pre-norm encoder stack followed by a final layer norm.
pub fn lite_transformer_tokens<T: Float>(
    g: &mut Graph<T>,
    c: Var,
    layers: &[EncoderLayer],
    final_ln: (ParamId, ParamId),
    p: &Bound,
) -> Result<EncoderTrace> {
    let mut a = c;
    let mut attention = Vec::new();
    for layer in layers {
        a = layer_forward(g, a, layer, p, &mut attention)?;
    }
    let tokens = g.layer_norm(a, p[final_ln.0], p[final_ln.1], LAYER_NORM_EPS)?;
    Ok(EncoderTrace { tokens, attention })
}

/// Encoder output mean-pooled over token rows: shape `[d]`.
pub fn lite_transformer_forward<T: Float>(
    g: &mut Graph<T>,
    c: Var,
    layers: &[EncoderLayer],
    final_ln: (ParamId, ParamId),
    p: &Bound,
) -> Result<Var> {
    let trace = lite_transformer_tokens(g, c, layers, final_ln, p)?;
    g.mean_over(trace.tokens, &[0])
}

/// How the clinical token matrix is turned into the feature `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextEncoder {
    LiteTransformer,
    /// Mean of the token rows through a two-layer MLP of similar size; the
    /// ablation baseline.
    Mlp,
}

#[derive(Clone, Debug)]
enum EncoderParams {
    Transformer {
        layers: Vec<EncoderLayer>,
        final_ln: (ParamId, ParamId),
    },
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

/// Parameter handles of the whole clinical tower.
#[derive(Clone, Debug)]
pub struct ClinicalTower {
    pub config: LiteTransformerConfig,
    pub embedding: ParamId,
    pub projections: Vec<(ParamId, ParamId)>,
    encoder: EncoderParams,
}

fn ln_pair<T: Float>(params: &mut ParamSet<T>, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let gain = params.add(format!("{prefix}.gain"), Tensor::full([d], T::one()), false)?;
    let bias = params.add(format!("{prefix}.bias"), Tensor::zeros([d]), false)?;
    Ok((gain, bias))
}

impl ClinicalTower {
    pub fn new<T: Float, R: Rng + ?Sized>(
        config: LiteTransformerConfig,
        encoder: TextEncoder,
        vocab_size: usize,
        n_continuous: usize,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 && n_continuous == 0 {
            return Err(Error::Config("clinical tower has no inputs".into()));
        }
        let d = config.d;
        let embedding = params.add(
            "clinical.embedding",
            uniform_fan_in(rng, &[vocab_size.max(1), d], 1, 1.0 / 3f64.sqrt()),
            true,
        )?;
        let mut projections = Vec::with_capacity(n_continuous);
        for i in 0..n_continuous {
            let w = params.add(format!("clinical.covariate{i}.weight"), uniform_fan_in(rng, &[d], 1, 1.0 / 3f64.sqrt()), true)?;
            let b = params.add(format!("clinical.covariate{i}.bias"), Tensor::zeros([d]), false)?;
            projections.push((w, b));
        }
        let encoder = match encoder {
            TextEncoder::LiteTransformer => {
                let h = config.head_dim();
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let pre = format!("clinical.layer{l}");
                    let ln1 = ln_pair(params, &format!("{pre}.ln1"), d)?;
                    let mut heads = Vec::with_capacity(config.heads);
                    for hi in 0..config.heads {
                        let mut mk = |name: &str, params: &mut ParamSet<T>| {
                            params.add(format!("{pre}.head{hi}.{name}"), uniform_fan_in(rng, &[d, h], d, 1.0), true)
                        };
                        let wq = mk("wq", params)?;
                        let wk = mk("wk", params)?;
                        let wv = mk("wv", params)?;
                        heads.push(HeadParams { wq, wk, wv });
                    }
                    // Residual-branch output projections start at zero.
                    let wo = params.add(format!("{pre}.wo"), Tensor::zeros([d, d]), true)?;
                    let bo = params.add(format!("{pre}.bo"), Tensor::zeros([d]), false)?;
                    let ln2 = ln_pair(params, &format!("{pre}.ln2"), d)?;
                    let w1 = params.add(
                        format!("{pre}.mlp.w1"),
                        uniform_fan_in(rng, &[d, config.mlp_hidden], d, 2f64.sqrt()),
                        true,
                    )?;
                    let b1 = params.add(format!("{pre}.mlp.b1"), Tensor::zeros([config.mlp_hidden]), false)?;
                    let w2 = params.add(format!("{pre}.mlp.w2"), Tensor::zeros([config.mlp_hidden, d]), true)?;
                    let b2 = params.add(format!("{pre}.mlp.b2"), Tensor::zeros([d]), false)?;
                    layers.push(EncoderLayer {
                        ln1,
                        heads,
                        wo,
                        bo,
                        ln2,
                        w1,
                        b1,
                        w2,
                        b2,
                    });
                }
                let final_ln = ln_pair(params, "clinical.final_ln", d)?;
                EncoderParams::Transformer { layers, final_ln }
            }
            TextEncoder::Mlp => {
                let hidden = config.mlp_hidden;
                let w1 = params.add("clinical.mlp.w1", uniform_fan_in(rng, &[d, hidden], d, 2f64.sqrt()), true)?;
                let b1 = params.add("clinical.mlp.b1", Tensor::zeros([hidden]), false)?;
                let w2 = params.add("clinical.mlp.w2", uniform_fan_in(rng, &[hidden, d], hidden, 1.0), true)?;
                let b2 = params.add("clinical.mlp.b2", Tensor::zeros([d]), false)?;
                EncoderParams::Mlp { w1, b1, w2, b2 }
            }
        };
        Ok(Self {
            config,
            embedding,
            projections,
            encoder,
        })
    }

    pub fn encoder_kind(&self) -> TextEncoder {
        match self.encoder {
            EncoderParams::Transformer { .. } => TextEncoder::LiteTransformer,
            EncoderParams::Mlp { .. } => TextEncoder::Mlp,
        }
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        match &self.encoder {
            EncoderParams::Transformer { layers, .. } => layers,
            EncoderParams::Mlp { .. } => &[],
        }
    }

    pub fn embed<T: Float>(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize], covariates: &[T]) -> Result<Var> {
        let proj: Vec<(Var, Var)> = self.projections.iter().map(|&(w, b)| (p[w], p[b])).collect();
        embed_record(g, tokens, covariates, p[self.embedding], &proj)
    }

    /// Clinical feature `T` of shape `[d]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize], covariates: &[T]) -> Result<Var> {
        let c = self.embed(g, p, tokens, covariates)?;
        match &self.encoder {
            EncoderParams::Transformer { layers, final_ln } => lite_transformer_forward(g, c, layers, *final_ln, p),
            EncoderParams::Mlp { w1, b1, w2, b2 } => {
                let pooled = g.mean_over(c, &[0])?;
                let pooled = g.reshape(pooled, &[1, self.config.d])?;
                let h = g.matmul(pooled, p[*w1])?;
                let h = g.add(h, p[*b1])?;
                let h = g.relu(h);
                let out = g.matmul(h, p[*w2])?;
                let out = g.add(out, p[*b2])?;
                g.reshape(out, &[self.config.d])
            }
        }
    }
}
