use std::time::Instant;

use crate::data::{Split, SurvivalDataset};
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::results::ResultRow;
use super::{assign_fold, evaluate, EvalReport, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Full model against each single tower.
    Towers,
    /// Lite transformer against the MLP text encoder.
    Encoder,
    /// SE switches, gate modes and orders.
    Se,
    FrameDiff,
    Omega,
    Lambda,
    All,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "towers" => Grid::Towers,
            "encoder" => Grid::Encoder,
            "se" => Grid::Se,
            "frame-diff" => Grid::FrameDiff,
            "omega" => Grid::Omega,
            "lambda" => Grid::Lambda,
            "all" => Grid::All,
            _ => {
                return Err(Error::Config(format!(
                    "unknown grid {s:?}; expected towers, encoder, se, frame-diff, omega, lambda or all"
                )))
            }
        })
    }
}

pub const OMEGAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const LAMBDAS: [f64; 8] = [0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1];

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

fn variant(base: &TrainConfig, name: &str, settings: &[(&str, &str)]) -> Result<Variant> {
    let mut config = base.clone();
    for (k, v) in settings {
        config.set(k, v)?;
    }
    Ok(Variant {
        name: name.to_string(),
        config,
    })
}

/// Variants of `base` for one ablation grid. Every sweep point is trained
/// from scratch.
pub fn grid(base: &TrainConfig, which: Grid) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    let mut add = |name: &str, s: &[(&str, &str)]| -> Result<()> {
        out.push(variant(base, name, s)?);
        Ok(())
    };
    let all = which == Grid::All;
    if which == Grid::Towers || all {
        add("full", &[("towers", "both")])?;
        add("clinical-only", &[("towers", "clinical")])?;
        add("visual-only", &[("towers", "visual")])?;
    }
    if which == Grid::Encoder || all {
        add("encoder=transformer", &[("encoder", "transformer")])?;
        add("encoder=mlp", &[("encoder", "mlp")])?;
    }
    if which == Grid::Se || all {
        add("se=off", &[("channel_se", "off"), ("temporal_se", "off")])?;
        add("se=channel-only", &[("channel_se", "on"), ("temporal_se", "off")])?;
        add("se=temporal-only", &[("channel_se", "off"), ("temporal_se", "on")])?;
        for mode in ["joint", "global", "local", "ones"] {
            add(&format!("se_mode={mode}"), &[("se_mode", mode)])?;
        }
        for order in ["channel-first", "temporal-first"] {
            add(&format!("se_order={order}"), &[("se_order", order)])?;
        }
    }
    if which == Grid::FrameDiff || all {
        for f in ["on", "forward", "backward", "off"] {
            add(&format!("frame_diff={f}"), &[("frame_diff", f)])?;
        }
    }
    if which == Grid::Omega || all {
        for w in OMEGAS {
            add(&format!("omega={w}"), &[("omega", &w.to_string())])?;
        }
    }
    if which == Grid::Lambda || all {
        for l in LAMBDAS {
            add(&format!("lambda={l}"), &[("lambda", &l.to_string())])?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub row: ResultRow,
    pub report: EvalReport,
}

/// Trains and tests every variant; one row per variant, reported as soon as
/// it is done.
pub fn ablate(variants: &[Variant], ds: &mut SurvivalDataset, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Usage("ablation grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let start = Instant::now();
        assign_fold(&v.config, ds)?;
        let mut trainer = Trainer::new(v.config.clone(), ds)?;
        trainer.run_until(ds, v.config.epochs, |_| {})?;
        let ckpt = trainer.checkpoint();
        let report = evaluate(&ckpt, ds, Split::Test)?;
        let row = AblationRow {
            variant: v.name.clone(),
            row: ResultRow {
                config_hash: v.config.hash(),
                fold: v.config.fold,
                epoch: ckpt.epoch,
                split: Split::Test,
                c_index: report.c_index,
                mae: report.mae,
                wall_seconds: start.elapsed().as_secs_f64(),
            },
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
