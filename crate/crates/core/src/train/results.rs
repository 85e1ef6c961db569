use std::fs::OpenOptions;
use std::path::Path;

use crate::data::Split;
use crate::error::{Error, Result};

pub const HEADER: [&str; 7] = ["config_hash", "fold", "epoch", "split", "c_index", "mae", "wall_seconds"];

/// One line of the results table. Undefined metrics are written as empty
/// fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub config_hash: String,
    pub fold: usize,
    pub epoch: usize,
    pub split: Split,
    pub c_index: Option<f64>,
    pub mae: Option<f64>,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn fields(&self) -> [String; 7] {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        [
            self.config_hash.clone(),
            self.fold.to_string(),
            self.epoch.to_string(),
            self.split.name().to_string(),
            opt(self.c_index),
            opt(self.mae),
            format!("{:.3}", self.wall_seconds),
        ]
    }
}

/// Append rows to a CSV results file, writing the header when the file is
/// new or empty.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut w = csv::Writer::from_writer(file);
    if empty {
        w.write_record(HEADER)?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().ne(HEADER) {
        return Err(Error::Input(format!("{} is not a results table", path.display())));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Input(format!("results row {:?}: bad {what}", rec.position().map(|p| p.line())));
        let num = |i: usize, what: &str| -> Result<Option<f64>> {
            match &rec[i] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(what)),
            }
        };
        out.push(ResultRow {
            config_hash: rec[0].to_string(),
            fold: rec[1].parse().map_err(|_| bad("fold"))?,
            epoch: rec[2].parse().map_err(|_| bad("epoch"))?,
            split: Split::parse(&rec[3])?,
            c_index: num(4, "c_index")?,
            mae: num(5, "mae")?,
            wall_seconds: rec[6].parse().map_err(|_| bad("wall_seconds"))?,
        });
    }
    Ok(out)
}
