//! On-disk formats: the binary volume file, the dataset bundle directory and
//! the clinical CSV.
//!
//! Volume file: `b"PSNV"`, `u16` version, three `u32` dims `d, h, w`, then
//! `d * h * w` `f32` values, slice-major. All integers and floats are little
//! endian.
//!
//! Bundle: `manifest.txt` of `key: value` lines plus `volumes/<id>.psnv`
//! holding each patient's normalized, unaugmented volume. Samples reference a
//! volume file and an augmentation id from the fixed enumeration
//! `identity, rot90, rot180, rot270, flip_h, flip_v, transpose_hw,
//! reverse_slices`.

use std::fs;
use std::path::Path;

use crate::clinical::{ClinicalRecord, ClinicalVocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::augment::Augmentation;
use super::dataset::{NormStats, SurvivalDataset};
use super::preprocess::{MinMax, ZScore};
use super::split::Split;

pub const VOLUME_MAGIC: &[u8; 4] = b"PSNV";
pub const VOLUME_VERSION: u16 = 1;
pub const MANIFEST_FORMAT: &str = "prosenet-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len() as u64,
                format!(
                    "truncated {what}: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                at,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.offset(), "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let at = self.offset();
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what} is not valid UTF-8")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_volume(volume: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("volume must be [d, h, w], got {s:?}")));
    }
    let mut out = Vec::with_capacity(18 + volume.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for &d in s {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(&mut out, volume.data());
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(bytes);
    r.magic(VOLUME_MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != VOLUME_VERSION {
        return Err(Error::format(at, format!("unsupported volume version {version}, expected {VOLUME_VERSION}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n = n.ok_or_else(|| Error::format(6, "volume dims overflow"))?;
    let data = r.f32s(n, "volume payload")?;
    r.finish()?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("volume contains non-finite values".into()));
    }
    Tensor::new(dims.to_vec(), data)
}

pub fn write_volume(path: &Path, volume: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_volume(volume)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == ',' || c == '=' || c == ':') {
        return Err(Error::Input(format!("{kind} {s:?} cannot be stored in a bundle manifest")));
    }
    Ok(())
}

fn volume_file(id: &str) -> String {
    format!("volumes/{id}.psnv")
}

/// Manifest text of a dataset. Floats use the shortest representation that
/// parses back to the same bits.
pub fn manifest_text(ds: &SurvivalDataset) -> Result<String> {
    use std::fmt::Write;
    let mut m = String::new();
    let mut line = |k: &str, v: &dyn std::fmt::Display| writeln!(m, "{k}: {v}").expect("string write");
    line("format", &MANIFEST_FORMAT);
    line("version", &MANIFEST_VERSION);
    let [f, h, w] = ds.dims();
    line("dims", &format!("{f} {h} {w}"));
    let augs: Vec<&str> = Augmentation::ALL.iter().map(|a| a.name()).collect();
    line("augmentations", &augs.join(","));
    for field in ds.fields() {
        check_token("field name", field)?;
    }
    line("fields", &ds.fields().join(","));
    let vocab = ds.vocab();
    line("vocabulary", &vocab.len());
    for (i, item) in vocab.items().iter().enumerate() {
        line(&format!("vocabulary.{i}"), item);
    }
    let s = ds.stats();
    line("stats.age_fill", &s.age_fill);
    line("stats.age_mean", &s.age.mean);
    line("stats.age_std", &s.age.std);
    line("stats.time_min", &s.time.min);
    line("stats.time_max", &s.time.max);
    line("patients", &ds.len());
    for (i, (p, split)) in ds.patients().iter().zip(ds.splits()).enumerate() {
        let r = &p.record;
        check_token("patient id", &r.patient_id)?;
        let items = r
            .items
            .iter()
            .map(|(f, v)| {
                check_token("field name", f)?;
                check_token("item value", v)?;
                Ok(format!("{f}={v}"))
            })
            .collect::<Result<Vec<_>>>()?;
        line(&format!("patient.{i}.id"), &r.patient_id);
        line(&format!("patient.{i}.split"), &split.name());
        line(&format!("patient.{i}.event"), &(r.event as u8));
        line(&format!("patient.{i}.survival_days"), &r.survival_days);
        match r.age {
            Some(a) => line(&format!("patient.{i}.age"), &a),
            None => line(&format!("patient.{i}.age"), &"missing"),
        }
        line(&format!("patient.{i}.items"), &items.join(","));
        line(&format!("patient.{i}.volume"), &volume_file(&r.patient_id));
    }
    line("samples", &(ds.len() * Augmentation::ALL.len()));
    let mut k = 0;
    for p in ds.patients() {
        for a in Augmentation::ALL {
            let id = &p.record.patient_id;
            line(&format!("sample.{k}"), &format!("{id} {} {}", a.id(), volume_file(id)));
            k += 1;
        }
    }
    Ok(m)
}

/// Write the bundle into `dir`, creating it if needed.
pub fn save_dataset(ds: &SurvivalDataset, dir: &Path) -> Result<()> {
    let manifest = manifest_text(ds)?;
    let vols = dir.join("volumes");
    fs::create_dir_all(&vols).map_err(|e| Error::io(&vols, e))?;
    for p in ds.patients() {
        write_volume(&dir.join(volume_file(&p.record.patient_id)), &p.volume)?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Ordered `key: value` lines with the byte offset of each line.
struct Manifest<'a> {
    lines: Vec<(u64, &'a str, &'a str)>,
    next: usize,
    len: u64,
}

impl<'a> Manifest<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let mut lines = Vec::new();
        let mut offset = 0u64;
        for raw in text.split_inclusive('\n') {
            let line = raw.trim_end_matches('\n');
            if !line.is_empty() {
                let (k, v) = line
                    .split_once(": ")
                    .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
                    .ok_or_else(|| Error::format(offset, format!("expected `key: value`, found {line:?}")))?;
                lines.push((offset, k, v));
            }
            offset += raw.len() as u64;
        }
        Ok(Self {
            lines,
            next: 0,
            len: offset,
        })
    }

    fn expect(&mut self, key: &str) -> Result<(u64, &'a str)> {
        let Some(&(offset, k, v)) = self.lines.get(self.next) else {
            return Err(Error::format(self.len, format!("manifest ends before `{key}`")));
        };
        if k != key {
            return Err(Error::format(offset, format!("expected key `{key}`, found `{k}`")));
        }
        self.next += 1;
        Ok((offset, v))
    }

    fn parse_as<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (offset, v) = self.expect(key)?;
        v.parse()
            .map_err(|_| Error::format(offset, format!("cannot parse `{key}` value {v:?}")))
    }

    fn done(&self) -> Result<()> {
        match self.lines.get(self.next) {
            Some(&(offset, k, _)) => Err(Error::format(offset, format!("unexpected key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<SurvivalDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m = Manifest::parse(&text)?;
    let (at, format) = m.expect("format")?;
    if format != MANIFEST_FORMAT {
        return Err(Error::format(at, format!("expected format {MANIFEST_FORMAT:?}, found {format:?}")));
    }
    let (at, version) = m.expect("version")?;
    if version != MANIFEST_VERSION.to_string() {
        return Err(Error::format(at, format!("unsupported manifest version {version:?}")));
    }
    let (at, dims) = m.expect("dims")?;
    let dims: Vec<usize> = dims
        .split(' ')
        .map(|d| d.parse().map_err(|_| Error::format(at, format!("bad dims {dims:?}"))))
        .collect::<Result<_>>()?;
    let dims: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::format(at, "dims needs three values"))?;
    let (at, augs) = m.expect("augmentations")?;
    let expected: Vec<&str> = Augmentation::ALL.iter().map(|a| a.name()).collect();
    if augs != expected.join(",") {
        return Err(Error::format(at, format!("augmentation enumeration {augs:?} differs from this build")));
    }
    let (_, fields) = m.expect("fields")?;
    let fields: Vec<String> = fields.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
    let n_vocab: usize = m.parse_as("vocabulary")?;
    let mut items = Vec::with_capacity(n_vocab);
    for i in 0..n_vocab {
        items.push(m.expect(&format!("vocabulary.{i}"))?.1.to_string());
    }
    let vocab = ClinicalVocabulary::from_items(items.iter().cloned());
    if vocab.items() != items.as_slice() {
        let at = m.lines[m.next - 1].0;
        return Err(Error::format(at, "vocabulary entries must be sorted and unique"));
    }
    let stats = NormStats {
        age_fill: m.parse_as("stats.age_fill")?,
        age: ZScore {
            mean: m.parse_as("stats.age_mean")?,
            std: m.parse_as("stats.age_std")?,
        },
        time: MinMax {
            min: m.parse_as("stats.time_min")?,
            max: m.parse_as("stats.time_max")?,
        },
    };
    let n: usize = m.parse_as("patients")?;
    let mut records = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut volumes = Vec::with_capacity(n);
    for i in 0..n {
        let key = |s: &str| format!("patient.{i}.{s}");
        let patient_id = m.expect(&key("id"))?.1.to_string();
        let (at, split) = m.expect(&key("split"))?;
        splits.push(Split::parse(split).map_err(|e| Error::format(at, e.to_string()))?);
        let (at, event) = m.expect(&key("event"))?;
        let event = match event {
            "1" => true,
            "0" => false,
            other => return Err(Error::format(at, format!("event must be 0 or 1, found {other:?}"))),
        };
        let survival_days = m.parse_as(&key("survival_days"))?;
        let (at, age) = m.expect(&key("age"))?;
        let age = match age {
            "missing" => None,
            a => Some(a.parse().map_err(|_| Error::format(at, format!("bad age {a:?}")))?),
        };
        let (at, item_text) = m.expect(&key("items"))?;
        let items = item_text
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|kv| {
                kv.split_once('=')
                    .map(|(f, v)| (f.to_string(), v.to_string()))
                    .ok_or_else(|| Error::format(at, format!("bad item {kv:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (at, file) = m.expect(&key("volume"))?;
        if file != volume_file(&patient_id) {
            return Err(Error::format(at, format!("unexpected volume path {file:?}")));
        }
        volumes.push(read_volume(&dir.join(file))?);
        records.push(ClinicalRecord {
            patient_id,
            items,
            age,
            survival_days,
            event,
        });
    }
    let (at, n_samples) = m.expect("samples")?;
    if n_samples != (n * Augmentation::ALL.len()).to_string() {
        return Err(Error::format(at, format!("expected {} samples, found {n_samples}", n * 8)));
    }
    let mut k = 0;
    for r in &records {
        for a in Augmentation::ALL {
            let (at, v) = m.expect(&format!("sample.{k}"))?;
            let want = format!("{} {} {}", r.patient_id, a.id(), volume_file(&r.patient_id));
            if v != want {
                return Err(Error::format(at, format!("sample entry {v:?}, expected {want:?}")));
            }
            k += 1;
        }
    }
    m.done()?;
    SurvivalDataset::from_parts(dims, fields, records, volumes, vocab, stats, splits)
}

/// Reads `patient_id, <categorical...>, age, survival_days, event`. Returns
/// the categorical field names and the records. An empty age is missing.
pub fn read_clinical_csv(path: &Path) -> Result<(Vec<String>, Vec<ClinicalRecord>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_clinical_csv(file)
}

pub fn parse_clinical_csv<R: std::io::Read>(input: R) -> Result<(Vec<String>, Vec<ClinicalRecord>)> {
    let mut reader = csv::Reader::from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let n = header.len();
    if n < 4 || header[0] != "patient_id" || header[n - 3] != "age" || header[n - 2] != "survival_days" || header[n - 1] != "event" {
        return Err(Error::Input(format!(
            "clinical header must be patient_id, <fields...>, age, survival_days, event; got {header:?}"
        )));
    }
    let fields = header[1..n - 3].to_vec();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let bad = |what: &str, v: &str| Error::Input(format!("line {line}: bad {what} {v:?}"));
        let age = match cell(n - 3) {
            "" => None,
            a => Some(a.parse::<f64>().map_err(|_| bad("age", a))?),
        };
        let days = cell(n - 2);
        let survival_days = days.parse::<f64>().map_err(|_| bad("survival_days", days))?;
        let event = match cell(n - 1) {
            "1" | "true" => true,
            "0" | "false" => false,
            e => return Err(bad("event", e)),
        };
        let record = ClinicalRecord {
            patient_id: cell(0).to_string(),
            items: fields
                .iter()
                .enumerate()
                .map(|(j, f)| (f.clone(), cell(j + 1).to_string()))
                .collect(),
            age,
            survival_days,
            event,
        };
        record.validate()?;
        records.push(record);
    }
    Ok((fields, records))
}

pub fn write_clinical_csv(path: &Path, fields: &[String], records: &[ClinicalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(fields.iter().cloned());
    header.extend(["age", "survival_days", "event"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.patient_id.clone()];
        for f in fields {
            let v = r.items.iter().find(|(k, _)| k == f).map_or("", |(_, v)| v.as_str());
            row.push(v.to_string());
        }
        row.push(r.age.map_or(String::new(), |a| a.to_string()));
        row.push(r.survival_days.to_string());
        row.push((r.event as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_and_corruption() {
        let v = Tensor::from_fn([2, 3, 4], |i| i as f32 * 0.25 - 1.0);
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(bytes.len(), 18 + 24 * 4);
        assert_eq!(decode_volume(&bytes).unwrap(), v);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode_volume(&bad).unwrap_err();
        assert!(matches!(&err, Error::Format { offset: 0, message } if message.contains("PSNV")), "{err}");

        let err = decode_volume(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len() as u64 - 3));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_volume(&v2), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn csv_parses_missing_age() {
        let text = "patient_id,stage,sex,age,survival_days,event\nA,I,male,61.5,300,1\nB,II,female,,120.5,0\n";
        let (fields, recs) = parse_clinical_csv(text.as_bytes()).unwrap();
        assert_eq!(fields, vec!["stage", "sex"]);
        assert_eq!(recs[1].age, None);
        assert!(!recs[1].event);
        assert_eq!(recs[0].items[1], ("sex".to_string(), "male".to_string()));
        assert!(parse_clinical_csv("id,age\n".as_bytes()).is_err());
        assert!(parse_clinical_csv("patient_id,s,age,survival_days,event\nA,x,1,-3,1\n".as_bytes()).is_err());
    }
}
