//! Synthetic open-set data and embedding table persistence.
//!
//! Training identities take labels `0..num_train_ids`; test identities take
//! `num_train_ids..num_train_ids + num_test_ids`, so the two sets never meet.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{DdclError, Result};

pub const TABLE_MAGIC: &[u8; 4] = b"DDEM";
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    pub cluster_scale: f64,
    pub noise_sigma: f64,
    /// Optional per-axis noise multipliers (length `input_dim`). Empty means
    /// isotropic noise.
    pub noise_axis_scale: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_train_ids: 8,
            num_test_ids: 8,
            samples_per_id: 20,
            input_dim: 8,
            cluster_scale: 4.0,
            noise_sigma: 1.0,
            noise_axis_scale: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_train_ids", self.num_train_ids),
            ("num_test_ids", self.num_test_ids),
            ("samples_per_id", self.samples_per_id),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(DdclError::config(field, "must be at least 1"));
            }
        }
        if !(self.cluster_scale.is_finite() && self.cluster_scale >= 0.0) {
            return Err(DdclError::config("cluster_scale", "must be finite and >= 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DdclError::config("noise_sigma", "must be finite and >= 0"));
        }
        if !self.noise_axis_scale.is_empty() {
            if self.noise_axis_scale.len() != self.input_dim {
                return Err(DdclError::config(
                    "noise_axis_scale",
                    format!(
                        "has {} entries, input_dim is {}",
                        self.noise_axis_scale.len(),
                        self.input_dim
                    ),
                ));
            }
            if self.noise_axis_scale.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(DdclError::config("noise_axis_scale", "entries must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Labelled rows with string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    labels: Vec<usize>,
    data: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, labels: Vec<usize>, data: Array2<f64>) -> Result<Self> {
        if ids.len() != data.nrows() || labels.len() != data.nrows() {
            return Err(DdclError::Dimension(format!(
                "{} ids, {} labels, {} rows",
                ids.len(),
                labels.len(),
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DdclError::Numeric("table holds non-finite values".into()));
        }
        Ok(Self { ids, labels, data })
    }

    /// Table with ids `r0`, `r1`, ...
    pub fn with_default_ids(labels: Vec<usize>, data: Array2<f64>) -> Result<Self> {
        let ids = (0..data.nrows()).map(|i| format!("r{i}")).collect();
        Self::new(ids, labels, data)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Copy with embedded rows in place of the data.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        Self::new(self.ids.clone(), self.labels.clone(), data)
    }

    /// Labels shifted down so the smallest becomes zero, plus the class count.
    pub fn dense_labels(&self) -> (Vec<usize>, usize) {
        let lo = self.labels.iter().copied().min().unwrap_or(0);
        let hi = self.labels.iter().copied().max().unwrap_or(0);
        (self.labels.iter().map(|&y| y - lo).collect(), hi - lo + 1)
    }
}

/// Synthetic train and test tables plus the class prototypes that made them
/// (train prototypes first).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: EmbeddingTable,
    pub test: EmbeddingTable,
    pub prototypes: Array2<f64>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_ids = spec.num_train_ids + spec.num_test_ids;
    let d = spec.input_dim;
    let prototypes = Array2::from_shape_simple_fn((total_ids, d), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        spec.cluster_scale * z
    });
    let axis = |k: usize| {
        if spec.noise_axis_scale.is_empty() {
            1.0
        } else {
            spec.noise_axis_scale[k]
        }
    };

    let mut make = |ids: std::ops::Range<usize>, prefix: &str| -> Result<EmbeddingTable> {
        let rows = ids.len() * spec.samples_per_id;
        let mut data = Array2::zeros((rows, d));
        let mut labels = Vec::with_capacity(rows);
        let mut names = Vec::with_capacity(rows);
        let mut r = 0;
        for id in ids {
            for s in 0..spec.samples_per_id {
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data[[r, k]] = prototypes[[id, k]] + spec.noise_sigma * axis(k) * z;
                }
                labels.push(id);
                names.push(format!("{prefix}{id}_{s}"));
                r += 1;
            }
        }
        EmbeddingTable::new(names, labels, data)
    };
    let train = make(0..spec.num_train_ids, "tr")?;
    let test = make(spec.num_train_ids..total_ids, "te")?;
    Ok(SyntheticData {
        train,
        test,
        prototypes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    #[default]
    Csv,
    Bin,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Bin => "bin",
        }
    }

    /// Guess from a file extension; anything other than `.bin` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => TableFormat::Bin,
            _ => TableFormat::Csv,
        }
    }
}

impl fmt::Display for TableFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for TableFormat {
    type Err = DdclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "bin" => Ok(TableFormat::Bin),
            other => Err(DdclError::config("format", format!("unknown format {other:?}"))),
        }
    }
}

pub fn table_to_csv(table: &EmbeddingTable) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..table.dim()).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(csv_write_err)?;
    for i in 0..table.len() {
        let mut rec = Vec::with_capacity(table.dim() + 2);
        rec.push(table.ids[i].clone());
        rec.push(table.labels[i].to_string());
        rec.extend(table.data.row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(csv_write_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| DdclError::Format(format!("csv writer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| DdclError::Format(e.to_string()))
}

fn csv_write_err(e: csv::Error) -> DdclError {
    DdclError::Format(format!("csv writer: {e}"))
}

pub fn table_from_csv(text: &str) -> Result<EmbeddingTable> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = r.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_parse_err(1, e))?,
        None => return Err(DdclError::Parse { line: 1, message: "missing header".into() }),
    };
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(DdclError::Parse {
            line: 1,
            message: "header must start with id,label and name at least one feature".into(),
        });
    }
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(DdclError::Parse {
                line: 1,
                message: format!("column {} is {name:?}, expected f{k}", k + 2),
            });
        }
    }
    let dim = header.len() - 2;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_parse_err(0, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 2 {
            return Err(DdclError::Parse {
                line,
                message: format!("{} fields, expected {}", rec.len(), dim + 2),
            });
        }
        ids.push(rec[0].to_string());
        let label = rec[1].trim().parse::<usize>().map_err(|e| DdclError::Parse {
            line,
            message: format!("label {:?}: {e}", &rec[1]),
        })?;
        labels.push(label);
        for (k, cell) in rec.iter().skip(2).enumerate() {
            let v = cell.trim().parse::<f64>().map_err(|e| DdclError::Parse {
                line,
                message: format!("f{k} {cell:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(DdclError::Parse {
                    line,
                    message: format!("f{k} is not finite"),
                });
            }
            values.push(v);
        }
    }
    let data = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| DdclError::Format(e.to_string()))?;
    EmbeddingTable::new(ids, labels, data)
}

fn csv_parse_err(fallback_line: u64, e: csv::Error) -> DdclError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    DdclError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Binary layout: magic, version, rows, dim, labels (u64 each), then the
/// row-major matrix. Row ids are not stored; loading restores `r{index}`.
pub fn table_to_bytes(table: &EmbeddingTable) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(TABLE_MAGIC);
    w.u32(TABLE_VERSION);
    w.u64(table.len() as u64);
    w.u64(table.dim() as u64);
    for &y in &table.labels {
        w.u64(y as u64);
    }
    let flat: Vec<f64> = table.data.iter().copied().collect();
    w.f64s(&flat);
    w.finish()
}

pub fn table_from_bytes(bytes: &[u8]) -> Result<EmbeddingTable> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TABLE_MAGIC {
        return Err(DdclError::Format("not an embedding table (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != TABLE_VERSION {
        return Err(DdclError::Version {
            found: version,
            expected: TABLE_VERSION,
        });
    }
    let rows = r.len_u64()?;
    let dim = r.len_u64()?;
    let mut labels = Vec::with_capacity(rows.min(bytes.len() / 8));
    for _ in 0..rows {
        labels.push(r.len_u64()?);
    }
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| DdclError::Format("table size overflows".into()))?;
    let flat = r.f64s(count)?;
    r.expect_end()?;
    let data = Array2::from_shape_vec((rows, dim), flat).map_err(|e| DdclError::Format(e.to_string()))?;
    EmbeddingTable::with_default_ids(labels, data)
}

pub fn save_table(path: &Path, table: &EmbeddingTable, format: TableFormat) -> Result<()> {
    let bytes = match format {
        TableFormat::Csv => table_to_csv(table)?.into_bytes(),
        TableFormat::Bin => table_to_bytes(table),
    };
    fs::write(path, bytes).map_err(|e| DdclError::io(path, e))
}

pub fn load_table(path: &Path, format: TableFormat) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| DdclError::io(path, e))?;
    match format {
        TableFormat::Bin => table_from_bytes(&bytes),
        TableFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|e| DdclError::Format(format!("{}: {e}", path.display())))?;
            table_from_csv(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::HashSet;

    fn small() -> EmbeddingTable {
        EmbeddingTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![3, 0, 7],
            array![[0.1, -2.5e-300], [1.0 / 3.0, 1e300], [f64::MIN_POSITIVE, -0.0]],
        )
        .unwrap()
    }

    #[test]
    fn counts_and_disjoint_labels() {
        let spec = SyntheticSpec {
            num_train_ids: 8,
            num_test_ids: 5,
            samples_per_id: 20,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.train.len(), 160);
        assert_eq!(data.test.len(), 100);
        let a: HashSet<_> = data.train.labels().iter().collect();
        let b: HashSet<_> = data.test.labels().iter().collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn zero_noise_repeats_prototype() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let t = &data.train;
        for i in 0..t.len() {
            assert_eq!(t.row(i), data.prototypes.row(t.labels()[i]));
        }
    }

    #[test]
    fn same_seed_same_tables() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn nearest_prototype_separability() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                num_train_ids: 4,
                num_test_ids: 10,
                samples_per_id: 30,
                input_dim: 8,
                cluster_scale: 10.0,
                noise_sigma: 1.0,
                seed,
                ..Default::default()
            };
            let data = generate(&spec).unwrap();
            let t = &data.test;
            let mut correct = 0;
            for i in 0..t.len() {
                let x = t.row(i);
                let best = (spec.num_train_ids..spec.num_train_ids + spec.num_test_ids)
                    .map(|j| {
                        let d = &x - &data.prototypes.row(j);
                        (d.dot(&d), j)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap()
                    .1;
                correct += usize::from(best == t.labels()[i]);
            }
            assert!(correct as f64 >= 0.99 * t.len() as f64, "seed {seed}: {correct}/{}", t.len());
        }
    }

    #[test]
    fn anisotropic_noise_scales_axes() {
        let spec = SyntheticSpec {
            input_dim: 2,
            noise_axis_scale: vec![0.0, 1.0],
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let t = &data.train;
        for i in 0..t.len() {
            assert_eq!(t.row(i)[0], data.prototypes[[t.labels()[i], 0]]);
        }
        let bad = SyntheticSpec { noise_axis_scale: vec![1.0], ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_zero_counts() {
        let spec = SyntheticSpec { samples_per_id: 0, ..Default::default() };
        assert!(matches!(generate(&spec), Err(DdclError::Config { field, .. }) if field == "samples_per_id"));
    }

    #[test]
    fn bin_round_trip_is_bit_exact() {
        let t = small();
        let back = table_from_bytes(&table_to_bytes(&t)).unwrap();
        assert_eq!(back.labels(), t.labels());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.ids()[2], "r2");
    }

    #[test]
    fn csv_round_trip() {
        let t = small();
        let text = table_to_csv(&t).unwrap();
        assert!(text.starts_with("id,label,f0,f1\n"));
        let back = table_from_csv(&text).unwrap();
        assert_eq!(back.ids(), t.ids());
        assert_eq!(back.labels(), t.labels());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a.to_bits() as i64 - b.to_bits() as i64).abs() <= 1);
        }
    }

    #[test]
    fn csv_missing_column_names_line() {
        let text = "id,label,f0,f1\na,0,1.0,2.0\nb,1,3.0\n";
        match table_from_csv(text) {
            Err(DdclError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_bad_cell_and_header() {
        match table_from_csv("id,label,f0\na,0,zz\n") {
            Err(DdclError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            table_from_csv("name,label,f0\n"),
            Err(DdclError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            table_from_csv("id,label,f1\n"),
            Err(DdclError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn bin_rejects_wrong_version_and_truncation() {
        let mut bytes = table_to_bytes(&small());
        bytes[4] = 9;
        assert!(matches!(table_from_bytes(&bytes), Err(DdclError::Version { found: 9, .. })));
        let bytes = table_to_bytes(&small());
        assert!(table_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(table_from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = small();
        for fmt in [TableFormat::Csv, TableFormat::Bin] {
            let p = dir.path().join(format!("t.{fmt}"));
            save_table(&p, &t, fmt).unwrap();
            assert_eq!(TableFormat::from_path(&p), fmt);
            let back = load_table(&p, fmt).unwrap();
            assert_eq!(back.labels(), t.labels());
        }
        assert!(matches!(
            load_table(&dir.path().join("missing.csv"), TableFormat::Csv),
            Err(DdclError::Io { .. })
        ));
    }

    #[test]
    fn dense_labels_shift() {
        let (y, n) = small().dense_labels();
        assert_eq!(y, vec![3, 0, 7]);
        assert_eq!(n, 8);
    }
}
