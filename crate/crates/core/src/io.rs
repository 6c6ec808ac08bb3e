//! On-disk formats: CSV tables, row-major float64 matrices with JSON
//! sidecars, checkpoints and dataset files. Every write goes through
//! [`OutputDir`], which records a SHA-256 digest per file for the run
//! manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{LabeledSequenceSet, Labels, TokenDataset};
use crate::effective::EffectiveFrame;
use crate::error::{Error, Result};
use crate::keyquery::KqFrame;
use crate::metrics::DiagnosticsFrame;
use crate::transformer::{TrainRecord, TransformerParams};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A run directory that remembers what was written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(OutputDir {
            root,
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative path → SHA-256 of every file written so far.
    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    pub fn write_table(&mut self, rel: &str, table: &Table) -> Result<()> {
        self.write_bytes(rel, &table.to_csv()?)
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn write_matrix(&mut self, stem: &str, m: &DMatrix<f64>, step: Option<usize>, time: Option<f64>) -> Result<()> {
        let sidecar = MatrixSidecar::new(m, step, time);
        self.write_bytes(&format!("{stem}.bin"), &matrix_to_bytes(m))?;
        self.write_json(&format!("{stem}.json"), &sidecar)
    }
}

/// A CSV table of numbers. Missing values are written as empty fields and
/// floats use the shortest representation that round-trips.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))?;
        }
        w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::Config(format!("non-numeric CSV field {f:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Table { header, rows })
    }
}

pub const EFFECTIVE_COLUMNS: [&str; 12] = [
    "t",
    "E",
    "E_dot",
    "lower_bound",
    "riccati_ratio",
    "rate_a1",
    "rate_a2",
    "min_cos_xi_c1",
    "cos_zeta",
    "norm_wv",
    "norm_w1",
    "norm_w2",
];

pub fn effective_table(frames: &[EffectiveFrame]) -> Table {
    let mut t = Table::new(&EFFECTIVE_COLUMNS);
    for f in frames {
        t.push(vec![
            Some(f.t),
            Some(f.energy),
            Some(f.energy_rate),
            f.lower_bound,
            f.riccati_ratio,
            Some(f.rate_a1),
            Some(f.rate_a2),
            f.min_xi_c1,
            f.zeta,
            Some(f.norm_wv),
            Some(f.norm_w1),
            Some(f.norm_w2),
        ]);
    }
    t
}

pub const KQ_COLUMNS: [&str; 6] = ["t", "norm_wq", "norm_wk", "erank_wq", "erank_wk", "angle_q"];

pub fn kq_table(frames: &[KqFrame]) -> Table {
    let mut t = Table::new(&KQ_COLUMNS);
    for f in frames {
        t.push(vec![
            Some(f.t),
            Some(f.norm_q),
            Some(f.norm_k),
            Some(f.erank_q),
            Some(f.erank_k),
            Some(f.angle_q),
        ]);
    }
    t
}

pub const TRAIN_LOG_COLUMNS: [&str; 5] = ["step", "loss", "lr", "grad_norm_attention", "grad_norm_outer"];

pub fn train_log_table(records: &[TrainRecord]) -> Table {
    let mut t = Table::new(&TRAIN_LOG_COLUMNS);
    for r in records {
        t.push(vec![
            Some(r.step as f64),
            Some(r.loss),
            Some(r.lr),
            Some(r.grad_norm_attention),
            Some(r.grad_norm_outer),
        ]);
    }
    t
}

/// One row per probe: loss, condition rates, group changes, stage code
/// (0 condensation, 1 key-query collapse, 2 further, −1 undetermined) and
/// per-matrix norm, effective rank and singular-vector stability.
pub fn diagnostics_table(frames: &[DiagnosticsFrame]) -> Table {
    let mut header: Vec<String> = [
        "step",
        "loss",
        "rate_a1",
        "rate_a2",
        "attn_rel_change",
        "outer_rel_change",
        "stage",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for name in crate::metrics::MATRIX_NAMES {
        for col in ["norm", "erank", "rel_change", "sv_left", "sv_right"] {
            header.push(format!("{name}_{col}"));
        }
    }
    let mut t = Table {
        header,
        rows: Vec::new(),
    };
    for f in frames {
        let stage = match f.stage {
            crate::metrics::Stage::Condensation => 0.0,
            crate::metrics::Stage::KqCollapse => 1.0,
            crate::metrics::Stage::Further => 2.0,
            crate::metrics::Stage::Undetermined => -1.0,
        };
        let mut row = vec![
            Some(f.step as f64),
            Some(f.loss),
            Some(f.rate_a1),
            Some(f.rate_a2),
            f.attn_rel_change,
            f.outer_rel_change,
            Some(stage),
        ];
        for m in &f.matrices {
            row.extend([
                Some(m.frobenius),
                Some(m.eff_rank),
                m.rel_change,
                m.sv_stability.map(|s| s.left),
                m.sv_stability.map(|s| s.right),
            ]);
        }
        t.push(row);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub shape: [usize; 2],
    pub dtype: String,
    pub order: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time: Option<f64>,
}

impl MatrixSidecar {
    pub fn new(m: &DMatrix<f64>, step: Option<usize>, time: Option<f64>) -> Self {
        MatrixSidecar {
            shape: [m.nrows(), m.ncols()],
            dtype: "float64".into(),
            order: "row-major".into(),
            step,
            time,
        }
    }
}

/// Little-endian float64 values in row-major order.
pub fn matrix_to_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if bytes.len() != 8 * rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} bytes cannot hold a {rows}×{cols} float64 matrix",
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

/// Reads `<stem>.bin` using the shape in `<stem>.json`.
pub fn read_matrix(stem: &Path) -> Result<(DMatrix<f64>, MatrixSidecar)> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let text = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: MatrixSidecar = serde_json::from_slice(&text)?;
    if sidecar.dtype != "float64" || sidecar.order != "row-major" {
        return Err(Error::Config(format!(
            "{}: unsupported layout {} / {}",
            json_path.display(),
            sidecar.dtype,
            sidecar.order
        )));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let m = matrix_from_bytes(&bytes, sidecar.shape[0], sidecar.shape[1])?;
    Ok((m, sidecar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub activation: crate::transformer::Activation,
    /// Matrix name → `[rows, cols]`, including `unembed` when present.
    pub shapes: BTreeMap<String, [usize; 2]>,
}

/// Writes every trainable matrix (and the frozen unembedding, if any) as
/// `<dir>/<name>.bin` plus `<dir>/checkpoint.json`.
pub fn write_checkpoint(
    out: &mut OutputDir,
    dir: &str,
    params: &TransformerParams,
    step: usize,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let mut shapes = BTreeMap::new();
    let mut named: Vec<(&str, &DMatrix<f64>)> = vec![
        ("wq", &params.wq),
        ("wk", &params.wk),
        ("wv", &params.wv),
        ("w1", &params.w1),
        ("w2", &params.w2),
    ];
    if let Some(u) = &params.unembed {
        named.push(("unembed", u));
    }
    for (name, m) in named {
        shapes.insert(name.to_string(), [m.nrows(), m.ncols()]);
        out.write_bytes(&format!("{dir}/{name}.bin"), &matrix_to_bytes(m))?;
    }
    out.write_json(
        &format!("{dir}/checkpoint.json"),
        &CheckpointManifest {
            step,
            seed,
            config_hash: config_hash.to_string(),
            activation: params.activation,
            shapes,
        },
    )
}

pub fn read_checkpoint(dir: &Path) -> Result<(TransformerParams, CheckpointManifest)> {
    let path = dir.join("checkpoint.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    let load = |name: &str| -> Result<Option<DMatrix<f64>>> {
        let Some(&[r, c]) = manifest.shapes.get(name) else {
            return Ok(None);
        };
        let p = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        matrix_from_bytes(&bytes, r, c).map(Some)
    };
    let need = |name: &str| -> Result<DMatrix<f64>> {
        load(name)?.ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
    };
    let params = TransformerParams {
        wq: need("wq")?,
        wk: need("wk")?,
        wv: need("wv")?,
        w1: need("w1")?,
        w2: need("w2")?,
        activation: manifest.activation,
        unembed: load("unembed")?,
    };
    params.check()?;
    Ok((params, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub s: usize,
    pub d_m: usize,
    /// `"binary"` or `"tokens"`.
    pub labels: String,
    pub seed: Option<u64>,
}

/// Sequences as one `(n·s) × d_m` row-major block in `<stem>.bin`, labels
/// in `<stem>_labels.csv` and the shape in `<stem>.json`.
pub fn write_dataset(out: &mut OutputDir, stem: &str, set: &LabeledSequenceSet) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * set.len() * set.meta.s * set.meta.d_m);
    for x in &set.sequences {
        bytes.extend(matrix_to_bytes(x));
    }
    out.write_bytes(&format!("{stem}.bin"), &bytes)?;
    let (kind, table) = match &set.labels {
        Labels::Binary(y) => {
            let mut t = Table::new(&["y"]);
            y.iter().for_each(|&v| t.push(vec![Some(v)]));
            ("binary", t)
        }
        Labels::Tokens(tok) => {
            let mut t = Table::new(&["target"]);
            tok.iter().for_each(|&v| t.push(vec![Some(v as f64)]));
            ("tokens", t)
        }
    };
    out.write_table(&format!("{stem}_labels.csv"), &table)?;
    out.write_json(
        &format!("{stem}.json"),
        &DatasetManifest {
            n: set.len(),
            s: set.meta.s,
            d_m: set.meta.d_m,
            labels: kind.into(),
            seed: set.meta.seed,
        },
    )
}

pub fn read_dataset(stem: &Path) -> Result<LabeledSequenceSet> {
    let json_path = stem.with_extension("json");
    let text = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&text)?;
    let bin_path = stem.with_extension("bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let block = 8 * m.s * m.d_m;
    if bytes.len() != m.n * block {
        return Err(Error::DimensionMismatch(format!("{} has the wrong size", bin_path.display())));
    }
    let sequences = bytes
        .chunks_exact(block.max(1))
        .map(|c| matrix_from_bytes(c, m.s, m.d_m))
        .collect::<Result<Vec<_>>>()?;
    let mut label_path = stem.as_os_str().to_owned();
    label_path.push("_labels.csv");
    let label_path = PathBuf::from(label_path);
    let labels = Table::from_csv(&fs::read(&label_path).map_err(|e| Error::io(&label_path, e))?)?;
    let col: Vec<f64> = labels.rows.iter().map(|r| r[0].unwrap_or(f64::NAN)).collect();
    let mut set = match m.labels.as_str() {
        "binary" => LabeledSequenceSet::binary(sequences, col)?,
        "tokens" => LabeledSequenceSet::token(sequences, col.iter().map(|&v| v as usize).collect())?,
        other => return Err(Error::Config(format!("unknown label kind {other:?}"))),
    };
    set.meta.seed = m.seed;
    Ok(set)
}

/// Token ids, one sequence per row, with the target and anchor position in
/// the last two columns.
pub fn token_csv(data: &TokenDataset) -> Result<Vec<u8>> {
    let s = data.inputs.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..s).map(|j| format!("x{j}")).collect();
    header.push("target".into());
    header.push("anchor_pos".into());
    w.write_record(&header)?;
    for ((seq, &t), &p) in data.inputs.iter().zip(&data.targets).zip(&data.anchor_positions) {
        let mut rec: Vec<String> = seq.iter().map(usize::to_string).collect();
        rec.push(t.to_string());
        rec.push(p.to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}
