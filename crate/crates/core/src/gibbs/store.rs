//! Retained draws and their on-disk format: a JSON manifest plus one flat
//! little-endian f64 file per draw (row-major, dimensions in the manifest),
//! with an optional CSV downgrade for interoperability.

use crate::model::HyperParams;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error on {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One truncation-adaptation event.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AdaptEvent {
    pub iteration: usize,
    pub k_before: usize,
    pub k_after: usize,
    /// Indices (pre-adaptation) of the dropped inactive columns.
    pub dropped: Vec<usize>,
    /// Number of fresh prior-drawn columns appended.
    pub appended: usize,
}

/// One retained posterior draw. Rank-one contributions are implicit:
/// C_h = eta_col_h * lambda_col_h^T.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub k_star: usize,
    /// Number of active columns (rho = 1) at the time of the draw.
    pub n_active: usize,
    pub eta: Array2<f64>,
    pub lambda: Array2<f64>,
    pub beta: Array2<f64>,
    pub sigma2: Array1<f64>,
    pub gamma_t: Array2<f64>,
    pub gamma_b: Array2<f64>,
}

impl Draw {
    pub fn from_state(state: &crate::model::ChainState) -> Self {
        Self {
            k_star: state.k_star,
            n_active: state.n_active(),
            eta: state.eta.clone(),
            lambda: state.lambda.clone(),
            beta: state.beta.clone(),
            sigma2: Array1::from_vec(state.sigma2.clone()),
            gamma_t: state.gamma_t.clone(),
            gamma_b: state.gamma_b.clone(),
        }
    }

    /// Rank-one contribution of column h, an n x p matrix.
    pub fn contribution(&self, h: usize) -> Array2<f64> {
        let eta_h = self.eta.column(h);
        let lam_h = self.lambda.column(h);
        let n = eta_h.len();
        let p = lam_h.len();
        let mut c = Array2::zeros((n, p));
        for (i, &e) in eta_h.iter().enumerate() {
            if e != 0.0 {
                for (j, &l) in lam_h.iter().enumerate() {
                    c[(i, j)] = e * l;
                }
            }
        }
        c
    }

    /// Full linear predictor x beta + eta Lambda^T.
    pub fn predictor(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.beta) + self.eta.dot(&self.lambda.t())
    }

    /// Predictor at a single cell.
    pub fn predictor_at(&self, x: &Array2<f64>, i: usize, j: usize) -> f64 {
        let mut m = 0.0;
        for a in 0..self.beta.nrows() {
            m += x[(i, a)] * self.beta[(a, j)];
        }
        for h in 0..self.k_star {
            m += self.eta[(i, h)] * self.lambda[(j, h)];
        }
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreMeta {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub q_t: usize,
    pub q_b: usize,
    pub hyperparams: HyperParams,
    pub adaptation_events: Vec<AdaptEvent>,
}

/// Thinned post-burn-in draws of one chain.
#[derive(Debug, Clone)]
pub struct DrawStore {
    pub meta: StoreMeta,
    pub draws: Vec<Draw>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawEntry {
    file: String,
    k_star: usize,
    n_active: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    binary: bool,
    meta: StoreMeta,
    draws: Vec<DrawEntry>,
}

impl DrawStore {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Writes the store as a directory: `manifest.json` plus `draws/`.
    /// `csv = true` downgrades the per-draw arrays to headerless CSV.
    pub fn save(&self, dir: &Path, csv: bool) -> Result<(), StoreError> {
        let draws_dir = dir.join("draws");
        fs::create_dir_all(&draws_dir).map_err(io_err(&draws_dir))?;
        let mut entries = Vec::with_capacity(self.draws.len());
        for (t, draw) in self.draws.iter().enumerate() {
            let file = if csv {
                format!("draws/draw_{t:05}.csv")
            } else {
                format!("draws/draw_{t:05}.bin")
            };
            let path = dir.join(&file);
            if csv {
                write_draw_csv(&path, draw)?;
            } else {
                write_draw_bin(&path, draw)?;
            }
            entries.push(DrawEntry {
                file,
                k_star: draw.k_star,
                n_active: draw.n_active,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            binary: !csv,
            meta: self.meta.clone(),
            draws: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|source| StoreError::Manifest {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| StoreError::Manifest {
                path: path.clone(),
                source,
            })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(StoreError::Format(format!(
                "unsupported store format version {}",
                manifest.format_version
            )));
        }
        let meta = manifest.meta;
        let mut draws = Vec::with_capacity(manifest.draws.len());
        for entry in &manifest.draws {
            let path = dir.join(&entry.file);
            let draw = if manifest.binary {
                read_draw_bin(&path, &meta, entry)?
            } else {
                read_draw_csv(&path, &meta, entry)?
            };
            draws.push(draw);
        }
        Ok(Self { meta, draws })
    }
}

fn draw_arrays(draw: &Draw) -> [(&'static str, Vec<f64>, usize); 6] {
    [
        ("eta", draw.eta.iter().cloned().collect(), draw.eta.ncols()),
        ("lambda", draw.lambda.iter().cloned().collect(), draw.lambda.ncols()),
        ("beta", draw.beta.iter().cloned().collect(), draw.beta.ncols()),
        ("sigma2", draw.sigma2.to_vec(), draw.sigma2.len()),
        ("gamma_t", draw.gamma_t.iter().cloned().collect(), draw.gamma_t.ncols()),
        ("gamma_b", draw.gamma_b.iter().cloned().collect(), draw.gamma_b.ncols()),
    ]
}

fn write_draw_bin(path: &Path, draw: &Draw) -> Result<(), StoreError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for (_, values, _) in draw_arrays(draw) {
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn write_draw_csv(path: &Path, draw: &Draw) -> Result<(), StoreError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for (_, values, cols) in draw_arrays(draw) {
        for row in values.chunks(cols.max(1)) {
            let line = row
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn expected_shapes(meta: &StoreMeta, k: usize) -> [(usize, usize); 6] {
    [
        (meta.n, k),
        (meta.p, k),
        (meta.d, meta.p),
        (meta.p, 1),
        (meta.d, meta.q_t),
        (meta.q_b, k),
    ]
}

fn draw_from_flat(meta: &StoreMeta, entry: &DrawEntry, flat: &[f64], path: &Path) -> Result<Draw, StoreError> {
    let shapes = expected_shapes(meta, entry.k_star);
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if flat.len() != total {
        return Err(StoreError::Format(format!(
            "{}: expected {total} values, found {}",
            path.display(),
            flat.len()
        )));
    }
    let mut offset = 0;
    let mut take = |rows: usize, cols: usize| {
        let slice = &flat[offset..offset + rows * cols];
        offset += rows * cols;
        Array2::from_shape_vec((rows, cols), slice.to_vec()).expect("shape matches length")
    };
    let eta = take(shapes[0].0, shapes[0].1);
    let lambda = take(shapes[1].0, shapes[1].1);
    let beta = take(shapes[2].0, shapes[2].1);
    let sigma2 = take(shapes[3].0, shapes[3].1);
    let gamma_t = take(shapes[4].0, shapes[4].1);
    let gamma_b = take(shapes[5].0, shapes[5].1);
    Ok(Draw {
        k_star: entry.k_star,
        n_active: entry.n_active,
        eta,
        lambda,
        beta,
        sigma2: Array1::from_iter(sigma2.iter().cloned()),
        gamma_t,
        gamma_b,
    })
}

fn read_draw_bin(path: &Path, meta: &StoreMeta, entry: &DrawEntry) -> Result<Draw, StoreError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() % 8 != 0 {
        return Err(StoreError::Format(format!(
            "{}: byte length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    draw_from_flat(meta, entry, &flat, path)
}

fn read_draw_csv(path: &Path, meta: &StoreMeta, entry: &DrawEntry) -> Result<Draw, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut flat = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                StoreError::Format(format!(
                    "{}:{}: cannot parse '{field}' as a number",
                    path.display(),
                    lineno + 1
                ))
            })?;
            flat.push(v);
        }
    }
    draw_from_flat(meta, entry, &flat, path)
}
