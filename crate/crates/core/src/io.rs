//! Cohort ingestion: regional time series, adjacency matrices and score
//! tables come in as CSV plus a JSON manifest; out come sliding-window
//! correlation sequences, normalized graph Laplacians and score vectors.
//!
//! File formats:
//! - time series: one CSV per subject, P rows x `samples` columns
//! - adjacency: CSV of 0/1, P x P, symmetric, zero diagonal
//! - correlations (alternative to time series): T stacked P x P blocks,
//!   `T*P` rows x P columns
//! - scores: one CSV table with header `subject_id,score_1,...,score_M`;
//!   an empty cell marks a missing score
//! - manifest: JSON listing subjects, their file paths and the window spec

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RegionalTimeSeries {
    pub subject_id: String,
    /// P x samples, one row per region.
    pub data: Mat,
}

#[derive(Debug, Clone)]
pub struct CorrelationSequence {
    pub subject_id: String,
    pub gammas: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct StructuralGraph {
    pub adjacency: Mat,
    pub laplacian: Mat,
    pub degree: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub subject_id: String,
    pub y: Array1<f64>,
    pub observed: Vec<bool>,
}

impl ScoreVector {
    pub fn all_unobserved(&self) -> bool {
        self.observed.iter().all(|&o| !o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_length: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.stride == 0 || self.window_length == 0 {
            return Err(Error::contract("window spec: stride and length must be >= 1"));
        }
        if self.stride > self.window_length {
            return Err(Error::contract(format!(
                "window spec: stride {} exceeds window length {}",
                self.stride, self.window_length
            )));
        }
        if self.window_length > samples {
            return Err(Error::contract(format!(
                "window spec: window length {} exceeds series length {}",
                self.window_length, samples
            )));
        }
        Ok(())
    }

    /// Number of windows for a series of `samples` points. Windows start at
    /// sample 0 and advance by `stride`; trailing samples that do not cover a
    /// full window are dropped.
    pub fn count(&self, samples: usize) -> usize {
        (samples - self.window_length) / self.stride + 1
    }
}

/// Cut a time series into P x window_length segments.
pub fn sliding_windows(ts: &RegionalTimeSeries, spec: &WindowSpec) -> Result<Vec<Mat>> {
    let samples = ts.data.ncols();
    spec.validate(samples)?;
    let t = spec.count(samples);
    let mut out = Vec::with_capacity(t);
    for w in 0..t {
        let start = w * spec.stride;
        out.push(ts.data.slice(ndarray::s![.., start..start + spec.window_length]).to_owned());
    }
    Ok(out)
}

/// Pearson correlation of the rows of a P x W segment. A zero-variance row
/// gets zero off-diagonal entries (and a warning) instead of NaNs so the
/// downstream algebra stays total.
pub fn pearson_correlation(segment: &Mat) -> Mat {
    let (p, w) = segment.dim();
    let wf = w as f64;
    let mut centered = segment.clone();
    let mut std = vec![0.0f64; p];
    for i in 0..p {
        let mean = segment.row(i).sum() / wf;
        for j in 0..w {
            centered[[i, j]] -= mean;
        }
        let var: f64 = centered.row(i).iter().map(|x| x * x).sum::<f64>() / wf;
        std[i] = var.sqrt();
    }
    let mut gamma = Mat::eye(p);
    for i in 0..p {
        for j in (i + 1)..p {
            if std[i] <= 1e-12 || std[j] <= 1e-12 {
                if std[i] <= 1e-12 {
                    log::warn!("pearson_correlation: zero-variance region {i}; entries set to 0");
                }
                gamma[[i, j]] = 0.0;
                gamma[[j, i]] = 0.0;
                continue;
            }
            let cov: f64 = (0..w).map(|t| centered[[i, t]] * centered[[j, t]]).sum::<f64>() / wf;
            let r = (cov / (std[i] * std[j])).clamp(-1.0, 1.0);
            gamma[[i, j]] = r;
            gamma[[j, i]] = r;
        }
    }
    gamma
}

/// Subtract the top eigenpair contribution: `Γ - λ₁ v₁ v₁ᵀ`.
pub fn residualize_first_component(gamma: &Mat) -> Result<Mat> {
    let (values, vectors) = linalg::sym_eig(gamma)?;
    let p = gamma.nrows();
    let lam = values[0];
    let mut out = gamma.clone();
    for i in 0..p {
        for j in 0..p {
            out[[i, j]] -= lam * vectors[[i, 0]] * vectors[[j, 0]];
        }
    }
    // exact symmetry despite roundoff
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (out[[i, j]] + out[[j, i]]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}

/// Normalized graph Laplacian `L = V^{-1/2} (V - A) V^{-1/2}` of a binary
/// symmetric adjacency with zero diagonal. Isolated nodes are treated as
/// having degree 1, which turns their row/column into an identity
/// contribution instead of dividing by zero.
pub fn normalized_laplacian(a: &Mat) -> Result<StructuralGraph> {
    let (p, q) = a.dim();
    if p != q {
        return Err(Error::dim("adjacency must be square"));
    }
    for i in 0..p {
        if a[[i, i]] != 0.0 {
            return Err(Error::contract(format!("adjacency diagonal must be zero (node {i})")));
        }
        for j in 0..p {
            let v = a[[i, j]];
            if v != 0.0 && v != 1.0 {
                return Err(Error::contract(format!("adjacency must be binary, got {v} at ({i},{j})")));
            }
            if (a[[i, j]] - a[[j, i]]).abs() != 0.0 {
                return Err(Error::contract(format!("adjacency must be symmetric at ({i},{j})")));
            }
        }
    }
    let degree = Array1::from_iter((0..p).map(|i| a.row(i).sum()));
    let mut lap = Mat::zeros((p, p));
    for i in 0..p {
        let di = degree[i].max(1.0);
        for j in 0..p {
            let dj = degree[j].max(1.0);
            // (V - A) with the isolated-node degree floor applied to V
            let num = if i == j { di - a[[i, j]] } else { -a[[i, j]] };
            lap[[i, j]] = num / (di.sqrt() * dj.sqrt());
        }
    }
    Ok(StructuralGraph {
        adjacency: a.clone(),
        laplacian: lap,
        degree,
    })
}

/// Majority-vote edge imputation over training-fold graphs: an edge is
/// present iff it appears in strictly more than half of them.
pub fn impute_adjacency(subject_id: &str, training: &[&StructuralGraph]) -> Result<StructuralGraph> {
    if training.is_empty() {
        return Err(Error::contract("impute_adjacency: empty training set"));
    }
    let p = training[0].adjacency.nrows();
    let half = training.len() as f64 / 2.0;
    let mut a = Mat::zeros((p, p));
    for i in 0..p {
        for j in (i + 1)..p {
            let count: f64 = training.iter().map(|g| g.adjacency[[i, j]]).sum();
            if count > half {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    log::warn!("imputed adjacency for subject {subject_id} from {} training graphs", training.len());
    normalized_laplacian(&a)
}

// ---------------------------------------------------------------------------
// Cohort files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeseries: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlations: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub window: WindowSpec,
    /// Time-series CSVs carry a header row.
    #[serde(default)]
    pub has_header: bool,
    /// Subtract the top eigenpair of every correlation window before use.
    #[serde(default)]
    pub residualize: bool,
    /// Score table; prediction-only cohorts may omit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<String>,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub gammas: Vec<Mat>,
    pub graph: Option<StructuralGraph>,
    pub scores: ScoreVector,
}

impl Subject {
    pub fn windows(&self) -> usize {
        self.gammas.len()
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    /// Region count.
    pub p: usize,
    /// Score count.
    pub m: usize,
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Fill in missing structural graphs by majority vote over the graphs of
    /// `donors` (subject indices). Used fold-locally during cross validation.
    pub fn impute_missing_graphs(&mut self, donors: &[usize]) -> Result<()> {
        let donor_graphs: Vec<StructuralGraph> = donors
            .iter()
            .filter_map(|&i| self.subjects[i].graph.clone())
            .collect();
        let refs: Vec<&StructuralGraph> = donor_graphs.iter().collect();
        for subj in &mut self.subjects {
            if subj.graph.is_none() {
                subj.graph = Some(impute_adjacency(&subj.id, &refs)?);
            }
        }
        Ok(())
    }
}

fn parse_numeric_csv(path: &Path, skip_header: bool) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && skip_header {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::parse(format!("{}:{}: bad number {cell:?}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(format!("{}: empty file", path.display())));
    }
    let w = rows[0].len();
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::parse(format!("{}: ragged rows", path.display())));
    }
    Ok(rows)
}

fn rows_to_mat(rows: Vec<Vec<f64>>) -> Mat {
    let r = rows.len();
    let c = rows[0].len();
    Mat::from_shape_vec((r, c), rows.into_iter().flatten().collect()).unwrap()
}

pub fn read_timeseries_csv(path: &Path, has_header: bool) -> Result<Mat> {
    let m = rows_to_mat(parse_numeric_csv(path, has_header)?);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!("{}: non-finite entries", path.display())));
    }
    Ok(m)
}

pub fn read_adjacency_csv(path: &Path) -> Result<Mat> {
    Ok(rows_to_mat(parse_numeric_csv(path, false)?))
}

/// Read `T` stacked P x P correlation blocks.
pub fn read_correlations_csv(path: &Path) -> Result<Vec<Mat>> {
    let rows = parse_numeric_csv(path, false)?;
    let p = rows[0].len();
    if rows.len() % p != 0 {
        return Err(Error::parse(format!(
            "{}: {} rows is not a multiple of {p} (stacked P x P blocks expected)",
            path.display(),
            rows.len()
        )));
    }
    let t = rows.len() / p;
    let mut out = Vec::with_capacity(t);
    for b in 0..t {
        out.push(rows_to_mat(rows[b * p..(b + 1) * p].to_vec()));
    }
    Ok(out)
}

/// Score table: header `subject_id,score_1..score_M`, empty cell = missing.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreVector>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(format!("{}: empty", path.display())))?;
    let m = header.split(',').count().saturating_sub(1);
    if m == 0 {
        return Err(Error::parse(format!("{}: no score columns", path.display())));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != m + 1 {
            return Err(Error::parse(format!(
                "{}:{}: expected {} cells, got {}",
                path.display(),
                lineno + 2,
                m + 1,
                cells.len()
            )));
        }
        let mut y = Array1::zeros(m);
        let mut observed = vec![false; m];
        for j in 0..m {
            let cell = cells[j + 1].trim();
            if cell.is_empty() {
                continue;
            }
            y[j] = cell
                .parse::<f64>()
                .map_err(|_| Error::parse(format!("{}:{}: bad score {cell:?}", path.display(), lineno + 2)))?;
            observed[j] = true;
        }
        if !observed.iter().any(|&o| o) {
            log::warn!("subject {} has no observed scores", cells[0]);
        }
        out.push(ScoreVector {
            subject_id: cells[0].trim().to_string(),
            y,
            observed,
        });
    }
    Ok(out)
}

/// Load a full cohort from a manifest file. Relative paths resolve against
/// the manifest's directory. Graphs stay `None` for subjects without
/// adjacency; impute them fold-locally before fitting.
pub fn load_cohort(manifest_path: &Path) -> Result<(Cohort, Manifest)> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let cohort = load_cohort_from_manifest(&manifest, base)?;
    Ok((cohort, manifest))
}

/// Build a cohort from an already-parsed manifest (the CLI overrides the
/// window spec this way). Subjects missing from the score table, or a missing
/// score table entirely, yield all-unobserved score vectors.
pub fn load_cohort_from_manifest(manifest: &Manifest, base: &Path) -> Result<Cohort> {
    let resolve = |rel: &str| -> PathBuf { base.join(rel) };

    let score_rows = match &manifest.scores {
        Some(rel) => read_scores_csv(&resolve(rel))?,
        None => Vec::new(),
    };
    let mut p_seen: Option<usize> = None;
    let mut subjects = Vec::new();
    for entry in &manifest.subjects {
        let gammas = match (&entry.timeseries, &entry.correlations) {
            (Some(ts_path), None) => {
                let data = read_timeseries_csv(&resolve(ts_path), manifest.has_header)?;
                let ts = RegionalTimeSeries {
                    subject_id: entry.id.clone(),
                    data,
                };
                let mut gs = Vec::new();
                for seg in sliding_windows(&ts, &manifest.window)? {
                    let mut g = pearson_correlation(&seg);
                    if manifest.residualize {
                        g = residualize_first_component(&g)?;
                    }
                    gs.push(g);
                }
                gs
            }
            (None, Some(corr_path)) => {
                let mut gs = read_correlations_csv(&resolve(corr_path))?;
                if manifest.residualize {
                    for g in &mut gs {
                        *g = residualize_first_component(g)?;
                    }
                }
                gs
            }
            _ => {
                return Err(Error::Config(format!(
                    "subject {}: exactly one of timeseries/correlations required",
                    entry.id
                )))
            }
        };
        if gammas.is_empty() {
            return Err(Error::contract(format!("subject {}: no windows", entry.id)));
        }
        let p = gammas[0].nrows();
        if let Some(prev) = p_seen {
            if prev != p {
                return Err(Error::dim(format!(
                    "subject {}: region count {p} differs from cohort {prev}",
                    entry.id
                )));
            }
        }
        p_seen = Some(p);
        let graph = match &entry.adjacency {
            Some(adj_path) => Some(normalized_laplacian(&read_adjacency_csv(&resolve(adj_path))?)?),
            None => None,
        };
        let scores = match score_rows.iter().find(|s| s.subject_id == entry.id) {
            Some(s) => s.clone(),
            None if manifest.scores.is_none() => ScoreVector {
                subject_id: entry.id.clone(),
                y: Array1::zeros(score_rows.first().map(|s| s.y.len()).unwrap_or(1)),
                observed: vec![false; score_rows.first().map(|s| s.y.len()).unwrap_or(1)],
            },
            None => {
                return Err(Error::Config(format!(
                    "subject {} missing from score table",
                    entry.id
                )))
            }
        };
        subjects.push(Subject {
            id: entry.id.clone(),
            gammas,
            graph,
            scores,
        });
    }
    if subjects.is_empty() {
        return Err(Error::contract("manifest lists no subjects"));
    }
    let m = subjects[0].scores.y.len();
    Ok(Cohort {
        p: p_seen.unwrap(),
        m,
        subjects,
    })
}

/// Write bytes via a temp file plus atomic rename so interrupted runs never
/// leave torn files.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[[i, j]]));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Write stacked P x P correlation blocks.
pub fn write_correlations_csv(path: &Path, gammas: &[Mat]) -> Result<()> {
    let mut out = String::new();
    for g in gammas {
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", g[[i, j]]));
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_scores_csv(path: &Path, scores: &[ScoreVector]) -> Result<()> {
    let m = scores.first().map(|s| s.y.len()).unwrap_or(0);
    let mut out = String::from("subject_id");
    for j in 0..m {
        out.push_str(&format!(",score_{}", j + 1));
    }
    out.push('\n');
    for s in scores {
        out.push_str(&s.subject_id);
        for j in 0..m {
            out.push(',');
            if s.observed[j] {
                out.push_str(&format!("{}", s.y[j]));
            }
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::parse(format!("manifest serialization: {e}")))?;
    atomic_write(path, text.as_bytes())
}
