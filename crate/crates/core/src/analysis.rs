//! Feature-space diagnostics for the main branch: TP/FP/FN feature centers,
//! raw feature dumps, and intra-class scatter.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::MainBranch;
use crate::config::CenterFeatures;
use crate::linalg::{self, Tensor2D};
use crate::scenes::Scene;
use crate::SpgError;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Spg(#[from] SpgError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

/// Running per-class feature sums.
#[derive(Debug, Clone)]
struct Sums {
    sum: Vec<Vec<f64>>,
    count: Vec<usize>,
}

impl Sums {
    fn new(classes: usize, dim: usize) -> Self {
        Self {
            sum: vec![vec![0.0; dim]; classes],
            count: vec![0; classes],
        }
    }

    fn add(&mut self, c: usize, row: &[f64]) {
        self.sum[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        self.count[c] += 1;
    }

    fn center(&self, c: usize) -> Option<Vec<f64>> {
        let n = self.count[c];
        (n > 0).then(|| self.sum[c].iter().map(|s| s / n as f64).collect())
    }
}

/// Cosine similarity clamped to `[-1, 1]`; `None` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Accumulates train TP centers and test TP/FP/FN centers.
///
/// For class `c`: TP are points of `c` predicted `c`; FP are points of other
/// classes predicted `c`; FN are points of `c` predicted otherwise.
#[derive(Debug, Clone)]
pub struct CenterAccumulator {
    normalize: bool,
    train_tp: Sums,
    tp: Sums,
    fp: Sums,
    fn_: Sums,
}

impl CenterAccumulator {
    pub fn new(num_classes: usize, dim: usize, features: CenterFeatures) -> Self {
        Self {
            normalize: features == CenterFeatures::Normalized,
            train_tp: Sums::new(num_classes, dim),
            tp: Sums::new(num_classes, dim),
            fp: Sums::new(num_classes, dim),
            fn_: Sums::new(num_classes, dim),
        }
    }

    fn prepare(&self, row: &[f64]) -> Vec<f64> {
        if self.normalize {
            let n = linalg::norm(row);
            if n > 0.0 {
                return row.iter().map(|v| v / n).collect();
            }
        }
        row.to_vec()
    }

    pub fn add_train(&mut self, features: &Tensor2D, labels: &[usize], preds: &[usize]) {
        for (i, (&y, &p)) in labels.iter().zip(preds).enumerate() {
            if y == p {
                let row = self.prepare(features.row(i));
                self.train_tp.add(y, &row);
            }
        }
    }

    pub fn add_test(&mut self, features: &Tensor2D, labels: &[usize], preds: &[usize]) {
        for (i, (&y, &p)) in labels.iter().zip(preds).enumerate() {
            let row = self.prepare(features.row(i));
            if y == p {
                self.tp.add(y, &row);
            } else {
                self.fn_.add(y, &row);
                self.fp.add(p, &row);
            }
        }
    }

    pub fn report(&self) -> CenterReport {
        let classes = self.tp.count.len();
        let rows = (0..classes)
            .map(|c| {
                let reference = self.train_tp.center(c);
                let cos = |s: &Sums| match (&reference, s.center(c)) {
                    (Some(r), Some(x)) => cosine(&x, r),
                    _ => None,
                };
                CenterRow {
                    class: c,
                    train_tp: self.train_tp.count[c],
                    test_tp: self.tp.count[c],
                    test_fp: self.fp.count[c],
                    test_fn: self.fn_.count[c],
                    cos_tp: cos(&self.tp),
                    cos_fp: cos(&self.fp),
                    cos_fn: cos(&self.fn_),
                }
            })
            .collect();
        CenterReport { rows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRow {
    pub class: usize,
    pub train_tp: usize,
    pub test_tp: usize,
    pub test_fp: usize,
    pub test_fn: usize,
    /// Cosine between the test subset center and the train TP center;
    /// `None` when either subset is empty.
    pub cos_tp: Option<f64>,
    pub cos_fp: Option<f64>,
    pub cos_fn: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterReport {
    pub rows: Vec<CenterRow>,
}

impl CenterReport {
    /// Classes where both TP and FN cosines exist and TP is not strictly
    /// closer to the train TP center than FN.
    pub fn tp_over_fn_violations(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter_map(|r| match (r.cos_tp, r.cos_fn) {
                (Some(tp), Some(fn_)) if tp <= fn_ => Some(r.class),
                _ => None,
            })
            .collect()
    }

    /// Number of classes with both TP and FN cosines.
    pub fn comparable_classes(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.cos_tp.is_some() && r.cos_fn.is_some())
            .count()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        let mut s = String::from("class,train_tp,test_tp,test_fp,test_fn,cos_tp,cos_fp,cos_fn\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.class,
                r.train_tp,
                r.test_tp,
                r.test_fp,
                r.test_fn,
                opt(r.cos_tp),
                opt(r.cos_fp),
                opt(r.cos_fn)
            );
        }
        s
    }
}

fn features_and_preds(
    main: &MainBranch,
    scene: &Scene,
) -> Result<(Tensor2D, Vec<usize>), SpgError> {
    let out = main.forward(&scene.points)?;
    let preds = out.logits.iter_rows().map(linalg::argmax).collect();
    Ok((out.features, preds))
}

/// Compares test TP/FP/FN centers of the main-branch features `H′` with the
/// train TP centers, class by class.
pub fn feature_center_analysis(
    main: &MainBranch,
    train: &[Scene],
    test: &[Scene],
    features: CenterFeatures,
) -> Result<CenterReport, SpgError> {
    let classes = main.classifier.bias.value.cols();
    let dim = main.classifier.weight.value.rows();
    let mut acc = CenterAccumulator::new(classes, dim, features);
    for s in train {
        let (f, p) = features_and_preds(main, s)?;
        acc.add_train(&f, &s.labels(), &p);
    }
    for s in test {
        let (f, p) = features_and_preds(main, s)?;
        acc.add_test(&f, &s.labels(), &p);
    }
    Ok(acc.report())
}

/// Mean squared distance of L2-normalized features to their class center;
/// `None` for classes without points.
pub fn intra_class_variance(
    features: &Tensor2D,
    labels: &[usize],
    num_classes: usize,
) -> Vec<Option<f64>> {
    let dim = features.cols();
    let units: Vec<Vec<f64>> = features
        .iter_rows()
        .map(|r| {
            let n = linalg::norm(r);
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect();
    let mut sums = Sums::new(num_classes, dim);
    for (u, &y) in units.iter().zip(labels) {
        sums.add(y, u);
    }
    let mut scatter = vec![0.0; num_classes];
    let centers: Vec<Option<Vec<f64>>> = (0..num_classes).map(|c| sums.center(c)).collect();
    for (u, &y) in units.iter().zip(labels) {
        let c = centers[y].as_ref().expect("class has at least this point");
        scatter[y] += u.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    (0..num_classes)
        .map(|c| (sums.count[c] > 0).then(|| scatter[c] / sums.count[c] as f64))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes main-branch features (`f0..f{d-1}`) and a row-aligned label file
/// (`scene,point,label,pred`).
pub fn dump_features(
    main: &MainBranch,
    scenes: &[Scene],
    features_path: &Path,
    labels_path: &Path,
) -> Result<usize, AnalysisError> {
    let dim = main.classifier.weight.value.rows();
    let mut feats = (0..dim)
        .map(|j| format!("f{j}"))
        .collect::<Vec<_>>()
        .join(",");
    feats.push('\n');
    let mut labels = String::from("scene,point,label,pred\n");
    let mut rows = 0;
    for (k, s) in scenes.iter().enumerate() {
        let (f, preds) = features_and_preds(main, s)?;
        for (i, row) in f.iter_rows().enumerate() {
            let line = row
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            feats.push_str(&line);
            feats.push('\n');
            let _ = writeln!(labels, "{k},{i},{},{}", s.points[i].label, preds[i]);
            rows += 1;
        }
    }
    std::fs::write(features_path, feats).map_err(io_err(features_path))?;
    std::fs::write(labels_path, labels).map_err(io_err(labels_path))?;
    Ok(rows)
}

/// Reads a feature dump back as a matrix and its label column.
pub fn read_features(
    features_path: &Path,
    labels_path: &Path,
) -> Result<(Tensor2D, Vec<usize>), AnalysisError> {
    let parse_err = |path: &Path, line: usize, msg: String| AnalysisError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let text = std::fs::read_to_string(features_path).map_err(io_err(features_path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(features_path, 1, "missing header".into()))?;
    let dim = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let vals: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| parse_err(features_path, i + 2, e.to_string()))?;
        if vals.len() != dim {
            return Err(parse_err(
                features_path,
                i + 2,
                format!("expected {dim} values, found {}", vals.len()),
            ));
        }
        data.extend(vals);
        rows += 1;
    }
    let features = Tensor2D::from_vec(rows, dim, data)
        .map_err(|e| parse_err(features_path, 1, e.to_string()))?;

    let text = std::fs::read_to_string(labels_path).map_err(io_err(labels_path))?;
    let mut labels = Vec::with_capacity(rows);
    for (i, line) in text.lines().enumerate().skip(1) {
        let label = line
            .split(',')
            .nth(2)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| parse_err(labels_path, i + 1, "missing or invalid label".into()))?;
        labels.push(label);
    }
    if labels.len() != rows {
        return Err(parse_err(
            labels_path,
            labels.len() + 1,
            format!("{} labels for {rows} feature rows", labels.len()),
        ));
    }
    Ok((features, labels))
}
