//! Synthetic labeled point-cloud scenes and the plain-text scene format.
//!
//! Each class owns a small mixture of anisotropic Gaussian blobs in the unit
//! cube and a color distribution, so both geometry and color carry class
//! information. Labels are drawn i.i.d. from the profile's class fractions,
//! which makes per-scene class counts multinomial.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Class names of the default 13-class indoor profile.
pub const DEFAULT_CLASS_NAMES: [&str; 13] = [
    "ceiling", "floor", "wall", "beam", "column", "window", "door", "table", "chair", "sofa",
    "bookcase", "board", "clutter",
];

/// Training-split point proportions (percent) of a widely used indoor
/// benchmark, in [`DEFAULT_CLASS_NAMES`] order. They sum to 100.01 and are
/// rescaled on use.
pub const DEFAULT_TRAIN_PERCENT: [f64; 13] = [
    19.14, 16.51, 27.25, 2.42, 2.13, 2.12, 5.48, 3.24, 4.07, 0.49, 4.71, 1.26, 11.19,
];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("parse error at line {line}, byte offset {offset}: {msg}")]
    Parse {
        line: usize,
        offset: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub xyz: [f64; 3],
    pub rgb: [f64; 3],
    pub label: usize,
}

impl PointRecord {
    /// The six input features fed to the encoders: `x y z r g b`.
    pub fn features(&self) -> [f64; 6] {
        [
            self.xyz[0],
            self.xyz[1],
            self.xyz[2],
            self.rgb[0],
            self.rgb[1],
            self.rgb[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub num_classes: usize,
    pub points: Vec<PointRecord>,
    pub class_counts: Vec<usize>,
}

impl Scene {
    /// Builds a scene and recounts its classes.
    pub fn new(id: u64, num_classes: usize, points: Vec<PointRecord>) -> Result<Self> {
        let mut class_counts = vec![0; num_classes];
        for (i, p) in points.iter().enumerate() {
            if p.label >= num_classes {
                return Err(SceneError::Validation(format!(
                    "point {i} has label {} but C = {num_classes}",
                    p.label
                )));
            }
            class_counts[p.label] += 1;
        }
        let scene = Self {
            id,
            num_classes,
            points,
            class_counts,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.label).collect()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| self.class_counts[c] > 0)
            .collect()
    }

    /// Checks ranges and that `class_counts` agrees with the labels.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(SceneError::Validation("scene has no points".into()));
        }
        let mut counts = vec![0; self.num_classes];
        for (i, p) in self.points.iter().enumerate() {
            if p.label >= self.num_classes {
                return Err(SceneError::Validation(format!(
                    "point {i} has label {} but C = {}",
                    p.label, self.num_classes
                )));
            }
            let in_unit = |v: &f64| (0.0..=1.0).contains(v);
            if !p.xyz.iter().all(in_unit) || !p.rgb.iter().all(in_unit) {
                return Err(SceneError::Validation(format!(
                    "point {i} has a coordinate or color outside [0, 1]"
                )));
            }
            counts[p.label] += 1;
        }
        if counts != self.class_counts {
            return Err(SceneError::Validation(
                "class_counts disagree with labels".into(),
            ));
        }
        Ok(())
    }

    /// Training scenes additionally need two distinct classes.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.present_classes().len() < 2 {
            return Err(SceneError::Validation(
                "training scene needs at least two classes".into(),
            ));
        }
        Ok(())
    }
}

/// Points of one class, with their row indices in the source scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub class: usize,
    pub indices: Vec<usize>,
    pub points: Vec<PointRecord>,
}

impl ClassSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Partitions a scene by label. Always returns `num_classes` sets; absent
/// classes come back empty.
pub fn split_by_category(scene: &Scene) -> Vec<ClassSet> {
    let mut sets: Vec<ClassSet> = (0..scene.num_classes)
        .map(|c| ClassSet {
            class: c,
            indices: Vec::with_capacity(scene.class_counts[c]),
            points: Vec::with_capacity(scene.class_counts[c]),
        })
        .collect();
    for (i, p) in scene.points.iter().enumerate() {
        sets[p.label].indices.push(i);
        sets[p.label].points.push(*p);
    }
    sets
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub spread: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassShape {
    pub blobs: Vec<Blob>,
    pub color_mean: [f64; 3],
    pub color_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceProfile {
    pub class_fractions: Vec<f64>,
    pub shapes: Vec<ClassShape>,
    /// Standard deviation of the per-scene shift applied to every blob center.
    pub scene_jitter: f64,
}

fn blob(center: [f64; 3], spread: [f64; 3]) -> Blob {
    Blob { center, spread }
}

impl ImbalanceProfile {
    /// The 13-class long-tailed indoor profile.
    pub fn default_indoor() -> Self {
        let total: f64 = DEFAULT_TRAIN_PERCENT.iter().sum();
        let class_fractions = DEFAULT_TRAIN_PERCENT.iter().map(|p| p / total).collect();
        let s = 0.06;
        let shapes = vec![
            // ceiling
            ClassShape {
                blobs: vec![blob([0.5, 0.5, 0.95], [0.25, 0.25, 0.02])],
                color_mean: [0.80, 0.80, 0.78],
                color_std: s,
            },
            // floor
            ClassShape {
                blobs: vec![blob([0.5, 0.5, 0.05], [0.25, 0.25, 0.02])],
                color_mean: [0.55, 0.45, 0.35],
                color_std: s,
            },
            // wall
            ClassShape {
                blobs: vec![
                    blob([0.05, 0.5, 0.5], [0.02, 0.25, 0.22]),
                    blob([0.95, 0.5, 0.5], [0.02, 0.25, 0.22]),
                    blob([0.5, 0.95, 0.5], [0.25, 0.02, 0.22]),
                ],
                color_mean: [0.75, 0.75, 0.70],
                color_std: s,
            },
            // beam
            ClassShape {
                blobs: vec![blob([0.5, 0.3, 0.88], [0.25, 0.03, 0.03])],
                color_mean: [0.72, 0.72, 0.70],
                color_std: s,
            },
            // column
            ClassShape {
                blobs: vec![blob([0.12, 0.12, 0.5], [0.03, 0.03, 0.22])],
                color_mean: [0.70, 0.72, 0.72],
                color_std: s,
            },
            // window
            ClassShape {
                blobs: vec![blob([0.07, 0.3, 0.6], [0.02, 0.08, 0.1])],
                color_mean: [0.55, 0.70, 0.85],
                color_std: s,
            },
            // door
            ClassShape {
                blobs: vec![blob([0.93, 0.7, 0.4], [0.02, 0.07, 0.18])],
                color_mean: [0.60, 0.42, 0.28],
                color_std: s,
            },
            // table
            ClassShape {
                blobs: vec![
                    blob([0.4, 0.4, 0.35], [0.1, 0.08, 0.02]),
                    blob([0.7, 0.25, 0.35], [0.06, 0.06, 0.02]),
                ],
                color_mean: [0.50, 0.35, 0.22],
                color_std: s,
            },
            // chair
            ClassShape {
                blobs: vec![
                    blob([0.4, 0.25, 0.25], [0.05, 0.04, 0.08]),
                    blob([0.4, 0.55, 0.25], [0.05, 0.04, 0.08]),
                ],
                color_mean: [0.30, 0.30, 0.35],
                color_std: s,
            },
            // sofa
            ClassShape {
                blobs: vec![blob([0.8, 0.78, 0.2], [0.07, 0.05, 0.05])],
                color_mean: [0.55, 0.25, 0.30],
                color_std: s,
            },
            // bookcase
            ClassShape {
                blobs: vec![blob([0.5, 0.9, 0.45], [0.12, 0.03, 0.2])],
                color_mean: [0.45, 0.35, 0.25],
                color_std: s,
            },
            // board
            ClassShape {
                blobs: vec![blob([0.08, 0.7, 0.6], [0.02, 0.08, 0.08])],
                color_mean: [0.90, 0.90, 0.92],
                color_std: s,
            },
            // clutter
            ClassShape {
                blobs: vec![
                    blob([0.3, 0.7, 0.2], [0.1, 0.1, 0.12]),
                    blob([0.75, 0.3, 0.5], [0.1, 0.1, 0.2]),
                    blob([0.6, 0.6, 0.15], [0.08, 0.08, 0.08]),
                ],
                color_mean: [0.50, 0.45, 0.45],
                color_std: 0.12,
            },
        ];
        Self {
            class_fractions,
            shapes,
            scene_jitter: 0.03,
        }
    }

    /// `C` classes with equal fractions, each a single well separated blob.
    pub fn uniform(num_classes: usize) -> Self {
        let shapes = (0..num_classes)
            .map(|c| {
                let t = (c as f64 + 0.5) / num_classes as f64;
                ClassShape {
                    blobs: vec![blob([t, 0.5, 0.5], [0.05, 0.1, 0.1])],
                    color_mean: [t, 1.0 - t, 0.5],
                    color_std: 0.05,
                }
            })
            .collect();
        Self {
            class_fractions: vec![1.0 / num_classes as f64; num_classes],
            shapes,
            scene_jitter: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_fractions.len()
    }

    /// Class with the smallest positive fraction.
    pub fn minority_class(&self) -> usize {
        let mut best = 0;
        for (c, &f) in self.class_fractions.iter().enumerate() {
            if f > 0.0 && (self.class_fractions[best] <= 0.0 || f < self.class_fractions[best]) {
                best = c;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_fractions.len();
        if c == 0 {
            return Err(SceneError::Profile("no classes".into()));
        }
        if self.shapes.len() != c {
            return Err(SceneError::Profile(format!(
                "{} class fractions but {} shapes",
                c,
                self.shapes.len()
            )));
        }
        if let Some((i, f)) = self
            .class_fractions
            .iter()
            .enumerate()
            .find(|(_, f)| !(**f >= 0.0) || !f.is_finite())
        {
            return Err(SceneError::Profile(format!("fraction {i} is {f}")));
        }
        let sum: f64 = self.class_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SceneError::Profile(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.blobs.is_empty() {
                return Err(SceneError::Profile(format!("class {i} has no blobs")));
            }
            let bad_spread = s
                .blobs
                .iter()
                .any(|b| b.spread.iter().any(|v| !(*v >= 0.0)));
            if bad_spread || !(s.color_std >= 0.0) {
                return Err(SceneError::Profile(format!(
                    "class {i} has a negative spread"
                )));
            }
        }
        if !(self.scene_jitter >= 0.0) {
            return Err(SceneError::Profile("negative scene jitter".into()));
        }
        Ok(())
    }
}

/// Rounds to the 9 significant digits the scene format stores, so that
/// generated scenes survive a write/read cycle bit-exactly.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Draws one scene. A pure function of `(profile, n_points, seed)`.
pub fn generate_scene(profile: &ImbalanceProfile, n_points: usize, seed: u64) -> Result<Scene> {
    profile.validate()?;
    if n_points == 0 {
        return Err(SceneError::Profile("n_points must be at least 1".into()));
    }
    let c = profile.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let centers: Vec<Vec<[f64; 3]>> = profile
        .shapes
        .iter()
        .map(|s| {
            s.blobs
                .iter()
                .map(|b| {
                    let mut ctr = b.center;
                    for v in ctr.iter_mut() {
                        *v += profile.scene_jitter * std_normal.sample(&mut rng);
                    }
                    ctr
                })
                .collect()
        })
        .collect();

    let mut cumulative = Vec::with_capacity(c);
    let mut acc = 0.0;
    for f in &profile.class_fractions {
        acc += f;
        cumulative.push(acc);
    }

    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let u: f64 = rng.random::<f64>() * acc;
        // First bin whose cumulative mass exceeds u; zero-width bins are never chosen.
        let label = cumulative.partition_point(|&cum| cum <= u).min(c - 1);
        let shape = &profile.shapes[label];
        let b = rng.random_range(0..shape.blobs.len());
        let mut xyz = [0.0; 3];
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            let v = centers[label][b][k] + shape.blobs[b].spread[k] * std_normal.sample(&mut rng);
            xyz[k] = quantize(v.clamp(0.0, 1.0));
        }
        for k in 0..3 {
            let v = shape.color_mean[k] + shape.color_std * std_normal.sample(&mut rng);
            rgb[k] = quantize(v.clamp(0.0, 1.0));
        }
        points.push(PointRecord { xyz, rgb, label });
    }
    Scene::new(seed, c, points)
}

/// Serializes a scene: header `spg-scene v1 C=<int> N=<int>` followed by one
/// `x y z r g b label` line per point, floats at 9 significant digits.
pub fn format_scene(scene: &Scene) -> String {
    let mut s = String::with_capacity(scene.len() * 100 + 32);
    s.push_str(&format!(
        "spg-scene v1 C={} N={}\n",
        scene.num_classes,
        scene.len()
    ));
    for p in &scene.points {
        s.push_str(&format!(
            "{:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {}\n",
            p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2], p.label
        ));
    }
    s
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    let io_err = |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(format_scene(scene).as_bytes())
        .map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads a scene file. The format carries no scene index, so the returned
/// scene has `id == 0`.
pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(&text)
}

fn parse_header_field(tok: Option<&str>, key: &str, line: usize, offset: usize) -> Result<usize> {
    let tok = tok.ok_or_else(|| SceneError::Parse {
        line,
        offset,
        msg: format!("missing `{key}=` field"),
    })?;
    tok.strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SceneError::Parse {
            line,
            offset,
            msg: format!("expected `{key}=<int>`, found `{tok}`"),
        })
}

pub fn parse_scene(text: &str) -> Result<Scene> {
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or(SceneError::Parse {
        line: 1,
        offset: 0,
        msg: "empty file".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("spg-scene") || toks.next() != Some("v1") {
        return Err(SceneError::Parse {
            line: 1,
            offset: 0,
            msg: "expected header `spg-scene v1 C=<int> N=<int>`".into(),
        });
    }
    let c = parse_header_field(toks.next(), "C", 1, 0)?;
    let n = parse_header_field(toks.next(), "N", 1, 0)?;
    if toks.next().is_some() {
        return Err(SceneError::Parse {
            line: 1,
            offset: 0,
            msg: "trailing tokens in header".into(),
        });
    }
    if !header.ends_with('\n') {
        return Err(SceneError::Parse {
            line: 1,
            offset: header.len(),
            msg: "truncated header".into(),
        });
    }
    offset += header.len();

    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let line_no = i + 2;
        let Some(raw) = lines.next() else {
            return Err(SceneError::Parse {
                line: line_no,
                offset,
                msg: format!("truncated: expected {n} records, found {i}"),
            });
        };
        if !raw.ends_with('\n') {
            return Err(SceneError::Parse {
                line: line_no,
                offset,
                msg: "truncated record (no line terminator)".into(),
            });
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(SceneError::Parse {
                line: line_no,
                offset,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0.0; 6];
        for (k, f) in fields[..6].iter().enumerate() {
            vals[k] = f.parse().map_err(|_| SceneError::Parse {
                line: line_no,
                offset,
                msg: format!("field {} is not a number: `{f}`", k + 1),
            })?;
        }
        let label: usize = fields[6].parse().map_err(|_| SceneError::Parse {
            line: line_no,
            offset,
            msg: format!("label is not an integer: `{}`", fields[6]),
        })?;
        if label >= c {
            return Err(SceneError::Validation(format!(
                "line {line_no}: label {label} out of range for C = {c}"
            )));
        }
        points.push(PointRecord {
            xyz: [vals[0], vals[1], vals[2]],
            rgb: [vals[3], vals[4], vals[5]],
            label,
        });
        offset += raw.len();
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(SceneError::Parse {
            line: n + 2,
            offset,
            msg: format!("more than N = {n} records"),
        });
    }
    Scene::new(0, c, points)
}
