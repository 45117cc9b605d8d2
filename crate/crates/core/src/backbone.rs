//! PointNet-style networks for both branches.
//!
//! The encoder is a shared per-point MLP followed by a global max-pool whose
//! result is concatenated back onto every point. The main branch adds a
//! per-point decoder and a linear classifier; the auxiliary branch adds a
//! projection head with one hidden layer and row-wise L2 normalization.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, DualTensor, LinalgError, Tensor2D};
use crate::scenes::{ClassSet, PointRecord};

pub const INPUT_DIM: usize = 6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("empty point set")]
    EmptySet,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Layer widths for both branches.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Architecture {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            encoder_widths: vec![32, 64],
            decoder_widths: vec![64, 32],
            projection_hidden: 64,
            projection_dim: 32,
        }
    }

    /// Width of the per-point encoder output: local plus pooled halves.
    pub fn encoder_dim(&self) -> usize {
        2 * self.encoder_widths.last().copied().unwrap_or(INPUT_DIM)
    }

    /// Width of the main-branch feature set `H′`.
    pub fn feature_dim(&self) -> usize {
        self.decoder_widths
            .last()
            .copied()
            .unwrap_or_else(|| self.encoder_dim())
    }
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("shape")
}

/// Affine layer `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DualTensor,
    pub bias: DualTensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: DualTensor::new(uniform_init(input, output, input, rng)),
            bias: DualTensor::new(uniform_init(1, output, input, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let y = linalg::matmul_fwd(x, &self.weight.value)?;
        Ok(linalg::add_bias_fwd(&y, &self.bias.value)?)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor2D, upstream: &Tensor2D) -> Result<Tensor2D> {
        let (gx, gw) = linalg::matmul_bwd(x, &self.weight.value, upstream)?;
        self.weight.accumulate(&gw)?;
        self.bias.accumulate(&linalg::add_bias_bwd(upstream))?;
        Ok(gx)
    }
}

/// Stack of linear layers with ReLU between them, and optionally after the
/// last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor2D>,
    pre: Vec<Tensor2D>,
}

impl Mlp {
    pub fn new(input: usize, widths: &[usize], relu_last: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            layers.push(Linear::new(fan_in, w, rng));
            fan_in = w;
        }
        Self { layers, relu_last }
    }

    fn has_relu(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            cache.inputs.push(h);
            h = if self.has_relu(i) {
                linalg::relu_fwd(&z)
            } else {
                z.clone()
            };
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &MlpCache, upstream: &Tensor2D) -> Result<Tensor2D> {
        let mut g = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            if self.has_relu(i) {
                g = linalg::relu_bwd(&cache.pre[i], &g)?;
            }
            g = self.layers[i].backward(&cache.inputs[i], &g)?;
        }
        Ok(g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a DualTensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.l{i}.w"), &l.weight));
            out.push((format!("{prefix}.l{i}.b"), &l.bias));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut DualTensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.l{i}.w"), &mut l.weight));
            out.push((format!("{prefix}.l{i}.b"), &mut l.bias));
        }
    }
}

/// Shared per-point MLP plus global max-pool context.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    mlp: MlpCache,
    rows: usize,
    argmax: Vec<usize>,
}

impl Encoder {
    pub fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(INPUT_DIM, widths, true, rng),
        }
    }

    /// `N × 6` input rows to `N × 2w` features `[local | pooled]`.
    pub fn forward(&self, x: &Tensor2D) -> Result<(Tensor2D, EncoderCache)> {
        if x.rows() == 0 {
            return Err(BackboneError::EmptySet);
        }
        let (local, mlp) = self.mlp.forward(x)?;
        let (pooled, argmax) = linalg::max_pool_rows_fwd(&local)?;
        let mut context = Tensor2D::zeros(local.rows(), local.cols());
        for r in 0..local.rows() {
            context.row_mut(r).copy_from_slice(pooled.row(0));
        }
        let out = local.hconcat(&context)?;
        Ok((
            out,
            EncoderCache {
                mlp,
                rows: x.rows(),
                argmax,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EncoderCache, upstream: &Tensor2D) -> Result<Tensor2D> {
        let width = cache.argmax.len();
        let (mut g_local, g_context) = upstream.hsplit(width);
        let g_pooled = linalg::add_bias_bwd(&g_context);
        let routed = linalg::max_pool_rows_bwd(cache.rows, &cache.argmax, &g_pooled)?;
        g_local.add_scaled(&routed, 1.0)?;
        self.mlp.backward(&cache.mlp, &g_local)
    }
}

/// Counts forward passes through a branch.
#[derive(Debug, Default)]
pub struct ReadCounter(AtomicU64);

impl ReadCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for ReadCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

impl PartialEq for ReadCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

pub fn points_to_tensor(points: &[PointRecord]) -> Tensor2D {
    let rows: Vec<[f64; 6]> = points.iter().map(|p| p.features()).collect();
    Tensor2D::from_rows(&rows)
}

/// Encoder, decoder and classifier: the deployed segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct MainBranch {
    pub encoder: Encoder,
    pub decoder: Mlp,
    pub classifier: Linear,
    pub reads: ReadCounter,
}

#[derive(Debug, Clone)]
pub struct MainCache {
    enc: EncoderCache,
    dec: MlpCache,
}

#[derive(Debug, Clone)]
pub struct MainOutput {
    /// Pre-classifier features `H′`, one row per point.
    pub features: Tensor2D,
    pub logits: Tensor2D,
    pub cache: MainCache,
}

impl MainBranch {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::new(&arch.encoder_widths, rng);
        let decoder = Mlp::new(arch.encoder_dim(), &arch.decoder_widths, false, rng);
        let classifier = Linear::new(arch.feature_dim(), arch.num_classes, rng);
        Self {
            encoder,
            decoder,
            classifier,
            reads: ReadCounter::default(),
        }
    }

    pub fn forward(&self, points: &[PointRecord]) -> Result<MainOutput> {
        self.reads.bump();
        let x = points_to_tensor(points);
        let (enc_out, enc) = self.encoder.forward(&x)?;
        let (features, dec) = self.decoder.forward(&enc_out)?;
        let logits = self.classifier.forward(&features)?;
        Ok(MainOutput {
            features,
            logits,
            cache: MainCache { enc, dec },
        })
    }

    /// Backpropagates gradients w.r.t. `H′` and the logits.
    pub fn backward(
        &mut self,
        out: &MainOutput,
        grad_features: Option<&Tensor2D>,
        grad_logits: &Tensor2D,
    ) -> Result<()> {
        let mut g = self.classifier.backward(&out.features, grad_logits)?;
        if let Some(gf) = grad_features {
            g.add_scaled(gf, 1.0)?;
        }
        let g = self.decoder.backward(&out.cache.dec, &g)?;
        self.encoder.backward(&out.cache.enc, &g)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut DualTensor)> {
        let mut out = Vec::new();
        self.encoder.mlp.params_mut("main.encoder", &mut out);
        self.decoder.params_mut("main.decoder", &mut out);
        out.push(("main.classifier.w".into(), &mut self.classifier.weight));
        out.push(("main.classifier.b".into(), &mut self.classifier.bias));
        out
    }

    pub fn params(&self) -> Vec<(String, &DualTensor)> {
        let mut out = Vec::new();
        self.encoder.mlp.params("main.encoder", &mut out);
        self.decoder.params("main.decoder", &mut out);
        out.push(("main.classifier.w".into(), &self.classifier.weight));
        out.push(("main.classifier.b".into(), &self.classifier.bias));
        out
    }
}

/// Encoder plus projection head, run on category-grouped point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxBranch {
    pub encoder: Encoder,
    pub head: Mlp,
    pub reads: ReadCounter,
}

/// Projections with a smaller norm are treated as directionless.
pub const MIN_PROJECTION_NORM: f64 = 1e-8;

struct Pass {
    unit: Tensor2D,
    enc: EncoderCache,
    head: MlpCache,
    projected: Tensor2D,
    kept: Vec<usize>,
}

/// One encoder pass: a class set in grouped mode, or the whole scene.
#[derive(Debug, Clone)]
pub struct AuxGroup {
    /// Rows of [`AuxOutput::features`] produced by this pass.
    pub rows: std::ops::Range<usize>,
    enc: EncoderCache,
    head: MlpCache,
    /// Projection output before normalization, all rows of the pass.
    projected: Tensor2D,
    /// Rows of `projected` that were normalized and emitted.
    kept: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AuxOutput {
    /// Unit-norm projected features, grouped by pass.
    pub features: Tensor2D,
    pub labels: Vec<usize>,
    /// Scene row index of every feature row.
    pub scene_rows: Vec<usize>,
    pub groups: Vec<AuxGroup>,
}

impl AuxOutput {
    /// Rows belonging to class `c`, in output order.
    pub fn rows_of(&self, c: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == c)
            .collect()
    }
}

impl AuxBranch {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::new(&arch.encoder_widths, rng);
        let head = Mlp::new(
            arch.encoder_dim(),
            &[arch.projection_hidden, arch.projection_dim],
            true,
            rng,
        );
        Self {
            encoder,
            head,
            reads: ReadCounter::default(),
        }
    }

    /// Encodes and projects one point set. Rows whose projection is
    /// (numerically) zero after the final ReLU have no direction; they are
    /// dropped from the output and receive no gradient.
    fn pass(&self, points: &[PointRecord]) -> Result<Pass> {
        let x = points_to_tensor(points);
        let (h, enc) = self.encoder.forward(&x)?;
        let (projected, head) = self.head.forward(&h)?;
        let kept: Vec<usize> = (0..projected.rows())
            .filter(|&r| linalg::norm(projected.row(r)) >= MIN_PROJECTION_NORM)
            .collect();
        let unit = linalg::l2_normalize_rows_fwd(&projected.select_rows(&kept))?;
        Ok(Pass {
            unit,
            enc,
            head,
            projected,
            kept,
        })
    }

    fn assemble(&self, passes: Vec<(Vec<usize>, Vec<usize>, Pass)>) -> AuxOutput {
        let total: usize = passes.iter().map(|p| p.2.kept.len()).sum();
        let dim = self.head.layers.last().map_or(0, |l| l.bias.value.cols());
        let mut features = Tensor2D::zeros(total, dim);
        let mut labels = Vec::with_capacity(total);
        let mut scene_rows = Vec::with_capacity(total);
        let mut groups = Vec::with_capacity(passes.len());
        let mut start = 0;
        for (idx, lab, pass) in passes {
            for r in 0..pass.unit.rows() {
                features
                    .row_mut(start + r)
                    .copy_from_slice(pass.unit.row(r));
            }
            let end = start + pass.unit.rows();
            labels.extend(pass.kept.iter().map(|&k| lab[k]));
            scene_rows.extend(pass.kept.iter().map(|&k| idx[k]));
            groups.push(AuxGroup {
                rows: start..end,
                enc: pass.enc,
                head: pass.head,
                projected: pass.projected,
                kept: pass.kept,
            });
            start = end;
        }
        AuxOutput {
            features,
            labels,
            scene_rows,
            groups,
        }
    }

    /// Runs each nonempty class set through the branch independently, so a
    /// class's features depend only on its own points.
    pub fn forward_grouped(&self, sets: &[ClassSet]) -> Result<AuxOutput> {
        self.reads.bump();
        let mut passes = Vec::new();
        for set in sets.iter().filter(|s| !s.is_empty()) {
            let pass = self.pass(&set.points)?;
            passes.push((set.indices.clone(), vec![set.class; set.points.len()], pass));
        }
        if passes.is_empty() {
            return Err(BackboneError::EmptySet);
        }
        Ok(self.assemble(passes))
    }

    /// Runs the whole scene through the branch once; labels are kept for the
    /// losses.
    pub fn forward_ungrouped(&self, points: &[PointRecord]) -> Result<AuxOutput> {
        self.reads.bump();
        if points.is_empty() {
            return Err(BackboneError::EmptySet);
        }
        let pass = self.pass(points)?;
        let labels = points.iter().map(|p| p.label).collect();
        Ok(self.assemble(vec![((0..points.len()).collect(), labels, pass)]))
    }

    /// Backpropagates gradients w.r.t. the unit-norm output features.
    pub fn backward(&mut self, out: &AuxOutput, grad_features: &Tensor2D) -> Result<()> {
        for g in &out.groups {
            let idx: Vec<usize> = g.rows.clone().collect();
            let upstream = grad_features.select_rows(&idx);
            let g_kept =
                linalg::l2_normalize_rows_bwd(&g.projected.select_rows(&g.kept), &upstream)?;
            let mut g_proj = Tensor2D::zeros(g.projected.rows(), g.projected.cols());
            for (r, &k) in g.kept.iter().enumerate() {
                g_proj.row_mut(k).copy_from_slice(g_kept.row(r));
            }
            let g_h = self.head.backward(&g.head, &g_proj)?;
            self.encoder.backward(&g.enc, &g_h)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut DualTensor)> {
        let mut out = Vec::new();
        self.encoder.mlp.params_mut("aux.encoder", &mut out);
        self.head.params_mut("aux.head", &mut out);
        out
    }

    pub fn params(&self) -> Vec<(String, &DualTensor)> {
        let mut out = Vec::new();
        self.encoder.mlp.params("aux.encoder", &mut out);
        self.head.params("aux.head", &mut out);
        out
    }
}

/// Both branches. The auxiliary encoder has its own weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub main: MainBranch,
    pub aux: AuxBranch,
}

impl Model {
    /// Main and auxiliary parameters come from separate generators so that
    /// the main branch initialization does not depend on the auxiliary one.
    pub fn new(arch: Architecture, main_rng: &mut ChaCha8Rng, aux_rng: &mut ChaCha8Rng) -> Self {
        let main = MainBranch::new(&arch, main_rng);
        let aux = AuxBranch::new(&arch, aux_rng);
        Self { arch, main, aux }
    }

    pub fn params(&self) -> Vec<(String, &DualTensor)> {
        let mut p = self.main.params();
        p.extend(self.aux.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut DualTensor)> {
        let mut p = self.main.params_mut();
        p.extend(self.aux.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&self) -> usize {
        self.params()
            .iter()
            .map(|(_, p)| p.value.data().len())
            .sum()
    }
}
