//! Joint online training of both branches, evaluation, and run outputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneError, MainBranch, Model};
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, LrSchedule, Mode, OptimizerKind, TrainConfig};
use crate::linalg::{DualTensor, LinalgError, Tensor2D};
use crate::losses::{self, LossParts, LossReport};
use crate::metrics::{ConfusionMatrix, EpochMetrics};
use crate::prototypes::{self, PrototypeStore};
use crate::scenes::{self, ImbalanceProfile, Scene, SceneError};
use crate::SpgError;

pub const MANIFEST_SCHEMA: &str = "spg-run-manifest/1";

/// RNG streams derived from the config seed. Each consumer owns a stream so
/// that, for example, the main-branch initialization is identical in every
/// mode.
const STREAM_MAIN_INIT: u64 = 1;
const STREAM_AUX_INIT: u64 = 2;
const STREAM_ORDER: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of the `k`-th training scene.
pub fn train_scene_seed(seed: u64, k: u64) -> u64 {
    (seed << 32) | (k & 0x7fff_ffff)
}

/// Seed of the `k`-th test scene; disjoint from every training seed.
pub fn test_scene_seed(seed: u64, k: u64) -> u64 {
    (seed << 32) | (1 << 31) | (k & 0x7fff_ffff)
}

pub fn generate_scenes(
    profile: &ImbalanceProfile,
    points: usize,
    seeds: impl Iterator<Item = u64>,
) -> Result<Vec<Scene>, SceneError> {
    seeds
        .map(|s| scenes::generate_scene(profile, points, s))
        .collect()
}

pub fn training_scenes(cfg: &TrainConfig) -> Result<Vec<Scene>, SceneError> {
    let seeds = (0..cfg.scenes_per_epoch as u64).map(|k| train_scene_seed(cfg.seed, k));
    generate_scenes(&cfg.profile.build(), cfg.points_per_scene, seeds)
}

pub fn test_scenes(cfg: &TrainConfig) -> Result<Vec<Scene>, SceneError> {
    let seeds = (0..cfg.test_scenes as u64).map(|k| test_scene_seed(cfg.seed, k));
    generate_scenes(&cfg.profile.build(), cfg.points_per_scene, seeds)
}

fn config_err(e: ConfigError) -> SpgError {
    SpgError::Config(e.to_string())
}

/// SGD with optional heavy-ball momentum over one branch's parameters.
#[derive(Debug, Clone, Default)]
struct Sgd {
    velocity: Vec<Tensor2D>,
}

impl Sgd {
    fn step(
        &mut self,
        params: Vec<(String, &mut DualTensor)>,
        lr: f64,
        momentum: Option<f64>,
        clip: f64,
    ) {
        let sq: f64 = params
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|(_, p)| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        for ((_, p), v) in params.into_iter().zip(&mut self.velocity) {
            match momentum {
                Some(mu) => {
                    for (vi, &g) in v.data_mut().iter_mut().zip(p.grad.data()) {
                        *vi = mu * *vi + scale * g;
                    }
                    for (w, &vi) in p.value.data_mut().iter_mut().zip(v.data()) {
                        *w -= lr * vi;
                    }
                }
                None => {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * scale * g;
                    }
                }
            }
        }
    }
}

/// Which loss terms are live for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub con: bool,
    pub l1: bool,
    pub l1_main: bool,
    pub ce: bool,
}

impl ActiveTerms {
    pub fn of(cfg: &TrainConfig) -> Self {
        let spg = cfg.mode == Mode::Spg;
        let w = cfg.weights;
        Self {
            con: spg && cfg.enable_con && w.con > 0.0,
            l1: spg && cfg.enable_l1 && w.l1 > 0.0,
            l1_main: spg && cfg.enable_l1_main && w.l1_main > 0.0,
            ce: w.ce > 0.0,
        }
    }

    pub fn trains_aux(&self) -> bool {
        self.con || self.l1
    }
}

/// Model, prototype stores and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub aux_store: PrototypeStore,
    pub main_store: PrototypeStore,
    /// Number of completed training steps; doubles as the scene index `t`.
    pub step: u64,
    pub total_steps: u64,
    class_weights: Vec<f64>,
    main_opt: Sgd,
    aux_opt: Sgd,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, SpgError> {
        config.validate().map_err(config_err)?;
        let arch = config.architecture();
        let model = Model::new(
            arch.clone(),
            &mut stream_rng(config.seed, STREAM_MAIN_INIT),
            &mut stream_rng(config.seed, STREAM_AUX_INIT),
        );
        let alpha = config.resolved_alpha();
        let aux_store = PrototypeStore::new(
            arch.num_classes,
            arch.projection_dim,
            alpha,
            config.renormalize_prototypes,
        )?;
        let main_store = PrototypeStore::new(arch.num_classes, arch.feature_dim(), alpha, true)?;
        let total_steps = (config.epochs * config.scenes_per_epoch) as u64;
        Ok(Self {
            class_weights: vec![1.0; arch.num_classes],
            config,
            model,
            aux_store,
            main_store,
            step: 0,
            total_steps,
            main_opt: Sgd::default(),
            aux_opt: Sgd::default(),
        })
    }

    /// Sets weighted-CE class weights from training point counts.
    pub fn set_class_counts(&mut self, counts: &[usize]) {
        self.class_weights = losses::inverse_frequency_weights(counts);
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn learning_rate(&self) -> f64 {
        let lr = self.config.lr;
        match self.config.lr_schedule {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                if self.total_steps == 0 {
                    return lr;
                }
                let frac = (self.step as f64 / self.total_steps as f64).min(1.0);
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn classification_loss(
        &self,
        logits: &Tensor2D,
        labels: &[usize],
    ) -> Result<(f64, Tensor2D), SpgError> {
        match self.config.mode {
            Mode::Focal => losses::focal_loss(logits, labels, self.config.focal_gamma),
            Mode::WeightedCe => losses::weighted_cross_entropy(logits, labels, &self.class_weights),
            Mode::Spg | Mode::CeOnly => losses::cross_entropy(logits, labels),
        }
    }

    /// One joint step on `scene`: group by class, run both branches, update
    /// both prototype stores, compute the losses against the updated stores,
    /// backpropagate each branch's losses into that branch, then apply SGD.
    pub fn train_step(&mut self, scene: &Scene) -> Result<LossReport, SpgError> {
        let t = self.step;
        self.step_inner(scene).map_err(|e| match e {
            SpgError::Linalg(LinalgError::DegenerateVector { norm })
            | SpgError::Backbone(BackboneError::Linalg(LinalgError::DegenerateVector { norm }))
                if !norm.is_finite() =>
            {
                SpgError::Divergence {
                    part: "activations".into(),
                    step: Some(t),
                }
            }
            other => other,
        })
    }

    fn step_inner(&mut self, scene: &Scene) -> Result<LossReport, SpgError> {
        scene
            .validate_for_training()
            .map_err(|e| SpgError::Validation(e.to_string()))?;
        if scene.num_classes != self.model.arch.num_classes {
            return Err(SpgError::Validation(format!(
                "scene has {} classes, model has {}",
                scene.num_classes, self.model.arch.num_classes
            )));
        }
        let cfg = &self.config;
        let spg = cfg.mode == Mode::Spg;
        let mut active = ActiveTerms::of(cfg);
        if self.step < (cfg.guidance_warmup_epochs * cfg.scenes_per_epoch) as u64 {
            active.l1_main = false;
        }
        let w = cfg.weights;
        let t = self.step;
        self.model.zero_grad();

        let aux_out = if spg {
            Some(if cfg.separate_subspaces {
                self.model
                    .aux
                    .forward_grouped(&scenes::split_by_category(scene))?
            } else {
                self.model.aux.forward_ungrouped(&scene.points)?
            })
        } else {
            None
        };
        let main_out = self.model.main.forward(&scene.points)?;
        let labels = scene.labels();

        if let Some(aux) = &aux_out {
            let p_aux = prototypes::scene_prototypes(&aux.features, &aux.labels)?;
            self.aux_store.update(&p_aux, t)?;
            let p_main = prototypes::main_prototypes_from_correct(
                &main_out.features,
                &main_out.logits,
                &labels,
            )?;
            self.main_store.update(&p_main, t)?;
        }

        let mut parts = LossParts::default();
        let mut aux_grad = aux_out
            .as_ref()
            .map(|a| Tensor2D::zeros(a.features.rows(), a.features.cols()));
        if let (Some(aux), Some(g_aux)) = (&aux_out, aux_grad.as_mut()) {
            if active.con {
                let (l, g) = losses::supcon_loss(&aux.features, &aux.labels, cfg.tau)?;
                parts.con = l;
                g_aux.add_scaled(&g, w.con)?;
            }
            if active.l1 {
                let (l, g, _) = losses::guidance_aux(&aux.features, &aux.labels, &self.main_store)?;
                parts.l1 = l;
                g_aux.add_scaled(&g, w.l1)?;
            }
        }
        let mut feat_grad = None;
        if active.l1_main {
            let (l, mut g, _) =
                losses::guidance_main(&main_out.features, &labels, &self.aux_store)?;
            parts.l1_main = l;
            g.scale(w.l1_main);
            feat_grad = Some(g);
        }
        let mut logit_grad = Tensor2D::zeros(main_out.logits.rows(), main_out.logits.cols());
        if active.ce {
            let (l, g) = self.classification_loss(&main_out.logits, &labels)?;
            parts.ce = l;
            logit_grad.add_scaled(&g, w.ce)?;
        }
        let report = losses::total_loss(parts, w).map_err(|e| match e {
            SpgError::Divergence { part, .. } => SpgError::Divergence {
                part,
                step: Some(t),
            },
            other => other,
        })?;

        self.model
            .main
            .backward(&main_out, feat_grad.as_ref(), &logit_grad)?;
        if let (Some(aux), Some(g)) = (&aux_out, &aux_grad) {
            if active.trains_aux() {
                self.model.aux.backward(aux, g)?;
            }
        }

        let lr = self.learning_rate();
        let momentum = match cfg.optimizer {
            OptimizerKind::Sgd => None,
            OptimizerKind::SgdMomentum => Some(cfg.momentum),
        };
        let (clip_main, clip_aux) = (cfg.grad_clip_main, cfg.grad_clip_aux);
        self.main_opt
            .step(self.model.main.params_mut(), lr, momentum, clip_main);
        if spg && active.trains_aux() {
            self.aux_opt
                .step(self.model.aux.params_mut(), lr, momentum, clip_aux);
        }
        let finite = self.model.params().iter().all(|(_, p)| p.value.is_finite());
        if !finite {
            return Err(SpgError::Divergence {
                part: "parameters".into(),
                step: Some(t),
            });
        }
        self.step += 1;
        Ok(report)
    }

    /// Parameters and stores, with gradients cleared.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut model = self.model.clone();
        model.zero_grad();
        Checkpoint {
            model,
            aux_store: self.aux_store.clone(),
            main_store: self.main_store.clone(),
            step: self.step,
        }
    }
}

/// Per-point class predictions from the main branch alone.
pub fn predict(main: &MainBranch, scene: &Scene) -> Result<Vec<usize>, SpgError> {
    let out = main.forward(&scene.points)?;
    Ok(out.logits.iter_rows().map(crate::linalg::argmax).collect())
}

pub fn confusion(main: &MainBranch, scenes: &[Scene]) -> Result<ConfusionMatrix, SpgError> {
    let c = main.classifier.bias.value.cols();
    let mut cm = ConfusionMatrix::new(c);
    for s in scenes {
        let pred = predict(main, s)?;
        cm.add_all(&s.labels(), &pred);
    }
    Ok(cm)
}

/// OA, mAcc and mIoU of the main branch on `scenes`. Only the main branch is
/// reachable from here, so inference never reads auxiliary parameters.
pub fn evaluate(main: &MainBranch, scenes: &[Scene]) -> Result<EpochMetrics, SpgError> {
    let cm = confusion(main, scenes)?;
    Ok(EpochMetrics::from_confusion(0, &cm, LossParts::default()))
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Spg(#[from] SpgError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Everything produced by a training run, held in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trainer: Trainer,
    pub train_scenes: Vec<Scene>,
    pub test_scenes: Vec<Scene>,
    pub history: Vec<EpochMetrics>,
}

impl RunResult {
    pub fn last(&self) -> &EpochMetrics {
        self.history
            .last()
            .expect("history always has at least one row")
    }
}

/// Trains per `cfg` and evaluates on the test scenes after every epoch.
/// With zero epochs the initialized model is evaluated once as epoch 0.
pub fn train(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let train_scenes = training_scenes(cfg)?;
    let test_scenes = test_scenes(cfg)?;
    let mut counts = vec![0usize; trainer.model.arch.num_classes];
    for s in &train_scenes {
        for (c, n) in s.class_counts.iter().enumerate() {
            counts[c] += n;
        }
    }
    trainer.set_class_counts(&counts);

    let mut history = Vec::new();
    if cfg.epochs == 0 {
        let m = evaluate(&trainer.model.main, &test_scenes)?;
        on_epoch(&m);
        history.push(m);
    }
    let mut order_rng = stream_rng(cfg.seed, STREAM_ORDER);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = LossParts::default();
        for &k in &order {
            let r = trainer.train_step(&train_scenes[k])?;
            sum.con += r.parts.con;
            sum.l1 += r.parts.l1;
            sum.l1_main += r.parts.l1_main;
            sum.ce += r.parts.ce;
        }
        let n = order.len() as f64;
        let mean = LossParts {
            con: sum.con / n,
            l1: sum.l1 / n,
            l1_main: sum.l1_main / n,
            ce: sum.ce / n,
        };
        let cm = confusion(&trainer.model.main, &test_scenes)?;
        let m = EpochMetrics::from_confusion(epoch, &cm, mean);
        on_epoch(&m);
        history.push(m);
    }
    Ok(RunResult {
        trainer,
        train_scenes,
        test_scenes,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRange {
    pub first: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub name: String,
    pub config: TrainConfig,
    pub config_text: String,
    pub resolved_alpha: f64,
    pub num_params: usize,
    pub minority_class: usize,
    pub train_seeds: SeedRange,
    pub test_seeds: SeedRange,
    pub epochs: Vec<EpochMetrics>,
    pub final_miou: f64,
    pub final_class_iou: Vec<Option<f64>>,
    pub metrics_csv: String,
    pub checkpoint: String,
    pub created_unix: u64,
    pub elapsed_seconds: f64,
}

pub fn metrics_csv(num_classes: usize, history: &[EpochMetrics]) -> String {
    let mut s = EpochMetrics::csv_header(num_classes);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    std::fs::write(path, contents).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains, then writes `manifest.json`, `metrics.csv`, `checkpoint.bin` and
/// `config.resolved` under `<runs_root>/<name>/`.
pub fn run_experiment(
    cfg: &TrainConfig,
    runs_root: &Path,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(RunManifest, RunResult), RunError> {
    let started = Instant::now();
    let result = train(cfg, on_epoch)?;
    let dir = runs_root.join(&cfg.name);
    std::fs::create_dir_all(&dir).map_err(|source| RunError::Io {
        path: dir.clone(),
        source,
    })?;
    let arch = &result.trainer.model.arch;
    write_file(
        &dir.join("metrics.csv"),
        metrics_csv(arch.num_classes, &result.history),
    )?;
    write_file(&dir.join("config.resolved"), cfg.to_text())?;
    checkpoint::save(&result.trainer.checkpoint(), &dir.join("checkpoint.bin"))?;
    let last = result.last();
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        name: cfg.name.clone(),
        config: cfg.clone(),
        config_text: cfg.to_text(),
        resolved_alpha: cfg.resolved_alpha(),
        num_params: result.trainer.model.num_params(),
        minority_class: cfg.profile.build().minority_class(),
        train_seeds: SeedRange {
            first: train_scene_seed(cfg.seed, 0),
            count: cfg.scenes_per_epoch as u64,
        },
        test_seeds: SeedRange {
            first: test_scene_seed(cfg.seed, 0),
            count: cfg.test_scenes as u64,
        },
        final_miou: last.miou,
        final_class_iou: last.class_iou.clone(),
        epochs: result.history.clone(),
        metrics_csv: "metrics.csv".into(),
        checkpoint: "checkpoint.bin".into(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok((manifest, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProfileName;
    use crate::losses::LossWeights;

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            name: "tiny".into(),
            profile: ProfileName::Uniform(3),
            epochs: 2,
            scenes_per_epoch: 4,
            points_per_scene: 40,
            test_scenes: 2,
            mode,
            ..TrainConfig::default()
        }
    }

    fn scene(cfg: &TrainConfig) -> Scene {
        scenes::generate_scene(&cfg.profile.build(), cfg.points_per_scene, 11).unwrap()
    }

    #[test]
    fn scene_seeds_are_disjoint() {
        for k in 0..100 {
            assert_ne!(train_scene_seed(5, k), test_scene_seed(5, k));
            assert_eq!(train_scene_seed(5, k) >> 32, 5);
        }
    }

    #[test]
    fn ce_only_reports_zero_aux_terms_and_leaves_aux_untouched() {
        let cfg = tiny(Mode::CeOnly);
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let before = tr.model.aux.clone();
        let s = scene(&cfg);
        for _ in 0..3 {
            let r = tr.train_step(&s).unwrap();
            assert_eq!((r.parts.con, r.parts.l1, r.parts.l1_main), (0.0, 0.0, 0.0));
            assert!(r.parts.ce > 0.0);
        }
        assert_eq!(tr.model.aux.params().len(), before.params().len());
        for ((_, a), (_, b)) in tr.model.aux.params().iter().zip(before.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(tr.model.aux.reads.get(), 0);
    }

    #[test]
    fn zero_lr_rerun_repeats_losses() {
        let mut cfg = tiny(Mode::Spg);
        cfg.lr = 0.0;
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let s = scene(&cfg);
        let a = tr.train_step(&s).unwrap();
        let b = tr.train_step(&s).unwrap();
        assert_eq!(a.parts.con, b.parts.con);
        assert_eq!(a.parts.ce, b.parts.ce);
        // Same scene twice with α < 1 leaves the aux prototypes fixed, so
        // only main-store drift can move the guidance terms.
        assert!((a.parts.l1_main - b.parts.l1_main).abs() < 1e-12);
    }

    #[test]
    fn zero_guidance_weights_match_ce_only_trajectory() {
        let mut spg = tiny(Mode::Spg);
        spg.weights.con = 0.0;
        spg.weights.l1 = 0.0;
        spg.weights.l1_main = 0.0;
        let ce = tiny(Mode::CeOnly);
        let a = train(&spg, |_| {}).unwrap();
        let b = train(&ce, |_| {}).unwrap();
        assert_eq!(a.trainer.model.main, b.trainer.model.main);
        for ((_, x), (_, y)) in a
            .trainer
            .model
            .main
            .params()
            .iter()
            .zip(b.trainer.model.main.params())
        {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn evaluation_reads_only_the_main_branch() {
        let cfg = tiny(Mode::Spg);
        let r = train(&cfg, |_| {}).unwrap();
        let aux_reads = r.trainer.model.aux.reads.get();
        let main_reads = r.trainer.model.main.reads.get();
        evaluate(&r.trainer.model.main, &r.test_scenes).unwrap();
        assert_eq!(r.trainer.model.aux.reads.get(), aux_reads);
        assert_eq!(
            r.trainer.model.main.reads.get(),
            main_reads + r.test_scenes.len() as u64
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny(Mode::Spg);
        let a = train(&cfg, |_| {}).unwrap();
        let b = train(&cfg, |_| {}).unwrap();
        assert_eq!(metrics_csv(3, &a.history), metrics_csv(3, &b.history));
        assert_eq!(
            checkpoint::encode(&a.trainer.checkpoint()),
            checkpoint::encode(&b.trainer.checkpoint())
        );
    }

    #[test]
    fn zero_epochs_evaluates_initial_model() {
        let mut cfg = tiny(Mode::Spg);
        cfg.epochs = 0;
        let r = train(&cfg, |_| {}).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.history[0].epoch, 0);
        assert_eq!(r.trainer.step, 0);
    }

    #[test]
    fn every_mode_runs() {
        for mode in [Mode::Spg, Mode::CeOnly, Mode::Focal, Mode::WeightedCe] {
            let r = train(&tiny(mode), |_| {}).unwrap();
            assert_eq!(r.history.len(), 2);
            assert!(r.last().miou.is_finite());
        }
        let mut cfg = tiny(Mode::Spg);
        cfg.separate_subspaces = false;
        train(&cfg, |_| {}).unwrap();
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let mut tr = Trainer::new(tiny(Mode::Spg)).unwrap();
        assert_eq!(tr.learning_rate(), tr.config.lr);
        tr.step = tr.total_steps / 2;
        assert!((tr.learning_rate() - tr.config.lr / 2.0).abs() < 1e-15);
        tr.step = tr.total_steps;
        assert!(tr.learning_rate().abs() < 1e-15);
    }
    #[test]
    fn repeated_steps_on_one_scene_reduce_the_loss() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::Constant,
            lr: 0.02,
            points_per_scene: 50,
            ..tiny(Mode::Spg)
        };
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let s = scene(&cfg);
        let reports: Vec<LossReport> = (0..200).map(|_| tr.train_step(&s).unwrap()).collect();
        let mean = |r: &[LossReport], f: fn(&LossReport) -> f64| {
            r.iter().map(f).sum::<f64>() / r.len() as f64
        };
        let (head, tail) = (&reports[..20], &reports[180..]);
        assert!(mean(tail, |r| r.parts.ce) < 0.5 * mean(head, |r| r.parts.ce));
        assert!(mean(tail, |r| r.total) < mean(head, |r| r.total));
    }

    #[test]
    fn total_is_the_weighted_sum_of_independently_computed_parts() {
        let mut cfg = tiny(Mode::Spg);
        cfg.points_per_scene = 50;
        cfg.weights = LossWeights {
            con: 0.5,
            l1: 2.0,
            l1_main: 0.25,
            ce: 1.5,
        };
        let s = scene(&cfg);
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        for _ in 0..3 {
            let before = tr.clone();
            let r = tr.train_step(&s).unwrap();

            let main = before.model.main.forward(&s.points).unwrap();
            let aux = before
                .model
                .aux
                .forward_grouped(&scenes::split_by_category(&s))
                .unwrap();
            let (mut aux_store, mut main_store) =
                (before.aux_store.clone(), before.main_store.clone());
            aux_store
                .update(
                    &prototypes::scene_prototypes(&aux.features, &aux.labels).unwrap(),
                    before.step,
                )
                .unwrap();
            let correct =
                prototypes::main_prototypes_from_correct(&main.features, &main.logits, &s.labels())
                    .unwrap();
            main_store.update(&correct, before.step).unwrap();

            let con = losses::supcon_loss(&aux.features, &aux.labels, cfg.tau)
                .unwrap()
                .0;
            let l1 = losses::guidance_aux(&aux.features, &aux.labels, &main_store)
                .unwrap()
                .0;
            let l1_main = losses::guidance_main(&main.features, &s.labels(), &aux_store)
                .unwrap()
                .0;
            let ce = losses::cross_entropy(&main.logits, &s.labels()).unwrap().0;
            let expect = 0.5 * con + 2.0 * l1 + 0.25 * l1_main + 1.5 * ce;
            assert!(
                (r.total - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                "{} vs {expect}",
                r.total
            );
            assert!((r.parts.con - con).abs() < 1e-9);
            assert!((r.parts.ce - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subspace_mode_runs_the_aux_branch_on_the_whole_scene() {
        let s = scene(&tiny(Mode::Spg));
        for separate in [true, false] {
            let cfg = TrainConfig {
                separate_subspaces: separate,
                ..tiny(Mode::Spg)
            };
            let mut tr = Trainer::new(cfg).unwrap();
            let model = tr.model.clone();
            let r = tr.train_step(&s).unwrap();
            let aux = if separate {
                model
                    .aux
                    .forward_grouped(&scenes::split_by_category(&s))
                    .unwrap()
            } else {
                model.aux.forward_ungrouped(&s.points).unwrap()
            };
            let con = losses::supcon_loss(&aux.features, &aux.labels, tr.config.tau)
                .unwrap()
                .0;
            assert!((r.parts.con - con).abs() < 1e-9, "separate={separate}");
            let protos = prototypes::scene_prototypes(&aux.features, &aux.labels).unwrap();
            let mut store = Trainer::new(tr.config.clone()).unwrap().aux_store;
            store.update(&protos, 0).unwrap();
            assert_eq!(store, tr.aux_store);
        }
    }
}
