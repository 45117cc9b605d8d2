//! Finite-difference verification of every backward pass: the primitives,
//! the losses, and one full dual-branch step on a small seeded scene.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Architecture, Model};
use crate::linalg::{self, BlockCheck, DualTensor, GradCheckOptions, GradCheckReport, Tensor2D};
use crate::losses::{self, LossWeights};
use crate::prototypes::{self, PrototypeStore};
use crate::scenes::{self, ImbalanceProfile};
use crate::SpgError;

/// Points in the end-to-end scene.
pub const E2E_POINTS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub groups: Vec<(String, GradCheckReport)>,
    pub tol: f64,
    pub elapsed_seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, r)| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .fold(0.0, |m, (_, r)| m.max(r.max_rel_err()))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockCheck> {
        self.groups.iter().flat_map(|(_, r)| r.blocks.iter())
    }

    pub fn failing(&self) -> Vec<&BlockCheck> {
        self.groups.iter().flat_map(|(_, r)| r.failing()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<44} {:>8} {:>12} {:>6}\n",
            "block", "entries", "max_rel_err", "status"
        );
        for b in self.blocks() {
            let ok = b.max_rel_err < self.tol;
            s.push_str(&format!(
                "{:<44} {:>8} {:>12.3e} {:>6}\n",
                b.name,
                b.entries,
                b.max_rel_err,
                if ok { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "overall max_rel_err {:.3e} (tol {:.0e}) in {:.2}s: {}\n",
            self.max_rel_err(),
            self.tol,
            self.elapsed_seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    pub seed: u64,
    /// Corrupts the analytic gradient of the named block, for exercising
    /// failure reporting.
    pub fault: Option<String>,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("shape matches data")
}

fn corrupt(name: &str, fault: &Option<String>, grad: &mut Tensor2D) {
    if fault.as_deref() == Some(name) {
        let bump = 1e-2 * grad.max_abs().max(1e-3);
        grad.data_mut()[0] += bump;
    }
}

/// `f` returns the loss and the analytic gradient for each input.
fn check_fn<F>(
    group: &str,
    names: &[&str],
    inputs: Vec<Tensor2D>,
    opts: &SuiteOptions,
    f: F,
) -> Result<GradCheckReport, SpgError>
where
    F: Fn(&[Tensor2D]) -> Result<(f64, Vec<Tensor2D>), SpgError>,
{
    let (_, grads) = f(&inputs)?;
    let full: Vec<String> = names.iter().map(|n| format!("{group}.{n}")).collect();
    let mut params: Vec<DualTensor> = inputs
        .into_iter()
        .zip(grads)
        .zip(&full)
        .map(|((v, mut g), name)| {
            corrupt(name, &opts.fault, &mut g);
            DualTensor { value: v, grad: g }
        })
        .collect();
    let full_refs: Vec<&str> = full.iter().map(String::as_str).collect();
    let report = linalg::grad_check(&full_refs, &mut params, opts.check, |ps| {
        let values: Vec<Tensor2D> = ps.iter().map(|p| p.value.clone()).collect();
        f(&values).map(|(l, _)| l).unwrap_or(f64::NAN)
    })?;
    Ok(report)
}

/// Scalar probe `Σ R ⊙ y` turning a tensor-valued op into a loss.
fn probe(y: &Tensor2D, r: &Tensor2D) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn primitives(opts: &SuiteOptions) -> Result<Vec<(String, GradCheckReport)>, SpgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();

    let (a, b, r) = (
        random(&mut rng, 4, 3),
        random(&mut rng, 3, 5),
        random(&mut rng, 4, 5),
    );
    out.push((
        "matmul".into(),
        check_fn("matmul", &["a", "b"], vec![a, b], opts, |x| {
            let y = linalg::matmul_fwd(&x[0], &x[1])?;
            let (ga, gb) = linalg::matmul_bwd(&x[0], &x[1], &r)?;
            Ok((probe(&y, &r), vec![ga, gb]))
        })?,
    ));

    let (x, bias, r) = (
        random(&mut rng, 5, 4),
        random(&mut rng, 1, 4),
        random(&mut rng, 5, 4),
    );
    out.push((
        "add_bias".into(),
        check_fn("add_bias", &["x", "bias"], vec![x, bias], opts, |x| {
            let y = linalg::add_bias_fwd(&x[0], &x[1])?;
            Ok((probe(&y, &r), vec![r.clone(), linalg::add_bias_bwd(&r)]))
        })?,
    ));

    // Keep inputs away from the kink so the central difference is valid.
    let mut x = random(&mut rng, 6, 4);
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    });
    let r = random(&mut rng, 6, 4);
    out.push((
        "relu".into(),
        check_fn("relu", &["x"], vec![x], opts, |x| {
            let y = linalg::relu_fwd(&x[0]);
            Ok((probe(&y, &r), vec![linalg::relu_bwd(&x[0], &r)?]))
        })?,
    ));

    let (x, r) = (random(&mut rng, 5, 4), random(&mut rng, 5, 4));
    out.push((
        "l2_normalize".into(),
        check_fn("l2_normalize", &["x"], vec![x], opts, |x| {
            let y = linalg::l2_normalize_rows_fwd(&x[0])?;
            Ok((
                probe(&y, &r),
                vec![linalg::l2_normalize_rows_bwd(&x[0], &r)?],
            ))
        })?,
    ));

    let (x, r) = (random(&mut rng, 7, 4), random(&mut rng, 1, 4));
    out.push((
        "max_pool".into(),
        check_fn("max_pool", &["x"], vec![x], opts, |x| {
            let (y, arg) = linalg::max_pool_rows_fwd(&x[0])?;
            Ok((
                probe(&y, &r),
                vec![linalg::max_pool_rows_bwd(x[0].rows(), &arg, &r)?],
            ))
        })?,
    ));
    Ok(out)
}

fn random_store(
    rng: &mut ChaCha8Rng,
    classes: usize,
    dim: usize,
    skip: Option<usize>,
) -> PrototypeStore {
    let mut s = PrototypeStore::new(classes, dim, 0.5, true).expect("valid alpha");
    for c in 0..classes {
        if Some(c) == skip {
            continue;
        }
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = linalg::norm(&v);
        s.prototypes[c] = Some(v.iter().map(|x| x / n).collect());
    }
    s
}

fn loss_checks(opts: &SuiteOptions) -> Result<Vec<(String, GradCheckReport)>, SpgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut out = Vec::new();
    let tau = 0.07;

    let labels = vec![0, 0, 1, 1, 1, 2, 2, 0];
    let x = random(&mut rng, labels.len(), 5);
    out.push((
        "supcon".into(),
        check_fn("supcon", &["features"], vec![x], opts, |x| {
            let unit = linalg::l2_normalize_rows_fwd(&x[0])?;
            let (l, g) = losses::supcon_loss(&unit, &labels, tau)?;
            Ok((l, vec![linalg::l2_normalize_rows_bwd(&x[0], &g)?]))
        })?,
    ));

    let labels = vec![0, 1, 2, 1, 3, 0];
    let store = random_store(&mut rng, 4, 5, Some(3));
    let h = random(&mut rng, labels.len(), 5);
    out.push((
        "guidance_main".into(),
        check_fn("guidance_main", &["features"], vec![h], opts, |x| {
            let (l, g, _) = losses::guidance_main(&x[0], &labels, &store)?;
            Ok((l, vec![g]))
        })?,
    ));

    let f = linalg::l2_normalize_rows_fwd(&random(&mut rng, labels.len(), 5))?;
    out.push((
        "guidance_aux".into(),
        check_fn("guidance_aux", &["features"], vec![f], opts, |x| {
            let (l, g, _) = losses::guidance_aux(&x[0], &labels, &store)?;
            Ok((l, vec![g]))
        })?,
    ));

    let labels = vec![0, 2, 1, 3, 3, 0, 1];
    let logits = random(&mut rng, labels.len(), 4);
    out.push((
        "cross_entropy".into(),
        check_fn(
            "cross_entropy",
            &["logits"],
            vec![logits.clone()],
            opts,
            |x| {
                let (l, g) = losses::cross_entropy(&x[0], &labels)?;
                Ok((l, vec![g]))
            },
        )?,
    ));
    out.push((
        "focal".into(),
        check_fn("focal", &["logits"], vec![logits.clone()], opts, |x| {
            let (l, g) = losses::focal_loss(&x[0], &labels, 2.0)?;
            Ok((l, vec![g]))
        })?,
    ));
    let weights = vec![0.5, 2.0, 1.0, 3.0];
    out.push((
        "weighted_ce".into(),
        check_fn("weighted_ce", &["logits"], vec![logits], opts, |x| {
            let (l, g) = losses::weighted_cross_entropy(&x[0], &labels, &weights)?;
            Ok((l, vec![g]))
        })?,
    ));
    Ok(out)
}

fn set_values(dst: Vec<(String, &mut DualTensor)>, src: &[DualTensor]) {
    for ((_, d), s) in dst.into_iter().zip(src) {
        d.value.data_mut().copy_from_slice(s.value.data());
    }
}

/// Main-branch and auxiliary-branch losses of one training step, each
/// checked against its own branch's parameters. Stores are snapshots taken
/// after the step's EMA update; classes they have not seen are filled with
/// fixed random prototypes so every guidance term participates.
fn end_to_end(opts: &SuiteOptions) -> Result<Vec<(String, GradCheckReport)>, SpgError> {
    let profile = ImbalanceProfile::default_indoor();
    let scene = scenes::generate_scene(&profile, E2E_POINTS, opts.seed)
        .map_err(|e| SpgError::Validation(e.to_string()))?;
    let arch = Architecture::new(profile.num_classes());
    let mut model = Model::new(
        arch.clone(),
        &mut ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(11)),
        &mut ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(12)),
    );
    let weights = LossWeights::default();
    let tau = 0.07;
    let labels = scene.labels();
    let sets = scenes::split_by_category(&scene);

    let aux_out = model.aux.forward_grouped(&sets)?;
    let main_out = model.main.forward(&scene.points)?;
    let mut fill = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(13));
    let mut aux_store = random_store(&mut fill, arch.num_classes, arch.projection_dim, None);
    let mut main_store = random_store(&mut fill, arch.num_classes, arch.feature_dim(), None);
    aux_store.update(
        &prototypes::scene_prototypes(&aux_out.features, &aux_out.labels)?,
        0,
    )?;
    main_store.update(
        &prototypes::main_prototypes_from_correct(&main_out.features, &main_out.logits, &labels)?,
        0,
    )?;

    let main_loss =
        |m: &Model| -> Result<(f64, crate::backbone::MainOutput, Tensor2D, Tensor2D), SpgError> {
            let out = m.main.forward(&scene.points)?;
            let (l_main, mut g_feat, _) =
                losses::guidance_main(&out.features, &labels, &aux_store)?;
            let (l_ce, mut g_logits) = losses::cross_entropy(&out.logits, &labels)?;
            g_feat.scale(weights.l1_main);
            g_logits.scale(weights.ce);
            Ok((
                weights.l1_main * l_main + weights.ce * l_ce,
                out,
                g_feat,
                g_logits,
            ))
        };
    let aux_loss = |m: &Model| -> Result<(f64, crate::backbone::AuxOutput, Tensor2D), SpgError> {
        let out = m.aux.forward_grouped(&sets)?;
        let (l_con, g_con) = losses::supcon_loss(&out.features, &out.labels, tau)?;
        let (l_l1, g_l1, _) = losses::guidance_aux(&out.features, &out.labels, &main_store)?;
        let mut g = g_con;
        g.scale(weights.con);
        g.add_scaled(&g_l1, weights.l1)?;
        Ok((weights.con * l_con + weights.l1 * l_l1, out, g))
    };

    model.zero_grad();
    let (_, out, g_feat, g_logits) = main_loss(&model)?;
    model.main.backward(&out, Some(&g_feat), &g_logits)?;
    let (_, out, g) = aux_loss(&model)?;
    model.aux.backward(&out, &g)?;

    let mut groups = Vec::new();
    for branch in ["main", "aux"] {
        let named: Vec<(String, DualTensor)> = if branch == "main" {
            model
                .main
                .params()
                .into_iter()
                .map(|(n, p)| (n, p.clone()))
                .collect()
        } else {
            model
                .aux
                .params()
                .into_iter()
                .map(|(n, p)| (n, p.clone()))
                .collect()
        };
        let names: Vec<String> = named.iter().map(|(n, _)| format!("e2e.{n}")).collect();
        let mut params: Vec<DualTensor> = named.into_iter().map(|(_, p)| p).collect();
        for (n, p) in names.iter().zip(params.iter_mut()) {
            corrupt(n, &opts.fault, &mut p.grad);
        }
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut work = model.clone();
        let report = linalg::grad_check(&refs, &mut params, opts.check, |ps| {
            if branch == "main" {
                set_values(work.main.params_mut(), ps);
                main_loss(&work).map(|r| r.0).unwrap_or(f64::NAN)
            } else {
                set_values(work.aux.params_mut(), ps);
                aux_loss(&work).map(|r| r.0).unwrap_or(f64::NAN)
            }
        })?;
        groups.push((format!("e2e.{branch}"), report));
    }
    Ok(groups)
}

/// Runs every check. The suite passes when each block's maximum relative
/// error is below `opts.check.tol`.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport, SpgError> {
    let started = Instant::now();
    let mut groups = primitives(opts)?;
    groups.extend(loss_checks(opts)?);
    groups.extend(end_to_end(opts)?);
    Ok(SuiteReport {
        groups,
        tol: opts.check.tol,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}
