//! End-to-end acceptance checks. Each check prints one `PASS` or `FAIL`
//! line. The seed-sweep comparisons (SPG vs CE, ablation ordering) are
//! reported but never abort the run; every other check must pass.
//!
//! Runs without the libtest harness so the lines always reach stdout:
//! `cargo test -p spg-core --test acceptance`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spg::ablation::{run_ablation_suite, AblationRow};
use spg::analysis::feature_center_analysis;
use spg::checkpoint;
use spg::config::{parse_config, Mode, TrainConfig};
use spg::gradcheck::{run_suite, SuiteOptions};
use spg::linalg::Tensor2D;
use spg::losses::{smooth_l1, supcon_loss};
use spg::prototypes::{PrototypeStore, SceneProtos};
use spg::scenes::{format_scene, generate_scene, parse_scene, read_scene, write_scene};
use spg::trainer::{evaluate, metrics_csv, train, RunResult};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const RUN_LIMIT_SECONDS: f64 = 600.0;

struct Line {
    id: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: &'static str, hard: bool, pass: bool, detail: String) {
    println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
    lines.push(Line {
        id,
        pass,
        hard,
        detail,
    });
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor2D {
    let mut t = Tensor2D::zeros(n, d);
    for r in 0..n {
        let row = t.row_mut(r);
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// The contrastive loss written out term by term.
fn supcon_brute(f: &Tensor2D, labels: &[usize], tau: f64) -> f64 {
    let n = f.rows();
    let dot =
        |i: usize, j: usize| -> f64 { f.row(i).iter().zip(f.row(j)).map(|(a, b)| a * b).sum() };
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for c in 0..classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let nc = members.len();
        if nc < 2 {
            continue;
        }
        let mut inner = 0.0;
        for &i in &members {
            for &p in &members {
                if p == i {
                    continue;
                }
                let mut denom = 0.0;
                for a in 0..n {
                    if a != i {
                        denom += (dot(i, a) / tau).exp();
                    }
                }
                inner += ((dot(i, p) / tau).exp() / denom).ln();
            }
        }
        total += -inner / (nc as f64 - 1.0);
    }
    total
}

fn gradient_correctness(lines: &mut Vec<Line>) {
    let started = Instant::now();
    let suite = run_suite(&SuiteOptions::default()).expect("gradient-check suite runs");
    let elapsed = started.elapsed().as_secs_f64();
    let blocks = suite.blocks().count();
    let e2e = suite
        .blocks()
        .filter(|b| b.name.starts_with("e2e."))
        .count();
    let pass = suite.passed() && elapsed < 60.0 && e2e > 0;
    report(
        lines,
        "gradcheck",
        true,
        pass,
        format!(
            "{blocks} blocks ({e2e} end-to-end), max rel err {:.2e} < 1e-4, {elapsed:.1}s < 60s",
            suite.max_rel_err()
        ),
    );
}

fn loss_oracles(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=12);
        let c = rng.random_range(1..=4);
        let d = rng.random_range(2..=6);
        let f = unit_rows(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let tau = rng.random_range(0.05..1.0);
        let (got, _) = supcon_loss(&f, &labels, tau).expect("supcon evaluates");
        let want = supcon_brute(&f, &labels, tau);
        worst = worst.max((got - want).abs());
    }
    report(
        lines,
        "supcon-oracle",
        true,
        worst < 1e-10,
        format!("20 random configurations, max |diff| {worst:.2e} < 1e-10"),
    );
    let hand = [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)];
    let ok = hand.iter().all(|&(x, y)| smooth_l1(x) == y);
    report(
        lines,
        "smooth-l1",
        true,
        ok,
        format!(
            "smooth_l1(0, 0.5, 2) = ({}, {}, {})",
            smooth_l1(0.0),
            smooth_l1(0.5),
            smooth_l1(2.0)
        ),
    );
}

fn protos(entries: &[(usize, Vec<f64>)]) -> SceneProtos {
    entries.iter().cloned().collect()
}

fn ema_invariants(lines: &mut Vec<Line>) {
    let mut store = PrototypeStore::new(3, 2, 0.7, true).unwrap();
    store
        .update(&protos(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 2.0])]), 0)
        .unwrap();
    let before = store.get(1).unwrap().to_vec();
    store.update(&protos(&[(0, vec![0.0, 1.0])]), 1).unwrap();
    let missing_ok = store.get(1).unwrap() == &before[..] && !store.has(2);
    report(
        lines,
        "ema-missing-class",
        true,
        missing_ok,
        "absent classes keep their prototype, unseen classes stay empty".into(),
    );

    let mut zero = PrototypeStore::new(1, 3, 0.0, true).unwrap();
    zero.update(&protos(&[(0, vec![0.3, -0.1, 0.5])]), 0)
        .unwrap();
    let p = [0.2, 0.4, -0.4];
    zero.update(&protos(&[(0, p.to_vec())]), 1).unwrap();
    let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err0 = zero
        .get(0)
        .unwrap()
        .iter()
        .zip(p)
        .map(|(a, b)| (a - b / n).abs())
        .fold(0.0, f64::max);
    report(
        lines,
        "ema-alpha-zero",
        true,
        err0 < 1e-12,
        format!("alpha = 0 gives the current scene prototype, max err {err0:.1e}"),
    );

    let alpha = 0.6;
    let mut raw = PrototypeStore::new(1, 3, alpha, false).unwrap();
    let ps = [[0.5, -0.2, 0.1], [0.0, 0.7, 0.3], [-0.4, 0.2, 0.9]];
    for (t, p) in ps.iter().enumerate() {
        raw.update(&protos(&[(0, p.to_vec())]), t as u64).unwrap();
    }
    let unrolled: Vec<f64> = (0..3)
        .map(|k| {
            (1.0 - alpha) * ps[2][k] + alpha * (1.0 - alpha) * ps[1][k] + alpha * alpha * ps[0][k]
        })
        .collect();
    let err3 = raw
        .get(0)
        .unwrap()
        .iter()
        .zip(&unrolled)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report(
        lines,
        "ema-unrolled",
        true,
        err3 < 1e-12,
        format!("3-step recurrence vs unrolled sum, max err {err3:.1e}"),
    );
}

fn experiment_config(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = parse_config("", &[]).expect("defaults are valid");
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.name = format!("{}-{seed}", mode.as_str());
    cfg
}

fn timed_train(cfg: &TrainConfig) -> (RunResult, f64) {
    let started = Instant::now();
    let r = train(cfg, |_| {}).expect("training run completes");
    (r, started.elapsed().as_secs_f64())
}

/// Runs the SPG vs CE comparison and returns the SPG runs for later checks.
fn spg_vs_ce(lines: &mut Vec<Line>) -> Vec<RunResult> {
    let minority = experiment_config(Mode::Spg, 0)
        .profile
        .build()
        .minority_class();
    let mut spg_runs = Vec::new();
    let (mut spg_miou, mut spg_min, mut ce_miou, mut ce_min) = (vec![], vec![], vec![], vec![]);
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let (ce, t_ce) = timed_train(&experiment_config(Mode::CeOnly, seed));
        let (spg, t_spg) = timed_train(&experiment_config(Mode::Spg, seed));
        slowest = slowest.max(t_ce).max(t_spg);
        ce_miou.push(ce.last().miou);
        ce_min.push(ce.last().class_iou[minority].unwrap_or(0.0));
        spg_miou.push(spg.last().miou);
        spg_min.push(spg.last().class_iou[minority].unwrap_or(0.0));
        println!(
            "       seed {seed}: ce mIoU {:.4} minority {:.4} | spg mIoU {:.4} minority {:.4}",
            ce_miou.last().unwrap(),
            ce_min.last().unwrap(),
            spg_miou.last().unwrap(),
            spg_min.last().unwrap()
        );
        spg_runs.push(spg);
    }
    let gain = median(spg_miou.clone()) - median(ce_miou.clone());
    let min_gain = median(spg_min.clone()) - median(ce_min.clone());
    report(
        lines,
        "spg-vs-ce",
        false,
        gain > 0.0 && min_gain >= gain,
        format!(
            "median mIoU spg {:.4} vs ce {:.4} (gain {gain:+.4}); median minority IoU spg {:.4} vs ce {:.4} (gain {min_gain:+.4}); {} seeds",
            median(spg_miou),
            median(ce_miou),
            median(spg_min),
            median(ce_min),
            SEEDS.len()
        ),
    );
    report(
        lines,
        "run-time",
        true,
        slowest <= RUN_LIMIT_SECONDS,
        format!("slowest run {slowest:.0}s <= {RUN_LIMIT_SECONDS:.0}s"),
    );
    spg_runs
}

fn ablation_order(lines: &mut Vec<Line>) {
    let mut per_row: Vec<Vec<f64>> = vec![Vec::new(); AblationRow::ALL.len()];
    let mut errors = Vec::new();
    for seed in ABLATION_SEEDS {
        let base = experiment_config(Mode::Spg, seed);
        for o in run_ablation_suite(&base, None, |_| {}) {
            let i = AblationRow::ALL.iter().position(|&r| r == o.row).unwrap();
            match o.result {
                Ok(m) => per_row[i].push(m.miou),
                Err(e) => errors.push(format!("{}: {e}", o.row.label())),
            }
        }
    }
    let medians: Vec<f64> = per_row.into_iter().map(median).collect();
    let full = medians[0];
    let summary = AblationRow::ALL
        .iter()
        .zip(&medians)
        .map(|(r, m)| format!("{} {m:.4}", r.label()))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        lines,
        "ablation-complete",
        true,
        errors.is_empty(),
        format!(
            "{} seeds x {} rows, errors: {errors:?}",
            ABLATION_SEEDS.len(),
            AblationRow::ALL.len()
        ),
    );
    report(
        lines,
        "ablation-order",
        false,
        medians[1..5].iter().all(|&m| full >= m),
        format!("median mIoU: {summary}"),
    );
}

fn center_diagnostic(lines: &mut Vec<Line>, run: &RunResult) {
    let cfg = &run.trainer.config;
    let report_ = feature_center_analysis(
        &run.trainer.model.main,
        &run.train_scenes,
        &run.test_scenes,
        cfg.center_features,
    )
    .expect("center analysis runs");
    let bad = report_.tp_over_fn_violations();
    let rows = report_
        .rows
        .iter()
        .filter_map(|r| Some(format!("{}:{:.3}/{:.3}", r.class, r.cos_tp?, r.cos_fn?)))
        .collect::<Vec<_>>()
        .join(" ");
    report(
        lines,
        "tp-vs-fn-centers",
        true,
        bad.is_empty() && report_.comparable_classes() > 0,
        format!(
            "cos(TP) > cos(FN) in {}/{} classes (class:tp/fn {rows})",
            report_.comparable_classes() - bad.len(),
            report_.comparable_classes()
        ),
    );
}

fn inference_parity(lines: &mut Vec<Line>, run: &RunResult) {
    let model = &run.trainer.model;
    let aux_before = model.aux.reads.get();
    let main_before = model.main.reads.get();
    let m = evaluate(&model.main, &run.test_scenes).expect("evaluation runs");
    let aux_reads = model.aux.reads.get() - aux_before;
    let main_reads = model.main.reads.get() - main_before;
    report(
        lines,
        "inference-parity",
        true,
        aux_reads == 0
            && main_reads == run.test_scenes.len() as u64
            && m.class_iou == run.last().class_iou,
        format!(
            "auxiliary reads {aux_reads}, main reads {main_reads} over {} test scenes",
            run.test_scenes.len()
        ),
    );
}

fn determinism(lines: &mut Vec<Line>) {
    let cfg = parse_config(
        "",
        &[
            "epochs=2".into(),
            "scenes_per_epoch=6".into(),
            "points_per_scene=128".into(),
            "test_scenes=4".into(),
            "seed=9".into(),
        ],
    )
    .unwrap();
    let a = train(&cfg, |_| {}).unwrap();
    let b = train(&cfg, |_| {}).unwrap();
    let c = cfg.architecture().num_classes;
    let csv_same = metrics_csv(c, &a.history) == metrics_csv(c, &b.history);
    report(
        lines,
        "determinism",
        true,
        csv_same,
        "same config and seed give identical metrics CSV".into(),
    );

    let dir = tempfile::tempdir().unwrap();
    let ckpt = a.trainer.checkpoint();
    let path = dir.path().join("c.bin");
    checkpoint::save(&ckpt, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let ckpt_ok = back == ckpt && checkpoint::encode(&back) == checkpoint::encode(&ckpt);

    let scene = generate_scene(&cfg.profile.build(), 300, 1234).unwrap();
    let spath = dir.path().join("s.txt");
    write_scene(&scene, &spath).unwrap();
    let read = read_scene(&spath).unwrap();
    let bits = |s: &spg::scenes::Scene| -> Vec<u64> {
        s.points
            .iter()
            .flat_map(|p| p.xyz.iter().chain(&p.rgb).map(|v| v.to_bits()))
            .collect()
    };
    let scene_ok = bits(&read) == bits(&scene)
        && read.labels() == scene.labels()
        && format_scene(&parse_scene(&format_scene(&read)).unwrap()) == format_scene(&scene);
    report(
        lines,
        "round-trips",
        true,
        ckpt_ok && scene_ok,
        format!("checkpoint bit-exact: {ckpt_ok}, scene file bit-exact: {scene_ok}"),
    );
}

fn main() {
    let mut lines = Vec::new();
    gradient_correctness(&mut lines);
    loss_oracles(&mut lines);
    ema_invariants(&mut lines);
    determinism(&mut lines);
    let spg_runs = spg_vs_ce(&mut lines);
    center_diagnostic(&mut lines, &spg_runs[0]);
    inference_parity(&mut lines, &spg_runs[0]);
    ablation_order(&mut lines);

    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| l.hard && !l.pass)
        .map(|l| l.id)
        .collect();
    let reported: Vec<String> = lines
        .iter()
        .filter(|l| !l.hard && !l.pass)
        .map(|l| format!("{}: {}", l.id, l.detail))
        .collect();
    if !reported.is_empty() {
        println!("reported, not enforced: {reported:?}");
    }
    if !failed.is_empty() {
        eprintln!("failed checks: {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all enforced checks passed");
}
