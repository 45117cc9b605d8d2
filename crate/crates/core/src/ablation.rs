//! The ablation table: full SPG, four single-component removals, and a
//! plain cross-entropy reference row, all sharing one seed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, TrainConfig};
use crate::metrics::EpochMetrics;
use crate::trainer::{self, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    Full,
    NoSeparate,
    NoCon,
    NoL1,
    NoL1Main,
    CeOnly,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::Full,
        AblationRow::NoSeparate,
        AblationRow::NoCon,
        AblationRow::NoL1,
        AblationRow::NoL1Main,
        AblationRow::CeOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoSeparate => "no-separate",
            AblationRow::NoCon => "no-l_con",
            AblationRow::NoL1 => "no-l_l1",
            AblationRow::NoL1Main => "no-l_l1_main",
            AblationRow::CeOnly => "ce-only",
        }
    }

    /// `base` with this row's component switched off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.name = format!("{}-{}", base.name, self.label());
        cfg.mode = Mode::Spg;
        match self {
            AblationRow::Full => {}
            AblationRow::NoSeparate => cfg.separate_subspaces = false,
            AblationRow::NoCon => cfg.enable_con = false,
            AblationRow::NoL1 => cfg.enable_l1 = false,
            AblationRow::NoL1Main => cfg.enable_l1_main = false,
            AblationRow::CeOnly => cfg.mode = Mode::CeOnly,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub result: Result<EpochMetrics, String>,
}

/// Runs every row in order. A failing row is recorded and the remaining
/// rows still run. With `runs_root`, each row also writes its run directory.
pub fn run_ablation_suite(
    base: &TrainConfig,
    runs_root: Option<&Path>,
    mut on_row: impl FnMut(&AblationOutcome),
) -> Vec<AblationOutcome> {
    AblationRow::ALL
        .iter()
        .map(|&row| {
            let cfg = row.apply(base);
            let result: Result<EpochMetrics, RunError> = match runs_root {
                Some(root) => {
                    trainer::run_experiment(&cfg, root, |_| {}).map(|(_, r)| r.last().clone())
                }
                None => trainer::train(&cfg, |_| {}).map(|r| r.last().clone()),
            };
            let outcome = AblationOutcome {
                row,
                result: result.map_err(|e| e.to_string()),
            };
            on_row(&outcome);
            outcome
        })
        .collect()
}

pub fn ablation_csv(outcomes: &[AblationOutcome], minority_class: usize) -> String {
    let mut s = String::from("row,status,OA,mAcc,mIoU,minority_iou,error\n");
    for o in outcomes {
        match &o.result {
            Ok(m) => {
                let minority = m.class_iou.get(minority_class).copied().flatten();
                let _ = writeln!(
                    s,
                    "{},ok,{},{},{},{},",
                    o.row.label(),
                    m.oa,
                    m.macc,
                    m.miou,
                    minority.map_or_else(|| "nan".to_string(), |v| v.to_string())
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{},error,,,,,\"{}\"", o.row.label(), e.replace('"', "'"));
            }
        }
    }
    s
}
