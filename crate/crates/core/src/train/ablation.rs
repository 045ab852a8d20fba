use std::path::Path;

use super::checkpoint::atomic_write;
use super::run::{train, SplitData};
use crate::config::{FusionMode, RunConfig};
use crate::error::Result;

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "mode,acc,f1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub mode: FusionMode,
    pub accuracy: f64,
    pub f1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.mode.as_str(), r.accuracy, r.f1));
    }
    s
}

/// Trains an early- and a late-fusion model from the same seed and splits
/// and reports their test metrics. The late run uses `lambda = 0`.
pub fn ablate_fusion(config: &RunConfig, data: &SplitData, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mode in [FusionMode::Early, FusionMode::Late] {
        let cfg = RunConfig {
            fusion: mode,
            lambda: if mode == FusionMode::Late { 0.0 } else { config.lambda },
            ..config.clone()
        };
        let dir = out.map(|d| d.join(mode.as_str()));
        let outcome = train(&cfg, data, dir.as_deref())?;
        let test = outcome.test();
        rows.push(AblationRow {
            mode,
            accuracy: test.accuracy,
            f1: test.macro_f1,
        });
    }
    if let Some(d) = out {
        atomic_write(&d.join(ABLATION_FILE), ablation_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}
