//! Four-arm comparison: plain training, cross-training per modality,
//! cross-training with a fixed-weight ensemble, and the full method.

use std::collections::BTreeMap;
use std::fs;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{run_pipeline, RunReport};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Plain,
    CrossTraining,
    Ensemble,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Plain, Arm::CrossTraining, Arm::Ensemble, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Plain => "plain",
            Arm::CrossTraining => "cross-training",
            Arm::Ensemble => "cross-training+ensemble",
            Arm::Full => "cross-training+selection+cm-moe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub split: String,
    pub arm: Arm,
    /// Top-1 per modality, or under `joint+bone+motion` for fused arms.
    pub accuracy: BTreeMap<String, f64>,
    /// Best entry of `accuracy`.
    pub headline: f64,
    pub noise_manifest_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub noise_ratio: f64,
    pub rows: Vec<AblationRow>,
    #[serde(skip)]
    pub runs: Vec<RunReport>,
}

impl AblationReport {
    pub fn row(&self, split: &str, arm: Arm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.split == split && r.arm == arm)
    }

    /// Plain-text table, one line per row.
    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:<34} {:>8}  per-modality\n", "split", "arm", "top1");
        for r in &self.rows {
            let detail: Vec<String> = r.accuracy.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
            out += &format!("{:<28} {:<34} {:>8.3}  {}\n", r.split, r.arm.name(), r.headline, detail.join(" "));
        }
        out
    }
}

fn headline(acc: &BTreeMap<String, f64>) -> f64 {
    acc.values().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Rows of one finished run. All arms come from the same injected dataset.
pub fn rows_from_report(report: &RunReport) -> Result<Vec<AblationRow>> {
    if report.baseline.is_empty() {
        return Err(Error::InvalidConfig("ablation needs the plain baseline arm".into()));
    }
    let hash = report.noise.manifest_sha256.clone();
    let fused_key = "joint+bone+motion".to_string();
    let per_modality = |pairs: Vec<(String, f64)>| pairs.into_iter().collect::<BTreeMap<_, _>>();
    let arms = [
        (
            Arm::Plain,
            per_modality(report.baseline.iter().map(|b| (b.modality.to_string(), b.test.top1)).collect()),
        ),
        (
            Arm::CrossTraining,
            per_modality(report.experts.iter().map(|e| (e.modality.to_string(), e.test.top1)).collect()),
        ),
        (Arm::Ensemble, per_modality(vec![(fused_key.clone(), report.ensemble.test.top1)])),
        (Arm::Full, per_modality(vec![(fused_key, report.fusion.test.top1)])),
    ];
    Ok(arms
        .into_iter()
        .map(|(arm, accuracy)| AblationRow {
            split: report.split.clone(),
            arm,
            headline: headline(&accuracy),
            accuracy,
            noise_manifest_sha256: hash.clone(),
        })
        .collect())
}

/// Run every configured split with the baseline enabled and tabulate the
/// arms. Each split writes into its own subdirectory of the output dir.
pub fn run_ablation_suite(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for split in config.ablation_split_list() {
        let run_config = ExperimentConfig {
            output_dir: config.output_dir.join(split.name()),
            split,
            baseline: true,
            ..config.clone()
        };
        let report = run_pipeline(&run_config)?;
        rows.extend(rows_from_report(&report)?);
        runs.push(report);
    }
    let report = AblationReport {
        noise_ratio: config.noise_ratio,
        rows,
        runs,
    };
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let json = config.output_dir.join("ablation.json");
    fs::write(&json, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    let txt = config.output_dir.join("ablation.txt");
    fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}
