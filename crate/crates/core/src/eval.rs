//! Seeded success-rate experiments and their reports.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{ExtractorKind, PerceptionConfig};
use crate::policy::Policy;
use crate::runtime::{self, RuntimeConfig, TrialSpec};
use crate::sim::SimConfig;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Prompted object-centric tracker.
    Ours,
    /// Whole-scene features, no target information.
    Global,
    /// Whole-scene features plus a per-frame target box.
    Conditioned,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ours, Method::Conditioned, Method::Global];

    pub fn kind(self) -> ExtractorKind {
        match self {
            Method::Ours => ExtractorKind::ObjectCentric,
            Method::Global => ExtractorKind::GlobalScene,
            Method::Conditioned => ExtractorKind::GlobalSceneWithBox,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Global => "global",
            Method::Conditioned => "conditioned",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "global" => Ok(Method::Global),
            "conditioned" => Ok(Method::Conditioned),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected ours, global or conditioned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub n_trials: usize,
    /// First evaluation scene seed; must not overlap the training seeds.
    pub base_seed: u64,
    pub occlusion_levels: Vec<f64>,
    pub n_demos: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            n_trials: 200,
            base_seed: 1_000_000,
            occlusion_levels: vec![0.0, 0.2, 0.4, 0.6],
            n_demos: 500,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("eval: n_trials must be at least 1".into()));
        }
        if self.occlusion_levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("eval: occlusion levels must lie in [0, 1]".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("eval: no methods".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub p: f64,
    pub n_trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ResultRow {
    pub fn new(method: Method, p: f64, n_trials: usize, successes: usize) -> Self {
        let (ci_low, ci_high) = wilson(successes, n_trials);
        Self {
            method,
            p,
            n_trials,
            successes,
            rate: successes as f64 / n_trials as f64,
            ci_low,
            ci_high,
        }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scene_seed: u64,
    pub target_id: u32,
    pub success: bool,
    pub ticks: u64,
    pub hit_rate: f64,
}

/// Wilson score interval at 95% confidence.
pub fn wilson(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let phat = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (phat + z2 / (2.0 * n)) / denom;
    let half = Z95 * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // At the boundaries the interval touches 0 or 1 exactly.
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Fixed parts of every trial.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub sim: SimConfig,
    pub perception: PerceptionConfig,
    pub runtime: RuntimeConfig,
    pub prompt_jitter: f64,
}

fn ranges_overlap(a: [u64; 2], b: [u64; 2]) -> bool {
    a[0] < b[1] && b[0] < a[1]
}

/// Runs `n_trials` episodes on scene seeds `base_seed..base_seed + n_trials`.
pub fn run_eval(
    ctx: &EvalContext,
    method: Method,
    policy: &Policy,
    n_trials: usize,
    base_seed: u64,
    p: f64,
) -> Result<(ResultRow, Vec<TrialRecord>)> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("occlusion level {p} outside [0, 1]")));
    }
    let eval_range = [base_seed, base_seed + n_trials as u64];
    let train_range = policy.meta.train_seed_range;
    if ranges_overlap(eval_range, train_range) {
        return Err(Error::InvalidArgument(format!(
            "evaluation seeds {eval_range:?} overlap training seeds {train_range:?}"
        )));
    }
    let kind = method.kind();
    let trials: Vec<Result<TrialRecord>> = (0..n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            let spec = TrialSpec::from_seed(&ctx.sim, ctx.prompt_jitter, seed, p)?;
            let out = runtime::run_episode(policy, kind, &spec, &ctx.sim, &ctx.perception, &ctx.runtime)?;
            Ok(TrialRecord {
                scene_seed: seed,
                target_id: spec.target_id,
                success: out.success,
                ticks: out.ticks,
                hit_rate: out.hit_rate,
            })
        })
        .collect();
    let trials = trials.into_iter().collect::<Result<Vec<_>>>()?;
    let successes = trials.iter().filter(|t| t.success).count();
    Ok((ResultRow::new(method, p, n_trials, successes), trials))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_fingerprint: String,
    pub rows: Vec<ResultRow>,
    /// Per-trial outcomes, parallel to `rows`.
    pub trials: Vec<Vec<TrialRecord>>,
}

impl Report {
    pub fn row(&self, method: Method, p: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.p == p)
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One row per method at `p = 0` on a shared seed range.
pub fn compare_methods(
    ctx: &EvalContext,
    policies: &[(Method, &Policy)],
    n_trials: usize,
    base_seed: u64,
    config_fingerprint: &str,
) -> Result<Report> {
    occlusion_sweep(ctx, policies, n_trials, base_seed, &[0.0], config_fingerprint)
}

/// Method × occlusion-level grid. Every cell reuses the same scene seeds, so
/// cells differ only in method and occlusion level.
pub fn occlusion_sweep(
    ctx: &EvalContext,
    policies: &[(Method, &Policy)],
    n_trials: usize,
    base_seed: u64,
    levels: &[f64],
    config_fingerprint: &str,
) -> Result<Report> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("no methods to evaluate".into()));
    }
    let fp = &policies[0].1.meta.dataset_fingerprint;
    if policies.iter().any(|(_, p)| &p.meta.dataset_fingerprint != fp) {
        return Err(Error::Incompatible("checkpoints were trained on different datasets".into()));
    }
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for &(method, policy) in policies {
        for &p in levels {
            let (row, t) = run_eval(ctx, method, policy, n_trials, base_seed, p)?;
            log::info!(
                "{method} p={p}: {}/{} ({:.3})",
                row.successes,
                row.n_trials,
                row.rate
            );
            rows.push(row);
            trials.push(t);
        }
    }
    Ok(Report {
        config_fingerprint: config_fingerprint.to_string(),
        rows,
        trials,
    })
}
