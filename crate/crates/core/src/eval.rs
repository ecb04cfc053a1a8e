//! Leave-one-out HR@k / NDCG@k, the end-to-end evaluation loop, and the
//! sweep over the number of retrieved triples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::baserec::{candidate_set_inference, INFERENCE_CANDIDATES};
use crate::error::{Error, Result};
use crate::llm::{parse_ranking, Completer, RankedList};
use crate::promptgen::{Artifacts, PromptOptions};

/// 1 if `target` is among the first `k` items, else 0.
pub fn hr_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within the top `k`, else 0. With
/// a single relevant item the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&i| i == target)
        .map_or(0.0, |pos| 1.0 / ((pos + 2) as f64).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompt: PromptOptions,
    pub k_values: Vec<usize>,
    /// Evaluate only the first `limit` test users (by user id).
    pub limit: Option<usize>,
    /// Fill short responses from the Hint 1 ranking.
    pub pad_with_hint: bool,
    pub force_include_test: bool,
    pub candidate_size: usize,
    /// Largest tolerated fraction of failed requests.
    pub failure_ceiling: f64,
    pub seed: u64,
    pub max_in_flight: usize,
}

impl EvalConfig {
    pub fn new(prompt: PromptOptions) -> Self {
        Self {
            prompt,
            k_values: vec![3, 5],
            limit: None,
            pad_with_hint: true,
            force_include_test: true,
            candidate_size: INFERENCE_CANDIDATES,
            failure_ceiling: 0.1,
            seed: 0,
            max_in_flight: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Config("k values must be non-empty and at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
    pub n_padded: usize,
    pub n_failed: usize,
    pub variant: String,
    pub q: usize,
    pub config_fingerprint: String,
}

impl MetricReport {
    /// Single-level object with `hr@k` / `ndcg@k` keys.
    pub fn to_flat_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("variant".into(), json!(self.variant));
        m.insert("q".into(), json!(self.q));
        for (k, v) in &self.hr {
            m.insert(format!("hr@{k}"), json!(v));
        }
        for (k, v) in &self.ndcg {
            m.insert(format!("ndcg@{k}"), json!(v));
        }
        m.insert("n_users".into(), json!(self.n_users));
        m.insert("n_padded".into(), json!(self.n_padded));
        m.insert("n_failed".into(), json!(self.n_failed));
        m.insert("config_fingerprint".into(), json!(self.config_fingerprint));
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrace {
    pub user_id: usize,
    pub test_item: usize,
    pub candidates: Vec<usize>,
    pub hint_ranking: Vec<usize>,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub parsed: Option<RankedList>,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricReport,
    pub traces: Vec<UserTrace>,
}

pub fn fingerprint(config: &EvalConfig, completer: &dyn Completer) -> String {
    let payload = json!({ "config": config, "completer": completer.describe() });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    hex::encode(&digest[..8])
}

fn evaluate_user(
    artifacts: &Artifacts<'_>,
    config: &EvalConfig,
    completer: &dyn Completer,
    user: usize,
    test_item: usize,
) -> Result<UserTrace> {
    let mut candidates = candidate_set_inference(
        artifacts.cf,
        user,
        artifacts.split,
        config.candidate_size,
        config.force_include_test,
    )?
    .items;
    // Present candidates in a per-user shuffled order so the listing does
    // not reveal the base ranking.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (user as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    candidates.shuffle(&mut rng);

    let instance = artifacts.build_instance(user, &candidates, &config.prompt)?;
    let titled: Vec<(usize, String)> = instance
        .candidate_items
        .iter()
        .copied()
        .zip(instance.parts.candidate_titles.iter().cloned())
        .collect();
    let hint_titled: Vec<(usize, String)> = instance
        .hint_ranking_items
        .iter()
        .copied()
        .zip(instance.parts.hint_ranking_titles.iter().cloned())
        .collect();

    let mut trace = UserTrace {
        user_id: user,
        test_item,
        candidates: instance.candidate_items.clone(),
        hint_ranking: instance.hint_ranking_items.clone(),
        prompt: instance.rendered.clone(),
        response: None,
        error: None,
        parsed: None,
        hr: BTreeMap::new(),
        ndcg: BTreeMap::new(),
    };
    match completer.complete(&instance.rendered) {
        Ok(response) => {
            let mut ranked = parse_ranking(&response, &titled, user);
            if config.pad_with_hint {
                let k_max = config.k_values.iter().copied().max().unwrap_or(0);
                ranked.pad_from(&hint_titled, k_max);
            }
            for &k in &config.k_values {
                trace.hr.insert(k, hr_at_k(&ranked.resolved_items, test_item, k));
                trace.ndcg.insert(k, ndcg_at_k(&ranked.resolved_items, test_item, k));
            }
            trace.response = Some(response);
            trace.parsed = Some(ranked);
        }
        Err(e) => {
            warn!(user, error = %e, "completion failed");
            trace.error = Some(e.to_string());
        }
    }
    Ok(trace)
}

/// Runs the full pipeline for every test user and averages the metrics over
/// users whose request succeeded.
pub fn evaluate_run(artifacts: &Artifacts<'_>, config: &EvalConfig, completer: &dyn Completer) -> Result<RunOutput> {
    config.validate()?;
    let users: Vec<(usize, usize)> = artifacts
        .split
        .test
        .iter()
        .map(|(&u, x)| (u, x.item))
        .take(config.limit.unwrap_or(usize::MAX))
        .collect();
    if users.is_empty() {
        return Err(Error::Empty("test users"));
    }
    let allowed_failures = (config.failure_ceiling * users.len() as f64).floor() as usize;
    let failures = AtomicUsize::new(0);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Option<Result<UserTrace>>> = pool.install(|| {
        users
            .par_iter()
            .map(|&(user, item)| {
                if failures.load(Ordering::Relaxed) > allowed_failures {
                    return None;
                }
                let trace = evaluate_user(artifacts, config, completer, user, item);
                if matches!(&trace, Ok(t) if t.error.is_some()) {
                    failures.fetch_add(1, Ordering::Relaxed);
                }
                Some(trace)
            })
            .collect()
    });

    let mut traces = Vec::with_capacity(users.len());
    for r in results.into_iter().flatten() {
        traces.push(r?);
    }
    let report = aggregate(&traces, config, completer);
    let failed = report.n_failed;
    if failed > allowed_failures {
        let rate = failed as f64 / users.len() as f64;
        return Err(Error::FailureCeiling {
            rate,
            ceiling: config.failure_ceiling,
            failed,
            partial: Box::new(report),
        });
    }
    info!(
        users = report.n_users,
        padded = report.n_padded,
        failed = report.n_failed,
        fingerprint = %report.config_fingerprint,
        "evaluation finished"
    );
    Ok(RunOutput { report, traces })
}

fn aggregate(traces: &[UserTrace], config: &EvalConfig, completer: &dyn Completer) -> MetricReport {
    let ok: Vec<&UserTrace> = traces.iter().filter(|t| t.parsed.is_some()).collect();
    let n = ok.len();
    let mean = |pick: &dyn Fn(&UserTrace) -> f64| {
        if n == 0 {
            0.0
        } else {
            ok.iter().map(|t| pick(t)).sum::<f64>() / n as f64
        }
    };
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in &config.k_values {
        hr.insert(k, mean(&|t| t.hr[&k]));
        ndcg.insert(k, mean(&|t| t.ndcg[&k]));
    }
    MetricReport {
        hr,
        ndcg,
        n_users: n,
        n_padded: ok
            .iter()
            .filter(|t| t.parsed.as_ref().is_some_and(|p| p.padded > 0))
            .count(),
        n_failed: traces.len() - n,
        variant: config.prompt.variant.to_string(),
        q: config.prompt.q,
        config_fingerprint: fingerprint(config, completer),
    }
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(&report.to_flat_json())? + "\n").map_err(|e| Error::io(path, e))
}

/// One `user_<id>.json` file per trace.
pub fn write_traces(traces: &[UserTrace], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in traces {
        let p = dir.join(format!("user_{}.json", t.user_id));
        fs::write(&p, serde_json::to_string_pretty(t)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Writes `report.json` and the per-user traces under `traces/`.
pub fn write_run(output: &RunOutput, dir: &Path) -> Result<()> {
    write_report(&output.report, &dir.join("report.json"))?;
    write_traces(&output.traces, &dir.join("traces"))
}

/// One evaluation per Q with everything else held fixed.
pub fn sweep_q(
    artifacts: &Artifacts<'_>,
    config: &EvalConfig,
    q_values: &[usize],
    completer: &dyn Completer,
) -> Result<Vec<RunOutput>> {
    q_values
        .iter()
        .map(|&q| {
            let mut c = config.clone();
            c.prompt.q = q;
            evaluate_run(artifacts, &c, completer)
        })
        .collect()
}

/// Side-by-side text table of sweep results.
pub fn format_sweep_table(reports: &[MetricReport]) -> String {
    let mut out = String::from("metric");
    for r in reports {
        out.push_str(&format!("\tQ={}", r.q));
    }
    out.push('\n');
    let ks: Vec<usize> = reports.first().map(|r| r.hr.keys().copied().collect()).unwrap_or_default();
    for k in ks {
        for (name, pick) in [("HR", 0), ("NDCG", 1)] {
            out.push_str(&format!("{name}@{k}"));
            for r in reports {
                let v = if pick == 0 { r.hr[&k] } else { r.ndcg[&k] };
                out.push_str(&format!("\t{v:.4}"));
            }
            out.push('\n');
        }
    }
    out
}
