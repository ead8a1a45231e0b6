//! Ablation suite: trains one model per (arm, seed), evaluates prior and
//! final trajectories from the same checkpoint, and writes one CSV with
//! seed-wise rows plus a median-aggregated summary per arm. A failed member
//! run is annotated in the report instead of aborting the suite.

use std::io;
use std::path::{Path, PathBuf};

use crate::config::{Config, ConfigError};
use crate::eval::{evaluate, metric_values, Metrics, METRIC_COLUMNS};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::report::write_csv;
use crate::sim::dataset::Dataset;
use crate::train::{load_checkpoint, save_checkpoint, train, Checkpoint};
use crate::world::WorldVariant;

/// A suite file is a regular config plus three suite-level keys:
/// `arms` (comma-separated arm names), `seeds` (comma-separated integers),
/// and optionally `eval_data` (path to the held-out evaluation dataset).
#[derive(Clone, Debug)]
pub struct Suite {
    pub base: Config,
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    pub eval_data: Option<PathBuf>,
}

pub fn parse_suite(text: &str) -> Result<Suite, ConfigError> {
    let mut arms = Vec::new();
    let mut seeds = Vec::new();
    let mut eval_data = None;
    let mut base_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let key_value = line.split_once('=').map(|(k, v)| (k.trim(), v.trim()));
        match key_value {
            Some(("arms", v)) => {
                arms = v.split(',').map(|s| s.trim().to_string()).collect();
                base_lines.push("");
            }
            Some(("seeds", v)) => {
                for s in v.split(',') {
                    let s = s.trim();
                    seeds.push(s.parse().map_err(|e| ConfigError::BadValue {
                        line: i + 1,
                        key: "seeds".into(),
                        value: s.into(),
                        reason: format!("{e}"),
                    })?);
                }
                base_lines.push("");
            }
            Some(("eval_data", v)) => {
                eval_data = Some(PathBuf::from(v));
                base_lines.push("");
            }
            // keep non-suite lines verbatim so config errors report the
            // original line numbers
            _ => base_lines.push(raw),
        }
    }
    let base = Config::parse(&base_lines.join("\n"))?;
    Ok(Suite { base, arms, seeds, eval_data })
}

/// Resolves an arm name into a full config. An arm is `+`-joined tags:
/// `baseline` (no world model, no refinement), `world` (temporal-residual
/// world model), `normal` (full-query world model), `fgtr` (deformable
/// refinement), `sup` (future-feature supervision, needs a world model),
/// `noego` (drop ego status from the planner queries).
pub fn arm_config(base: &Config, arm: &str, seed: u64) -> Result<Config, String> {
    let mut cfg = base.clone();
    cfg.use_world = false;
    cfg.use_fgtr = false;
    cfg.future_supervision = false;
    cfg.world_variant = WorldVariant::Residual;
    cfg.seed = seed;
    for tag in arm.split('+') {
        match tag {
            "baseline" => {}
            "world" => cfg.use_world = true,
            "normal" => {
                cfg.use_world = true;
                cfg.world_variant = WorldVariant::Normal;
            }
            "fgtr" => cfg.use_fgtr = true,
            "sup" => cfg.future_supervision = true,
            "noego" => cfg.use_ego_status = false,
            other => return Err(format!("unknown tag `{other}` in arm `{arm}`")),
        }
    }
    if cfg.future_supervision && !cfg.use_world {
        return Err(format!("arm `{arm}`: `sup` requires a world model tag"));
    }
    Ok(cfg)
}

// ----------------------------------------------------------------- caching

fn fnv1a_bytes(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x100000001B3);
    }
}

/// Cheap content fingerprint: sample count plus every ground-truth
/// trajectory and ego status, which depend on the full generation history.
pub fn dataset_fingerprint(ds: &Dataset) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    fnv1a_bytes(&mut h, &(ds.samples.len() as u64).to_le_bytes());
    for s in &ds.samples {
        for wp in &s.gt_trajectory {
            fnv1a_bytes(&mut h, &wp[0].to_le_bytes());
            fnv1a_bytes(&mut h, &wp[1].to_le_bytes());
        }
        for v in s.ego_status.to_vec() {
            fnv1a_bytes(&mut h, &v.to_le_bytes());
        }
    }
    h
}

/// Trains a configuration, or reuses a cached checkpoint keyed by config
/// text and dataset fingerprint.
pub fn train_cached(
    cfg: &Config,
    train_data: &Dataset,
    cache_dir: Option<&Path>,
) -> Result<ParamStore<f32>, String> {
    let cache_path = cache_dir.map(|dir| {
        let mut h = 0xcbf29ce484222325u64;
        fnv1a_bytes(&mut h, cfg.to_text().as_bytes());
        fnv1a_bytes(&mut h, &dataset_fingerprint(train_data).to_le_bytes());
        dir.join(format!("{h:016x}.ckpt"))
    });
    if let Some(path) = &cache_path {
        if path.exists() {
            match load_checkpoint(path) {
                Ok(ckpt) if ckpt.config == *cfg => return Ok(ckpt.params),
                _ => {} // stale or unreadable: retrain below
            }
        }
    }
    let out = train(cfg, train_data).map_err(|e| format!("{e}"))?;
    if let Some(path) = &cache_path {
        let ckpt = Checkpoint { config: cfg.clone(), params: out.params.clone(), opt: None };
        save_checkpoint(&ckpt, path).map_err(|e| format!("{e}"))?;
    }
    Ok(out.params)
}

// --------------------------------------------------------------- suite run

#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    /// prior and final trajectory metrics from the same checkpoint
    pub metrics: Option<(Metrics, Metrics)>,
    pub error: Option<String>,
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Field-wise median over a set of metric structs.
pub fn median_metrics<'a>(ms: impl Iterator<Item = &'a Metrics>) -> Option<Metrics> {
    let all: Vec<[f64; 12]> = ms.map(metric_values).collect();
    if all.is_empty() {
        return None;
    }
    let mut out = [0.0; 12];
    for (i, slot) in out.iter_mut().enumerate() {
        let column: Vec<f64> = all.iter().map(|v| v[i]).collect();
        *slot = median(&column);
    }
    Some(crate::eval::metrics_from_values(out))
}

/// Runs every (arm, seed) pair: train (or load from cache), evaluate prior
/// and final trajectories on the eval set, save the checkpoint under
/// `out_dir`, and write `report.csv` there. Member failures are recorded in
/// the report, not propagated.
pub fn run_ablation(
    suite: &Suite,
    train_data: &Dataset,
    eval_data: &Dataset,
    out_dir: &Path,
    cache_dir: Option<&Path>,
) -> io::Result<Vec<ArmRun>> {
    std::fs::create_dir_all(out_dir)?;
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut runs = Vec::new();
    for arm in &suite.arms {
        for &seed in &suite.seeds {
            let run = run_member(suite, arm, seed, train_data, eval_data, out_dir, cache_dir);
            runs.push(run);
        }
    }
    write_report(&out_dir.join("report.csv"), &runs)?;
    Ok(runs)
}

fn run_member(
    suite: &Suite,
    arm: &str,
    seed: u64,
    train_data: &Dataset,
    eval_data: &Dataset,
    out_dir: &Path,
    cache_dir: Option<&Path>,
) -> ArmRun {
    let fail = |e: String| ArmRun { arm: arm.to_string(), seed, metrics: None, error: Some(e) };
    let cfg = match arm_config(&suite.base, arm, seed) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let params = match train_cached(&cfg, train_data, cache_dir) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let ckpt = Checkpoint { config: cfg.clone(), params, opt: None };
    let name = format!("{}_seed{}.ckpt", arm.replace('+', "-"), seed);
    if let Err(e) = save_checkpoint(&ckpt, &out_dir.join(name)) {
        return fail(format!("{e}"));
    }
    let model = Model::new(cfg.model());
    let (prior, fin) = evaluate(&model, &ckpt.params, &eval_data.samples);
    ArmRun { arm: arm.to_string(), seed, metrics: Some((prior, fin)), error: None }
}

fn metric_strings(m: &Metrics) -> Vec<String> {
    metric_values(m).iter().map(|v| format!("{v:.6}")).collect()
}

/// One CSV: a row per (arm, seed, trajectory) plus `seed = median` summary
/// rows aggregated over the successful seeds of each arm.
pub fn write_report(path: &Path, runs: &[ArmRun]) -> io::Result<()> {
    let mut header = vec!["arm", "seed", "trajectory"];
    header.extend(METRIC_COLUMNS);
    header.push("status");

    let mut rows = Vec::new();
    let row = |arm: &str, seed: &str, traj: &str, m: Option<&Metrics>, status: &str| {
        let mut r = vec![arm.to_string(), seed.to_string(), traj.to_string()];
        match m {
            Some(m) => r.extend(metric_strings(m)),
            None => r.extend(std::iter::repeat(String::new()).take(METRIC_COLUMNS.len())),
        }
        // commas would break the single-line CSV contract
        r.push(status.replace(',', ";"));
        r
    };
    for run in runs {
        let seed = run.seed.to_string();
        match (&run.metrics, &run.error) {
            (Some((prior, fin)), _) => {
                rows.push(row(&run.arm, &seed, "prior", Some(prior), "ok"));
                rows.push(row(&run.arm, &seed, "final", Some(fin), "ok"));
            }
            (None, err) => {
                let msg = format!("failed: {}", err.as_deref().unwrap_or("unknown"));
                rows.push(row(&run.arm, &seed, "prior", None, &msg));
                rows.push(row(&run.arm, &seed, "final", None, &msg));
            }
        }
    }
    // summary rows in first-seen arm order
    let mut arms_seen: Vec<&str> = Vec::new();
    for run in runs {
        if !arms_seen.contains(&run.arm.as_str()) {
            arms_seen.push(&run.arm);
        }
    }
    for arm in arms_seen {
        let ok: Vec<&(Metrics, Metrics)> = runs
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| r.metrics.as_ref())
            .collect();
        let failed = runs.iter().filter(|r| r.arm == arm && r.metrics.is_none()).count();
        let status = if failed == 0 {
            "ok".to_string()
        } else {
            format!("{failed} seed(s) failed")
        };
        let prior = median_metrics(ok.iter().map(|m| &m.0));
        let fin = median_metrics(ok.iter().map(|m| &m.1));
        rows.push(row(arm, "median", "prior", prior.as_ref(), &status));
        rows.push(row(arm, "median", "final", fin.as_ref(), &status));
    }
    write_csv(path, &header, &rows)
}
