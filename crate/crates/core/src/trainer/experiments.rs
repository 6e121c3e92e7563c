use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{adapt, burn_in, MetricLog, TrainConfig};
use crate::detector::DetectorParams;
use crate::error::{CmtError, Result};
use crate::synth_data::Dataset;

/// Final numbers of one completed run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub source_only_map: f64,
    pub final_map: f64,
    pub log: Arc<MetricLog>,
    /// Wall time of the burn-in this run started from, measured when it was
    /// first trained.
    pub burn_in_secs: f64,
    pub adapt_secs: f64,
}

type Slot<T> = Arc<Mutex<Option<T>>>;

/// Memoizes burn-in students and finished runs by the config fields they
/// depend on, so experiment grids that share cells train them once.
#[derive(Default)]
pub struct BurnInCache {
    students: Mutex<HashMap<String, Slot<(DetectorParams, f64)>>>,
    runs: Mutex<HashMap<String, Slot<RunSummary>>>,
}

fn slot<T>(map: &Mutex<HashMap<String, Slot<T>>>, key: String) -> Slot<T> {
    map.lock()
        .expect("cache lock")
        .entry(key)
        .or_default()
        .clone()
}

#[derive(Serialize)]
struct BurnInKey<'a> {
    seed: u64,
    lr: f64,
    lambda_sup_det: f64,
    burn_in_iters: usize,
    batch_size: usize,
    detector: &'a crate::detector::DetectorConfig,
    weak_aug: &'a crate::synth_data::WeakAugConfig,
    strong_aug: &'a crate::synth_data::StrongAugConfig,
}

impl BurnInCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Burned-in student for `cfg` on `data` and the seconds its burn-in
    /// took. The cache assumes one dataset per cache instance.
    pub fn student(&self, cfg: &TrainConfig, data: &Dataset) -> Result<(DetectorParams, f64)> {
        let key = serde_json::to_string(&BurnInKey {
            seed: cfg.seed,
            lr: cfg.lr,
            lambda_sup_det: cfg.lambda_sup_det,
            burn_in_iters: cfg.burn_in_iters,
            batch_size: cfg.batch_size,
            detector: &cfg.detector,
            weak_aug: &cfg.weak_aug,
            strong_aug: &cfg.strong_aug,
        })
        .expect("key serializes");
        let slot = slot(&self.students, key);
        let mut guard = slot.lock().expect("slot lock");
        if guard.is_none() {
            let start = Instant::now();
            let params = burn_in(cfg, &data.source_train)?.0;
            *guard = Some((params, start.elapsed().as_secs_f64()));
        }
        Ok(guard.clone().expect("filled above"))
    }

    /// Runs `cfg` unless an identical config already ran.
    pub fn run(&self, label: &str, cfg: &TrainConfig, data: &Dataset) -> Result<RunSummary> {
        let key = serde_json::to_string(cfg).expect("config serializes");
        let slot = slot(&self.runs, key);
        let mut guard = slot.lock().expect("slot lock");
        if guard.is_none() {
            let (student, burn_in_secs) = self.student(cfg, data)?;
            let start = Instant::now();
            let (_, log) = adapt(cfg, data, student, &mut |_, _| Ok(()))?;
            let adapt_secs = start.elapsed().as_secs_f64();
            let source_only_map = log.evals().next().map_or(0.0, |e| e.map50);
            let final_map = log.final_map().unwrap_or(0.0);
            *guard = Some(RunSummary {
                label: label.to_string(),
                seed: cfg.seed,
                source_only_map,
                final_map,
                log: Arc::new(log),
                burn_in_secs,
                adapt_secs,
            });
        }
        let mut out = guard.clone().expect("filled above");
        out.label = label.to_string();
        Ok(out)
    }

    /// Runs every labeled config, up to `jobs` at a time. Output order
    /// follows input order.
    pub fn run_all(
        &self,
        specs: &[(String, TrainConfig)],
        data: &Dataset,
        jobs: usize,
    ) -> Result<Vec<RunSummary>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CmtError::ConfigInvalid(e.to_string()))?;
        pool.install(|| {
            specs
                .par_iter()
                .map(|(label, cfg)| self.run(label, cfg, data))
                .collect()
        })
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub noise_fraction: f64,
    pub variant: &'static str,
    pub maps: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub contrastive_enabled: bool,
    pub class_based_contrast: bool,
    pub multi_scale: bool,
    pub maps: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

/// Baseline (contrast off) and full method at each noise fraction and seed.
/// Rows are ordered by fraction, baseline first.
pub fn noise_sweep(
    cfg: &TrainConfig,
    data: &Dataset,
    fractions: &[f64],
    seeds: &[u64],
    jobs: usize,
    cache: &BurnInCache,
) -> Result<(Vec<NoiseRow>, Vec<RunSummary>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CmtError::ConfigInvalid(
            "noise fractions must lie in [0, 1]".into(),
        ));
    }
    let variants = [("baseline", false), ("cmt", true)];
    let mut specs = Vec::new();
    for &f in fractions {
        for (name, on) in variants {
            for &seed in seeds {
                let c = TrainConfig {
                    noise_fraction: f,
                    contrastive_enabled: on,
                    ..with_seed(cfg, seed)
                };
                specs.push((format!("{name}_noise{f}_seed{seed}"), c));
            }
        }
    }
    let runs = cache.run_all(&specs, data, jobs)?;
    let rows = runs
        .chunks(seeds.len().max(1))
        .zip(
            fractions
                .iter()
                .flat_map(|&f| variants.iter().map(move |v| (f, v.0))),
        )
        .map(|(chunk, (noise_fraction, variant))| {
            let maps: Vec<f64> = chunk.iter().map(|r| r.final_map).collect();
            let (mean, std) = mean_std(&maps);
            NoiseRow {
                noise_fraction,
                variant,
                maps,
                mean,
                std,
            }
        })
        .collect();
    Ok((rows, runs))
}

/// Variant name, contrast on, class-based contrast, multi-scale.
pub const ABLATION_GRID: [(&str, bool, bool, bool); 5] = [
    ("baseline", false, true, true),
    ("neither", true, false, false),
    ("class_only", true, true, false),
    ("multi_scale_only", true, false, true),
    ("both", true, true, true),
];

/// Contrast-off baseline plus the 2x2 grid of class-based contrast and
/// multi-scale features.
pub fn ablate(
    cfg: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    jobs: usize,
    cache: &BurnInCache,
) -> Result<(Vec<AblationRow>, Vec<RunSummary>)> {
    let mut specs = Vec::new();
    for (name, on, class, multi) in ABLATION_GRID {
        for &seed in seeds {
            let c = TrainConfig {
                contrastive_enabled: on,
                class_based_contrast: class,
                multi_scale: multi,
                ..with_seed(cfg, seed)
            };
            specs.push((format!("{name}_seed{seed}"), c));
        }
    }
    let runs = cache.run_all(&specs, data, jobs)?;
    let rows = runs
        .chunks(seeds.len().max(1))
        .zip(ABLATION_GRID)
        .map(|(chunk, (variant, on, class, multi))| {
            let maps: Vec<f64> = chunk.iter().map(|r| r.final_map).collect();
            let (mean, std) = mean_std(&maps);
            AblationRow {
                variant,
                contrastive_enabled: on,
                class_based_contrast: class,
                multi_scale: multi,
                maps,
                mean,
                std,
            }
        })
        .collect();
    Ok((rows, runs))
}

fn seed_headers(seeds: &[u64]) -> Vec<String> {
    seeds.iter().map(|s| format!("map_seed_{s}")).collect()
}

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CmtError::format(path, e))?;
    w.write_record(&header)
        .map_err(|e| CmtError::format(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CmtError::format(path, e))?;
    }
    w.flush().map_err(|e| CmtError::io(path, e))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// `noise_fraction,variant,map_seed_<s>...,mean,std`
pub fn write_noise_csv(path: &Path, seeds: &[u64], rows: &[NoiseRow]) -> Result<()> {
    let mut header = vec!["noise_fraction".to_string(), "variant".to_string()];
    header.extend(seed_headers(seeds));
    header.extend(["mean".to_string(), "std".to_string()]);
    let body = rows
        .iter()
        .map(|r| {
            let mut rec = vec![r.noise_fraction.to_string(), r.variant.to_string()];
            rec.extend(r.maps.iter().map(|m| fmt(*m)));
            rec.extend([fmt(r.mean), fmt(r.std)]);
            rec
        })
        .collect();
    write_csv(path, header, body)
}

/// `variant,contrastive_enabled,class_based_contrast,multi_scale,map_seed_<s>...,mean,std`
pub fn write_ablation_csv(path: &Path, seeds: &[u64], rows: &[AblationRow]) -> Result<()> {
    let mut header: Vec<String> = [
        "variant",
        "contrastive_enabled",
        "class_based_contrast",
        "multi_scale",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(seed_headers(seeds));
    header.extend(["mean".to_string(), "std".to_string()]);
    let body = rows
        .iter()
        .map(|r| {
            let mut rec = vec![
                r.variant.to_string(),
                r.contrastive_enabled.to_string(),
                r.class_based_contrast.to_string(),
                r.multi_scale.to_string(),
            ];
            rec.extend(r.maps.iter().map(|m| fmt(*m)));
            rec.extend([fmt(r.mean), fmt(r.std)]);
            rec
        })
        .collect();
    write_csv(path, header, body)
}
