//! Burn-in, the adaptation loop, checkpoints and experiment drivers.

mod config;
mod experiments;
mod log;
mod step;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use experiments::{
    ablate, mean_std, noise_sweep, write_ablation_csv, write_noise_csv, AblationRow, BurnInCache,
    NoiseRow, RunSummary, ABLATION_GRID,
};
pub use log::{BurnInRecord, EvalRecord, LogRecord, MetricLog, StepRecord};
pub use step::{burn_in, train_step, StepTrace, TrainState};

use crate::detector::DetectorParams;
use crate::error::{CmtError, Result};
use crate::evaluation::evaluate;
use crate::synth_data::Dataset;

/// Student and teacher weights with the config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iter: usize,
    pub student: DetectorParams,
    pub teacher: DetectorParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| CmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CmtError::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CmtError::format(path, e))?;
        let expected = DetectorParams::zeros(&ckpt.config.detector);
        expected.check_compatible(&ckpt.student)?;
        expected.check_compatible(&ckpt.teacher)?;
        Ok(ckpt)
    }
}

fn eval_record(state: &TrainState, cfg: &TrainConfig, data: &Dataset) -> Result<EvalRecord> {
    let result = evaluate(&state.teacher, &cfg.detector, &data.target_eval)?;
    Ok(EvalRecord {
        iter: state.iter,
        map50: result.map50,
        per_class_ap: result.per_class_ap,
    })
}

/// Adaptation from a burned-in student. The teacher is evaluated on the
/// held-out target split before the first step, every `eval_interval` steps
/// and after the last one. `on_eval` sees the state at each evaluation.
pub fn adapt(
    cfg: &TrainConfig,
    data: &Dataset,
    student: DetectorParams,
    on_eval: &mut dyn FnMut(&TrainState, &EvalRecord) -> Result<()>,
) -> Result<(TrainState, MetricLog)> {
    cfg.validate()?;
    let mut state = TrainState::new(student, cfg.seed);
    let mut log = MetricLog::default();
    let first = eval_record(&state, cfg, data)?;
    on_eval(&state, &first)?;
    log.push(LogRecord::Eval(first));
    for _ in 0..cfg.max_iters {
        let (record, _) = train_step(&mut state, cfg, &data.source_train, &data.target_train)?;
        log.push(LogRecord::Train(record));
        if state.iter % cfg.eval_interval == 0 || state.iter == cfg.max_iters {
            let e = eval_record(&state, cfg, data)?;
            on_eval(&state, &e)?;
            log.push(LogRecord::Eval(e));
        }
    }
    Ok((state, log))
}

/// Output of a full burn-in plus adaptation run.
pub struct RunOutput {
    pub state: TrainState,
    pub log: MetricLog,
    pub burn_in: Vec<BurnInRecord>,
}

impl RunOutput {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            iter: self.state.iter,
            student: self.state.student.clone(),
            teacher: self.state.teacher.clone(),
        }
    }

    /// Teacher mAP before adaptation, i.e. the source-only model.
    pub fn source_only_map(&self) -> Option<f64> {
        self.log.evals().next().map(|e| e.map50)
    }
}

pub fn run(cfg: &TrainConfig, data: &Dataset) -> Result<RunOutput> {
    run_with(cfg, data, &mut |_, _| Ok(()))
}

pub fn run_with(
    cfg: &TrainConfig,
    data: &Dataset,
    on_eval: &mut dyn FnMut(&TrainState, &EvalRecord) -> Result<()>,
) -> Result<RunOutput> {
    let (student, burn) = burn_in(cfg, &data.source_train)?;
    let (state, log) = adapt(cfg, data, student, on_eval)?;
    Ok(RunOutput {
        state,
        log,
        burn_in: burn,
    })
}
