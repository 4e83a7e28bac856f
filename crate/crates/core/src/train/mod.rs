//! Joint pretraining loop, checkpoints and the leave-one-out ablation suite.

mod checkpoint;
mod config;
mod optim;

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, ResumeState, FORMAT_VERSION, MAGIC};
pub use config::RunConfig;
pub use optim::{clip_global_norm, optimizer_step, AdamWConfig, AdamWState};

use crate::model::{EncoderConfig, LossParts, Model, ModelError, Task, TaskSet};
use crate::numerics::{Graph, RngStream};
use crate::taskgen::{BatchStats, PretrainData, TaskError};

const INIT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in {param} at coordinate {coord}")]
    NonFiniteGrad { param: String, coord: usize },
    #[error("non-finite {0} loss; emergency checkpoint written")]
    NonFiniteLoss(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    #[serde(flatten)]
    pub tasks: TaskSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            batch_size: 16,
            total_steps: 10_000,
            seed: 42,
            checkpoint_every: 0,
            tasks: TaskSet::all(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !self.tasks.any() {
            return Err(TrainError::Config("at least one task must be enabled".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            total_steps: self.total_steps,
        }
    }
}

/// One completed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossParts,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Owns the model, optimizer state and both random streams of a run.
pub struct Trainer<'a> {
    data: &'a PretrainData,
    cfg: TrainConfig,
    model: Model<f32>,
    moments: AdamWState,
    step: usize,
    data_rng: RngStream,
    dropout_rng: RngStream,
    names: Vec<String>,
    pub batch_stats: BatchStats,
}

fn check_compatible(data: &PretrainData, enc: &EncoderConfig) -> Result<(), TrainError> {
    let t = &data.cfg;
    let checks = [
        ("vocab_size", enc.vocab_size, data.vocab_size),
        ("geohash_chars", enc.geohash_chars, t.geohash_chars),
        ("phrase_classes", enc.phrase_classes, t.max_phrases),
        ("token_classes", enc.token_classes, t.max_phrase_tokens),
    ];
    for (name, have, want) in checks {
        if have != want {
            return Err(TrainError::Config(format!(
                "encoder {name} {have} does not match the prepared data ({want})"
            )));
        }
    }
    if t.max_joint_len > enc.max_len || t.max_query_len > enc.max_len {
        return Err(TrainError::Config(format!(
            "encoder max_len {} shorter than prepared sequences",
            enc.max_len
        )));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Fresh run; the model is initialized from the run seed.
    pub fn new(data: &'a PretrainData, enc: EncoderConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_compatible(data, &enc)?;
        let root = RngStream::new(cfg.seed);
        let model = Model::init(enc, &mut root.derive(INIT_STREAM))?;
        let moments = AdamWState::new(model.params());
        Ok(Self {
            data,
            names: model.specs().iter().map(|s| s.name.clone()).collect(),
            model,
            moments,
            step: 0,
            data_rng: root.derive(DATA_STREAM),
            dropout_rng: root.derive(DROPOUT_STREAM),
            cfg,
            batch_stats: BatchStats::default(),
        })
    }

    /// Continue a run from a checkpoint that carries resume state.
    pub fn resume(data: &'a PretrainData, ckpt: Checkpoint) -> Result<Self, TrainError> {
        let rs = ckpt
            .resume
            .ok_or_else(|| TrainError::Checkpoint("checkpoint has no resume state".into()))?;
        check_compatible(data, ckpt.model.config())?;
        let pos = |s: &str| {
            s.parse::<u128>()
                .map_err(|_| TrainError::Checkpoint(format!("bad stream position {s:?}")))
        };
        let moments = ckpt
            .moments
            .ok_or_else(|| TrainError::Checkpoint("checkpoint has no optimizer moments".into()))?;
        Ok(Self {
            data,
            names: ckpt.model.specs().iter().map(|s| s.name.clone()).collect(),
            model: ckpt.model,
            moments,
            step: rs.step,
            data_rng: RngStream::at_position(rs.data_seed, pos(&rs.data_position)?),
            dropout_rng: RngStream::at_position(rs.dropout_seed, pos(&rs.dropout_position)?),
            cfg: rs.config,
            batch_stats: BatchStats::default(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            resume: Some(ResumeState {
                step: self.step,
                config: self.cfg.clone(),
                data_seed: self.data_rng.seed(),
                data_position: self.data_rng.position().to_string(),
                dropout_seed: self.dropout_rng.seed(),
                dropout_position: self.dropout_rng.position().to_string(),
            }),
            moments: Some(self.moments.clone()),
        }
    }

    /// Batch, enabled losses, backward, clip, update.
    pub fn step(&mut self) -> Result<LogRecord, TrainError> {
        let started = Instant::now();
        let tasks = self.cfg.tasks;
        let batch = self
            .data
            .build_batch(&mut self.data_rng, self.cfg.batch_size, &mut self.batch_stats)?;
        let mut g = Graph::<f32>::new();
        let vars = self.model.bind(&mut g, |grp| tasks.trains(grp));
        let (loss, parts) = match self
            .model
            .net(&vars)
            .joint_loss(&mut g, &batch, tasks, Some(&mut self.dropout_rng))
        {
            Ok(x) => x,
            Err(ModelError::NonFinite(name)) => return Err(TrainError::NonFiniteLoss(name.into())),
            Err(e) => return Err(e.into()),
        };
        let total = parts.total();
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss("total".into()));
        }
        g.backward(loss).map_err(ModelError::from)?;
        let mut grads: Vec<Option<Vec<f32>>> = self
            .model
            .specs()
            .iter()
            .zip(&vars)
            .zip(self.model.params())
            .map(|((spec, v), p)| {
                tasks
                    .trains(spec.group)
                    .then(|| g.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
            })
            .collect();
        drop(g);
        let opt = self.cfg.optimizer();
        clip_global_norm(&mut grads, opt.clip_norm);
        let lr = opt.lr_at(self.step);
        optimizer_step(
            self.model.params_mut(),
            &self.names,
            &grads,
            &mut self.moments,
            self.step,
            &opt,
        )?;
        self.step += 1;
        Ok(LogRecord {
            step: self.step,
            losses: parts,
            total,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs to `total_steps`, writing interval checkpoints, the final
    /// checkpoint and the log under `out_dir` when given. A non-finite loss
    /// writes `emergency.ckpt` and stops.
    pub fn run(&mut self, out_dir: Option<&Path>, log: &mut Vec<LogRecord>) -> Result<(), TrainError> {
        self.run_with(out_dir, log, |_| {})
    }

    /// [`Trainer::run`] calling `on_step` after every step.
    pub fn run_with(
        &mut self,
        out_dir: Option<&Path>,
        log: &mut Vec<LogRecord>,
        mut on_step: impl FnMut(&LogRecord),
    ) -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while !self.finished() {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e @ TrainError::NonFiniteLoss(_)) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("emergency.ckpt"))?;
                        write_log(&dir.join("train_log.jsonl"), log)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            on_step(&rec);
            log.push(rec);
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.step.is_multiple_of(every) && !self.finished() {
                    self.checkpoint()
                        .save(&dir.join(format!("step-{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
            write_log(&dir.join("train_log.jsonl"), log)?;
        }
        Ok(())
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LogRecord>,
    pub batch_stats: BatchStats,
}

/// Train from scratch. With `total_steps = 0` only the initialization
/// checkpoint is written.
pub fn train(
    data: &PretrainData,
    enc: EncoderConfig,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(data, enc, cfg)?;
    let mut log = Vec::new();
    t.run(out_dir, &mut log)?;
    Ok(TrainOutcome {
        batch_stats: t.batch_stats.clone(),
        model: t.into_model(),
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    /// `None` for the full model.
    pub disabled: Option<Task>,
    /// Enable flags in task order, e.g. `1011`.
    pub tasks: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationManifest {
    pub runs: Vec<AblationRun>,
}

impl AblationManifest {
    pub const FILE: &'static str = "ablation_manifest.json";

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(Self::FILE))?)?)
    }
}

pub fn run_name(disabled: Option<Task>) -> String {
    match disabled {
        None => "full".into(),
        Some(t) => format!("no_{}", t.name()),
    }
}

/// The full configuration followed by one leave-one-out configuration per
/// task, all sharing seed and step count.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(Option<Task>, TrainConfig)> {
    let mut out = vec![(
        None,
        TrainConfig {
            tasks: TaskSet::all(),
            ..base.clone()
        },
    )];
    for t in Task::ALL {
        out.push((
            Some(t),
            TrainConfig {
                tasks: TaskSet::without(t),
                ..base.clone()
            },
        ));
    }
    out
}

/// Trains the full model and the four leave-one-out models under `out_dir`
/// and writes the manifest. Runs whose final checkpoint already exists are
/// skipped when `reuse` is set.
pub fn ablation_suite(
    data: &PretrainData,
    enc: &EncoderConfig,
    base: &TrainConfig,
    out_dir: &Path,
    reuse: bool,
) -> Result<AblationManifest, TrainError> {
    ablation_suite_with(data, enc, base, out_dir, reuse, |_, _| {})
}

/// [`ablation_suite`] calling `on_step` with the run name after every step.
pub fn ablation_suite_with(
    data: &PretrainData,
    enc: &EncoderConfig,
    base: &TrainConfig,
    out_dir: &Path,
    reuse: bool,
    mut on_step: impl FnMut(&str, &LogRecord),
) -> Result<AblationManifest, TrainError> {
    fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for (disabled, cfg) in ablation_configs(base) {
        let name = run_name(disabled);
        let dir = out_dir.join(&name);
        let ckpt = dir.join("final.ckpt");
        if !(reuse && ckpt.exists()) {
            let mut t = Trainer::new(data, enc.clone(), cfg.clone())?;
            t.run_with(Some(&dir), &mut Vec::new(), |r| on_step(&name, r))?;
        }
        runs.push(AblationRun {
            name,
            disabled,
            tasks: cfg.tasks.bits(),
            checkpoint: ckpt,
        });
    }
    let manifest = AblationManifest { runs };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flag_vectors() {
        let bits: Vec<String> = ablation_configs(&TrainConfig::default())
            .iter()
            .map(|(_, c)| c.tasks.bits())
            .collect();
        assert_eq!(bits, ["1111", "0111", "1011", "1101", "1110"]);
        let names: Vec<String> = Task::ALL.iter().map(|t| run_name(Some(*t))).collect();
        assert_eq!(names, ["no_geo_mp", "no_geo_cp", "no_ucbl", "no_ptop"]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 1e-3;
        c.tasks = TaskSet::none();
        assert!(c.validate().is_err());
    }
}
