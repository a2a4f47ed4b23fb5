//! Alternating adversarial optimization with checkpointing and a per-step
//! loss log.
//!
//! Every step draws its batch from a random stream derived from
//! `(seed, step)` alone, so resuming from a checkpoint replays exactly the
//! batches an uninterrupted run would have seen.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mar3d_core::dataset::{sample_unpaired_batch, DatasetError, TrainingPool};
use mar3d_core::seeds::{substream, substream_seed};
use mar3d_core::volumes::SubvolumeWindow;

use crate::checkpoint::{
    config_hash, read_checkpoint, write_checkpoint, CheckpointError, CheckpointHeader, TensorMeta, TensorRecord,
};
use crate::losses::{
    discriminator_grads, generator_grads, GeneratorTerms, LossError, LossReport, LossWeights, Variant,
};
use crate::nets::{Discriminator, Generator, ModelConfig, NetError, Networks, Parameters};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {report:?} (discriminator objective {d_objective})")]
    NonFinite {
        step: u64,
        report: LossReport,
        d_objective: f64,
    },
    #[error("checkpoint does not match the network layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Square in-plane crop of training windows; `None` trains on full
    /// slices.
    pub crop: Option<usize>,
    pub optimizer: AdamConfig,
    /// Linearly decay the step size to zero over the second half of
    /// training.
    pub lr_decay: bool,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Proposed,
            model: ModelConfig::default(),
            batch_size: 2,
            epochs: 10,
            steps_per_epoch: 100,
            crop: Some(64),
            optimizer: AdamConfig::default(),
            lr_decay: false,
            d_steps: 1,
            seed: 2024,
            weights: LossWeights::default(),
            checkpoint_interval: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.d_steps == 0 {
            return Err(TrainError::Config(
                "epochs, steps_per_epoch, batch_size and d_steps must be at least 1".into(),
            ));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(TrainError::Config(format!(
                "step size {} must be >= 0",
                self.optimizer.lr
            )));
        }
        if let Some(c) = self.crop {
            let m = self.model.spatial_multiple();
            if c == 0 || c % m != 0 {
                return Err(TrainError::Config(format!(
                    "crop {c} must be a positive multiple of {m}"
                )));
            }
        }
        if self.checkpoint_interval == 0 {
            return Err(TrainError::Config("checkpoint_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.optimizer.lr;
        if !self.lr_decay {
            return base;
        }
        let total = self.total_steps() as f64;
        let half = total / 2.0;
        let s = step as f64;
        if s < half {
            base
        } else {
            base * ((total - s) / (total - half)).max(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub g_x: Adam<f32, Generator<f32>>,
    pub g_y: Adam<f32, Generator<f32>>,
    pub d_x: Adam<f32, Discriminator<f32>>,
    pub d_y: Adam<f32, Discriminator<f32>>,
}

impl Optimizers {
    pub fn new(nets: &Networks<f32>) -> Self {
        Self {
            g_x: Adam::new(&nets.g_x),
            g_y: Adam::new(&nets.g_y),
            d_x: Adam::new(&nets.d_x),
            d_y: Adam::new(&nets.d_y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: Networks<f32>,
    pub opt: Optimizers,
    /// Completed steps.
    pub step: u64,
}

/// Outcome of one alternating step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    /// Generator-phase report (log-likelihood adversarial values).
    pub report: LossReport,
    /// `-(adv_xy + adv_yx)` seen by the last discriminator update.
    pub d_objective: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let nets = Networks::new(&config.model, substream_seed(config.seed, "init"))?;
        let opt = Optimizers::new(&nets);
        Ok(Self {
            config,
            nets,
            opt,
            step: 0,
        })
    }

    /// Updates both discriminators; generators are untouched.
    pub fn discriminator_phase(&mut self, x: &Array4<f32>, y: &Array4<f32>, lr: f64) -> Result<f64, TrainError> {
        let eval = discriminator_grads(&self.nets, x, y)?;
        if !eval.objective.is_finite() || !eval.d_x.all_finite() || !eval.d_y.all_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                report: LossReport::default(),
                d_objective: eval.objective,
            });
        }
        let cfg = &self.config.optimizer;
        self.opt.d_x.step(cfg, lr, &mut self.nets.d_x, &eval.d_x);
        self.opt.d_y.step(cfg, lr, &mut self.nets.d_y, &eval.d_y);
        Ok(eval.objective)
    }

    /// Updates both generators against the current discriminators.
    pub fn generator_phase(&mut self, x: &Array4<f32>, y: &Array4<f32>, lr: f64) -> Result<LossReport, TrainError> {
        let terms = GeneratorTerms::for_variant(self.config.variant, &self.config.weights);
        let eval = generator_grads(&self.nets, x, y, &terms)?;
        let report = eval.components.report(self.config.variant, &self.config.weights);
        if !report.is_finite() || !eval.grads.g_x.all_finite() || !eval.grads.g_y.all_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                report,
                d_objective: f64::NAN,
            });
        }
        let cfg = &self.config.optimizer;
        self.opt.g_x.step(cfg, lr, &mut self.nets.g_x, &eval.grads.g_x);
        self.opt.g_y.step(cfg, lr, &mut self.nets.g_y, &eval.grads.g_y);
        Ok(report)
    }

    /// `d_steps` discriminator updates followed by one generator update.
    pub fn train_step(&mut self, x: &Array4<f32>, y: &Array4<f32>) -> Result<StepOutcome, TrainError> {
        let lr = self.config.lr_at(self.step);
        let mut d_objective = self.discriminator_phase(x, y, lr)?;
        for _ in 1..self.config.d_steps {
            d_objective = self.discriminator_phase(x, y, lr)?;
        }
        let report = self.generator_phase(x, y, lr).map_err(|e| match e {
            TrainError::NonFinite { step, report, .. } => TrainError::NonFinite {
                step,
                report,
                d_objective,
            },
            other => other,
        })?;
        let outcome = StepOutcome {
            step: self.step,
            report,
            d_objective,
        };
        self.step += 1;
        Ok(outcome)
    }

    fn tensor_list(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let groups: [(&str, Vec<(String, Vec<usize>, &[f32])>); 12] = [
            ("g_x", self.nets.g_x.tensors()),
            ("g_y", self.nets.g_y.tensors()),
            ("d_x", self.nets.d_x.tensors()),
            ("d_y", self.nets.d_y.tensors()),
            ("adam.g_x.m", self.opt.g_x.m.tensors()),
            ("adam.g_x.v", self.opt.g_x.v.tensors()),
            ("adam.g_y.m", self.opt.g_y.m.tensors()),
            ("adam.g_y.v", self.opt.g_y.v.tensors()),
            ("adam.d_x.m", self.opt.d_x.m.tensors()),
            ("adam.d_x.v", self.opt.d_x.v.tensors()),
            ("adam.d_y.m", self.opt.d_y.m.tensors()),
            ("adam.d_y.v", self.opt.d_y.v.tensors()),
        ];
        groups
            .into_iter()
            .flat_map(|(prefix, list)| list.into_iter().map(move |(n, s, d)| (format!("{prefix}/{n}"), s, d)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let tensors = self.tensor_list();
        let header = CheckpointHeader {
            config_hash: config_hash(&self.config.model),
            model: self.config.model.clone(),
            step: self.step,
            train: serde_json::to_value(&self.config).map_err(CheckpointError::from)?,
            counters: vec![
                ("adam.g_x".into(), self.opt.g_x.t),
                ("adam.g_y".into(), self.opt.g_y.t),
                ("adam.d_x".into(), self.opt.d_x.t),
                ("adam.d_y".into(), self.opt.d_y.t),
            ],
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorMeta {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        write_checkpoint(path, &header, &tensors)?;
        Ok(())
    }

    /// Restores a state; `expected` guards against a different
    /// architecture.
    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self, TrainError> {
        let (header, records) = read_checkpoint(path, expected)?;
        let config: TrainConfig = serde_json::from_value(header.train.clone()).map_err(CheckpointError::from)?;
        if config.model != header.model {
            return Err(TrainError::Layout(
                "embedded train config disagrees with model config".into(),
            ));
        }
        let mut state = TrainState::new(config)?;
        state.step = header.step;
        let counter = |name: &str| {
            header
                .counters
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TrainError::Layout(format!("missing counter {name}")))
        };
        state.opt.g_x.t = counter("adam.g_x")?;
        state.opt.g_y.t = counter("adam.g_y")?;
        state.opt.d_x.t = counter("adam.d_x")?;
        state.opt.d_y.t = counter("adam.d_y")?;

        let expected_layout: Vec<(String, Vec<usize>)> =
            state.tensor_list().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected_layout.len() != records.len() {
            return Err(TrainError::Layout(format!(
                "{} tensors stored, {} expected",
                records.len(),
                expected_layout.len()
            )));
        }
        for ((name, shape), rec) in expected_layout.iter().zip(&records) {
            if name != &rec.name || shape != &rec.shape {
                return Err(TrainError::Layout(format!(
                    "{} {:?} vs {} {:?}",
                    rec.name, rec.shape, name, shape
                )));
            }
        }
        let mut it = records.into_iter();
        let mut fill = |targets: Vec<&mut [f32]>| {
            for t in targets {
                let rec: TensorRecord = it.next().expect("counted above");
                t.copy_from_slice(&rec.data);
            }
        };
        fill(state.nets.g_x.tensors_mut());
        fill(state.nets.g_y.tensors_mut());
        fill(state.nets.d_x.tensors_mut());
        fill(state.nets.d_y.tensors_mut());
        fill(state.opt.g_x.m.tensors_mut());
        fill(state.opt.g_x.v.tensors_mut());
        fill(state.opt.g_y.m.tensors_mut());
        fill(state.opt.g_y.v.tensors_mut());
        fill(state.opt.d_x.m.tensors_mut());
        fill(state.opt.d_x.v.tensors_mut());
        fill(state.opt.d_y.m.tensors_mut());
        fill(state.opt.d_y.v.tensors_mut());
        Ok(state)
    }
}

/// Stacks windows into a `(B, N, H, W)` batch.
pub fn stack_windows(windows: &[SubvolumeWindow]) -> Array4<f32> {
    let views: Vec<_> = windows.iter().map(|w| w.slices().view()).collect();
    ndarray::stack(Axis(0), &views).expect("windows share a shape")
}

/// The batch used at `step`, drawn from its own random stream.
pub fn batch_for_step(
    config: &TrainConfig,
    pool: &TrainingPool,
    step: u64,
) -> Result<(Array4<f32>, Array4<f32>), TrainError> {
    let mut rng = substream(config.seed, &format!("batch/{step}"));
    let batch = sample_unpaired_batch(pool, config.model.n_slices, config.batch_size, config.crop, &mut rng)?;
    Ok((stack_windows(&batch.x), stack_windows(&batch.y)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub variant: String,
    pub adv_xy: f64,
    pub adv_yx: f64,
    pub cyc: f64,
    pub int: f64,
    pub fea: f64,
    pub id: f64,
    pub total: f64,
    pub d_objective: f64,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mrck";

/// Keeps only rows for steps before `step`, so a resumed run appends
/// where its checkpoint left off.
fn truncate_loss_log(path: &Path, step: u64) -> Result<(), TrainError> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut kept = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            kept.push(line);
            continue;
        }
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Config(format!("unreadable loss log line {}", i + 1)))?;
        if row_step < step {
            kept.push(line);
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Runs (or resumes) training to `epochs * steps_per_epoch` steps, writing
/// `loss.csv` and `checkpoint.mrck` into `out_dir`.
pub fn train(
    state: TrainState,
    pool: &TrainingPool,
    out_dir: impl AsRef<Path>,
    mut progress: impl FnMut(&StepOutcome),
) -> Result<(TrainState, PathBuf), TrainError> {
    let mut state = state;
    state.config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOSS_CSV);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    if state.step == 0 {
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
    } else {
        truncate_loss_log(&log_path, state.step)?;
    }
    let write_header = !log_path.exists();
    let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut log = csv::WriterBuilder::new().has_headers(write_header).from_writer(file);

    let total = state.config.total_steps();
    while state.step < total {
        let (x, y) = batch_for_step(&state.config, pool, state.step)?;
        let outcome = state.train_step(&x, &y)?;
        let r = &outcome.report;
        log.serialize(LossRow {
            step: outcome.step,
            epoch: outcome.step as usize / state.config.steps_per_epoch,
            variant: state.config.variant.as_str().into(),
            adv_xy: r.adv_xy,
            adv_yx: r.adv_yx,
            cyc: r.cyc,
            int: r.int,
            fea: r.fea,
            id: r.id,
            total: r.total,
            d_objective: outcome.d_objective,
        })?;
        progress(&outcome);
        if state.step.is_multiple_of(state.config.checkpoint_interval as u64) || state.step == total {
            log.flush()?;
            state.save(&ckpt_path)?;
        }
    }
    log.flush()?;
    if !ckpt_path.exists() {
        state.save(&ckpt_path)?;
    }
    Ok((state, ckpt_path))
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
