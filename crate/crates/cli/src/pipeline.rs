//! The four pipeline stages and the meta-command chaining them.
//!
//! Output layout under the output root:
//!
//! ```text
//! data/train.jsonl, data/train/*.vxm
//! data/test.jsonl,  data/test/*.vxm
//! runs/<variant>/checkpoint.mrck, runs/<variant>/loss.csv
//! runs/<variant>/translated/<mode>-<direction>-n<N>/*.vxm, timing.csv
//! runs/<variant>/eval/<mode>-<direction>-n<N>/metrics.csv, aggregate.csv,
//!     summary.json, omissions.txt, figures/
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mar3d_core::dataset::{
    build_paired_testset, build_training_corpus, check_no_leakage, load_entry, DatasetError, DatasetManifest,
    TrainingPool,
};
use mar3d_core::metrics::{
    aggregate, emit_figures, median, FigureSet, MetricsError, MetricsReport, MetricsRow, ORIGINAL_METHOD,
};
use mar3d_core::translate::{translate_batch, Direction, TranslateConfig, TranslateError, UpdateMode};
use mar3d_core::volumes::{denormalize, load_volume, ValueSpace, Volume, VolumeError, HU_WINDOW};
use mar3d_model::checkpoint::CheckpointError;
use mar3d_model::losses::{LossReport, Variant};
use mar3d_model::training::{train, TrainError, TrainState, CHECKPOINT_FILE};
use mar3d_model::translator::GeneratorTranslator;

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io(_) => 1,
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(m) => PipelineError::Config(m),
            DatasetError::Io(e) => PipelineError::Io(e),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<VolumeError> for PipelineError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io(e) => PipelineError::Io(e),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(e) => PipelineError::Io(e),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => PipelineError::Config(m),
            TrainError::Net(e) => PipelineError::Config(e.to_string()),
            e @ TrainError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            TrainError::Checkpoint(e @ CheckpointError::ConfigHashMismatch { .. }) => {
                PipelineError::Config(e.to_string())
            }
            TrainError::Io(e) => PipelineError::Io(e),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<TranslateError> for PipelineError {
    fn from(e: TranslateError) -> Self {
        match e {
            TranslateError::Io(e) => PipelineError::Io(e),
            e @ TranslateError::ChannelMismatch { .. } => PipelineError::Config(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub mode: Option<UpdateMode>,
    pub n_slices: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        if let Some(m) = self.mode {
            cfg.translate.mode = m;
        }
        cfg
    }

    fn translate_config(&self, cfg: &ExperimentConfig) -> TranslateConfig {
        let mut t = cfg.translate_config();
        if let Some(n) = self.n_slices {
            t.n_slices = n;
        }
        t
    }
}

pub fn mode_name(mode: UpdateMode) -> &'static str {
    match mode {
        UpdateMode::Single => "single",
        UpdateMode::Sequential => "sequential",
    }
}

pub fn direction_name(direction: Direction) -> &'static str {
    match direction {
        Direction::TopDown => "topdown",
        Direction::BottomUp => "bottomup",
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir().join("train.jsonl")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.data_dir().join("test.jsonl")
    }

    pub fn run_dir(&self, variant: Variant) -> PathBuf {
        self.root.join("runs").join(variant.as_str().to_ascii_lowercase())
    }

    pub fn checkpoint(&self, variant: Variant) -> PathBuf {
        self.run_dir(variant).join(CHECKPOINT_FILE)
    }

    fn setting(t: &TranslateConfig) -> String {
        format!("{}-{}-n{}", mode_name(t.mode), direction_name(t.direction), t.n_slices)
    }

    pub fn translated_dir(&self, variant: Variant, t: &TranslateConfig) -> PathBuf {
        self.run_dir(variant).join("translated").join(Self::setting(t))
    }

    pub fn eval_dir(&self, variant: Variant, t: &TranslateConfig) -> PathBuf {
        self.run_dir(variant).join("eval").join(Self::setting(t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub seconds: f64,
}

/// Builds the unpaired training corpus and the paired test set.
pub fn build_data(cfg: &ExperimentConfig) -> Result<BuildSummary, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_root);
    let dc = cfg.dataset_config();
    let t0 = Instant::now();
    info!("building training corpus under {}", layout.data_dir().display());
    let train = build_training_corpus(&dc, layout.data_dir())?;
    info!("building paired test set");
    let test = build_paired_testset(&dc, layout.data_dir())?;
    check_no_leakage(&train, &test)?;
    Ok(BuildSummary {
        train_manifest: layout.train_manifest(),
        test_manifest: layout.test_manifest(),
        n_train: train.entries.len(),
        n_test: test.entries.len(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Whether both manifests exist, were built from this config, and every
/// volume they list is present.
pub fn data_is_current(cfg: &ExperimentConfig) -> bool {
    let layout = Layout::new(&cfg.output_root);
    let dc = cfg.dataset_config();
    [layout.train_manifest(), layout.test_manifest()].iter().all(|p| {
        DatasetManifest::read(p).is_ok_and(|m| {
            m.config == dc
                && m.entries
                    .iter()
                    .all(|e| layout.data_dir().join(&e.volume_path).is_file())
        })
    })
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Data(format!(
            "manifest {} does not exist; run build-data first",
            path.display()
        )));
    }
    Ok(DatasetManifest::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub resumed_from: Option<u64>,
    pub steps: u64,
    pub last_report: Option<LossReport>,
    pub seconds: f64,
}

/// Trains one variant, resuming from an existing checkpoint written with
/// the same training settings.
pub fn train_variant(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<TrainOutcome, PipelineError> {
    let cfg = overrides.apply(cfg);
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_root);
    let tc = cfg.train_config();
    let manifest = read_manifest(&layout.train_manifest())?;
    let pool = TrainingPool::load(&manifest, layout.data_dir())?;
    let run_dir = layout.run_dir(tc.variant);
    let ckpt = layout.checkpoint(tc.variant);

    let mut resumed_from = None;
    let state = match TrainState::load(&ckpt, Some(&tc.model)) {
        Ok(state) if state.config == tc => {
            info!("resuming {} from step {}", tc.variant.as_str(), state.step);
            resumed_from = Some(state.step);
            state
        }
        Ok(_) => {
            warn!(
                "checkpoint {} was written with other settings; starting over",
                ckpt.display()
            );
            TrainState::new(tc.clone())?
        }
        Err(_) if !ckpt.exists() => TrainState::new(tc.clone())?,
        Err(e) => {
            warn!("ignoring unreadable checkpoint {}: {e}", ckpt.display());
            TrainState::new(tc.clone())?
        }
    };

    let total = tc.total_steps();
    let every = (total / 20).max(1);
    let t0 = Instant::now();
    let mut last_report = None;
    let (state, checkpoint) = train(state, &pool, &run_dir, |o| {
        if (o.step + 1) % every == 0 || o.step + 1 == total {
            let r = &o.report;
            info!(
                "step {}/{} total {:.4} adv {:.4}/{:.4} cyc {:.4} int {:.4} fea {:.4} id {:.4} d {:.4} ({:.0}s)",
                o.step + 1,
                total,
                r.total,
                r.adv_xy,
                r.adv_yx,
                r.cyc,
                r.int,
                r.fea,
                r.id,
                o.d_objective,
                t0.elapsed().as_secs_f64()
            );
        }
        last_report = Some(o.report.clone());
    })?;
    Ok(TrainOutcome {
        checkpoint,
        loss_csv: run_dir.join(mar3d_model::training::LOSS_CSV),
        resumed_from,
        steps: state.step,
        last_report,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslateOutcome {
    pub out_dir: PathBuf,
    pub n_volumes: usize,
    pub seconds: f64,
}

/// Translates every corrupted test volume with `G_Y` from `checkpoint`
/// (default: the variant's own checkpoint).
pub fn translate_test_set(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    overrides: &Overrides,
) -> Result<TranslateOutcome, PipelineError> {
    let cfg = overrides.apply(cfg);
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_root);
    let variant = cfg.train.variant;
    let tcfg = overrides.translate_config(&cfg);
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.checkpoint(variant));
    if !ckpt.is_file() {
        return Err(PipelineError::Data(format!(
            "checkpoint {} does not exist",
            ckpt.display()
        )));
    }
    let mut translator = GeneratorTranslator::from_checkpoint(&ckpt, Some(tcfg.n_slices)).map_err(|e| match e {
        TrainError::Config(m) => PipelineError::Config(format!("N mismatch: {m}")),
        other => other.into(),
    })?;
    let manifest = read_manifest(&layout.test_manifest())?;
    let out_dir = layout.translated_dir(variant, &tcfg);
    info!(
        "translating with {} ({} mode, N = {}) into {}",
        ckpt.display(),
        mode_name(tcfg.mode),
        tcfg.n_slices,
        out_dir.display()
    );
    let t0 = Instant::now();
    let done = translate_batch(&mut translator, &manifest, layout.data_dir(), &tcfg, &out_dir)?;
    Ok(TranslateOutcome {
        out_dir,
        n_volumes: done.len(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerMSummary {
    pub m: usize,
    pub count: usize,
    pub median_ssim_original: f64,
    pub median_ssim_corrected: f64,
    pub median_r_s: f64,
}

/// Headline numbers of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub n_evaluated: usize,
    pub omissions: Vec<String>,
    /// Median improvement rate over every corrected volume.
    pub median_r_s: Option<f64>,
    pub median_r_s_masked: Option<f64>,
    pub per_m: Vec<PerMSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub out_dir: PathBuf,
    pub report: MetricsReport,
    pub summary: EvalSummary,
}

/// Restricts a HU volume to the normalization window the networks see.
fn windowed(vol: &Volume) -> Result<Volume, PipelineError> {
    let data = vol.data().mapv(|v| v.clamp(-HU_WINDOW, HU_WINDOW));
    Ok(vol.with_data(data, ValueSpace::Hu)?)
}

fn as_hu(vol: Volume) -> Result<Volume, PipelineError> {
    match vol.value_space() {
        ValueSpace::Hu => Ok(vol),
        ValueSpace::Normalized => Ok(denormalize(&vol)?),
    }
}

/// Scores translated volumes in `results_dir` (default: the configured
/// translation output) against the paired references. Missing outputs
/// are recorded as omissions.
pub fn evaluate(
    cfg: &ExperimentConfig,
    results_dir: Option<&Path>,
    overrides: &Overrides,
) -> Result<EvalOutcome, PipelineError> {
    let cfg = overrides.apply(cfg);
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_root);
    let variant = cfg.train.variant;
    let tcfg = overrides.translate_config(&cfg);
    let results_dir = results_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.translated_dir(variant, &tcfg));
    let out_dir = layout.eval_dir(variant, &tcfg);
    let manifest = read_manifest(&layout.test_manifest())?;
    let cases = manifest.paired_cases()?;
    if cases.is_empty() {
        return Err(PipelineError::Data("the test manifest has no paired cases".into()));
    }
    let method = variant.as_str().to_string();
    let params = &cfg.metrics.ssim;
    let data_dir = layout.data_dir();

    let mut figure_phantoms = BTreeSet::new();
    for c in &cases {
        if figure_phantoms.len() < cfg.metrics.figure_phantoms {
            figure_phantoms.insert(c.reference.phantom_id.clone());
        }
    }

    let mut rows = Vec::new();
    let mut omissions = Vec::new();
    let mut kept: Vec<(String, usize, Volume, Volume, Volume)> = Vec::new();
    for case in &cases {
        let id = &case.corrupted.volume_id;
        let reference = windowed(&load_entry(&data_dir, &case.reference)?)?;
        let original = windowed(&load_entry(&data_dir, &case.corrupted)?)?;
        let mask = load_entry(&data_dir, &case.mask)?.data().mapv(|v| v > 0.5);
        let m = case.corrupted.m;
        rows.push(MetricsRow::evaluate(
            id,
            m,
            ORIGINAL_METHOD,
            &reference,
            &original,
            &original,
            &mask,
            params,
        )?);
        let path = results_dir.join(format!("{id}.vxm"));
        if !path.is_file() {
            warn!("no translated volume for {id}");
            omissions.push(id.clone());
            continue;
        }
        let corrected = windowed(&as_hu(load_volume(&path)?)?)?;
        if corrected.shape() != reference.shape() {
            warn!(
                "translated volume {id} has shape {:?}, expected {:?}",
                corrected.shape(),
                reference.shape()
            );
            omissions.push(id.clone());
            continue;
        }
        rows.push(MetricsRow::evaluate(
            id, m, &method, &reference, &original, &corrected, &mask, params,
        )?);
        if figure_phantoms.contains(&case.reference.phantom_id) {
            kept.push((id.clone(), m, reference, original, corrected));
        }
    }
    if rows
        .iter()
        .any(|r| !(r.rmse_hu.is_finite() && r.ssim.is_finite() && r.r_s.is_finite()))
    {
        return Err(PipelineError::Numeric("non-finite metric value".into()));
    }

    let report = aggregate(&rows)?;
    fs::create_dir_all(&out_dir)?;
    report.write_rows_csv(out_dir.join("metrics.csv"))?;
    report.write_aggregate_csv(out_dir.join("aggregate.csv"))?;
    let mut omitted_text = String::from("# corrupted volumes without a translated output\n");
    for id in &omissions {
        omitted_text.push_str(id);
        omitted_text.push('\n');
    }
    fs::write(out_dir.join("omissions.txt"), omitted_text)?;

    let sets: Vec<FigureSet<'_>> = kept
        .iter()
        .map(|(id, m, reference, original, corrected)| FigureSet {
            volume_id: id,
            m: *m,
            method: &method,
            reference,
            original,
            corrected,
        })
        .collect();
    emit_figures(&report, &sets, &cfg.metrics.figure_slices, out_dir.join("figures"))?;

    let summary = summarize_report(&report, &method, omissions);
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(EvalOutcome {
        out_dir,
        report,
        summary,
    })
}

pub fn summarize_report(report: &MetricsReport, method: &str, omissions: Vec<String>) -> EvalSummary {
    let corrected: Vec<&MetricsRow> = report.rows.iter().filter(|r| r.method == method).collect();
    let r_s: Vec<f64> = corrected.iter().map(|r| r.r_s).collect();
    let r_s_masked: Vec<f64> = corrected.iter().map(|r| r.r_s_masked).collect();
    let ms: BTreeSet<usize> = corrected.iter().map(|r| r.m).collect();
    let per_m = ms
        .into_iter()
        .filter_map(|m| {
            let c = report.aggregate_for(m, method)?;
            let o = report.aggregate_for(m, ORIGINAL_METHOD)?;
            Some(PerMSummary {
                m,
                count: c.count,
                median_ssim_original: o.median_ssim,
                median_ssim_corrected: c.median_ssim,
                median_r_s: c.median_r_s,
            })
        })
        .collect();
    EvalSummary {
        method: method.to_string(),
        n_evaluated: corrected.len(),
        omissions,
        median_r_s: median(&r_s),
        median_r_s_masked: median(&r_s_masked),
        per_m,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReproduceOutcome {
    pub build: Option<BuildSummary>,
    pub train: TrainOutcome,
    pub translate: TranslateOutcome,
    pub eval: EvalOutcome,
}

/// build -> train -> translate -> evaluate. An existing data set built from
/// the same config is reused.
pub fn reproduce_all(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<ReproduceOutcome, PipelineError> {
    cfg.validate()?;
    let build = if data_is_current(cfg) {
        info!(
            "reusing data set under {}",
            Layout::new(&cfg.output_root).data_dir().display()
        );
        None
    } else {
        Some(build_data(cfg)?)
    };
    let train = train_variant(cfg, overrides)?;
    let translate = translate_test_set(cfg, Some(&train.checkpoint), overrides)?;
    let eval = evaluate(cfg, Some(&translate.out_dir), overrides)?;
    Ok(ReproduceOutcome {
        build,
        train,
        translate,
        eval,
    })
}
