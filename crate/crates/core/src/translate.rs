//! Whole-volume inference with a window generator sliding along the slice
//! axis.
//!
//! Both modes share one schedule: the first window commits all of its
//! output slices, every later window (advanced by one slice) commits only
//! its newest slice. `Sequential` feeds each window from the working copy,
//! so all but the newest input slice are already-translated outputs;
//! `Single` always feeds the original slices.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_entry, DatasetError, DatasetManifest, EntryRole};
use crate::volumes::{check_window_size, normalize_hu, save_volume, ValueSpace, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("volume has {slices} slices but the window needs {n}")]
    TooFewSlices { slices: usize, n: usize },
    #[error("generator expects {expected} channels, config asks for {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("generator returned shape {actual:?}, expected {expected:?}")]
    BadOutputShape {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("translation input must be normalized, got {0}")]
    NotNormalized(ValueSpace),
    #[error("generator failed: {0}")]
    Generator(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that maps an `N x H x W` normalized window to a window of the
/// same shape.
pub trait WindowTranslator {
    fn n_channels(&self) -> usize;
    fn translate_window(&mut self, window: ArrayView3<f32>) -> Result<Array3<f32>, TranslateError>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateMode {
    Single,
    #[default]
    Sequential,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    #[default]
    TopDown,
    BottomUp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateConfig {
    pub n_slices: usize,
    pub mode: UpdateMode,
    pub direction: Direction,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            n_slices: 3,
            mode: UpdateMode::Sequential,
            direction: Direction::TopDown,
        }
    }
}

/// One step of the sliding schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowStep {
    pub start: usize,
    /// Slice indices (volume coordinates) whose output is kept.
    pub commit: Range<usize>,
}

/// The window start positions and commit ranges, in processing order.
pub fn window_schedule(n_total: usize, n: usize, direction: Direction) -> Vec<WindowStep> {
    if n_total < n || n == 0 {
        return Vec::new();
    }
    let last = n_total - n;
    (0..=last)
        .map(|k| {
            let start = match direction {
                Direction::TopDown => k,
                Direction::BottomUp => last - k,
            };
            let commit = if k == 0 {
                start..start + n
            } else {
                match direction {
                    Direction::TopDown => start + n - 1..start + n,
                    Direction::BottomUp => start..start + 1,
                }
            };
            WindowStep { start, commit }
        })
        .collect()
}

/// Translates a normalized volume window by window.
pub fn translate_volume(
    generator: &mut impl WindowTranslator,
    vol: &Volume,
    cfg: &TranslateConfig,
) -> Result<Volume, TranslateError> {
    if vol.value_space() != ValueSpace::Normalized {
        return Err(TranslateError::NotNormalized(vol.value_space()));
    }
    check_window_size(cfg.n_slices)?;
    if generator.n_channels() != cfg.n_slices {
        return Err(TranslateError::ChannelMismatch {
            expected: generator.n_channels(),
            actual: cfg.n_slices,
        });
    }
    let n = cfg.n_slices;
    let (depth, h, w) = vol.shape();
    if depth < n {
        return Err(TranslateError::TooFewSlices { slices: depth, n });
    }
    let original = vol.data();
    let mut working = original.clone();
    for step in window_schedule(depth, n, cfg.direction) {
        let window = match cfg.mode {
            UpdateMode::Sequential => working.slice(s![step.start..step.start + n, .., ..]),
            UpdateMode::Single => original.slice(s![step.start..step.start + n, .., ..]),
        };
        let out = generator.translate_window(window)?;
        if out.dim() != (n, h, w) {
            return Err(TranslateError::BadOutputShape {
                expected: (n, h, w),
                actual: out.dim(),
            });
        }
        let local = step.commit.start - step.start..step.commit.end - step.start;
        working
            .slice_mut(s![step.commit.clone(), .., ..])
            .assign(&out.slice(s![local, .., ..]));
    }
    working.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(vol.with_data(working, ValueSpace::Normalized)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub volume_id: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TranslatedVolume {
    pub volume_id: String,
    pub path: PathBuf,
    pub volume: Volume,
    pub seconds: f64,
}

/// Translates every corrupted volume of a manifest, writing normalized
/// outputs as `<out_dir>/<volume_id>.vxm` and wall-clock times to
/// `<out_dir>/timing.csv`.
pub fn translate_batch(
    generator: &mut impl WindowTranslator,
    manifest: &DatasetManifest,
    manifest_dir: impl AsRef<Path>,
    cfg: &TranslateConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<TranslatedVolume>, TranslateError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut results = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.role == EntryRole::Corrupted) {
        let input = normalize_hu(&load_entry(manifest_dir.as_ref(), entry)?)?;
        let t0 = Instant::now();
        let volume = translate_volume(generator, &input, cfg)?;
        let seconds = t0.elapsed().as_secs_f64();
        let path = out_dir.join(format!("{}.vxm", entry.volume_id));
        save_volume(&volume, &path)?;
        results.push(TranslatedVolume {
            volume_id: entry.volume_id.clone(),
            path,
            volume,
            seconds,
        });
    }
    let mut timing = csv::Writer::from_path(out_dir.join("timing.csv"))?;
    for r in &results {
        timing.serialize(TimingRecord {
            volume_id: r.volume_id.clone(),
            seconds: r.seconds,
        })?;
    }
    timing.flush()?;
    Ok(results)
}

/// Returns the window unchanged and counts calls.
#[derive(Clone, Debug, Default)]
pub struct IdentityTranslator {
    pub n: usize,
    pub calls: usize,
}

impl IdentityTranslator {
    pub fn new(n: usize) -> Self {
        Self { n, calls: 0 }
    }
}

impl WindowTranslator for IdentityTranslator {
    fn n_channels(&self) -> usize {
        self.n
    }

    fn translate_window(&mut self, window: ArrayView3<f32>) -> Result<Array3<f32>, TranslateError> {
        self.calls += 1;
        Ok(window.to_owned())
    }
}
