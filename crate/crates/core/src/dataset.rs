//! Building, persisting and sampling the unpaired training corpus and the
//! paired evaluation set.
//!
//! Volumes are stored in HU next to a line-delimited JSON manifest. The
//! manifest's first line is a header carrying the format version, the
//! split and the full build configuration; every following line is one
//! [`ManifestEntry`]. Together they are enough to regenerate any volume
//! bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact_sim::{
    random_metal_count, select_metal_teeth, simulate_artifacts, MetalLabel, PhysicsParams, ProjectionGeometry,
    SimError, MAX_METALS,
};
use crate::phantoms::{generate_phantom, perturb_phantom_with_map, PhantomError, PhantomSpec, ToothIndexMap};
use crate::seeds::{substream, substream_seed};
use crate::volumes::{
    check_window_size, load_volume, normalize_hu, save_volume, DomainTag, SubvolumeWindow, ValueSpace, Volume,
    VolumeError,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("phantom id {0} appears in more than one role or split")]
    Leakage(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("domain {0} has no volumes to sample from")]
    EmptyDomain(&'static str),
    #[error("volume {id} has {slices} slices, fewer than the window size {n}")]
    TooFewSlices { id: String, slices: usize, n: usize },
    #[error("crop {crop} exceeds the {h}x{w} image")]
    CropTooLarge { crop: usize, h: usize, w: usize },
    #[error("manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("manifest entry {0} cannot be found")]
    MissingEntry(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntryRole {
    Clean,
    Corrupted,
    /// Binary metal label stored as a 0/1 HU volume.
    MetalMask,
}

/// Physics knobs shared by every simulated volume. The noise seed is
/// derived per volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSettings {
    pub metal_hu: f32,
    pub photon_count_i0: f32,
    pub beam_hardening_coeff: f32,
    pub photon_noise: bool,
}

impl Default for PhysicsSettings {
    fn default() -> Self {
        let p = PhysicsParams::default();
        Self {
            metal_hu: p.metal_hu,
            photon_count_i0: p.photon_count_i0,
            beam_hardening_coeff: p.beam_hardening_coeff,
            photon_noise: p.photon_noise,
        }
    }
}

impl PhysicsSettings {
    pub fn params(&self, noise_seed: u64) -> PhysicsParams {
        PhysicsParams {
            metal_hu: self.metal_hu,
            photon_count_i0: self.photon_count_i0,
            beam_hardening_coeff: self.beam_hardening_coeff,
            noise_seed,
            photon_noise: self.photon_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_clean: usize,
    pub n_artifact: usize,
    pub n_test_phantoms: usize,
    /// Metal counts simulated for every test phantom.
    pub test_m_values: Vec<usize>,
    /// Template for every phantom; its `seed` field is ignored.
    pub phantom: PhantomSpec,
    /// Apply the smooth anatomical warp on top of the phantom jitter.
    pub perturb: bool,
    pub physics: PhysicsSettings,
    pub geometry: ProjectionGeometry,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_clean: 24,
            n_artifact: 16,
            n_test_phantoms: 6,
            test_m_values: (1..=MAX_METALS).collect(),
            phantom: PhantomSpec::default(),
            perturb: true,
            physics: PhysicsSettings::default(),
            geometry: ProjectionGeometry::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.phantom.validate()?;
        self.geometry.validate_for(self.phantom.image_size.1)?;
        if let Some(&m) = self.test_m_values.iter().find(|&&m| m == 0 || m > MAX_METALS) {
            return Err(DatasetError::Config(format!(
                "metal count {m} outside 1..={MAX_METALS}"
            )));
        }
        let unique: BTreeSet<_> = self.test_m_values.iter().collect();
        if unique.len() != self.test_m_values.len() {
            return Err(DatasetError::Config("duplicate metal counts".into()));
        }
        if !(self.physics.photon_count_i0 > 0.0 && self.physics.photon_count_i0.is_finite()) {
            return Err(DatasetError::Config("photon count must be positive".into()));
        }
        Ok(())
    }

    fn phantom_seed(&self, label: &str) -> u64 {
        substream_seed(self.seed, &format!("phantom/{label}"))
    }
}

pub fn phantom_id(phantom_seed: u64) -> String {
    format!("ph-{phantom_seed:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_id: String,
    /// Relative to the manifest's directory.
    pub volume_path: String,
    pub domain: DomainTag,
    pub role: EntryRole,
    pub phantom_id: String,
    pub phantom_seed: u64,
    pub perturb_seed: Option<u64>,
    /// Number of metal fillings; 0 for clean volumes.
    pub m: usize,
    pub metal_seed: Option<u64>,
    pub tooth_ids: Vec<usize>,
    pub physics: Option<PhysicsParams>,
    pub reference_id: Option<String>,
    pub mask_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format_version: u32,
    split: Split,
    config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            let header = ManifestHeader {
                format_version: self.format_version,
                split: self.split,
                config: self.config.clone(),
            };
            serde_json::to_writer(&mut out, &header)?;
            out.write_all(b"\n")?;
            for entry in &self.entries {
                serde_json::to_writer(&mut out, entry)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let bad = |message: String| DatasetError::BadManifest {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header_line = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
        }
        Ok(Self {
            format_version: header.format_version,
            split: header.split,
            config: header.config,
            entries,
        })
    }

    pub fn entry(&self, volume_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.volume_id == volume_id)
    }

    pub fn phantom_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.phantom_id.as_str()).collect()
    }

    /// Corrupted test volumes with their clean reference and metal mask.
    pub fn paired_cases(&self) -> Result<Vec<PairedCase>, DatasetError> {
        self.entries
            .iter()
            .filter(|e| e.role == EntryRole::Corrupted && e.reference_id.is_some())
            .map(|corrupted| {
                let find = |id: &Option<String>| {
                    id.as_deref()
                        .and_then(|id| self.entry(id))
                        .cloned()
                        .ok_or_else(|| DatasetError::MissingEntry(format!("{id:?}")))
                };
                Ok(PairedCase {
                    reference: find(&corrupted.reference_id)?,
                    mask: find(&corrupted.mask_id)?,
                    corrupted: corrupted.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedCase {
    pub corrupted: ManifestEntry,
    pub reference: ManifestEntry,
    pub mask: ManifestEntry,
}

/// Phantom plus tooth map for a seed, including the optional warp.
fn make_phantom(
    config: &DatasetConfig,
    phantom_seed: u64,
) -> Result<(Volume, ToothIndexMap, Option<u64>), DatasetError> {
    let spec = PhantomSpec {
        seed: phantom_seed,
        ..config.phantom.clone()
    };
    let (vol, map) = generate_phantom(&spec)?;
    if config.perturb {
        let perturb_seed = substream_seed(phantom_seed, "perturb");
        let (vol, map) = perturb_phantom_with_map(&vol, &map, perturb_seed)?;
        Ok((vol, map, Some(perturb_seed)))
    } else {
        Ok((vol, map, None))
    }
}

fn mask_volume(template: &Volume, label: &MetalLabel) -> Result<Volume, VolumeError> {
    template.with_data(label.mask.mapv(|b| if b { 1.0 } else { 0.0 }), ValueSpace::Hu)
}

struct Job {
    entries: Vec<(ManifestEntry, Volume)>,
}

fn persist(out_dir: &Path, jobs: Vec<Job>) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut entries = Vec::new();
    for job in jobs {
        for (entry, vol) in job.entries {
            let path = out_dir.join(&entry.volume_path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            save_volume(&vol, &path)?;
            entries.push(entry);
        }
    }
    Ok(entries)
}

fn clean_entry(id: String, path: String, phantom_seed: u64, perturb_seed: Option<u64>) -> ManifestEntry {
    ManifestEntry {
        volume_id: id,
        volume_path: path,
        domain: DomainTag::YClean,
        role: EntryRole::Clean,
        phantom_id: phantom_id(phantom_seed),
        phantom_seed,
        perturb_seed,
        m: 0,
        metal_seed: None,
        tooth_ids: Vec::new(),
        physics: None,
        reference_id: None,
        mask_id: None,
    }
}

/// Clean phantoms into Y and corrupted phantoms into X, from disjoint
/// phantom seeds. Writes volumes under `out_dir/train/` and the manifest to
/// `out_dir/train.jsonl`.
pub fn build_training_corpus(
    config: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let mut tasks: Vec<(bool, usize)> = (0..config.n_clean).map(|i| (false, i)).collect();
    tasks.extend((0..config.n_artifact).map(|i| (true, i)));
    let jobs = tasks
        .into_par_iter()
        .map(|(artifact, i)| -> Result<Job, DatasetError> {
            let label = if artifact {
                format!("train-x-{i:03}")
            } else {
                format!("train-y-{i:03}")
            };
            let phantom_seed = config.phantom_seed(&label);
            let (clean, map, perturb_seed) = make_phantom(config, phantom_seed)?;
            let path = format!("train/{label}.vxm");
            if !artifact {
                let vol = clean.with_id(label.clone()).with_domain(DomainTag::YClean);
                let entry = clean_entry(label.clone(), path, phantom_seed, perturb_seed);
                return Ok(Job {
                    entries: vec![(entry, vol)],
                });
            }
            let mut rng = substream(phantom_seed, "metal-count");
            let m = random_metal_count(&mut rng);
            let metal_seed = substream_seed(phantom_seed, "metal");
            let metal = select_metal_teeth(&map, m, metal_seed)?;
            let physics = config.physics.params(substream_seed(phantom_seed, "noise"));
            let vol = simulate_artifacts(&clean, &metal, &config.geometry, &physics)?
                .with_id(label.clone())
                .with_domain(DomainTag::XArtifact);
            let entry = ManifestEntry {
                domain: DomainTag::XArtifact,
                role: EntryRole::Corrupted,
                m,
                metal_seed: Some(metal_seed),
                tooth_ids: metal.tooth_ids.clone(),
                physics: Some(physics),
                ..clean_entry(label.clone(), path, phantom_seed, perturb_seed)
            };
            Ok(Job {
                entries: vec![(entry, vol)],
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        split: Split::Train,
        config: config.clone(),
        entries: persist(out_dir, jobs)?,
    };
    check_unique_phantoms(&manifest)?;
    manifest.write(out_dir.join("train.jsonl"))?;
    Ok(manifest)
}

/// For every test phantom: the clean reference, one metal mask and one
/// corrupted volume per metal count. Labels are nested across metal counts
/// because they share one selection seed.
pub fn build_paired_testset(
    config: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    config.validate()?;
    if config.n_test_phantoms == 0 {
        return Err(DatasetError::Config("n_test_phantoms must be at least 1".into()));
    }
    let out_dir = out_dir.as_ref();
    let jobs = (0..config.n_test_phantoms)
        .into_par_iter()
        .map(|i| -> Result<Job, DatasetError> {
            let label = format!("test-{i:03}");
            let phantom_seed = config.phantom_seed(&label);
            let (clean, map, perturb_seed) = make_phantom(config, phantom_seed)?;
            let metal_seed = substream_seed(phantom_seed, "metal");
            let ref_id = format!("{label}-clean");
            let mut entries = vec![(
                clean_entry(ref_id.clone(), format!("test/{ref_id}.vxm"), phantom_seed, perturb_seed),
                clean.clone().with_id(ref_id.clone()).with_domain(DomainTag::YClean),
            )];
            for &m in &config.test_m_values {
                let metal = select_metal_teeth(&map, m, metal_seed)?;
                let mask_id = format!("{label}-m{m}-mask");
                let mut mask_entry = clean_entry(
                    mask_id.clone(),
                    format!("test/{mask_id}.vxm"),
                    phantom_seed,
                    perturb_seed,
                );
                mask_entry.domain = DomainTag::Unlabeled;
                mask_entry.role = EntryRole::MetalMask;
                mask_entry.m = m;
                mask_entry.metal_seed = Some(metal_seed);
                mask_entry.tooth_ids = metal.tooth_ids.clone();
                let mask_vol = mask_volume(&clean, &metal)?
                    .with_id(mask_id.clone())
                    .with_domain(DomainTag::Unlabeled);

                let id = format!("{label}-m{m}");
                let physics = config
                    .physics
                    .params(substream_seed(phantom_seed, &format!("noise-m{m}")));
                let vol = simulate_artifacts(&clean, &metal, &config.geometry, &physics)?
                    .with_id(id.clone())
                    .with_domain(DomainTag::XArtifact);
                let entry = ManifestEntry {
                    volume_id: id.clone(),
                    volume_path: format!("test/{id}.vxm"),
                    domain: DomainTag::XArtifact,
                    role: EntryRole::Corrupted,
                    physics: Some(physics),
                    reference_id: Some(ref_id.clone()),
                    mask_id: Some(mask_id),
                    ..mask_entry.clone()
                };
                entries.push((mask_entry, mask_vol));
                entries.push((entry, vol));
            }
            Ok(Job { entries })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        split: Split::Test,
        config: config.clone(),
        entries: persist(out_dir, jobs)?,
    };
    manifest.write(out_dir.join("test.jsonl"))?;
    Ok(manifest)
}

/// Within the training split every phantom feeds exactly one volume, so X
/// and Y never share anatomy.
fn check_unique_phantoms(manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.phantom_id.as_str()) {
            return Err(DatasetError::Leakage(e.phantom_id.clone()));
        }
    }
    Ok(())
}

/// Fails if any phantom id occurs in both manifests.
pub fn check_no_leakage(train: &DatasetManifest, test: &DatasetManifest) -> Result<(), DatasetError> {
    check_unique_phantoms(train)?;
    let test_ids = test.phantom_ids();
    match train.phantom_ids().into_iter().find(|id| test_ids.contains(id)) {
        Some(id) => Err(DatasetError::Leakage(id.to_string())),
        None => Ok(()),
    }
}

/// Regenerates the volume an entry describes from provenance alone.
pub fn reconstruct_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Volume, DatasetError> {
    let (clean, map, _) = make_phantom(&manifest.config, entry.phantom_seed)?;
    let vol = match entry.role {
        EntryRole::Clean => clean,
        EntryRole::MetalMask | EntryRole::Corrupted => {
            let seed = entry
                .metal_seed
                .ok_or_else(|| DatasetError::Config(format!("{} lacks a metal seed", entry.volume_id)))?;
            let metal = select_metal_teeth(&map, entry.m, seed)?;
            if entry.role == EntryRole::MetalMask {
                mask_volume(&clean, &metal)?
            } else {
                let physics = entry
                    .physics
                    .as_ref()
                    .ok_or_else(|| DatasetError::Config(format!("{} lacks physics", entry.volume_id)))?;
                simulate_artifacts(&clean, &metal, &manifest.config.geometry, physics)?
            }
        }
    };
    Ok(vol.with_id(entry.volume_id.clone()).with_domain(entry.domain))
}

pub fn load_entry(manifest_dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<Volume, DatasetError> {
    Ok(load_volume(manifest_dir.as_ref().join(&entry.volume_path))?)
}

/// Normalized training volumes held in memory for sampling.
#[derive(Clone, Debug)]
pub struct TrainingPool {
    pub x: Vec<PoolVolume>,
    pub y: Vec<PoolVolume>,
}

#[derive(Clone, Debug)]
pub struct PoolVolume {
    pub volume_id: String,
    pub phantom_id: String,
    pub data: Array3<f32>,
}

impl TrainingPool {
    pub fn load(manifest: &DatasetManifest, manifest_dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dir = manifest_dir.as_ref();
        let mut pool = TrainingPool {
            x: Vec::new(),
            y: Vec::new(),
        };
        for entry in &manifest.entries {
            let target = match (entry.domain, entry.role) {
                (DomainTag::XArtifact, EntryRole::Corrupted) => &mut pool.x,
                (DomainTag::YClean, EntryRole::Clean) => &mut pool.y,
                _ => continue,
            };
            let vol = normalize_hu(&load_entry(dir, entry)?)?;
            target.push(PoolVolume {
                volume_id: entry.volume_id.clone(),
                phantom_id: entry.phantom_id.clone(),
                data: vol.into_data(),
            });
        }
        Ok(pool)
    }

    pub fn from_volumes(x: Vec<PoolVolume>, y: Vec<PoolVolume>) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug)]
pub struct UnpairedBatch {
    pub x: Vec<SubvolumeWindow>,
    pub y: Vec<SubvolumeWindow>,
    pub x_sources: Vec<String>,
    pub y_sources: Vec<String>,
}

fn sample_window(
    volumes: &[PoolVolume],
    domain: &'static str,
    n: usize,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(SubvolumeWindow, String), DatasetError> {
    if volumes.is_empty() {
        return Err(DatasetError::EmptyDomain(domain));
    }
    let vol = &volumes[rng.random_range(0..volumes.len())];
    let (depth, h, w) = vol.data.dim();
    if depth < n {
        return Err(DatasetError::TooFewSlices {
            id: vol.volume_id.clone(),
            slices: depth,
            n,
        });
    }
    let start = rng.random_range(0..=depth - n);
    let (y0, x0, ch, cw) = match crop {
        Some(c) if c > h || c > w => return Err(DatasetError::CropTooLarge { crop: c, h, w }),
        Some(c) => (rng.random_range(0..=h - c), rng.random_range(0..=w - c), c, c),
        None => (0, 0, h, w),
    };
    let slices = vol
        .data
        .slice(s![start..start + n, y0..y0 + ch, x0..x0 + cw])
        .to_owned();
    Ok((SubvolumeWindow::new(slices, start)?, vol.phantom_id.clone()))
}

/// Draws `batch_size` X windows and `batch_size` Y windows independently,
/// each from a uniformly chosen volume, start slice and (optionally) square
/// in-plane crop.
pub fn sample_unpaired_batch(
    pool: &TrainingPool,
    n: usize,
    batch_size: usize,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<UnpairedBatch, DatasetError> {
    check_window_size(n)?;
    let mut batch = UnpairedBatch {
        x: Vec::with_capacity(batch_size),
        y: Vec::with_capacity(batch_size),
        x_sources: Vec::with_capacity(batch_size),
        y_sources: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let (w, src) = sample_window(&pool.x, "X", n, crop, rng)?;
        batch.x.push(w);
        batch.x_sources.push(src);
    }
    for _ in 0..batch_size {
        let (w, src) = sample_window(&pool.y, "Y", n, crop, rng)?;
        batch.y.push(w);
        batch.y_sources.push(src);
    }
    Ok(batch)
}

/// Counts of entries per `(role, m)`, for reporting.
pub fn summarize(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in &manifest.entries {
        *out.entry(format!("{:?}/m{}", e.role, e.m)).or_insert(0) += 1;
    }
    out
}
