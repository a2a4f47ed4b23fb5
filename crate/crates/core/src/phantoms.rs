//! Procedural head phantoms with a mandible arc and teeth.
//!
//! Each phantom is a stack of per-slice ellipse shapes whose parameters vary
//! smoothly with the slice position, so structures (and the artifacts they
//! later cause) change continuously through the volume. Shapes are rendered
//! with 4x4 supersampling; a voxel belongs to a tooth region only when all
//! of its subsamples fall inside that tooth.

use std::collections::BTreeSet;
use std::f32::consts::PI;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::substream;
use crate::volumes::{DomainTag, ValueSpace, Volume, VolumeError, HU_MAX, HU_MIN};

/// Smallest in-plane size that still fits the teeth on the arc.
pub const MIN_IMAGE_SIZE: usize = 64;
/// Teeth needed so that every arch class gets at least two.
pub const MIN_TEETH: usize = 10;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("image size {0}x{1} is too small to place the teeth (minimum {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE})")]
    ImageTooSmall(usize, usize),
    #[error("n_teeth = {0} is below the minimum of {MIN_TEETH}")]
    TooFewTeeth(usize),
    #[error("phantom needs at least one slice")]
    NoSlices,
    #[error("HU ordering must be air < tissue < bone < tooth, got {air} / {tissue} / {bone} / {tooth}")]
    BadIntensities {
        air: f32,
        tissue: f32,
        bone: f32,
        tooth: f32,
    },
    #[error("jitter magnitudes must be finite and non-negative")]
    BadJitter,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Per-structure perturbation magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomJitter {
    /// Relative perturbation of shape sizes and positions.
    pub geometry: f32,
    /// Per-tooth HU offset bound.
    pub tooth_hu: f32,
    /// Soft-tissue HU offset bound.
    pub tissue_hu: f32,
}

impl Default for PhantomJitter {
    fn default() -> Self {
        Self {
            geometry: 0.05,
            tooth_hu: 40.0,
            tissue_hu: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_slices: usize,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub n_teeth: usize,
    pub tissue_hu: f32,
    pub bone_hu: f32,
    pub tooth_hu: f32,
    pub air_hu: f32,
    /// `(z, y, x)` voxel spacing.
    pub spacing_mm: [f32; 3],
    pub jitter: PhantomJitter,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_slices: 12,
            image_size: (128, 128),
            n_teeth: 14,
            tissue_hu: 40.0,
            bone_hu: 900.0,
            tooth_hu: 1400.0,
            air_hu: -1000.0,
            spacing_mm: [2.0, 1.5, 1.5],
            jitter: PhantomJitter::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let (h, w) = self.image_size;
        if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
            return Err(PhantomError::ImageTooSmall(h, w));
        }
        if self.n_teeth < MIN_TEETH {
            return Err(PhantomError::TooFewTeeth(self.n_teeth));
        }
        if self.n_slices == 0 {
            return Err(PhantomError::NoSlices);
        }
        let ordered = self.air_hu < self.tissue_hu
            && self.tissue_hu < self.bone_hu
            && self.bone_hu < self.tooth_hu
            && self.tooth_hu - self.jitter.tooth_hu >= self.bone_hu
            && self.air_hu >= HU_MIN
            && self.tooth_hu + self.jitter.tooth_hu <= HU_MAX;
        if !ordered {
            return Err(PhantomError::BadIntensities {
                air: self.air_hu,
                tissue: self.tissue_hu,
                bone: self.bone_hu,
                tooth: self.tooth_hu,
            });
        }
        let j = &self.jitter;
        if [j.geometry, j.tooth_hu, j.tissue_hu]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
            || j.geometry >= 0.5
        {
            return Err(PhantomError::BadJitter);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArchPosition {
    BackLeft,
    SideLeft,
    Front,
    SideRight,
    BackRight,
}

impl ArchPosition {
    pub const ALL: [ArchPosition; 5] = [
        ArchPosition::BackLeft,
        ArchPosition::SideLeft,
        ArchPosition::Front,
        ArchPosition::SideRight,
        ArchPosition::BackRight,
    ];

    /// Class of a tooth at normalized arc position `t` in `[0, 1]`
    /// (0 = left end of the arch, 1 = right end).
    pub fn from_arc_position(t: f32) -> Self {
        match t {
            t if t < 0.2 => ArchPosition::BackLeft,
            t if t < 0.4 => ArchPosition::SideLeft,
            t if t < 0.6 => ArchPosition::Front,
            t if t < 0.8 => ArchPosition::SideRight,
            _ => ArchPosition::BackRight,
        }
    }

    pub fn is_back(self) -> bool {
        matches!(self, ArchPosition::BackLeft | ArchPosition::BackRight)
    }

    pub fn is_side(self) -> bool {
        matches!(self, ArchPosition::SideLeft | ArchPosition::SideRight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToothRegion {
    pub tooth_id: usize,
    /// Index along the arch, left to right.
    pub arc_index: usize,
    pub arch_position: ArchPosition,
    /// Sorted `(z, y, x)` voxel indices fully covered by the tooth.
    pub voxels: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToothIndexMap {
    pub shape: (usize, usize, usize),
    pub tooth_regions: Vec<ToothRegion>,
}

impl ToothIndexMap {
    pub fn region(&self, tooth_id: usize) -> Option<&ToothRegion> {
        self.tooth_regions.iter().find(|r| r.tooth_id == tooth_id)
    }

    pub fn count_in(&self, pred: impl Fn(ArchPosition) -> bool) -> usize {
        self.tooth_regions.iter().filter(|r| pred(r.arch_position)).count()
    }
}

/// Random shape parameters for one phantom, in normalized image
/// coordinates (`u`, `v` in `[-1, 1]`, `v` pointing posterior).
#[derive(Clone, Debug)]
struct Anatomy {
    head_radii: (f32, f32),
    head_center: (f32, f32),
    airway_center: (f32, f32),
    airway_radii: (f32, f32),
    arc_center_v: f32,
    arc_radii: (f32, f32),
    arc_open: f32,
    bone_thickness: f32,
    teeth: Vec<ToothShape>,
    tissue_offset: f32,
    // Smooth through-plane variation of the arc and head sizes.
    arc_taper: f32,
    head_taper: f32,
}

#[derive(Clone, Debug)]
struct ToothShape {
    angle: f32,
    tangential_radius: f32,
    radial_radius: f32,
    z_center: f32,
    z_half: f32,
    hu_offset: f32,
}

fn jittered(rng: &mut ChaCha8Rng, base: f32, rel: f32) -> f32 {
    base * (1.0 + rel * rng.random_range(-1.0f32..=1.0))
}

impl Anatomy {
    fn sample(spec: &PhantomSpec) -> Self {
        let mut rng = substream(spec.seed, "phantom-anatomy");
        let g = spec.jitter.geometry;
        let arc_open = jittered(&mut rng, 0.16, g);
        let n = spec.n_teeth;
        let span = PI - 2.0 * arc_open;
        let step = span / n as f32;
        // Approximate arc length between neighbouring tooth centres.
        let spacing = step * 0.52;
        let teeth = (0..n)
            .map(|i| {
                // Arc position runs left to right: angle from pi - open down to open.
                let angle = PI - arc_open - step * (i as f32 + 0.5);
                let pos = i as f32 / (n - 1) as f32;
                let molar = (2.0 * pos - 1.0).abs();
                ToothShape {
                    angle: angle + 0.5 * step * g * rng.random_range(-1.0f32..=1.0),
                    tangential_radius: jittered(&mut rng, spacing * (0.28 + 0.06 * molar), g),
                    radial_radius: jittered(&mut rng, 0.052 + 0.012 * molar, g),
                    z_center: 0.5 + 0.06 * rng.random_range(-1.0f32..=1.0),
                    z_half: jittered(&mut rng, 0.34, g),
                    hu_offset: spec.jitter.tooth_hu * rng.random_range(-1.0f32..=1.0),
                }
            })
            .collect();
        Anatomy {
            head_radii: (jittered(&mut rng, 0.84, g), jittered(&mut rng, 0.88, g)),
            head_center: (0.0, jittered(&mut rng, 0.03, 2.0 * g)),
            airway_center: (0.0, jittered(&mut rng, 0.50, g)),
            airway_radii: (jittered(&mut rng, 0.10, g), jittered(&mut rng, 0.07, g)),
            arc_center_v: jittered(&mut rng, 0.22, g),
            arc_radii: (jittered(&mut rng, 0.48, g), jittered(&mut rng, 0.56, g)),
            arc_open,
            bone_thickness: jittered(&mut rng, 0.16, g),
            teeth,
            tissue_offset: spec.jitter.tissue_hu * rng.random_range(-1.0f32..=1.0),
            arc_taper: 0.06 * rng.random_range(-1.0f32..=1.0),
            head_taper: 0.05 * rng.random_range(-1.0f32..=1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Material {
    Air,
    Tissue,
    Bone,
    Tooth(usize),
}

/// Shape parameters evaluated at one through-plane position `t` in `[0, 1]`.
struct SliceGeometry<'a> {
    anatomy: &'a Anatomy,
    head_radii: (f32, f32),
    arc_radii: (f32, f32),
    bone_thickness: f32,
    teeth: Vec<Option<(f32, f32, f32, f32, f32)>>,
}

impl<'a> SliceGeometry<'a> {
    fn at(anatomy: &'a Anatomy, t: f32) -> Self {
        let c = t - 0.5;
        let head_scale = 1.0 + anatomy.head_taper * c - 0.08 * c * c;
        let arc_scale = 1.0 + anatomy.arc_taper * c;
        let arc_radii = (anatomy.arc_radii.0 * arc_scale, anatomy.arc_radii.1 * arc_scale);
        let teeth = anatomy
            .teeth
            .iter()
            .map(|tooth| {
                let dz = (t - tooth.z_center) / tooth.z_half;
                if dz.abs() >= 1.0 {
                    return None;
                }
                let scale = (1.0 - dz * dz).sqrt();
                let (s, co) = tooth.angle.sin_cos();
                let cu = arc_radii.0 * co;
                let cv = anatomy.arc_center_v - arc_radii.1 * s;
                // Arc tangent direction at this angle.
                let (tu, tv) = (-arc_radii.0 * s, -arc_radii.1 * co);
                Some((
                    cu,
                    cv,
                    tv.atan2(tu),
                    tooth.tangential_radius * scale,
                    tooth.radial_radius * scale,
                ))
            })
            .collect();
        SliceGeometry {
            anatomy,
            head_radii: (anatomy.head_radii.0 * head_scale, anatomy.head_radii.1 * head_scale),
            arc_radii,
            bone_thickness: anatomy.bone_thickness * (1.0 - 0.3 * c),
            teeth,
        }
    }

    fn classify(&self, u: f32, v: f32) -> Material {
        let a = self.anatomy;
        let hu = (u - a.head_center.0) / self.head_radii.0;
        let hv = (v - a.head_center.1) / self.head_radii.1;
        if hu * hu + hv * hv > 1.0 {
            return Material::Air;
        }
        for (i, tooth) in self.teeth.iter().enumerate() {
            if let Some((cu, cv, dir, rt, rr)) = *tooth {
                let (s, c) = dir.sin_cos();
                let du = u - cu;
                let dv = v - cv;
                let along = du * c + dv * s;
                let across = -du * s + dv * c;
                if (along / rt).powi(2) + (across / rr).powi(2) <= 1.0 {
                    return Material::Tooth(i);
                }
            }
        }
        // Mandible: band around the elliptical arc, restricted to the arc's
        // angular span.
        let eu = u / self.arc_radii.0;
        let ev = (a.arc_center_v - v) / self.arc_radii.1;
        let rho = (eu * eu + ev * ev).sqrt();
        let angle = ev.atan2(eu);
        if angle >= a.arc_open * 0.6 && angle <= PI - a.arc_open * 0.6 && (rho - 1.0).abs() <= self.bone_thickness * 0.5
        {
            return Material::Bone;
        }
        let au = (u - a.airway_center.0) / a.airway_radii.0;
        let av = (v - a.airway_center.1) / a.airway_radii.1;
        if au * au + av * av <= 1.0 {
            return Material::Air;
        }
        Material::Tissue
    }
}

fn slice_position(z: usize, n_slices: usize) -> f32 {
    if n_slices == 1 {
        0.5
    } else {
        z as f32 / (n_slices - 1) as f32
    }
}

/// Renders a phantom volume in HU together with its tooth regions.
/// Deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, ToothIndexMap), PhantomError> {
    spec.validate()?;
    let anatomy = Anatomy::sample(spec);
    let (h, w) = spec.image_size;
    let s = spec.n_slices;
    let mut data = Array3::<f32>::zeros((s, h, w));
    let mut regions: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); spec.n_teeth];
    let tissue = spec.tissue_hu + anatomy.tissue_offset;
    let inv = 1.0 / SUPERSAMPLE as f32;
    let scale = 2.0 / h.max(w) as f32;

    for z in 0..s {
        let geometry = SliceGeometry::at(&anatomy, slice_position(z, s));
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f32;
                let mut whole_tooth: Option<Option<usize>> = None;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f32 + (sx as f32 + 0.5) * inv;
                        let py = y as f32 + (sy as f32 + 0.5) * inv;
                        let u = (px - w as f32 / 2.0) * scale;
                        let v = (py - h as f32 / 2.0) * scale;
                        let m = geometry.classify(u, v);
                        sum += match m {
                            Material::Air => spec.air_hu,
                            Material::Tissue => tissue,
                            Material::Bone => spec.bone_hu,
                            Material::Tooth(i) => spec.tooth_hu + anatomy.teeth[i].hu_offset,
                        };
                        let id = match m {
                            Material::Tooth(i) => Some(i),
                            _ => None,
                        };
                        whole_tooth = match whole_tooth {
                            None => Some(id),
                            Some(prev) if prev == id => Some(prev),
                            Some(_) => Some(None),
                        };
                    }
                }
                data[[z, y, x]] = sum * inv * inv;
                if let Some(Some(i)) = whole_tooth {
                    regions[i].push((z, y, x));
                }
            }
        }
    }

    let n = spec.n_teeth;
    let tooth_regions = regions
        .into_iter()
        .enumerate()
        .map(|(i, voxels)| ToothRegion {
            tooth_id: i,
            arc_index: i,
            arch_position: ArchPosition::from_arc_position(i as f32 / (n - 1) as f32),
            voxels,
        })
        .collect();
    let volume = Volume::new(
        data,
        spec.spacing_mm,
        ValueSpace::Hu,
        format!("phantom-{}", spec.seed),
        DomainTag::Unlabeled,
    )?;
    Ok((
        volume,
        ToothIndexMap {
            shape: (s, h, w),
            tooth_regions,
        },
    ))
}

/// Smooth random warp and soft-tissue intensity jitter.
///
/// The warp is a low-frequency displacement of at most 5% of the half image
/// size, applied with nearest-neighbour resampling so no new intensity
/// values appear. Voxels in the soft-tissue band get a smooth offset of at
/// most 30 HU.
pub fn perturb_phantom(vol: &Volume, seed: u64) -> Result<Volume, VolumeError> {
    let warp = Warp::sample(vol.shape(), seed);
    let data = warp.apply(vol.data());
    vol.with_data(data, ValueSpace::Hu)
}

/// [`perturb_phantom`] that also carries the tooth regions through the warp.
pub fn perturb_phantom_with_map(
    vol: &Volume,
    map: &ToothIndexMap,
    seed: u64,
) -> Result<(Volume, ToothIndexMap), VolumeError> {
    let warp = Warp::sample(vol.shape(), seed);
    let data = warp.apply(vol.data());
    let (s, h, w) = vol.shape();
    let mut owner = Array3::<i32>::from_elem((s, h, w), -1);
    for (k, region) in map.tooth_regions.iter().enumerate() {
        for &idx in &region.voxels {
            owner[idx] = k as i32;
        }
    }
    let mut voxels: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); map.tooth_regions.len()];
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = warp.source(z, y, x);
                let k = owner[[z, sy, sx]];
                if k >= 0 {
                    voxels[k as usize].push((z, y, x));
                }
            }
        }
    }
    let tooth_regions = map
        .tooth_regions
        .iter()
        .zip(voxels)
        .map(|(r, voxels)| ToothRegion { voxels, ..r.clone() })
        .collect();
    Ok((
        vol.with_data(data, ValueSpace::Hu)?,
        ToothIndexMap {
            shape: map.shape,
            tooth_regions,
        },
    ))
}

struct Warp {
    shape: (usize, usize, usize),
    // Per-axis displacement: amplitude (px), spatial frequencies, phase.
    modes: [(f32, f32, f32, f32, f32); 2],
    intensity: (f32, f32, f32, f32),
}

const TISSUE_BAND: (f32, f32) = (-500.0, 500.0);
const MAX_TISSUE_JITTER: f32 = 30.0;
const MAX_WARP: f32 = 0.05;

impl Warp {
    fn sample(shape: (usize, usize, usize), seed: u64) -> Self {
        let mut rng = substream(seed, "phantom-perturb");
        let (_, h, w) = shape;
        let half = h.min(w) as f32 / 2.0;
        let mode = |rng: &mut ChaCha8Rng| {
            (
                MAX_WARP * half * rng.random_range(0.5f32..=1.0),
                rng.random_range(0.5f32..=1.0) * PI / half,
                rng.random_range(0.5f32..=1.0) * PI / half,
                rng.random_range(0.0f32..2.0 * PI),
                rng.random_range(-0.3f32..=0.3),
            )
        };
        let modes = [mode(&mut rng), mode(&mut rng)];
        let intensity = (
            MAX_TISSUE_JITTER * rng.random_range(0.5f32..=1.0),
            rng.random_range(0.5f32..=1.5) * PI / half,
            rng.random_range(0.5f32..=1.5) * PI / half,
            rng.random_range(0.0f32..2.0 * PI),
        );
        Warp {
            shape,
            modes,
            intensity,
        }
    }

    fn source(&self, z: usize, y: usize, x: usize) -> (usize, usize) {
        let (s, h, w) = self.shape;
        let t = slice_position(z, s) - 0.5;
        let (yf, xf) = (y as f32 - h as f32 / 2.0, x as f32 - w as f32 / 2.0);
        let disp =
            |&(amp, fy, fx, phase, dz): &(f32, f32, f32, f32, f32)| amp * (fy * yf + fx * xf + phase + dz * t).sin();
        let sy = (y as f32 + disp(&self.modes[0])).round();
        let sx = (x as f32 + disp(&self.modes[1])).round();
        (
            sy.clamp(0.0, (h - 1) as f32) as usize,
            sx.clamp(0.0, (w - 1) as f32) as usize,
        )
    }

    fn apply(&self, data: &Array3<f32>) -> Array3<f32> {
        let (amp, fy, fx, phase) = self.intensity;
        let (_, h, w) = self.shape;
        Array3::from_shape_fn(self.shape, |(z, y, x)| {
            let (sy, sx) = self.source(z, y, x);
            let v = data[[z, sy, sx]];
            if v > TISSUE_BAND.0 && v < TISSUE_BAND.1 {
                let (yf, xf) = (y as f32 - h as f32 / 2.0, x as f32 - w as f32 / 2.0);
                (v + amp * (fy * yf + fx * xf + phase).sin()).clamp(HU_MIN, HU_MAX)
            } else {
                v
            }
        })
    }
}

/// Number of 6-connected components of voxels at or above `threshold`.
pub fn count_components(vol: &Volume, threshold: f32) -> usize {
    let data = vol.data();
    let (s, h, w) = data.dim();
    let mut seen = Array3::from_elem((s, h, w), false);
    let mut count = 0;
    let mut stack = Vec::new();
    for (idx, &v) in data.indexed_iter() {
        if v < threshold || seen[idx] {
            continue;
        }
        count += 1;
        seen[idx] = true;
        stack.push(idx);
        while let Some((z, y, x)) = stack.pop() {
            let neighbours = [
                (z.wrapping_sub(1), y, x),
                (z + 1, y, x),
                (z, y.wrapping_sub(1), x),
                (z, y + 1, x),
                (z, y, x.wrapping_sub(1)),
                (z, y, x + 1),
            ];
            for n in neighbours {
                if n.0 < s && n.1 < h && n.2 < w && !seen[n] && data[n] >= threshold {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    count
}

/// Teeth counted as dense components above the bone/tooth midpoint.
pub fn count_teeth(vol: &Volume, spec: &PhantomSpec) -> usize {
    count_components(vol, 0.5 * (spec.bone_hu + spec.tooth_hu))
}

/// Every tooth id in the map, for convenience in set logic.
pub fn tooth_ids(map: &ToothIndexMap) -> BTreeSet<usize> {
    map.tooth_regions.iter().map(|r| r.tooth_id).collect()
}
