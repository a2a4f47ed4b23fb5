//! Metal artifact simulation: insert metal into a clean phantom, project
//! each slice to a parallel-beam sinogram, corrupt the line integrals with
//! beam hardening and photon starvation, and reconstruct with filtered back
//! projection.
//!
//! Images handed to the projector are attenuation maps in units of
//! 1/pixel, so sinogram values are dimensionless line integrals.

use std::collections::BTreeSet;
use std::f32::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantoms::{ArchPosition, ToothIndexMap};
use crate::seeds::{substream, substream_seed};
use crate::volumes::{ValueSpace, Volume, VolumeError, HU_MAX, HU_MIN};

/// Linear attenuation of water, 1/mm.
pub const MU_WATER_PER_MM: f32 = 0.02;
pub const MAX_METALS: usize = 8;
const RAY_STEP: f32 = 0.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("metal count m = {0} outside 1..={MAX_METALS}")]
    MetalCount(usize),
    #[error("not enough {class} teeth: need {needed}, have {available}")]
    InsufficientTeeth {
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("geometry has {geometry:?}, data has {data:?}")]
    ShapeMismatch {
        geometry: (usize, usize),
        data: (usize, usize),
    },
    #[error("invalid projection geometry: {0}")]
    BadGeometry(String),
    #[error("negative line integral {value} at angle {angle}, detector {detector}")]
    NegativeLineIntegral { angle: usize, detector: usize, value: f32 },
    #[error("output {0}x{1} exceeds the detector field of view ({2} pixels)")]
    FieldOfView(usize, usize, f32),
    #[error("metal mask shape {mask:?} does not match volume shape {volume:?}")]
    MaskMismatch {
        mask: (usize, usize, usize),
        volume: (usize, usize, usize),
    },
    #[error("photon count must be positive, got {0}")]
    BadPhotonCount(f32),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BeamModel {
    #[default]
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionGeometry {
    /// Uniform over `[0, pi)`.
    pub n_angles: usize,
    pub n_detectors: usize,
    /// Detector pitch in image pixels.
    pub detector_spacing: f32,
    pub beam_model: BeamModel,
}

impl Default for ProjectionGeometry {
    fn default() -> Self {
        Self::for_width(128)
    }
}

impl ProjectionGeometry {
    /// 180 angles and about 1.5 detectors per image column.
    pub fn for_width(width: usize) -> Self {
        Self {
            n_angles: 180,
            n_detectors: (width * 3).div_ceil(2),
            detector_spacing: 1.0,
            beam_model: BeamModel::Parallel,
        }
    }

    pub fn validate_for(&self, width: usize) -> Result<(), SimError> {
        if self.n_angles < 16 {
            return Err(SimError::BadGeometry(format!(
                "n_angles = {} is below 16",
                self.n_angles
            )));
        }
        if self.n_detectors < width {
            return Err(SimError::BadGeometry(format!(
                "n_detectors = {} is below the image width {width}",
                self.n_detectors
            )));
        }
        if !(self.detector_spacing.is_finite() && self.detector_spacing > 0.0) {
            return Err(SimError::BadGeometry("detector spacing must be positive".into()));
        }
        Ok(())
    }

    fn angle(&self, k: usize) -> f32 {
        k as f32 * PI / self.n_angles as f32
    }

    fn detector_offset(&self, j: usize) -> f32 {
        (j as f32 - (self.n_detectors as f32 - 1.0) / 2.0) * self.detector_spacing
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    /// `(n_angles, n_detectors)`.
    pub data: Array2<f32>,
    pub geometry: ProjectionGeometry,
}

impl Sinogram {
    pub fn zeros(geometry: &ProjectionGeometry) -> Self {
        Self {
            data: Array2::zeros((geometry.n_angles, geometry.n_detectors)),
            geometry: geometry.clone(),
        }
    }

    fn check_non_negative(&self) -> Result<(), SimError> {
        match self.data.indexed_iter().find(|(_, v)| !(**v >= 0.0)) {
            Some(((angle, detector), &value)) => Err(SimError::NegativeLineIntegral { angle, detector, value }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    pub metal_hu: f32,
    /// Incident photons per ray.
    pub photon_count_i0: f32,
    /// Quadratic penalty on the metal path length.
    pub beam_hardening_coeff: f32,
    pub noise_seed: u64,
    /// Poisson noise on/off; off evaluates the expected count.
    pub photon_noise: bool,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            metal_hu: 3000.0,
            photon_count_i0: 2e4,
            beam_hardening_coeff: 1.5,
            noise_seed: 0,
            photon_noise: true,
        }
    }
}

/// Selected teeth and their voxel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalLabel {
    pub mask: Array3<bool>,
    pub m: usize,
    /// In selection order; a label for `m` metals uses the first `m`.
    pub tooth_ids: Vec<usize>,
}

impl MetalLabel {
    pub fn empty(shape: (usize, usize, usize)) -> Self {
        Self {
            mask: Array3::from_elem(shape, false),
            m: 0,
            tooth_ids: Vec::new(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub fn hu_to_attenuation(hu: f32) -> f32 {
    (MU_WATER_PER_MM * (1.0 + hu / 1000.0)).max(0.0)
}

pub fn attenuation_to_hu(mu: f32) -> f32 {
    (mu / MU_WATER_PER_MM - 1.0) * 1000.0
}

/// Orders all eight metal teeth for `seed`: two random back teeth, the back
/// teeth nearest to each of them, two front teeth, then two of the
/// remaining side teeth.
pub fn metal_tooth_order(map: &ToothIndexMap, seed: u64) -> Result<Vec<usize>, SimError> {
    let mut rng = substream(seed, "metal-teeth");
    let class = |pred: fn(ArchPosition) -> bool| -> Vec<usize> {
        map.tooth_regions
            .iter()
            .filter(|r| pred(r.arch_position) && !r.voxels.is_empty())
            .map(|r| r.tooth_id)
            .collect()
    };
    let back = class(ArchPosition::is_back);
    let front = class(|p| p == ArchPosition::Front);
    let side = class(ArchPosition::is_side);
    for (name, have, need) in [("back", &back, 4), ("front", &front, 2), ("side", &side, 2)] {
        if have.len() < need {
            return Err(SimError::InsufficientTeeth {
                class: name,
                needed: need,
                available: have.len(),
            });
        }
    }
    let arc = |id: usize| map.region(id).map(|r| r.arc_index as i64).unwrap_or(0);

    let mut order: Vec<usize> = back.choose_multiple(&mut rng, 2).copied().collect();
    for anchor in [order[0], order[1]] {
        let mut candidates: Vec<usize> = back.iter().copied().filter(|id| !order.contains(id)).collect();
        candidates.shuffle(&mut rng);
        // Stable sort keeps the shuffled order among equally close teeth.
        candidates.sort_by_key(|&id| (arc(id) - arc(anchor)).abs());
        order.push(candidates[0]);
    }
    order.extend(front.choose_multiple(&mut rng, 2).copied());
    order.extend(side.choose_multiple(&mut rng, 2).copied());
    Ok(order)
}

pub fn select_metal_teeth(map: &ToothIndexMap, m: usize, seed: u64) -> Result<MetalLabel, SimError> {
    if !(1..=MAX_METALS).contains(&m) {
        return Err(SimError::MetalCount(m));
    }
    let order = metal_tooth_order(map, seed)?;
    let tooth_ids = order[..m].to_vec();
    let mut mask = Array3::from_elem(map.shape, false);
    for id in &tooth_ids {
        if let Some(region) = map.region(*id) {
            for &idx in &region.voxels {
                mask[idx] = true;
            }
        }
    }
    Ok(MetalLabel { mask, m, tooth_ids })
}

fn bilinear(img: &ArrayView2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |yy: i64, xx: i64| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
}

/// Row and column ranges (inclusive) holding every non-zero pixel.
fn support_box(slice: ArrayView2<f32>) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in slice.indexed_iter() {
        if v != 0.0 {
            b = Some(match b {
                None => (y, y, x, x),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
            });
        }
    }
    b
}

/// Parameter interval where `origin + t * dir` lies in `[lo, hi]`.
fn slab(origin: f32, dir: f32, lo: f32, hi: f32) -> Option<(f32, f32)> {
    if dir.abs() < 1e-12 {
        return (origin >= lo && origin <= hi).then_some((f32::NEG_INFINITY, f32::INFINITY));
    }
    let (a, b) = ((lo - origin) / dir, (hi - origin) / dir);
    Some((a.min(b), a.max(b)))
}

/// Parallel-beam line integrals of `slice` (attenuation per pixel) by
/// bilinear sampling every half pixel along each ray.
pub fn forward_project(slice: ArrayView2<f32>, geom: &ProjectionGeometry) -> Result<Sinogram, SimError> {
    let (h, w) = slice.dim();
    geom.validate_for(w)?;
    if geom.n_detectors < h {
        return Err(SimError::ShapeMismatch {
            geometry: (geom.n_detectors, geom.n_detectors),
            data: (h, w),
        });
    }
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let half = 0.5 * ((h * h + w * w) as f32).sqrt() + 1.0;
    let n_steps = (2.0 * half / RAY_STEP).ceil() as usize + 1;
    let mut data = Array2::zeros((geom.n_angles, geom.n_detectors));
    // Samples whose bilinear footprint misses every non-zero pixel add
    // exactly zero, so each ray only walks the stretch crossing the
    // bounding box of the support.
    let Some((y_lo, y_hi, x_lo, x_hi)) = support_box(slice) else {
        return Ok(Sinogram {
            data,
            geometry: geom.clone(),
        });
    };
    let (bx0, bx1) = (x_lo as f32 - 1.0, x_hi as f32 + 1.0);
    let (by0, by1) = (y_lo as f32 - 1.0, y_hi as f32 + 1.0);
    for (k, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        let (sin, cos) = geom.angle(k).sin_cos();
        for (j, out) in row.iter_mut().enumerate() {
            let s = geom.detector_offset(j);
            let (ax, ay) = (cx + s * cos, cy + s * sin);
            let Some((t0, t1)) = slab(ax, -sin, bx0, bx1).and_then(|(a0, a1)| {
                let (b0, b1) = slab(ay, cos, by0, by1)?;
                let (lo, hi) = (a0.max(b0), a1.min(b1));
                (lo <= hi).then_some((lo, hi))
            }) else {
                continue;
            };
            let (t0, t1) = (t0.max(-half), t1.min(half));
            let first = (((t0 + half) / RAY_STEP).floor() as i64 - 1).max(0) as usize;
            let last = ((((t1 + half) / RAY_STEP).ceil() as i64 + 1).max(0) as usize).min(n_steps - 1);
            let mut acc = 0.0f32;
            for step in first..=last {
                let t = -half + step as f32 * RAY_STEP;
                let x = cx + s * cos - t * sin;
                let y = cy + s * sin + t * cos;
                if x > -1.0 && y > -1.0 && x < w as f32 && y < h as f32 {
                    acc += bilinear(&slice, x, y);
                }
            }
            *out = acc * RAY_STEP;
        }
    }
    Ok(Sinogram {
        data,
        geometry: geom.clone(),
    })
}

/// Applies beam hardening on the metal path and photon-starvation noise.
///
/// `p' = p_clean + p_metal + c * p_metal^2`; counts are Poisson with mean
/// `I0 * exp(-p')`, floored at one, and converted back with `-ln(n / I0)`.
/// With noise off the expected count is used, with the same floor.
pub fn corrupt_sinogram(clean: &Sinogram, metal_only: &Sinogram, params: &PhysicsParams) -> Result<Sinogram, SimError> {
    if clean.geometry != metal_only.geometry || clean.data.dim() != metal_only.data.dim() {
        return Err(SimError::ShapeMismatch {
            geometry: clean.data.dim(),
            data: metal_only.data.dim(),
        });
    }
    clean.check_non_negative()?;
    metal_only.check_non_negative()?;
    let i0 = params.photon_count_i0;
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(SimError::BadPhotonCount(i0));
    }
    let cap = i0.ln();
    let mut rng = substream(params.noise_seed, "photon-noise");
    let mut data = Array2::zeros(clean.data.dim());
    for ((out, &pc), &pm) in data.iter_mut().zip(clean.data.iter()).zip(metal_only.data.iter()) {
        let p = pc + pm + params.beam_hardening_coeff * pm * pm;
        *out = if params.photon_noise {
            let mean = f64::from(i0) * (-f64::from(p)).exp();
            let counts = if mean > 0.0 {
                Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(0.0)
            } else {
                0.0
            };
            let counts = counts.max(1.0);
            (-(counts / f64::from(i0)).ln()) as f32
        } else {
            p.min(cap)
        };
    }
    Ok(Sinogram {
        data,
        geometry: clean.geometry.clone(),
    })
}

/// Frequency response of the band-limited Ram-Lak filter for a padded
/// projection length, built from its spatial kernel so the DC term is exact.
fn ramp_filter(padded: usize, spacing: f32) -> Vec<Complex<f32>> {
    let mut kernel = vec![Complex::new(0.0f32, 0.0); padded];
    let tau = spacing;
    kernel[0].re = 1.0 / (4.0 * tau * tau);
    for n in 1..padded / 2 {
        if n % 2 == 1 {
            let v = -1.0 / (PI * PI * (n * n) as f32 * tau * tau);
            kernel[n].re = v;
            kernel[padded - n].re = v;
        }
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(padded).process(&mut kernel);
    kernel
}

/// Ram-Lak filtered back projection onto an `out_size` grid centred on the
/// rotation axis.
pub fn fbp_reconstruct(sino: &Sinogram, out_size: (usize, usize)) -> Result<Array2<f32>, SimError> {
    let geom = &sino.geometry;
    if sino.data.dim() != (geom.n_angles, geom.n_detectors) {
        return Err(SimError::ShapeMismatch {
            geometry: (geom.n_angles, geom.n_detectors),
            data: sino.data.dim(),
        });
    }
    let (h, w) = out_size;
    let span = geom.n_detectors as f32 * geom.detector_spacing;
    if h as f32 > span || w as f32 > span || h == 0 || w == 0 {
        return Err(SimError::FieldOfView(h, w, span));
    }
    let n_det = geom.n_detectors;
    let padded = (2 * n_det).next_power_of_two();
    let response = ramp_filter(padded, geom.detector_spacing);
    let mut planner = FftPlanner::<f32>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let mut filtered = Array2::<f32>::zeros((geom.n_angles, n_det));
    let mut buf = vec![Complex::new(0.0f32, 0.0); padded];
    for (row, mut out) in sino.data.outer_iter().zip(filtered.outer_iter_mut()) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(response.iter()) {
            *b *= r;
        }
        inv.process(&mut buf);
        let norm = geom.detector_spacing / padded as f32;
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o = b.re * norm;
        }
    }

    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let centre = (n_det as f32 - 1.0) / 2.0;
    let trig: Vec<(f32, f32)> = (0..geom.n_angles).map(|k| geom.angle(k).sin_cos()).collect();
    let scale = PI / geom.n_angles as f32;
    let mut image = Array2::<f32>::zeros((h, w));
    for ((y, x), out) in image.indexed_iter_mut() {
        let px = x as f32 - cx;
        let py = y as f32 - cy;
        let mut acc = 0.0f32;
        for (k, &(sin, cos)) in trig.iter().enumerate() {
            let pos = (px * cos + py * sin) / geom.detector_spacing + centre;
            let i0 = pos.floor();
            let f = pos - i0;
            let i0 = i0 as i64;
            if i0 >= 0 && (i0 as usize) + 1 < n_det {
                let row = filtered.row(k);
                acc += (1.0 - f) * row[i0 as usize] + f * row[i0 as usize + 1];
            }
        }
        *out = acc * scale;
    }
    Ok(image)
}

/// Per-slice insert, project, corrupt and reconstruct.
///
/// Every slice passes through the same projection and reconstruction so the
/// whole volume shares the reconstruction's characteristics. Each slice
/// draws noise from its own substream of `params.noise_seed`.
pub fn simulate_artifacts(
    clean: &Volume,
    label: &MetalLabel,
    geom: &ProjectionGeometry,
    params: &PhysicsParams,
) -> Result<Volume, SimError> {
    if clean.value_space() != ValueSpace::Hu {
        return Err(VolumeError::WrongValueSpace {
            expected: ValueSpace::Hu,
            actual: clean.value_space(),
        }
        .into());
    }
    let shape = clean.shape();
    if label.mask.dim() != shape {
        return Err(SimError::MaskMismatch {
            mask: label.mask.dim(),
            volume: shape,
        });
    }
    let (s, h, w) = shape;
    geom.validate_for(w)?;
    let pixel_mm = clean.spacing_mm()[2];
    let metal_mu = hu_to_attenuation(params.metal_hu) * pixel_mm;

    let slices: Vec<Array2<f32>> = (0..s)
        .into_par_iter()
        .map(|z| -> Result<Array2<f32>, SimError> {
            let hu = clean.data().index_axis(Axis(0), z);
            let mask = label.mask.index_axis(Axis(0), z);
            let background = Array2::from_shape_fn((h, w), |idx| {
                if mask[idx] {
                    0.0
                } else {
                    hu_to_attenuation(hu[idx]) * pixel_mm
                }
            });
            let p_clean = forward_project(background.view(), geom)?;
            let p_metal = if mask.iter().any(|&b| b) {
                let metal = mask.mapv(|b| if b { metal_mu } else { 0.0 });
                forward_project(metal.view(), geom)?
            } else {
                Sinogram::zeros(geom)
            };
            let slice_params = PhysicsParams {
                noise_seed: substream_seed(params.noise_seed, &format!("slice-{z}")),
                ..params.clone()
            };
            let corrupted = corrupt_sinogram(&p_clean, &p_metal, &slice_params)?;
            let recon = fbp_reconstruct(&corrupted, (h, w))?;
            Ok(recon.mapv(|mu| attenuation_to_hu(mu / pixel_mm).clamp(HU_MIN, HU_MAX)))
        })
        .collect::<Result<_, _>>()?;

    let mut data = Array3::zeros(shape);
    for (z, slice) in slices.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), z).assign(&slice);
    }
    Ok(clean.with_data(data, ValueSpace::Hu)?)
}

/// Pixels of a reference slice that lie inside the inscribed field-of-view
/// disk and at least two pixels away from any intensity edge (their 5x5
/// neighbourhood spans less than 50 HU).
pub fn interior_mask(reference: ArrayView2<f32>) -> Array2<bool> {
    let (h, w) = reference.dim();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let radius = 0.47 * h.min(w) as f32;
    Array2::from_shape_fn((h, w), |(y, x)| {
        if ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() >= radius {
            return false;
        }
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for yy in y.saturating_sub(2)..(y + 3).min(h) {
            for xx in x.saturating_sub(2)..(x + 3).min(w) {
                lo = lo.min(reference[[yy, xx]]);
                hi = hi.max(reference[[yy, xx]]);
            }
        }
        hi - lo < 50.0
    })
}

/// Metal-free projection and reconstruction of one HU slice, back in HU.
pub fn fbp_roundtrip_hu(
    slice_hu: ArrayView2<f32>,
    pixel_mm: f32,
    geom: &ProjectionGeometry,
) -> Result<Array2<f32>, SimError> {
    let mu = slice_hu.mapv(|v| hu_to_attenuation(v) * pixel_mm);
    let sino = forward_project(mu.view(), geom)?;
    Ok(fbp_reconstruct(&sino, slice_hu.dim())?.mapv(|m| attenuation_to_hu(m / pixel_mm)))
}

/// Union of tooth ids in a set of labels, for nesting checks.
pub fn label_teeth(label: &MetalLabel) -> BTreeSet<usize> {
    label.tooth_ids.iter().copied().collect()
}

/// Draws a metal count uniformly in `1..=MAX_METALS`.
pub fn random_metal_count(rng: &mut impl Rng) -> usize {
    rng.random_range(1..=MAX_METALS)
}
