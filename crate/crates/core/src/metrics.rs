//! Evaluation metrics: RMSE in HU, Gaussian-window SSIM, the SSIM
//! improvement rate and per-(m, method) median aggregation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volumes::{ValueSpace, Volume};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: reference {reference:?}, test {test:?}")]
    ShapeMismatch {
        reference: (usize, usize, usize),
        test: (usize, usize, usize),
    },
    #[error("mask shape {0:?} does not match the volumes")]
    MaskShape((usize, usize, usize)),
    #[error("every voxel is excluded by the mask")]
    EmptySelection,
    #[error("slices of {0}x{1} are smaller than the {2}x{2} SSIM window")]
    ImageTooSmall(usize, usize, usize),
    #[error("metric inputs must be HU volumes, got {0}")]
    NotHu(ValueSpace),
    #[error("improvement rate needs a positive original SSIM, got {0}")]
    NonPositiveBaseline(f64),
    #[error("cannot aggregate an empty set of rows")]
    EmptyRows,
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_pair(reference: &Volume, test: &Volume) -> Result<(), MetricsError> {
    for v in [reference, test] {
        if v.value_space() != ValueSpace::Hu {
            return Err(MetricsError::NotHu(v.value_space()));
        }
    }
    if reference.shape() != test.shape() {
        return Err(MetricsError::ShapeMismatch {
            reference: reference.shape(),
            test: test.shape(),
        });
    }
    Ok(())
}

/// Root mean square difference in HU over voxels where `exclude` is false.
pub fn rmse(reference: &Volume, test: &Volume, exclude: Option<&Array3<bool>>) -> Result<f64, MetricsError> {
    check_pair(reference, test)?;
    rmse_arrays(reference.data().view(), test.data().view(), exclude)
}

pub fn rmse_arrays(
    reference: ArrayView3<f32>,
    test: ArrayView3<f32>,
    exclude: Option<&Array3<bool>>,
) -> Result<f64, MetricsError> {
    if let Some(mask) = exclude {
        if mask.dim() != reference.dim() {
            return Err(MetricsError::MaskShape(mask.dim()));
        }
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((idx, a), b) in reference.indexed_iter().zip(test.iter()) {
        if exclude.is_some_and(|m| m[idx]) {
            continue;
        }
        sum += (f64::from(*a) - f64::from(*b)).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptySelection);
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// HU range mapped onto `[0, 1]` before comparison.
    pub display_range: (f32, f32),
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            display_range: (-1000.0, 1000.0),
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" correlation with the same 1D kernel on both axes.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = kernel.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|k| kernel[k] * img[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|k| kernel[k] * rows[[y + k, x]]).sum();
        }
    }
    out
}

/// Local SSIM map of one slice pair, values already in display units
/// `[0, 1]`. Entry `[i, j]` belongs to the window centred on pixel
/// `(i + r, j + r)` with `r = window / 2`.
pub fn ssim_map(a: ArrayView2<f64>, b: ArrayView2<f64>, params: &SsimParams) -> Array2<f64> {
    let kernel = gaussian_kernel(params.window, params.sigma);
    let c1 = (params.k1 * 1.0).powi(2);
    let c2 = (params.k2 * 1.0).powi(2);
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = filter_valid(&a, &kernel);
    let mu_b = filter_valid(&b, &kernel);
    let saa = filter_valid(&(&a * &a), &kernel);
    let sbb = filter_valid(&(&b * &b), &kernel);
    let sab = filter_valid(&(&a * &b), &kernel);
    let mut out = Array2::zeros(mu_a.dim());
    for ((idx, o), &ma) in out.indexed_iter_mut().zip(mu_a.iter()) {
        let mb = mu_b[idx];
        let va = saa[idx] - ma * ma;
        let vb = sbb[idx] - mb * mb;
        let cov = sab[idx] - ma * mb;
        *o = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    out
}

fn to_display(slice: ArrayView2<f32>, range: (f32, f32)) -> Array2<f64> {
    let (lo, hi) = range;
    slice.mapv(|v| f64::from((v.clamp(lo, hi) - lo) / (hi - lo)))
}

/// Mean local SSIM per slice, averaged over slices. With `exclude`, windows
/// centred on excluded voxels are skipped.
pub fn ssim(
    reference: &Volume,
    test: &Volume,
    params: &SsimParams,
    exclude: Option<&Array3<bool>>,
) -> Result<f64, MetricsError> {
    check_pair(reference, test)?;
    ssim_arrays(reference.data().view(), test.data().view(), params, exclude)
}

pub fn ssim_arrays(
    reference: ArrayView3<f32>,
    test: ArrayView3<f32>,
    params: &SsimParams,
    exclude: Option<&Array3<bool>>,
) -> Result<f64, MetricsError> {
    let (_, h, w) = reference.dim();
    if h < params.window || w < params.window {
        return Err(MetricsError::ImageTooSmall(h, w, params.window));
    }
    if let Some(mask) = exclude {
        if mask.dim() != reference.dim() {
            return Err(MetricsError::MaskShape(mask.dim()));
        }
    }
    let r = params.window / 2;
    let mut per_slice = Vec::new();
    for (z, (a, b)) in reference.axis_iter(Axis(0)).zip(test.axis_iter(Axis(0))).enumerate() {
        let map = ssim_map(
            to_display(a, params.display_range).view(),
            to_display(b, params.display_range).view(),
            params,
        );
        let (sum, n) = map
            .indexed_iter()
            .filter(|((i, j), _)| !exclude.is_some_and(|m| m[[z, i + r, j + r]]))
            .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
        if n > 0 {
            per_slice.push(sum / n as f64);
        }
    }
    if per_slice.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    Ok(per_slice.iter().sum::<f64>() / per_slice.len() as f64)
}

/// Percentage SSIM improvement of a corrected volume over its original.
pub fn improvement_rate(ssim_corrected: f64, ssim_original: f64) -> Result<f64, MetricsError> {
    if !(ssim_original > 0.0) {
        return Err(MetricsError::NonPositiveBaseline(ssim_original));
    }
    Ok((ssim_corrected - ssim_original) / ssim_original * 100.0)
}

/// One evaluated volume. `method = "original"` rows describe the
/// uncorrected input, whose improvement rate is zero by definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub volume_id: String,
    pub m: usize,
    pub method: String,
    pub rmse_hu: f64,
    pub ssim: f64,
    pub ssim_original: f64,
    pub r_s: f64,
    pub rmse_hu_masked: f64,
    pub ssim_masked: f64,
    pub ssim_original_masked: f64,
    pub r_s_masked: f64,
}

impl MetricsRow {
    /// Evaluates `test` against `reference`, with `original` as the
    /// artifact-affected baseline for the improvement rate.
    pub fn evaluate(
        volume_id: &str,
        m: usize,
        method: &str,
        reference: &Volume,
        original: &Volume,
        test: &Volume,
        metal_mask: &Array3<bool>,
        params: &SsimParams,
    ) -> Result<Self, MetricsError> {
        let ssim_original = ssim(reference, original, params, None)?;
        let ssim_original_masked = ssim(reference, original, params, Some(metal_mask))?;
        let ssim_test = ssim(reference, test, params, None)?;
        let ssim_masked = ssim(reference, test, params, Some(metal_mask))?;
        Ok(Self {
            volume_id: volume_id.to_string(),
            m,
            method: method.to_string(),
            rmse_hu: rmse(reference, test, None)?,
            ssim: ssim_test,
            ssim_original,
            r_s: improvement_rate(ssim_test, ssim_original)?,
            rmse_hu_masked: rmse(reference, test, Some(metal_mask))?,
            ssim_masked,
            ssim_original_masked,
            r_s_masked: improvement_rate(ssim_masked, ssim_original_masked)?,
        })
    }

    /// Whether the stored improvement rates agree with the SSIM fields.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let check = |rs: f64, c: f64, o: f64| improvement_rate(c, o).is_ok_and(|v| (v - rs).abs() <= tol);
        check(self.r_s, self.ssim, self.ssim_original)
            && check(self.r_s_masked, self.ssim_masked, self.ssim_original_masked)
    }
}

/// Median with the even-count rule (mean of the central pair).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub m: usize,
    pub method: String,
    pub count: usize,
    pub median_rmse_hu: f64,
    pub median_ssim: f64,
    pub median_r_s: f64,
    pub median_rmse_hu_masked: f64,
    pub median_ssim_masked: f64,
    pub median_r_s_masked: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Groups rows by `(m, method)` and takes medians of every metric.
pub fn aggregate(rows: &[MetricsRow]) -> Result<MetricsReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyRows);
    }
    let mut groups: BTreeMap<(usize, String), Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        groups.entry((row.m, row.method.clone())).or_default().push(row);
    }
    let aggregates = groups
        .into_iter()
        .map(|((m, method), group)| {
            let med =
                |f: fn(&MetricsRow) -> f64| median(&group.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            AggregateRow {
                m,
                method,
                count: group.len(),
                median_rmse_hu: med(|r| r.rmse_hu),
                median_ssim: med(|r| r.ssim),
                median_r_s: med(|r| r.r_s),
                median_rmse_hu_masked: med(|r| r.rmse_hu_masked),
                median_ssim_masked: med(|r| r.ssim_masked),
                median_r_s_masked: med(|r| r.r_s_masked),
            }
        })
        .collect();
    Ok(MetricsReport {
        rows: rows.to_vec(),
        aggregates,
    })
}

impl MetricsReport {
    pub fn aggregate_for(&self, m: usize, method: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.m == m && a.method == method)
    }

    /// Per-volume rows, columns in `MetricsRow` field order.
    pub fn write_rows_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Table of medians, one line per `(m, method)`.
    pub fn write_aggregate_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.aggregates {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// A reference / original / corrected triple for figures.
pub struct FigureSet<'a> {
    pub volume_id: &'a str,
    pub m: usize,
    pub method: &'a str,
    pub reference: &'a Volume,
    pub original: &'a Volume,
    pub corrected: &'a Volume,
}

/// Display window for image PNGs, `(level, width)` in HU.
pub const IMAGE_WINDOW: (f32, f32) = (0.0, 2000.0);
/// Display window for absolute-difference PNGs.
pub const DIFF_WINDOW: (f32, f32) = (250.0, 500.0);

fn write_png(path: &Path, slice: ArrayView2<f32>, window: (f32, f32)) -> Result<(), MetricsError> {
    let (h, w) = slice.dim();
    let (level, width) = window;
    let lo = level - width / 2.0;
    let bytes: Vec<u8> = slice
        .iter()
        .map(|&v| (((v - lo) / width).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut encoder = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Writes grayscale PNGs of reference, original, corrected and
/// `|corrected - reference|` for each requested slice, plus a scatter CSV
/// of original-vs-corrected RMSE and SSIM with one row per report row that
/// is not an `original` row.
pub fn emit_figures(
    report: &MetricsReport,
    sets: &[FigureSet<'_>],
    slice_indices: &[usize],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, MetricsError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let (il, iw) = IMAGE_WINDOW;
    let (dl, dw) = DIFF_WINDOW;
    for set in sets {
        let n_slices = set.reference.n_slices();
        for &z in slice_indices.iter().filter(|&&z| z < n_slices) {
            let reference = set.reference.data().index_axis(Axis(0), z);
            let original = set.original.data().index_axis(Axis(0), z);
            let corrected = set.corrected.data().index_axis(Axis(0), z);
            let diff = (&corrected - &reference).mapv(f32::abs);
            let stem = format!("{}_m{}_{}_z{:02}", set.volume_id, set.m, set.method, z);
            for (kind, img, (l, w)) in [
                ("reference", reference.to_owned(), (il, iw)),
                ("original", original.to_owned(), (il, iw)),
                ("corrected", corrected.to_owned(), (il, iw)),
                ("absdiff", diff, (dl, dw)),
            ] {
                let path = out_dir.join(format!("{stem}_{kind}_wl{l:.0}_ww{w:.0}.png"));
                write_png(&path, img.view(), (l, w))?;
                written.push(path);
            }
        }
    }

    #[derive(Serialize)]
    struct ScatterRow<'a> {
        volume_id: &'a str,
        m: usize,
        method: &'a str,
        rmse_original: f64,
        rmse_corrected: f64,
        ssim_original: f64,
        ssim_corrected: f64,
        r_s: f64,
    }
    let originals: BTreeMap<&str, &MetricsRow> = report
        .rows
        .iter()
        .filter(|r| r.method == ORIGINAL_METHOD)
        .map(|r| (r.volume_id.as_str(), r))
        .collect();
    let scatter_path = out_dir.join("scatter.csv");
    let mut w = csv::Writer::from_path(&scatter_path)?;
    for row in report.rows.iter().filter(|r| r.method != ORIGINAL_METHOD) {
        w.serialize(ScatterRow {
            volume_id: &row.volume_id,
            m: row.m,
            method: &row.method,
            rmse_original: originals.get(row.volume_id.as_str()).map_or(f64::NAN, |o| o.rmse_hu),
            rmse_corrected: row.rmse_hu,
            ssim_original: row.ssim_original,
            ssim_corrected: row.ssim,
            r_s: row.r_s,
        })?;
    }
    w.flush()?;
    written.push(scatter_path);
    Ok(written)
}

/// Method label of the uncorrected baseline rows.
pub const ORIGINAL_METHOD: &str = "original";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::DomainTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hu(data: Array3<f32>) -> Volume {
        Volume::new(data, [1.0; 3], ValueSpace::Hu, "t", DomainTag::Unlabeled).unwrap()
    }

    fn textured(seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Array3::from_shape_fn((2, 24, 24), |(z, y, x)| {
            ((x as f32 * 0.4).sin() * 400.0 + (y as f32 * 0.3 + z as f32).cos() * 300.0) + rng.random_range(-20.0..20.0)
        });
        hu(base)
    }

    #[test]
    fn rmse_examples() {
        let a = textured(1);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let shifted = hu(a.data().mapv(|v| v + 10.0));
        assert!((rmse(&a, &shifted, None).unwrap() - 10.0).abs() < 1e-4);
        let r = hu(Array3::from_shape_vec((1, 1, 2), vec![0.0, 0.0]).unwrap());
        let t = hu(Array3::from_shape_vec((1, 1, 2), vec![3.0, 4.0]).unwrap());
        assert!((rmse(&r, &t, None).unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_errors() {
        let a = textured(1);
        let b = hu(Array3::zeros((1, 24, 24)));
        assert!(matches!(rmse(&a, &b, None), Err(MetricsError::ShapeMismatch { .. })));
        let all = Array3::from_elem(a.shape(), true);
        assert!(matches!(rmse(&a, &a, Some(&all)), Err(MetricsError::EmptySelection)));
    }

    #[test]
    fn masked_rmse_ignores_excluded() {
        let a = textured(2);
        let mut data = a.data().clone();
        data[[1, 5, 5]] += 800.0;
        let b = hu(data);
        let mut mask = Array3::from_elem(a.shape(), false);
        mask[[1, 5, 5]] = true;
        assert_eq!(rmse(&a, &b, Some(&mask)).unwrap(), 0.0);
        assert!(rmse(&a, &b, None).unwrap() > 0.0);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let p = SsimParams::default();
        let a = textured(3);
        assert!((ssim(&a, &a, &p, None).unwrap() - 1.0).abs() < 1e-12);
        let b = textured(4);
        let ab = ssim(&a, &b, &p, None).unwrap();
        let ba = ssim(&b, &a, &p, None).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab > -1.0);
    }

    #[test]
    fn ssim_drops_under_heavy_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = textured(5);
        let noisy = hu(a
            .data()
            .mapv(|v| (v + rng.random_range(-800.0..800.0)).clamp(-1024.0, 4000.0)));
        let s = ssim(&a, &noisy, &SsimParams::default(), None).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Oracle: one window evaluated by explicit weighted sums.
        let p = SsimParams::default();
        let a = textured(6);
        let b = textured(7);
        let da = to_display(a.data().index_axis(Axis(0), 0), p.display_range);
        let db = to_display(b.data().index_axis(Axis(0), 0), p.display_range);
        let map = ssim_map(da.view(), db.view(), &p);
        let g = gaussian_kernel(11, 1.5);
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..11 {
            for j in 0..11 {
                let wgt = g[i] * g[j];
                let (x, y) = (da[[3 + i, 2 + j]], db[[3 + i, 2 + j]]);
                ma += wgt * x;
                mb += wgt * y;
                saa += wgt * x * x;
                sbb += wgt * y * y;
                sab += wgt * x * y;
            }
        }
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let expected = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        assert!((map[[3, 2]] - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_too_small() {
        let a = hu(Array3::zeros((1, 8, 30)));
        assert!(matches!(
            ssim(&a, &a, &SsimParams::default(), None),
            Err(MetricsError::ImageTooSmall(8, 30, 11))
        ));
    }

    #[test]
    fn improvement_rate_examples() {
        assert!((improvement_rate(0.937, 0.854).unwrap() - 9.72).abs() <= 0.01);
        assert!((improvement_rate(0.836, 0.752).unwrap() - 11.17).abs() <= 0.01);
        assert_eq!(improvement_rate(0.5, 0.5).unwrap(), 0.0);
        assert!(improvement_rate(0.5, 0.0).is_err());
        assert!(improvement_rate(0.4, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn row(id: &str, m: usize, method: &str, ssim: f64, orig: f64) -> MetricsRow {
        MetricsRow {
            volume_id: id.into(),
            m,
            method: method.into(),
            rmse_hu: 10.0 * ssim,
            ssim,
            ssim_original: orig,
            r_s: improvement_rate(ssim, orig).unwrap(),
            rmse_hu_masked: 5.0,
            ssim_masked: ssim,
            ssim_original_masked: orig,
            r_s_masked: improvement_rate(ssim, orig).unwrap(),
        }
    }

    #[test]
    fn aggregate_groups_by_m_and_method() {
        let single = aggregate(&[row("a", 1, "x", 0.9, 0.8)]).unwrap();
        assert_eq!(single.aggregates.len(), 1);
        assert_eq!(single.aggregates[0].median_ssim, 0.9);
        assert_eq!(single.aggregates[0].median_r_s, single.rows[0].r_s);

        let rows = vec![
            row("a", 1, "x", 0.1, 0.5),
            row("b", 1, "x", 0.2, 0.5),
            row("c", 1, "x", 0.3, 0.5),
            row("d", 1, "x", 0.4, 0.5),
            row("a", 1, ORIGINAL_METHOD, 0.5, 0.5),
            row("e", 4, "x", 0.7, 0.5),
        ];
        let report = aggregate(&rows).unwrap();
        assert_eq!(report.aggregates.len(), 3);
        assert!((report.aggregate_for(1, "x").unwrap().median_ssim - 0.25).abs() < 1e-12);
        assert_eq!(report.aggregate_for(1, "x").unwrap().count, 4);
        assert!(rows.iter().all(|r| r.is_consistent(1e-9)));
        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyRows)));
    }

    #[test]
    fn report_csv_roundtrip_and_figures() {
        let dir = tempfile::tempdir().unwrap();
        let reference = textured(8);
        let original = textured(9);
        let report = aggregate(&[
            row("v", 2, ORIGINAL_METHOD, 0.6, 0.6),
            row("v", 2, "proposed", 0.7, 0.6),
        ])
        .unwrap();
        report.write_rows_csv(dir.path().join("rows.csv")).unwrap();
        assert_eq!(read_rows_csv(dir.path().join("rows.csv")).unwrap(), report.rows);
        report.write_aggregate_csv(dir.path().join("agg.csv")).unwrap();

        let sets = [FigureSet {
            volume_id: "v",
            m: 2,
            method: "proposed",
            reference: &reference,
            original: &original,
            corrected: &reference,
        }];
        let files = emit_figures(&report, &sets, &[0, 1, 7], dir.path().join("fig")).unwrap();
        // Two valid slices x four images, plus the scatter file.
        assert_eq!(files.len(), 9);
        let diff = files
            .iter()
            .find(|p| p.to_string_lossy().contains("z00_absdiff"))
            .unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(diff).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert!(
            buf.iter().all(|&b| b == 0),
            "identical volumes must give a black difference map"
        );
        let scatter = std::fs::read_to_string(dir.path().join("fig/scatter.csv")).unwrap();
        assert_eq!(scatter.lines().count(), 2);
    }
}
