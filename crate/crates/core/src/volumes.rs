//! Volumetric data model: HU/normalized volumes, N-slice windows and the
//! `VXMR` binary volume format.
//!
//! Intensities are stored slice-major as `data[[z, y, x]]` with shape
//! `(S, H, W)`. The normalized value space maps the `[-1000, 1000]` HU
//! window linearly onto `[-1, 1]`; values outside the window are clamped.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the HU display window mapped onto `[-1, 1]`.
pub const HU_WINDOW: f32 = 1000.0;
/// Lowest HU value a raw volume may contain.
pub const HU_MIN: f32 = -1024.0;
/// Highest HU value a raw volume may contain.
pub const HU_MAX: f32 = 4000.0;
/// Slack allowed when checking normalized values against `[-1, 1]`.
pub const NORMALIZED_TOLERANCE: f32 = 1e-6;
/// Window sizes studied for volume-to-volume translation.
pub const SUPPORTED_WINDOW_SIZES: [usize; 7] = [1, 3, 5, 7, 9, 11, 13];

const MAGIC: &[u8; 4] = b"VXMR";
/// Current on-disk format version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume shape {0:?} has an empty axis")]
    EmptyShape((usize, usize, usize)),
    #[error("spacing {0:?} must be positive and finite")]
    BadSpacing([f32; 3]),
    #[error("non-finite voxel {value} at [z={}, y={}, x={}]", index.0, index.1, index.2)]
    NonFinite { index: (usize, usize, usize), value: f32 },
    #[error("voxel {value} at [z={}, y={}, x={}] outside the {space} range", index.0, index.1, index.2)]
    OutOfRange {
        index: (usize, usize, usize),
        value: f32,
        space: ValueSpace,
    },
    #[error("expected a {expected} volume, got {actual}")]
    WrongValueSpace { expected: ValueSpace, actual: ValueSpace },
    #[error("window of {n} slices needs at least {n} slices, volume has {slices}")]
    TooFewSlices { n: usize, slices: usize },
    #[error("unsupported window size {0}; expected one of 1, 3, 5, 7, 9, 11, 13")]
    UnsupportedWindow(usize),
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("corrupt volume file: {0}")]
    Corrupt(String),
    #[error("unsupported volume format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValueSpace {
    Hu,
    Normalized,
}

impl ValueSpace {
    fn code(self) -> u8 {
        match self {
            ValueSpace::Hu => 0,
            ValueSpace::Normalized => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ValueSpace::Hu),
            1 => Some(ValueSpace::Normalized),
            _ => None,
        }
    }
}

impl fmt::Display for ValueSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueSpace::Hu => "HU",
            ValueSpace::Normalized => "NORMALIZED",
        })
    }
}

/// Which image domain a volume belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DomainTag {
    /// Contains metal artifacts.
    XArtifact,
    /// Artifact-free.
    YClean,
    Unlabeled,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::XArtifact => "X_ARTIFACT",
            DomainTag::YClean => "Y_CLEAN",
            DomainTag::Unlabeled => "UNLABELED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "X_ARTIFACT" => Some(DomainTag::XArtifact),
            "Y_CLEAN" => Some(DomainTag::YClean),
            "UNLABELED" => Some(DomainTag::Unlabeled),
            _ => None,
        }
    }
}

/// A validated 3D intensity grid with its metadata.
///
/// Construction checks every invariant, so a `Volume` in hand is always
/// finite, non-empty and inside the range of its value space.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing_mm: [f32; 3],
    value_space: ValueSpace,
    volume_id: String,
    domain_tag: DomainTag,
}

impl Volume {
    pub fn new(
        data: Array3<f32>,
        spacing_mm: [f32; 3],
        value_space: ValueSpace,
        volume_id: impl Into<String>,
        domain_tag: DomainTag,
    ) -> Result<Self, VolumeError> {
        let (s, h, w) = data.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(VolumeError::EmptyShape((s, h, w)));
        }
        if spacing_mm.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(VolumeError::BadSpacing(spacing_mm));
        }
        check_finite(data.view())?;
        let (lo, hi) = match value_space {
            ValueSpace::Hu => (HU_MIN, HU_MAX),
            ValueSpace::Normalized => (-1.0 - NORMALIZED_TOLERANCE, 1.0 + NORMALIZED_TOLERANCE),
        };
        if let Some((index, &value)) = data.indexed_iter().find(|(_, v)| **v < lo || **v > hi) {
            return Err(VolumeError::OutOfRange {
                index,
                value,
                space: value_space,
            });
        }
        Ok(Self {
            data,
            spacing_mm,
            value_space,
            volume_id: volume_id.into(),
            domain_tag,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// `(S, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn n_slices(&self) -> usize {
        self.data.dim().0
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn value_space(&self) -> ValueSpace {
        self.value_space
    }

    pub fn volume_id(&self) -> &str {
        &self.volume_id
    }

    pub fn domain_tag(&self) -> DomainTag {
        self.domain_tag
    }

    /// Same metadata, new payload. The payload is validated against the
    /// given value space.
    pub fn with_data(&self, data: Array3<f32>, value_space: ValueSpace) -> Result<Self, VolumeError> {
        Volume::new(
            data,
            self.spacing_mm,
            value_space,
            self.volume_id.clone(),
            self.domain_tag,
        )
    }

    pub fn with_id(mut self, volume_id: impl Into<String>) -> Self {
        self.volume_id = volume_id.into();
        self
    }

    pub fn with_domain(mut self, domain_tag: DomainTag) -> Self {
        self.domain_tag = domain_tag;
        self
    }

    fn expect_space(&self, expected: ValueSpace) -> Result<(), VolumeError> {
        if self.value_space != expected {
            return Err(VolumeError::WrongValueSpace {
                expected,
                actual: self.value_space,
            });
        }
        Ok(())
    }
}

fn check_finite(data: ArrayView3<f32>) -> Result<(), VolumeError> {
    match data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some((index, &value)) => Err(VolumeError::NonFinite { index, value }),
        None => Ok(()),
    }
}

/// Clamp to the `[-1000, 1000]` HU window and scale onto `[-1, 1]`.
pub fn normalize_hu(vol: &Volume) -> Result<Volume, VolumeError> {
    vol.expect_space(ValueSpace::Hu)?;
    check_finite(vol.data.view())?;
    let data = vol.data.mapv(|v| v.clamp(-HU_WINDOW, HU_WINDOW) / HU_WINDOW);
    vol.with_data(data, ValueSpace::Normalized)
}

/// Inverse of [`normalize_hu`] on the window.
pub fn denormalize(vol: &Volume) -> Result<Volume, VolumeError> {
    vol.expect_space(ValueSpace::Normalized)?;
    if let Some((index, &value)) = vol
        .data
        .indexed_iter()
        .find(|(_, v)| v.abs() > 1.0 + NORMALIZED_TOLERANCE)
    {
        return Err(VolumeError::OutOfRange {
            index,
            value,
            space: ValueSpace::Normalized,
        });
    }
    let data = vol.data.mapv(|v| v.clamp(-1.0, 1.0) * HU_WINDOW);
    vol.with_data(data, ValueSpace::Hu)
}

/// `N` contiguous normalized slices copied out of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SubvolumeWindow {
    slices: Array3<f32>,
    start_index: usize,
}

impl SubvolumeWindow {
    pub fn new(slices: Array3<f32>, start_index: usize) -> Result<Self, VolumeError> {
        let n = slices.dim().0;
        check_window_size(n)?;
        check_finite(slices.view())?;
        Ok(Self { slices, start_index })
    }

    pub fn slices(&self) -> &Array3<f32> {
        &self.slices
    }

    pub fn into_slices(self) -> Array3<f32> {
        self.slices
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn n_slices(&self) -> usize {
        self.slices.dim().0
    }
}

pub fn check_window_size(n: usize) -> Result<(), VolumeError> {
    if SUPPORTED_WINDOW_SIZES.contains(&n) {
        Ok(())
    } else {
        Err(VolumeError::UnsupportedWindow(n))
    }
}

/// Number of windows `extract_windows` yields.
pub fn window_count(n_slices: usize, n: usize, stride: usize) -> usize {
    if n_slices < n || stride == 0 {
        0
    } else {
        (n_slices - n) / stride + 1
    }
}

/// Copies windows starting at `0, stride, 2*stride, ...` up to `S - N`.
pub fn extract_windows(vol: &Volume, n: usize, stride: usize) -> Result<Vec<SubvolumeWindow>, VolumeError> {
    vol.expect_space(ValueSpace::Normalized)?;
    check_window_size(n)?;
    if stride == 0 {
        return Err(VolumeError::ZeroStride);
    }
    let s = vol.n_slices();
    if s < n {
        return Err(VolumeError::TooFewSlices { n, slices: s });
    }
    Ok((0..=s - n)
        .step_by(stride)
        .map(|start| SubvolumeWindow {
            slices: vol.data.slice(s![start..start + n, .., ..]).to_owned(),
            start_index: start,
        })
        .collect())
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_volume(vol, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let mut input = BufReader::new(File::open(path)?);
    read_volume(&mut input)
}

pub fn write_volume(vol: &Volume, out: &mut impl Write) -> Result<(), VolumeError> {
    let (s, h, w) = vol.shape();
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in [s, h, w] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for sp in vol.spacing_mm {
        out.write_all(&sp.to_le_bytes())?;
    }
    out.write_all(&[vol.value_space.code()])?;
    write_str(out, &vol.volume_id)?;
    write_str(out, vol.domain_tag.as_str())?;
    let mut payload = Vec::with_capacity(s * h * w * 4);
    for v in vol.data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_volume(input: &mut impl Read) -> Result<Volume, VolumeError> {
    let mut magic = [0u8; 4];
    read_header(input, &mut magic)?;
    if &magic != MAGIC {
        return Err(VolumeError::Corrupt("bad magic bytes".into()));
    }
    let version = read_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let s = read_u32(input)? as usize;
    let h = read_u32(input)? as usize;
    let w = read_u32(input)? as usize;
    let mut spacing = [0f32; 3];
    for sp in spacing.iter_mut() {
        *sp = f32::from_bits(read_u32(input)?);
    }
    let mut code = [0u8; 1];
    read_header(input, &mut code)?;
    let value_space = ValueSpace::from_code(code[0])
        .ok_or_else(|| VolumeError::Corrupt(format!("unknown value space code {}", code[0])))?;
    let volume_id = read_str(input)?;
    let domain = read_str(input)?;
    let domain_tag =
        DomainTag::parse(&domain).ok_or_else(|| VolumeError::Corrupt(format!("unknown domain tag {domain:?}")))?;

    let expected = s
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| VolumeError::Corrupt("shape overflows".into()))?;
    let mut payload = Vec::with_capacity(expected);
    input.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(VolumeError::Corrupt(format!(
            "payload has {} bytes, header shape ({s}, {h}, {w}) needs {expected}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec((s, h, w), values).map_err(|e| VolumeError::Corrupt(e.to_string()))?;
    Volume::new(data, spacing, value_space, volume_id, domain_tag)
}

fn read_header(input: &mut impl Read, buf: &mut [u8]) -> Result<(), VolumeError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => VolumeError::Corrupt("truncated header".into()),
        _ => VolumeError::Io(e),
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32, VolumeError> {
    let mut b = [0u8; 4];
    read_header(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn read_str(input: &mut impl Read) -> Result<String, VolumeError> {
    let len = read_u32(input)? as usize;
    if len > 1 << 16 {
        return Err(VolumeError::Corrupt(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    read_header(input, &mut buf)?;
    String::from_utf8(buf).map_err(|_| VolumeError::Corrupt("string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hu_volume(values: &[f32], shape: (usize, usize, usize)) -> Volume {
        let data = Array3::from_shape_vec(shape, values.to_vec()).unwrap();
        Volume::new(data, [2.0, 1.5, 1.5], ValueSpace::Hu, "v", DomainTag::Unlabeled).unwrap()
    }

    fn normalized(s: usize) -> Volume {
        let data = Array3::from_shape_fn((s, 4, 4), |(z, y, x)| {
            ((z * 16 + y * 4 + x) as f32 / (s * 16) as f32) * 2.0 - 1.0
        });
        Volume::new(data, [1.0; 3], ValueSpace::Normalized, "n", DomainTag::YClean).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = hu_volume(&[1000.0, 0.0, 1500.0, -1024.0], (1, 2, 2));
        let n = normalize_hu(&v).unwrap();
        assert_eq!(n.value_space(), ValueSpace::Normalized);
        assert_eq!(n.data().as_slice().unwrap(), &[1.0, 0.0, 1.0, -1.0]);
        assert_eq!(n.volume_id(), "v");
        assert_eq!(n.spacing_mm(), [2.0, 1.5, 1.5]);
    }

    #[test]
    fn denormalize_examples() {
        let data = Array3::from_shape_vec((1, 1, 3), vec![1.0, -1.0, 0.5]).unwrap();
        let v = Volume::new(data, [1.0; 3], ValueSpace::Normalized, "d", DomainTag::XArtifact).unwrap();
        let hu = denormalize(&v).unwrap();
        assert_eq!(hu.data().as_slice().unwrap(), &[1000.0, -1000.0, 500.0]);
        assert_eq!(hu.domain_tag(), DomainTag::XArtifact);
    }

    #[test]
    fn wrong_value_space_rejected() {
        let v = hu_volume(&[0.0], (1, 1, 1));
        assert!(matches!(denormalize(&v), Err(VolumeError::WrongValueSpace { .. })));
        let n = normalize_hu(&v).unwrap();
        assert!(matches!(normalize_hu(&n), Err(VolumeError::WrongValueSpace { .. })));
    }

    #[test]
    fn non_finite_reports_index() {
        let mut data = Array3::zeros((2, 2, 2));
        data[[1, 0, 1]] = f32::NAN;
        let err = Volume::new(data, [1.0; 3], ValueSpace::Hu, "bad", DomainTag::Unlabeled).unwrap_err();
        assert!(matches!(err, VolumeError::NonFinite { index: (1, 0, 1), .. }));
        assert!(err.to_string().contains("z=1, y=0, x=1"));
    }

    #[test]
    fn normalized_range_enforced() {
        let data = Array3::from_elem((1, 1, 1), 1.01f32);
        assert!(matches!(
            Volume::new(data, [1.0; 3], ValueSpace::Normalized, "r", DomainTag::Unlabeled),
            Err(VolumeError::OutOfRange { .. })
        ));
        let data = Array3::from_elem((1, 1, 1), 4100.0f32);
        assert!(Volume::new(data, [1.0; 3], ValueSpace::Hu, "r", DomainTag::Unlabeled).is_err());
    }

    #[test]
    fn window_counts() {
        let v = normalized(12);
        assert_eq!(extract_windows(&v, 5, 1).unwrap().len(), 8);
        assert_eq!(extract_windows(&v, 3, 3).unwrap().len(), 4);
        assert_eq!(extract_windows(&normalized(5), 5, 1).unwrap().len(), 1);
        assert_eq!(window_count(12, 3, 3), 4);
    }

    #[test]
    fn windows_copy_contiguous_slices() {
        let v = normalized(8);
        for w in extract_windows(&v, 3, 2).unwrap() {
            let start = w.start_index();
            for k in 0..3 {
                assert_eq!(w.slices().slice(s![k, .., ..]), v.data().slice(s![start + k, .., ..]));
            }
        }
    }

    #[test]
    fn window_errors() {
        let v = normalized(4);
        let err = extract_windows(&v, 5, 1).unwrap_err();
        assert!(matches!(err, VolumeError::TooFewSlices { n: 5, slices: 4 }));
        assert!(err.to_string().contains("at least 5"));
        assert!(matches!(extract_windows(&v, 3, 0), Err(VolumeError::ZeroStride)));
        assert!(matches!(
            extract_windows(&v, 2, 1),
            Err(VolumeError::UnsupportedWindow(2))
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let v = normalized(3);
        let mut bytes = Vec::new();
        write_volume(&v, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            read_volume(&mut bytes.as_slice()),
            Err(VolumeError::Corrupt(_))
        ));
        assert!(matches!(read_volume(&mut &bytes[..10]), Err(VolumeError::Corrupt(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        let v = normalized(3);
        let mut bytes = Vec::new();
        write_volume(&v, &mut bytes).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = read_volume(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, VolumeError::UnsupportedVersion(99)));
    }

    #[test]
    fn file_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vxmr");
        let v = hu_volume(&[-1024.0, 12.5, 3999.0, 0.1], (1, 2, 2)).with_domain(DomainTag::YClean);
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
    }

    fn arb_hu_volume() -> impl Strategy<Value = Volume> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(s, h, w)| {
            (
                proptest::collection::vec(HU_MIN..=HU_MAX, s * h * w),
                "[a-z0-9_-]{0,12}",
            )
                .prop_map(move |(vals, id)| {
                    let data = Array3::from_shape_vec((s, h, w), vals).unwrap();
                    Volume::new(data, [0.5, 1.25, 3.0], ValueSpace::Hu, id, DomainTag::XArtifact).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(v in arb_hu_volume()) {
            let mut bytes = Vec::new();
            write_volume(&v, &mut bytes).unwrap();
            let back = read_volume(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), v.shape());
            prop_assert!(back.data().iter().zip(v.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back, v);
        }

        #[test]
        fn denormalize_inverts_clamped_normalize(v in arb_hu_volume()) {
            let back = denormalize(&normalize_hu(&v).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(v.data().iter()) {
                prop_assert!((a - b.clamp(-1000.0, 1000.0)).abs() <= 1e-6 * 1000.0);
            }
            let twice = normalize_hu(&back).unwrap();
            let once = normalize_hu(&v).unwrap();
            prop_assert_eq!(twice.data(), once.data());
        }

        #[test]
        fn stride_one_covers_every_slice(s in 1usize..20, n_idx in 0usize..7) {
            let n = SUPPORTED_WINDOW_SIZES[n_idx];
            prop_assume!(s >= n);
            let windows = extract_windows(&normalized(s), n, 1).unwrap();
            prop_assert_eq!(windows.len(), s - n + 1);
            let mut covered = vec![false; s];
            for w in &windows {
                for k in 0..n { covered[w.start_index() + k] = true; }
            }
            prop_assert!(covered.into_iter().all(|c| c));
        }
    }
}
