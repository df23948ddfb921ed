//! Float maps, RGB images, keypoints and dataset manifests, plus their
//! on-disk formats.
//!
//! Float maps are stored as grayscale PFM (`Pf`). PFM has no mask channel,
//! so invalid pixels are written as NaN and every non-finite value read back
//! is marked invalid. Images are binary PPM (`P6`). Keypoints and manifests
//! are JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stereo_geometry::CameraRig;

/// Default tolerance, in pixels, on `|v_left - v_right|` for a keypoint to
/// count as rectified.
pub const DEFAULT_RECTIFICATION_TOL_PX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("data length {got} does not match {width}x{height}")]
    LengthMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MapIoError + '_ {
    move |source| MapIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A dense 2D field of floats with a per-pixel validity mask.
///
/// Values are held as `f64` in memory and serialized as IEEE-754 single
/// precision. Valid pixels are always finite; the value stored at an invalid
/// pixel is unspecified and never read by any reduction in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl FloatMap {
    /// Builds a map from row-major data. Non-finite values are marked invalid.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, MapIoError> {
        let valid = data.iter().map(|v| v.is_finite()).collect();
        Self::with_mask(width, height, data, valid)
    }

    /// Builds a map from row-major data and an explicit mask. Pixels whose
    /// value is not finite are invalid regardless of `valid`.
    pub fn with_mask(
        width: usize,
        height: usize,
        data: Vec<f64>,
        mut valid: Vec<bool>,
    ) -> Result<Self, MapIoError> {
        if width == 0 || height == 0 {
            return Err(MapIoError::InvalidDimensions { width, height });
        }
        let n = width * height;
        if data.len() != n || valid.len() != n {
            return Err(MapIoError::LengthMismatch {
                width,
                height,
                got: data.len().min(valid.len()),
            });
        }
        for (m, v) in valid.iter_mut().zip(&data) {
            *m &= v.is_finite();
        }
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    /// A fully valid map with every pixel set to `value`.
    ///
    /// Panics if either dimension is zero or `value` is not finite.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty map");
        assert!(value.is_finite());
        Self {
            width,
            height,
            data: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Evaluates `f(x, y)` at every pixel. Non-finite results are invalid.
    ///
    /// Panics if either dimension is zero.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty map");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        let valid = data.iter().map(|v| v.is_finite()).collect();
        Self {
            width,
            height,
            data,
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels, valid or not.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Value at `(x, y)` if that pixel is valid.
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.data[i])
    }

    /// Sets pixel `i`. A non-finite value invalidates the pixel.
    pub fn set(&mut self, i: usize, value: f64) {
        self.data[i] = value;
        self.valid[i] = value.is_finite();
    }

    pub fn invalidate(&mut self, i: usize) {
        self.valid[i] = false;
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid values in row-major order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .zip(&self.valid)
            .filter_map(|(&v, &m)| m.then_some(v))
    }

    pub fn same_shape(&self, other: &FloatMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_shape(&self, other: &FloatMap, what: &str) -> Result<(), MapIoError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(MapIoError::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Applies `f` to every valid pixel, keeping the mask. Results that are
    /// not finite invalidate the pixel.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> FloatMap {
        let mut out = self.clone();
        for i in 0..out.data.len() {
            if out.valid[i] {
                out.set(i, f(self.data[i]));
            }
        }
        out
    }

    /// Copy with a replaced mask (ANDed with finiteness).
    pub fn masked(&self, mask: &[bool]) -> FloatMap {
        assert_eq!(mask.len(), self.len());
        let mut out = self.clone();
        for (m, &k) in out.valid.iter_mut().zip(mask) {
            *m &= k;
        }
        out
    }

    /// Copy with every valid value rounded to single precision.
    pub fn to_f32_precision(&self) -> FloatMap {
        self.map(|v| v as f32 as f64)
    }
}

/// An 8-bit RGB image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, MapIoError> {
        if width == 0 || height == 0 {
            return Err(MapIoError::InvalidDimensions { width, height });
        }
        if data.len() != 3 * width * height {
            return Err(MapIoError::LengthMismatch {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let data = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `(R + G + B) / 3 / 255` per pixel.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0 / 255.0)
            .collect()
    }

    pub fn same_size_as(&self, map: &FloatMap) -> bool {
        self.width == map.width() && self.height == map.height()
    }
}

/// Splits off the next whitespace-delimited header token, skipping `#`
/// comments. Returns the token and the offset just past it.
fn next_token(bytes: &[u8], mut pos: usize) -> Option<(&str, usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..pos]).ok().map(|t| (t, pos))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> MapIoError {
    MapIoError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses PFM bytes. `path` is only used in error messages.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap, MapIoError> {
    let (magic, pos) = next_token(bytes, 0).ok_or_else(|| corrupt(path, "missing header"))?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(MapIoError::UnsupportedFormat(
                "color PFM (PF) is not supported".into(),
            ))
        }
        other => return Err(MapIoError::UnsupportedFormat(format!("magic {other:?}"))),
    }
    let (w, pos) = next_token(bytes, pos).ok_or_else(|| corrupt(path, "missing width"))?;
    let (h, pos) = next_token(bytes, pos).ok_or_else(|| corrupt(path, "missing height"))?;
    let (scale, pos) = next_token(bytes, pos).ok_or_else(|| corrupt(path, "missing scale"))?;
    let width: usize = w.parse().map_err(|_| corrupt(path, "bad width"))?;
    let height: usize = h.parse().map_err(|_| corrupt(path, "bad height"))?;
    let scale: f64 = scale.parse().map_err(|_| corrupt(path, "bad scale"))?;
    if width == 0 || height == 0 {
        return Err(MapIoError::InvalidDimensions { width, height });
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(corrupt(path, "scale must be finite and non-zero"));
    }
    let little_endian = scale < 0.0;
    // exactly one whitespace byte separates the scale line from the payload
    let start = pos + 1;
    let n = width
        .checked_mul(height)
        .ok_or(MapIoError::InvalidDimensions { width, height })?;
    let need = n * 4;
    if bytes.len() < start || bytes.len() - start < need {
        return Err(corrupt(
            path,
            format!(
                "truncated payload: need {need} bytes, have {}",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let payload = &bytes[start..start + need];
    let mut data = vec![0.0f64; n];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // file rows run bottom-up
        let file_row = k / width;
        let x = k % width;
        let y = height - 1 - file_row;
        data[y * width + x] = v as f64;
    }
    FloatMap::new(width, height, data)
}

/// Serializes a map as little-endian grayscale PFM.
pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let i = y * w + x;
            let v = if map.is_valid(i) {
                map.value(i) as f32
            } else {
                f32::NAN
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatMap, MapIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pfm(&bytes, path)
}

pub fn write_pfm(map: &FloatMap, path: impl AsRef<Path>) -> Result<(), MapIoError> {
    let path = path.as_ref();
    if map.is_empty() {
        return Err(MapIoError::InvalidDimensions {
            width: map.width(),
            height: map.height(),
        });
    }
    fs::write(path, encode_pfm(map)).map_err(io_err(path))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage, MapIoError> {
    let (magic, pos) = next_token(bytes, 0).ok_or_else(|| corrupt(path, "missing header"))?;
    if magic != "P6" {
        return Err(MapIoError::UnsupportedFormat(format!(
            "expected binary PPM (P6), got {magic:?}"
        )));
    }
    let (w, pos) = next_token(bytes, pos).ok_or_else(|| corrupt(path, "missing width"))?;
    let (h, pos) = next_token(bytes, pos).ok_or_else(|| corrupt(path, "missing height"))?;
    let (maxval, pos) = next_token(bytes, pos).ok_or_else(|| corrupt(path, "missing maxval"))?;
    let width: usize = w.parse().map_err(|_| corrupt(path, "bad width"))?;
    let height: usize = h.parse().map_err(|_| corrupt(path, "bad height"))?;
    if maxval != "255" {
        return Err(MapIoError::UnsupportedFormat(format!("maxval {maxval}")));
    }
    let start = pos + 1;
    let need = 3 * width * height;
    if bytes.len() < start || bytes.len() - start < need {
        return Err(corrupt(path, "truncated payload"));
    }
    RgbImage::new(width, height, bytes[start..start + need].to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage, MapIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(image: &RgbImage, path: impl AsRef<Path>) -> Result<(), MapIoError> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(io_err(path))
}

/// A point annotated in both frames of a rectified pair, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoKeypoint {
    pub id: u64,
    pub u_left: f64,
    pub v_left: f64,
    pub u_right: f64,
    pub v_right: f64,
}

impl StereoKeypoint {
    pub fn disparity(&self) -> f64 {
        self.u_left - self.u_right
    }
}

/// A keypoint as read from disk, flagged when its rows disagree by more
/// than the rectification tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRecord {
    pub keypoint: StereoKeypoint,
    pub rectified: bool,
}

pub fn parse_keypoints(
    text: &str,
    path: &Path,
    rectification_tol_px: f64,
) -> Result<Vec<KeypointRecord>, MapIoError> {
    let kps: Vec<StereoKeypoint> = serde_json::from_str(text).map_err(|source| MapIoError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    kps.into_iter()
        .map(|kp| {
            let coords = [kp.u_left, kp.v_left, kp.u_right, kp.v_right];
            if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(MapIoError::Validation(format!(
                    "keypoint {} has negative or non-finite coordinates",
                    kp.id
                )));
            }
            Ok(KeypointRecord {
                keypoint: kp,
                rectified: (kp.v_left - kp.v_right).abs() <= rectification_tol_px,
            })
        })
        .collect()
}

pub fn read_keypoints(
    path: impl AsRef<Path>,
    rectification_tol_px: f64,
) -> Result<Vec<KeypointRecord>, MapIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_keypoints(&text, path, rectification_tol_px)
}

pub fn write_keypoints(kps: &[StereoKeypoint], path: impl AsRef<Path>) -> Result<(), MapIoError> {
    write_json(kps, path.as_ref())
}

/// One sample of a dataset. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub depth_gt: PathBuf,
    #[serde(default)]
    pub ensemble: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<PathBuf>,
    /// Per-pixel true artifact strength, present for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<PathBuf>,
    pub rig: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub rigs: BTreeMap<String, CameraRig>,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    root: PathBuf,
}

/// A sample with every referenced file loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: RgbImage,
    pub depth_gt: FloatMap,
    pub ensemble: Vec<FloatMap>,
    pub keypoints: Vec<KeypointRecord>,
    pub corruption: Option<FloatMap>,
    pub rig: CameraRig,
}

impl DatasetManifest {
    pub fn new(rigs: BTreeMap<String, CameraRig>, samples: Vec<SampleRecord>) -> Self {
        Self {
            rigs,
            samples,
            root: PathBuf::new(),
        }
    }

    /// Directory that sample paths are relative to.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn rig(&self, id: &str) -> Result<&CameraRig, MapIoError> {
        self.rigs
            .get(id)
            .ok_or_else(|| MapIoError::Validation(format!("unknown camera rig {id:?}")))
    }

    pub fn load_sample(&self, index: usize) -> Result<LoadedSample, MapIoError> {
        let rec = self
            .samples
            .get(index)
            .ok_or_else(|| MapIoError::Validation(format!("no sample at index {index}")))?;
        let rig = *self.rig(&rec.rig)?;
        let image = read_ppm(self.resolve(&rec.image))?;
        let depth_gt = read_pfm(self.resolve(&rec.depth_gt))?;
        let ensemble = rec
            .ensemble
            .iter()
            .map(|p| read_pfm(self.resolve(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let keypoints = match &rec.keypoints {
            Some(p) => read_keypoints(self.resolve(p), DEFAULT_RECTIFICATION_TOL_PX)?,
            None => Vec::new(),
        };
        let corruption = rec
            .corruption
            .as_ref()
            .map(|p| read_pfm(self.resolve(p)))
            .transpose()?;

        let (w, h) = (depth_gt.width(), depth_gt.height());
        let bad = |what: &str, ww: usize, hh: usize| {
            MapIoError::ShapeMismatch(format!(
                "sample {}: {what} is {ww}x{hh}, depth is {w}x{h}",
                rec.id
            ))
        };
        if image.width() != w || image.height() != h {
            return Err(bad("image", image.width(), image.height()));
        }
        for m in ensemble.iter().chain(corruption.iter()) {
            if !m.same_shape(&depth_gt) {
                return Err(bad("map", m.width(), m.height()));
            }
        }
        Ok(LoadedSample {
            id: rec.id.clone(),
            image,
            depth_gt,
            ensemble,
            keypoints,
            corruption,
            rig,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedSample>, MapIoError> {
        (0..self.samples.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Checks that every referenced file exists, every rig id resolves and
    /// all maps of a sample agree on resolution.
    pub fn validate(&self) -> Result<(), MapIoError> {
        for rec in &self.samples {
            let paths = [&rec.image, &rec.depth_gt]
                .into_iter()
                .chain(rec.ensemble.iter())
                .chain(rec.keypoints.iter())
                .chain(rec.corruption.iter());
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(MapIoError::Validation(format!(
                        "sample {}: missing file {}",
                        rec.id,
                        full.display()
                    )));
                }
            }
        }
        for i in 0..self.samples.len() {
            self.load_sample(i)?;
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, MapIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| MapIoError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), MapIoError> {
    write_json(manifest, path.as_ref())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), MapIoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| MapIoError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}
