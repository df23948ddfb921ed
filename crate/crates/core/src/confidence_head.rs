//! Per-pixel confidence head: 3x3 convolution to 32 channels with ReLU,
//! then a 1x1 convolution to one channel squashed by a sigmoid.
//!
//! Forward and backward passes are written out by hand and trained with
//! full-batch gradient descent on binary cross-entropy.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble_confidence::ConfidenceMap;
use crate::losses::bce;
use crate::map_io::{FloatMap, MapIoError, RgbImage};

pub const HIDDEN: usize = 32;
const KSIZE: usize = 3;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Map(#[from] MapIoError),
}

/// Planar (channel-major) feature tensor: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, HeadError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(HeadError::Shape("feature map dimensions must be non-zero".into()));
        }
        if data.len() != width * height * channels {
            return Err(HeadError::Shape(format!(
                "feature data has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Stacks single-channel planes of equal size.
    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self, HeadError> {
        let mut data = Vec::with_capacity(width * height * planes.len());
        for p in planes {
            if p.len() != width * height {
                return Err(HeadError::Shape("plane size mismatch".into()));
            }
            data.extend_from_slice(p);
        }
        Self::new(width, height, planes.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Head weights. `w1` is laid out `[ky][kx][c_in][out]`, i.e. 3x3xC_inx32.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    c_in: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases of each layer.
    Uniform,
    Zero,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsSidecar {
    c_in: usize,
    hidden: usize,
    layout: String,
    w1_shape: [usize; 4],
    count: usize,
}

impl HeadParams {
    pub fn zeros(c_in: usize) -> Self {
        assert!(c_in > 0);
        Self {
            c_in,
            w1: vec![0.0; KSIZE * KSIZE * c_in * HIDDEN],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN],
            b2: 0.0,
        }
    }

    pub fn init(c_in: usize, init: HeadInit, seed: u64) -> Self {
        let mut p = Self::zeros(c_in);
        if init == HeadInit::Uniform {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a1 = 1.0 / ((KSIZE * KSIZE * c_in) as f64).sqrt();
            let a2 = 1.0 / (HIDDEN as f64).sqrt();
            p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
            p.b1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
            p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
            p.b2 = rng.gen_range(-a2..a2);
        }
        p
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    #[inline]
    fn w1_index(&self, ky: usize, kx: usize, c: usize, o: usize) -> usize {
        ((ky * KSIZE + kx) * self.c_in + c) * HIDDEN + o
    }

    /// All parameters in `w1, b1, w2, b2` order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn from_flat(c_in: usize, flat: &[f64]) -> Result<Self, HeadError> {
        let mut p = Self::zeros(c_in);
        if flat.len() != p.len() {
            return Err(HeadError::Format(format!(
                "expected {} parameters for c_in={c_in}, got {}",
                p.len(),
                flat.len()
            )));
        }
        let (a, rest) = flat.split_at(p.w1.len());
        let (b, rest) = rest.split_at(HIDDEN);
        let (c, d) = rest.split_at(HIDDEN);
        p.w1.copy_from_slice(a);
        p.b1.copy_from_slice(b);
        p.w2.copy_from_slice(c);
        p.b2 = d[0];
        Ok(p)
    }

    /// Writes little-endian f32 parameters to `path` and a JSON sidecar
    /// describing the layout to `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        let bytes: Vec<u8> = self.flatten().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|source| HeadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let sidecar = ParamsSidecar {
            c_in: self.c_in,
            hidden: HIDDEN,
            layout: "w1,b1,w2,b2".into(),
            w1_shape: [KSIZE, KSIZE, self.c_in, HIDDEN],
            count: self.len(),
        };
        crate::map_io::write_json(&sidecar, &path.with_extension("json"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        let io = |source| HeadError::Io {
            path: path.display().to_string(),
            source,
        };
        let side_path = path.with_extension("json");
        let text = fs::read_to_string(&side_path).map_err(io)?;
        let side: ParamsSidecar =
            serde_json::from_str(&text).map_err(|e| HeadError::Format(e.to_string()))?;
        if side.layout != "w1,b1,w2,b2" || side.hidden != HIDDEN {
            return Err(HeadError::Format(format!("unsupported layout {:?}", side.layout)));
        }
        let bytes = fs::read(path).map_err(io)?;
        if bytes.len() % 4 != 0 {
            return Err(HeadError::Format("payload is not a whole number of f32".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_flat(side.c_in, &flat)
    }
}

/// Gradients with the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl HeadGrads {
    fn zeros_like(p: &HeadParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN],
            b2: 0.0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w1.clone();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    fn add_scaled(&mut self, other: &HeadGrads, s: f64) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += s * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += s * b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += s * b;
        }
        self.b2 += s * other.b2;
    }
}

fn check_channels(features: &FeatureMap, params: &HeadParams) -> Result<(), HeadError> {
    if features.channels != params.c_in {
        return Err(HeadError::Shape(format!(
            "features have {} channels, head expects {}",
            features.channels, params.c_in
        )));
    }
    Ok(())
}

/// Hidden pre-activations, pixel-major: `[y * w + x][o]`.
fn conv3x3(features: &FeatureMap, params: &HeadParams) -> Vec<f64> {
    let (w, h, cin) = (features.width, features.height, features.channels);
    let mut hidden = Vec::with_capacity(HIDDEN * w * h);
    for _ in 0..w * h {
        hidden.extend_from_slice(&params.b1);
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let acc = &mut hidden[i * HIDDEN..(i + 1) * HIDDEN];
            for_each_tap(w, h, x, y, |ky, kx, src| {
                for c in 0..cin {
                    let f = features.data[c * w * h + src];
                    if f == 0.0 {
                        continue;
                    }
                    let wbase = params.w1_index(ky, kx, c, 0);
                    for (a, &wv) in acc.iter_mut().zip(&params.w1[wbase..wbase + HIDDEN]) {
                        *a += wv * f;
                    }
                }
            });
        }
    }
    hidden
}

/// Calls `f(ky, kx, source_index)` for every in-bounds 3x3 tap around
/// `(x, y)`; out-of-bounds taps read zero padding and are skipped.
#[inline]
fn for_each_tap(w: usize, h: usize, x: usize, y: usize, mut f: impl FnMut(usize, usize, usize)) {
    for ky in 0..KSIZE {
        let sy = y as isize + ky as isize - 1;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for kx in 0..KSIZE {
            let sx = x as isize + kx as isize - 1;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            f(ky, kx, sy as usize * w + sx as usize);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    hidden: Vec<f64>,
    prob: Vec<f64>,
}

fn forward_full(features: &FeatureMap, params: &HeadParams) -> Forward {
    let n = features.width * features.height;
    let hidden = conv3x3(features, params);
    let prob = (0..n)
        .map(|i| {
            let z = hidden[i * HIDDEN..(i + 1) * HIDDEN]
                .iter()
                .zip(&params.w2)
                .fold(params.b2, |z, (&hv, &w2)| if hv > 0.0 { z + w2 * hv } else { z });
            sigmoid(z)
        })
        .collect();
    Forward { hidden, prob }
}

pub fn head_forward(features: &FeatureMap, params: &HeadParams) -> Result<ConfidenceMap, HeadError> {
    check_channels(features, params)?;
    let fw = forward_full(features, params);
    let map = FloatMap::new(features.width, features.height, fw.prob)?;
    Ok(ConfidenceMap::new(map).expect("sigmoid output lies in [0, 1]"))
}

/// Backpropagates `upstream = dL/dp` through the head. Returns parameter
/// gradients and gradients w.r.t. the input features.
pub fn head_backward(
    features: &FeatureMap,
    params: &HeadParams,
    upstream: &FloatMap,
) -> Result<(HeadGrads, FeatureMap), HeadError> {
    let (grads, dfeat) = backward_impl(features, params, upstream, true)?;
    Ok((grads, dfeat.expect("requested feature gradients")))
}

fn backward_impl(
    features: &FeatureMap,
    params: &HeadParams,
    upstream: &FloatMap,
    want_features: bool,
) -> Result<(HeadGrads, Option<FeatureMap>), HeadError> {
    check_channels(features, params)?;
    let (w, h, cin) = (features.width, features.height, features.channels);
    if upstream.width() != w || upstream.height() != h {
        return Err(HeadError::Shape(format!(
            "upstream gradient is {}x{}, output is {w}x{h}",
            upstream.width(),
            upstream.height()
        )));
    }
    let n = w * h;
    let fw = forward_full(features, params);
    let mut g = HeadGrads::zeros_like(params);
    let mut dfeat = want_features.then(|| vec![0.0; cin * n]);
    let mut dh = [0.0f64; HIDDEN];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !upstream.is_valid(i) {
                continue;
            }
            let p = fw.prob[i];
            // dL/dz at the logit
            let dz = upstream.value(i) * p * (1.0 - p);
            if dz == 0.0 {
                continue;
            }
            g.b2 += dz;
            let hid = &fw.hidden[i * HIDDEN..(i + 1) * HIDDEN];
            let mut any = false;
            for o in 0..HIDDEN {
                if hid[o] > 0.0 {
                    g.w2[o] += dz * hid[o];
                    dh[o] = dz * params.w2[o];
                    g.b1[o] += dh[o];
                    any |= dh[o] != 0.0;
                } else {
                    dh[o] = 0.0;
                }
            }
            if !any {
                continue;
            }
            for_each_tap(w, h, x, y, |ky, kx, src| {
                for c in 0..cin {
                    let f = features.data[c * n + src];
                    let wbase = params.w1_index(ky, kx, c, 0);
                    let gw = &mut g.w1[wbase..wbase + HIDDEN];
                    for (gv, &d) in gw.iter_mut().zip(&dh) {
                        *gv += d * f;
                    }
                    if let Some(df) = dfeat.as_mut() {
                        let back: f64 = dh
                            .iter()
                            .zip(&params.w1[wbase..wbase + HIDDEN])
                            .map(|(d, wv)| d * wv)
                            .sum();
                        df[c * n + src] += back;
                    }
                }
            });
        }
    }
    let dfeat = dfeat.map(|d| FeatureMap::new(w, h, cin, d).expect("shape matches input"));
    Ok((g, dfeat))
}

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init: HeadInit,
    pub bce_epsilon: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            epochs: 300,
            seed: 0,
            init: HeadInit::Uniform,
            bce_epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub params: HeadParams,
    /// Mean BCE over samples before each update, plus the final value.
    pub losses: Vec<f64>,
}

/// Mean BCE of the head over `samples`, and its parameter gradient.
pub fn batch_loss_and_grad(
    samples: &[(FeatureMap, ConfidenceMap)],
    params: &HeadParams,
    eps: f64,
    want_grad: bool,
) -> Result<(f64, Option<HeadGrads>), HeadError> {
    let mut loss = 0.0;
    let mut total = want_grad.then(|| HeadGrads::zeros_like(params));
    let scale = 1.0 / samples.len() as f64;
    for (feat, target) in samples {
        if feat.width != target.width() || feat.height != target.height() {
            return Err(HeadError::Shape("features and target differ in size".into()));
        }
        let pred = head_forward(feat, params)?;
        let (l, dl) = bce(&pred, target, eps).map_err(|e| HeadError::Shape(e.to_string()))?;
        loss += l * scale;
        if let Some(t) = total.as_mut() {
            let (g, _) = backward_impl(feat, params, &dl, false)?;
            t.add_scaled(&g, scale);
        }
    }
    Ok((loss, total))
}

pub fn train_head(samples: &[(FeatureMap, ConfidenceMap)], cfg: &HeadTrainConfig) -> Result<TrainedHead, HeadError> {
    let first = samples
        .first()
        .ok_or_else(|| HeadError::Validation("no training samples".into()))?;
    let c_in = first.0.channels;
    if samples.iter().any(|(f, _)| f.channels != c_in) {
        return Err(HeadError::Validation("samples disagree on channel count".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(HeadError::Validation(format!("lr must be > 0, got {}", cfg.lr)));
    }
    let mut params = HeadParams::init(c_in, cfg.init, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = batch_loss_and_grad(samples, &params, cfg.bce_epsilon, true)?;
        log::debug!("head epoch {epoch}: bce {loss:.6}");
        losses.push(loss);
        let g = grad.expect("gradient requested");
        for (p, d) in params.w1.iter_mut().zip(&g.w1) {
            *p -= cfg.lr * d;
        }
        for (p, d) in params.b1.iter_mut().zip(&g.b1) {
            *p -= cfg.lr * d;
        }
        for (p, d) in params.w2.iter_mut().zip(&g.w2) {
            *p -= cfg.lr * d;
        }
        params.b2 -= cfg.lr * g.b2;
    }
    let (final_loss, _) = batch_loss_and_grad(samples, &params, cfg.bce_epsilon, false)?;
    losses.push(final_loss);
    Ok(TrainedHead { params, losses })
}

/// Number of engineered input channels produced by [`head_features`].
pub const FEATURE_CHANNELS: usize = 4;

/// Engineered stand-ins for decoder features:
///
/// 0. grayscale intensity in `[0, 1]`;
/// 1. intensity variance over the 3x3 neighbourhood;
/// 2. intensity gradient magnitude (central differences, clamped at borders);
/// 3. `ln(1 + v)` where `v` is the 3x3 mean of the ensemble disparity
///    variance divided by `2 sigma^2`.
///
/// Invalid variance pixels count as zero.
pub fn head_features(image: &RgbImage, variance: &FloatMap, sigma_eff: f64) -> Result<FeatureMap, HeadError> {
    let (w, h) = (image.width(), image.height());
    if variance.width() != w || variance.height() != h {
        return Err(HeadError::Shape("variance map and image differ in size".into()));
    }
    if !(sigma_eff > 0.0) {
        return Err(HeadError::Validation(format!("sigma must be > 0, got {sigma_eff}")));
    }
    let gray = image.grayscale();
    let var: Vec<f64> = (0..w * h)
        .map(|i| if variance.is_valid(i) { variance.value(i) } else { 0.0 })
        .collect();
    let at = |v: &[f64], x: isize, y: isize| -> f64 {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        v[cy * w + cx]
    };
    let denom = 2.0 * sigma_eff * sigma_eff;
    let mut local_var = vec![0.0; w * h];
    let mut grad_mag = vec![0.0; w * h];
    let mut ens = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut s2, mut sv) = (0.0, 0.0, 0.0);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let g = at(&gray, x + dx, y + dy);
                    s += g;
                    s2 += g * g;
                    sv += at(&var, x + dx, y + dy);
                }
            }
            let i = y as usize * w + x as usize;
            let m = s / 9.0;
            local_var[i] = (s2 / 9.0 - m * m).max(0.0);
            let gx = 0.5 * (at(&gray, x + 1, y) - at(&gray, x - 1, y));
            let gy = 0.5 * (at(&gray, x, y + 1) - at(&gray, x, y - 1));
            grad_mag[i] = (gx * gx + gy * gy).sqrt();
            ens[i] = (sv / 9.0 / denom).ln_1p();
        }
    }
    FeatureMap::from_planes(w, h, &[gray, local_var, grad_mag, ens])
}
