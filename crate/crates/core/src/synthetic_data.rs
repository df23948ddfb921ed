//! Procedural endoscopy-like scenes, artifact injection and a simulated
//! stereo ensemble.
//!
//! Scenes are ray cast on the left camera's pinhole grid against planes,
//! spheres and Gaussian bumps. Artifacts corrupt the image inside elliptic
//! regions and record their per-pixel strength. The simulated ensemble adds
//! per-member smooth bias plus Gaussian noise whose standard deviation
//! grows with that strength, so member disagreement concentrates on
//! artifacts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble_confidence::EnsembleDisparities;
use crate::map_io::{FloatMap, KeypointRecord, LoadedSample, RgbImage, StereoKeypoint};
use crate::stereo_geometry::{depth_to_disparity, project_keypoint, CameraRig, Point3D};

pub const DEFAULT_Z_RANGE: [f64; 2] = [50.0, 200.0];

/// Normalized elliptic radius below which an artifact has full strength.
const FALLOFF_START: f64 = 0.7;
const RMIN: f64 = 0.28;
const RMAX: f64 = 0.42;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("validation error: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::Validation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Plane through `point` with normal `normal` (camera frame, mm).
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Sphere; only its camera-facing cap is ever visible.
    SphereCap { center: [f64; 3], radius: f64 },
    /// Height field `z = base_z - amplitude * exp(-r^2 / (2 sigma^2))`
    /// around `center_xy`; positive amplitude bulges toward the camera.
    GaussianBump {
        center_xy: [f64; 2],
        base_z: f64,
        amplitude: f64,
        sigma_mm: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub rig: CameraRig,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub texture_seed: u64,
    #[serde(default = "default_z_range")]
    pub z_range: [f64; 2],
}

fn default_z_range() -> [f64; 2] {
    DEFAULT_Z_RANGE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Specular,
    Smoke,
    Blur,
    Occlusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    /// Ellipse center in pixels.
    pub center: [f64; 2],
    /// Ellipse semi-axes in pixels.
    pub radii: [f64; 2],
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub base_std_px: f64,
    pub artifact_std_px: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub rig: CameraRig,
    pub image: RgbImage,
    /// Millimeters.
    pub depth_gt: FloatMap,
    /// Pixels.
    pub disparity_gt: FloatMap,
    /// True artifact strength in `[0, 1]`.
    pub corruption: FloatMap,
    pub ensemble: Option<EnsembleDisparities>,
}

struct Hit {
    z: f64,
    normal: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Intersects the ray `t * (dx, dy, 1)`; `t` equals the depth of the hit.
fn intersect(p: &Primitive, dir: [f64; 3]) -> Option<Hit> {
    match *p {
        Primitive::Plane { point, normal } => {
            let den = dot(normal, dir);
            if den.abs() < 1e-12 {
                return None;
            }
            let t = dot(normal, point) / den;
            (t > 0.0).then_some(Hit { z: t, normal })
        }
        Primitive::SphereCap { center, radius } => {
            // |t d - c|^2 = r^2
            let a = dot(dir, dir);
            let b = -2.0 * dot(dir, center);
            let c = dot(center, center) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                .into_iter()
                .find(|&t| t > 0.0)?;
            let hit = [t * dir[0], t * dir[1], t * dir[2]];
            let normal = [hit[0] - center[0], hit[1] - center[1], hit[2] - center[2]];
            Some(Hit { z: t, normal })
        }
        Primitive::GaussianBump {
            center_xy,
            base_z,
            amplitude,
            sigma_mm,
        } => {
            let s2 = 2.0 * sigma_mm * sigma_mm;
            let surface = |t: f64| {
                let x = t * dir[0] - center_xy[0];
                let y = t * dir[1] - center_xy[1];
                base_z - amplitude * (-(x * x + y * y) / s2).exp()
            };
            // t - surface(t) changes sign between the bump's extremes
            let (mut lo, mut hi) = if amplitude >= 0.0 {
                (base_z - amplitude, base_z)
            } else {
                (base_z, base_z - amplitude)
            };
            if lo <= 0.0 {
                return None;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if mid - surface(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t = 0.5 * (lo + hi);
            let x = t * dir[0] - center_xy[0];
            let y = t * dir[1] - center_xy[1];
            let e = amplitude * (-(x * x + y * y) / s2).exp();
            // gradient of Z - z(X, Y)
            let dzdx = e * x / (sigma_mm * sigma_mm);
            let dzdy = e * y / (sigma_mm * sigma_mm);
            Some(Hit {
                z: t,
                normal: [-dzdx, -dzdy, 1.0],
            })
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("scene dimensions must be non-zero"));
        }
        if self.primitives.is_empty() {
            return Err(invalid("scene has no primitives"));
        }
        let [lo, hi] = self.z_range;
        if !(lo > 0.0 && hi > lo) {
            return Err(invalid(format!("bad z_range [{lo}, {hi}]")));
        }
        for p in &self.primitives {
            let ok = match *p {
                Primitive::Plane { normal, .. } => norm(normal) > 0.0,
                Primitive::SphereCap { radius, .. } => radius > 0.0,
                Primitive::GaussianBump { sigma_mm, base_z, .. } => sigma_mm > 0.0 && base_z > 0.0,
            };
            if !ok {
                return Err(invalid(format!("degenerate primitive {p:?}")));
            }
        }
        Ok(())
    }
}

/// Smooth procedural albedo in roughly `[0.55, 1]`.
struct Texture {
    waves: Vec<([f64; 2], f64, f64)>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|k| {
                let freq = 0.04 * (1.6f64).powi(k);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = 1.0 / (k as f64 + 1.5);
                ([freq * angle.cos(), freq * angle.sin()], phase, amp)
            })
            .collect();
        Self { waves }
    }

    fn albedo(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.2).sum();
        let v: f64 = self
            .waves
            .iter()
            .map(|(f, ph, a)| a * (f[0] * x + f[1] * y + ph).sin())
            .sum::<f64>()
            / total;
        0.775 + 0.225 * v
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders the scene without artifacts or ensemble.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticSample, SynthError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let rig = spec.rig;
    let tex = Texture::new(spec.texture_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [z_lo, z_hi] = spec.z_range;

    let mut depth = vec![f64::NAN; w * h];
    let mut img = vec![0u8; 3 * w * h];
    let tint = [0.86, 0.46, 0.40];
    for y in 0..h {
        for x in 0..w {
            let dir = [
                (x as f64 - rig.cx_px) / rig.focal_px,
                (y as f64 - rig.cy_px) / rig.focal_px,
                1.0,
            ];
            let hit = spec
                .primitives
                .iter()
                .filter_map(|p| intersect(p, dir))
                .min_by(|a, b| a.z.total_cmp(&b.z));
            let i = y * w + x;
            let shade = match hit {
                Some(hit) if hit.z >= z_lo && hit.z <= z_hi => {
                    depth[i] = hit.z;
                    let lambert = dot(hit.normal, dir).abs() / (norm(hit.normal) * norm(dir));
                    // headlight falloff relative to the near end of the range
                    let falloff = (z_lo / hit.z).sqrt();
                    (0.25 + 0.75 * lambert) * (0.45 + 0.55 * falloff)
                }
                _ => 0.05,
            };
            let albedo = tex.albedo(x as f64, y as f64);
            for c in 0..3 {
                let sensor: f64 = rng.gen_range(-1.5..1.5);
                img[3 * i + c] = to_u8(255.0 * shade * albedo * tint[c] + sensor);
            }
        }
    }
    let depth_gt = FloatMap::new(w, h, depth).expect("dimensions validated");
    let disparity_gt = depth_to_disparity(&depth_gt, &rig);
    Ok(SyntheticSample {
        rig,
        image: RgbImage::new(w, h, img).expect("dimensions validated"),
        disparity_gt,
        corruption: FloatMap::filled(w, h, 0.0),
        depth_gt,
        ensemble: None,
    })
}

impl ArtifactSpec {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(invalid(format!("artifact strength {} outside [0, 1]", self.strength)));
        }
        if !(self.radii[0] > 0.0 && self.radii[1] > 0.0) {
            return Err(invalid("artifact radii must be positive"));
        }
        let [cx, cy] = self.center;
        let [rx, ry] = self.radii;
        if cx + rx < 0.0 || cy + ry < 0.0 || cx - rx > (width - 1) as f64 || cy - ry > (height - 1) as f64 {
            return Err(invalid(format!("artifact at {:?} does not touch the image", self.center)));
        }
        Ok(())
    }

    /// Strength times a cosine falloff over the outer 30% of the ellipse.
    pub fn weight(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let r = (dx * dx + dy * dy).sqrt();
        let profile = if r <= FALLOFF_START {
            1.0
        } else if r < 1.0 {
            let t = (r - FALLOFF_START) / (1.0 - FALLOFF_START);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            0.0
        };
        self.strength * profile
    }
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[3 * (y * w + sx) + c];
                }
                tmp[3 * (y * w + x) + c] = acc / ksum;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[3 * (sy * w + x) + c];
                }
                out[3 * (y * w + x) + c] = acc / ksum;
            }
        }
    }
    out
}

/// Corrupts the image inside each artifact region and accumulates the
/// clamped per-pixel strength into `corruption`. Artifacts apply in order.
pub fn inject_artifacts(
    sample: &SyntheticSample,
    artifacts: &[ArtifactSpec],
    seed: u64,
) -> Result<SyntheticSample, SynthError> {
    let (w, h) = (sample.image.width(), sample.image.height());
    for a in artifacts {
        a.validate(w, h)?;
    }
    let mut out = sample.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corruption: Vec<f64> = (0..w * h)
        .map(|i| {
            if sample.corruption.is_valid(i) {
                sample.corruption.value(i)
            } else {
                0.0
            }
        })
        .collect();
    for a in artifacts {
        let weights: Vec<f64> = (0..w * h)
            .map(|i| a.weight((i % w) as f64, (i / w) as f64))
            .collect();
        let blurred = (a.kind == ArtifactKind::Blur).then(|| gaussian_blur(&out.image, 1.0 + 2.5 * a.strength));
        // smoke density varies slowly across the plume
        let (fx, fy, ph) = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.0..6.3));
        let data = out.image.data_mut();
        for (i, &wt) in weights.iter().enumerate() {
            if wt <= 0.0 {
                continue;
            }
            corruption[i] += wt;
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            for c in 0..3 {
                let v = data[3 * i + c] as f64;
                let nv = match a.kind {
                    ArtifactKind::Specular => v + (255.0 - v) * wt,
                    ArtifactKind::Smoke => {
                        let density = 0.85 + 0.15 * (fx * x + fy * y + ph).sin();
                        let alpha = 0.8 * wt * density;
                        let haze = [214.0, 208.0, 204.0][c];
                        v * (1.0 - alpha) + haze * alpha
                    }
                    ArtifactKind::Blur => {
                        let b = blurred.as_ref().expect("computed for blur")[3 * i + c];
                        v * (1.0 - wt) + b * wt
                    }
                    ArtifactKind::Occlusion => {
                        let alpha = 0.9 * wt;
                        let dark = [22.0, 22.0, 26.0][c];
                        v * (1.0 - alpha) + dark * alpha
                    }
                };
                data[3 * i + c] = to_u8(nv);
            }
        }
    }
    for c in corruption.iter_mut() {
        *c = c.clamp(0.0, 1.0);
    }
    out.corruption = FloatMap::new(w, h, corruption).expect("same dimensions");
    Ok(out)
}

/// Adds a `k`-member simulated stereo ensemble.
///
/// Member `k` is `disparity_gt + b_k + e_k`, where `b_k` is a plane wave of
/// amplitude `base_std_px` with random orientation and phase, and `e_k` is
/// i.i.d. Gaussian with standard deviation
/// `base_std_px + corruption * artifact_std_px`.
pub fn simulate_ensemble(
    sample: &SyntheticSample,
    k: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<SyntheticSample, SynthError> {
    if k < 2 {
        return Err(invalid(format!("ensemble needs at least 2 members, got {k}")));
    }
    if !(noise.base_std_px >= 0.0 && noise.artifact_std_px >= 0.0) {
        return Err(invalid("noise standard deviations must be >= 0"));
    }
    let gt = &sample.disparity_gt;
    let (w, h) = (gt.width(), gt.height());
    let members = (0..k)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64 + 1);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let cycles: f64 = rng.gen_range(0.3..1.5);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (fx, fy) = (cycles * angle.cos() / w as f64, cycles * angle.sin() / h as f64);
            let mut data = vec![f64::NAN; w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if !gt.is_valid(i) {
                        continue;
                    }
                    let c = if sample.corruption.is_valid(i) {
                        sample.corruption.value(i)
                    } else {
                        0.0
                    };
                    let bias = noise.base_std_px
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                    let std = noise.base_std_px + c * noise.artifact_std_px;
                    data[i] = gt.value(i) + bias + std * z;
                }
            }
            FloatMap::new(w, h, data).expect("same dimensions")
        })
        .collect();
    let mut out = sample.clone();
    out.ensemble = Some(EnsembleDisparities::new(members).expect("members share dimensions"));
    Ok(out)
}

/// Random scene in the endoscopic working range: a steeply tilted
/// background plane with tissue lobes and folds in front of it.
pub fn random_scene_spec(width: usize, height: usize, rig: CameraRig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // oblique view of the wall, as when looking down a lumen
    let back_z = rng.gen_range(120.0..145.0);
    let tilt = rng.gen_range(0.45..0.7);
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let normal = [tilt * azimuth.cos(), tilt * azimuth.sin(), -1.0];
    let mut primitives = vec![Primitive::Plane {
        point: [0.0, 0.0, back_z],
        normal,
    }];
    // lateral extent of the view at depth z, in mm
    let half_w = |z: f64| 0.5 * width as f64 * z / rig.focal_px;
    let half_h = |z: f64| 0.5 * height as f64 * z / rig.focal_px;
    for _ in 0..rng.gen_range(1..=3) {
        let cz = rng.gen_range(85.0..135.0);
        let radius = rng.gen_range(0.25..0.45) * half_w(cz);
        let cx = rng.gen_range(-0.7..0.7) * half_w(cz);
        let cy = rng.gen_range(-0.7..0.7) * half_h(cz);
        primitives.push(Primitive::SphereCap {
            center: [cx, cy, cz + 0.5 * radius],
            radius,
        });
    }
    for _ in 0..rng.gen_range(1..=2) {
        let base_z = back_z - rng.gen_range(0.0..5.0);
        let sigma_mm = rng.gen_range(0.15..0.3) * half_w(base_z);
        primitives.push(Primitive::GaussianBump {
            center_xy: [
                rng.gen_range(-0.6..0.6) * half_w(base_z),
                rng.gen_range(-0.6..0.6) * half_h(base_z),
            ],
            base_z,
            amplitude: rng.gen_range(15.0..35.0),
            sigma_mm,
        });
    }
    SceneSpec {
        width,
        height,
        rig,
        primitives,
        texture_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        z_range: DEFAULT_Z_RANGE,
    }
}

/// Random artifacts, added until at least `min_coverage` of the pixels
/// carry some corruption (or eight artifacts exist).
pub fn random_artifacts(width: usize, height: usize, min_coverage: f64, seed: u64) -> Vec<ArtifactSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [
        ArtifactKind::Specular,
        ArtifactKind::Smoke,
        ArtifactKind::Blur,
        ArtifactKind::Occlusion,
    ];
    let mut out: Vec<ArtifactSpec> = Vec::new();
    let scale = width.min(height) as f64;
    let coverage = |arts: &[ArtifactSpec]| {
        let mut hit = 0usize;
        for y in 0..height {
            for x in 0..width {
                if arts.iter().any(|a| a.weight(x as f64, y as f64) > 0.0) {
                    hit += 1;
                }
            }
        }
        hit as f64 / (width * height) as f64
    };
    while out.len() < 8 && (out.is_empty() || coverage(&out) < min_coverage) {
        out.push(ArtifactSpec {
            kind: kinds[rng.gen_range(0..kinds.len())],
            center: [rng.gen_range(0.1..0.9) * width as f64, rng.gen_range(0.1..0.9) * height as f64],
            radii: [rng.gen_range(RMIN..RMAX) * scale, rng.gen_range(RMIN..RMAX) * scale],
            strength: rng.gen_range(0.7..1.0),
        });
    }
    out
}

/// Stereo keypoints at random valid pixels, consistent with the ground
/// truth depth.
pub fn sample_keypoints(sample: &SyntheticSample, n: usize, seed: u64) -> Vec<StereoKeypoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &sample.depth_gt;
    let (w, h) = (d.width(), d.height());
    let rig = sample.rig;
    let mut kps = Vec::with_capacity(n);
    let mut attempts = 0;
    while kps.len() < n && attempts < 100 * n.max(1) {
        attempts += 1;
        let x = rng.gen_range(1..w.saturating_sub(1).max(2)).min(w - 1);
        let y = rng.gen_range(1..h.saturating_sub(1).max(2)).min(h - 1);
        let Some(z) = d.get(x, y) else { continue };
        let p = Point3D {
            x_mm: (x as f64 - rig.cx_px) * z / rig.focal_px,
            y_mm: (y as f64 - rig.cy_px) * z / rig.focal_px,
            z_mm: z,
        };
        let Ok(mut kp) = project_keypoint(&p, &rig, kps.len() as u64) else { continue };
        if kp.u_right < 0.0 {
            continue;
        }
        // exact pixel centre on the left image
        kp.u_left = x as f64;
        kp.v_left = y as f64;
        kp.v_right = y as f64;
        kps.push(kp);
    }
    kps
}

/// Parameters of a randomly generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub n_samples: usize,
    pub width: usize,
    pub height: usize,
    pub rig: CameraRig,
    pub k: usize,
    pub noise: NoiseModel,
    /// Artifacts are added until at least this share of pixels is touched.
    pub min_artifact_coverage: f64,
    pub keypoints_per_sample: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_samples: 20,
            width: 64,
            height: 48,
            rig: CameraRig::new(60.0, 4.0, 31.5, 23.5).expect("valid rig"),
            k: 5,
            noise: NoiseModel {
                base_std_px: 0.15,
                artifact_std_px: 0.6,
            },
            min_artifact_coverage: 0.3,
            keypoints_per_sample: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub id: String,
    pub sample: SyntheticSample,
    pub keypoints: Vec<StereoKeypoint>,
}

impl GeneratedSample {
    /// The in-memory equivalent of loading this sample from a manifest.
    pub fn to_loaded(&self) -> LoadedSample {
        LoadedSample {
            id: self.id.clone(),
            image: self.sample.image.clone(),
            depth_gt: self.sample.depth_gt.clone(),
            ensemble: self
                .sample
                .ensemble
                .as_ref()
                .map(|e| e.members().to_vec())
                .unwrap_or_default(),
            keypoints: self
                .keypoints
                .iter()
                .map(|&keypoint| KeypointRecord {
                    keypoint,
                    rectified: true,
                })
                .collect(),
            corruption: Some(self.sample.corruption.clone()),
            rig: self.sample.rig,
        }
    }
}

/// Derives an independent per-purpose seed for sample `index`.
pub fn derive_seed(seed: u64, index: usize, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.set_word_pos(2 * index as u128);
    rng.gen()
}

/// Random scenes with random artifacts and a simulated ensemble.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Vec<GeneratedSample>, SynthError> {
    (0..spec.n_samples)
        .map(|i| {
            let scene = random_scene_spec(spec.width, spec.height, spec.rig, derive_seed(spec.seed, i, 1));
            let s = gen_scene(&scene, derive_seed(spec.seed, i, 2))?;
            let arts = random_artifacts(
                spec.width,
                spec.height,
                spec.min_artifact_coverage,
                derive_seed(spec.seed, i, 3),
            );
            let s = inject_artifacts(&s, &arts, derive_seed(spec.seed, i, 4))?;
            let s = simulate_ensemble(&s, spec.k, &spec.noise, derive_seed(spec.seed, i, 5))?;
            let keypoints = sample_keypoints(&s, spec.keypoints_per_sample, derive_seed(spec.seed, i, 6));
            Ok(GeneratedSample {
                id: format!("sample_{i:04}"),
                sample: s,
                keypoints,
            })
        })
        .collect()
}
