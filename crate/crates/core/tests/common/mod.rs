//! Random instances, independent oracles and finite-difference suites
//! shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use confdepth::confidence_head::{head_backward, head_forward, FeatureMap, HeadInit, HeadParams, HIDDEN};
use confdepth::ensemble_confidence::ConfidenceMap;
use confdepth::gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
use confdepth::losses::{
    bce, edge_kink_margin, edge_smooth_conf, grad_match_conf, grad_match_kink_margin, silog_conf, total_loss,
    LossConfig,
};
use confdepth::map_io::{FloatMap, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LOSS_TOL: f64 = 1e-5;
pub const HEAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`; roughly one pixel in `invalid_every` is
/// masked out when that is non-zero.
pub fn rand_map(r: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64, invalid_every: u32) -> FloatMap {
    let data: Vec<f64> = (0..w * h).map(|_| r.gen_range(lo..hi)).collect();
    let mask = (0..w * h)
        .map(|_| invalid_every == 0 || r.gen_range(0..invalid_every) != 0)
        .collect();
    FloatMap::with_mask(w, h, data, mask).unwrap()
}

pub fn rand_conf(r: &mut ChaCha8Rng, w: usize, h: usize) -> ConfidenceMap {
    ConfidenceMap::new(rand_map(r, w, h, 0.0, 1.0, 0)).unwrap()
}

pub fn rand_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..3 * w * h).map(|_| r.gen()).collect()).unwrap()
}

pub fn rand_features(r: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> FeatureMap {
    FeatureMap::new(w, h, c, (0..w * h * c).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Same mask as `like`, new values.
pub fn with_values(like: &FloatMap, values: &[f64]) -> FloatMap {
    FloatMap::with_mask(like.width(), like.height(), values.to_vec(), like.mask().to_vec()).unwrap()
}

/// Relative steps of 1e-4; components below 1e-4 of the largest one are
/// compared against that floor, since truncation error there is of the
/// order of the large components times the step squared.
fn fd_config() -> GradCheckConfig {
    GradCheckConfig {
        floor_frac: 1e-4,
        ..GradCheckConfig::default()
    }
}

/// Pixels whose kink margin is within this many FD steps are excluded.
const KINK_STEPS: f64 = 20.0;

fn kink_skip(x: &[f64], margin_in_log: &[f64], log_space: bool) -> Vec<bool> {
    let cfg = fd_config();
    x.iter()
        .zip(margin_in_log)
        .map(|(&v, &m)| {
            let h = (v.abs() * cfg.rel_step).max(cfg.min_step);
            let step = if log_space { h / v.abs() } else { h };
            m < KINK_STEPS * step
        })
        .collect()
}

pub fn silog_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (w, h) = (8, 8);
    let gt = rand_map(&mut r, w, h, 20.0, 200.0, 7);
    let pred = rand_map(&mut r, w, h, 20.0, 200.0, 0);
    let conf = rand_conf(&mut r, w, h);
    let cfg = LossConfig {
        lambda_silog: r.gen_range(0.0..1.0),
        ..LossConfig::default()
    };
    let (_, grad) = silog_conf(&pred, &gt, &conf, &cfg).unwrap();
    let f = |x: &[f64]| silog_conf(&with_values(&pred, x), &gt, &conf, &cfg).unwrap().0;
    check_gradient(f, pred.data(), grad.data(), None, &fd_config())
}

pub fn grad_match_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (w, h) = (16, 16);
    let gt = rand_map(&mut r, w, h, 20.0, 200.0, 9);
    let pred = rand_map(&mut r, w, h, 20.0, 200.0, 0);
    let conf = rand_conf(&mut r, w, h);
    let cfg = LossConfig::default();
    let (_, grad) = grad_match_conf(&pred, &gt, &conf, &cfg).unwrap();
    let skip = kink_skip(pred.data(), &grad_match_kink_margin(&pred, &gt, &conf, &cfg), true);
    let f = |x: &[f64]| grad_match_conf(&with_values(&pred, x), &gt, &conf, &cfg).unwrap().0;
    check_gradient(f, pred.data(), grad.data(), Some(&skip), &fd_config())
}

pub fn edge_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (w, h) = (9, 7);
    let pred = rand_map(&mut r, w, h, 20.0, 200.0, 8);
    let conf = rand_conf(&mut r, w, h);
    let img = rand_image(&mut r, w, h);
    let cfg = LossConfig::default();
    let (_, grad) = edge_smooth_conf(&pred, &img, &conf, &cfg).unwrap();
    let skip = kink_skip(pred.data(), &edge_kink_margin(&pred, &conf), false);
    let f = |x: &[f64]| edge_smooth_conf(&with_values(&pred, x), &img, &conf, &cfg).unwrap().0;
    check_gradient(f, pred.data(), grad.data(), Some(&skip), &fd_config())
}

pub fn total_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (w, h) = (12, 10);
    let gt = rand_map(&mut r, w, h, 20.0, 200.0, 0);
    let pred = rand_map(&mut r, w, h, 20.0, 200.0, 0);
    let conf = rand_conf(&mut r, w, h);
    let img = rand_image(&mut r, w, h);
    let cfg = LossConfig::default();
    let t = total_loss(&pred, &gt, &conf, &img, &cfg).unwrap();
    let gm = grad_match_kink_margin(&pred, &gt, &conf, &cfg);
    let em = edge_kink_margin(&pred, &conf);
    let a = kink_skip(pred.data(), &gm, true);
    let b = kink_skip(pred.data(), &em, false);
    let skip: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x || *y).collect();
    let f = |x: &[f64]| total_loss(&with_values(&pred, x), &gt, &conf, &img, &cfg).unwrap().total;
    check_gradient(f, pred.data(), t.grad_wrt_pred.data(), Some(&skip), &fd_config())
}

pub fn bce_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (w, h) = (8, 8);
    let pred = rand_map(&mut r, w, h, 0.02, 0.98, 0);
    let target = rand_map(&mut r, w, h, 0.0, 1.0, 0);
    let (_, grad) = bce(&pred, &target, 1e-7).unwrap();
    let f = |x: &[f64]| bce(&with_values(&pred, x), &target, 1e-7).unwrap().0;
    check_gradient(f, pred.data(), grad.data(), None, &fd_config())
}

/// Hidden pre-activations by direct summation, `[pixel][channel]`.
pub fn naive_preacts(feat: &FeatureMap, p: &HeadParams) -> Vec<Vec<f64>> {
    let (w, h, c_in) = (feat.width(), feat.height(), feat.channels());
    let mut out = vec![vec![0.0; HIDDEN]; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let pix = &mut out[y as usize * w + x as usize];
            for o in 0..HIDDEN {
                let mut z = p.b1[o];
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let (sx, sy) = (x + kx - 1, y + ky - 1);
                        if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                            continue;
                        }
                        for c in 0..c_in {
                            let wi = (((ky * 3 + kx) as usize * c_in) + c) * HIDDEN + o;
                            z += p.w1[wi] * feat.plane(c)[sy as usize * w + sx as usize];
                        }
                    }
                }
                pix[o] = z;
            }
        }
    }
    out
}

pub fn naive_forward(feat: &FeatureMap, p: &HeadParams) -> Vec<f64> {
    naive_preacts(feat, p)
        .iter()
        .map(|z| {
            let s: f64 = z.iter().zip(&p.w2).map(|(&v, &w)| v.max(0.0) * w).sum::<f64>() + p.b2;
            1.0 / (1.0 + (-s).exp())
        })
        .collect()
}

fn random_head(r: &mut ChaCha8Rng, c_in: usize) -> HeadParams {
    let mut p = HeadParams::init(c_in, HeadInit::Uniform, r.gen());
    // larger output weights so the sigmoid is not flat
    p.w2.iter_mut().for_each(|v| *v *= 3.0);
    p
}

/// Scalar probe `L = sum(u * head(x))` and its analytic gradients.
struct HeadProbe {
    feat: FeatureMap,
    params: HeadParams,
    upstream: FloatMap,
}

impl HeadProbe {
    fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let (w, h, c) = (6, 5, 4);
        let feat = rand_features(&mut r, w, h, c);
        let params = random_head(&mut r, c);
        let upstream = rand_map(&mut r, w, h, -1.0, 1.0, 0);
        Self { feat, params, upstream }
    }

    fn loss(&self, feat: &FeatureMap, params: &HeadParams) -> f64 {
        let out = head_forward(feat, params).unwrap();
        out.data().iter().zip(self.upstream.data()).map(|(a, b)| a * b).sum()
    }
}

pub fn head_param_case(seed: u64) -> GradCheckReport {
    let probe = HeadProbe::new(seed);
    let (grads, _) = head_backward(&probe.feat, &probe.params, &probe.upstream).unwrap();
    let x = probe.params.flatten();
    let c_in = probe.params.c_in();
    let cfg = fd_config();
    // a w1 or b1 step moves channel o's pre-activations by at most
    // step * max|feature| (1 for b1); skip when that can cross zero
    let pre = naive_preacts(&probe.feat, &probe.params);
    let fmax = probe.feat.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let margin: Vec<f64> = (0..HIDDEN)
        .map(|o| pre.iter().map(|z| z[o].abs()).fold(f64::INFINITY, f64::min))
        .collect();
    let n_w1 = probe.params.w1.len();
    let skip: Vec<bool> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let o = if i < n_w1 {
                i % HIDDEN
            } else if i < n_w1 + HIDDEN {
                i - n_w1
            } else {
                return false;
            };
            let h = (v.abs() * cfg.rel_step).max(cfg.min_step);
            margin[o] < KINK_STEPS * h * fmax
        })
        .collect();
    let f = |flat: &[f64]| probe.loss(&probe.feat, &HeadParams::from_flat(c_in, flat).unwrap());
    check_gradient(f, &x, &grads.flatten(), Some(&skip), &cfg)
}

pub fn head_feature_case(seed: u64) -> GradCheckReport {
    let probe = HeadProbe::new(seed);
    let (_, dfeat) = head_backward(&probe.feat, &probe.params, &probe.upstream).unwrap();
    let (w, h, c) = (probe.feat.width(), probe.feat.height(), probe.feat.channels());
    let cfg = fd_config();
    let pre = naive_preacts(&probe.feat, &probe.params);
    let wmax = probe.params.w1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let skip: Vec<bool> = probe
        .feat
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let pix = i % (w * h);
            let (x, y) = ((pix % w) as isize, (pix / w) as isize);
            let mut m = f64::INFINITY;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx >= 0 && qy >= 0 && qx < w as isize && qy < h as isize {
                        let q = &pre[qy as usize * w + qx as usize];
                        m = q.iter().fold(m, |m, z| m.min(z.abs()));
                    }
                }
            }
            let step = (v.abs() * cfg.rel_step).max(cfg.min_step);
            m < KINK_STEPS * step * wmax
        })
        .collect();
    let f = |x: &[f64]| probe.loss(&FeatureMap::new(w, h, c, x.to_vec()).unwrap(), &probe.params);
    check_gradient(f, probe.feat.data(), dfeat.data(), Some(&skip), &cfg)
}

/// Features are artifact-strength channels (the strength, its square and a
/// constant); a pixel is trustworthy when its strength is low.
/// Strengths avoid a band around the 0.5 decision boundary.
pub fn separable_task(seed: u64, n_samples: usize) -> Vec<(FeatureMap, ConfidenceMap)> {
    let mut r = rng(seed);
    let (w, h) = (16, 12);
    (0..n_samples)
        .map(|_| {
            let cx = r.gen_range(0.0..w as f64);
            let cy = r.gen_range(0.0..h as f64);
            let rad = r.gen_range(3.0..6.0);
            let strength: Vec<f64> = (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    let inside = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < rad;
                    if inside {
                        r.gen_range(0.7..1.0)
                    } else {
                        r.gen_range(0.0..0.3)
                    }
                })
                .collect();
            let squared: Vec<f64> = strength.iter().map(|s| s * s).collect();
            let ones = vec![1.0; w * h];
            let labels: Vec<f64> = strength.iter().map(|&s| if s < 0.5 { 1.0 } else { 0.0 }).collect();
            let feat = FeatureMap::from_planes(w, h, &[strength, squared, ones]).unwrap();
            let target = ConfidenceMap::new(FloatMap::new(w, h, labels).unwrap()).unwrap();
            (feat, target)
        })
        .collect()
}
