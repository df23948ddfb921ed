//! False-colour rendering of scalar maps over the input image.

use confdepth::map_io::{FloatMap, RgbImage};

/// Piecewise-linear jet: blue, cyan, yellow, red for `t` in `[0, 1]`.
pub fn jet(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let ch = |center: f64| (1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0);
    let to_u8 = |v: f64| (v * 255.0).round() as u8;
    [to_u8(ch(3.0)), to_u8(ch(2.0)), to_u8(ch(1.0))]
}

/// Colours `map` over `[lo, hi]` and alpha-blends it onto the grayscale of
/// `image`. Invalid pixels show the bare grayscale.
pub fn overlay(map: &FloatMap, lo: f64, hi: f64, image: &RgbImage, alpha: f64) -> RgbImage {
    let gray = image.grayscale();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::filled(map.width(), map.height(), [0, 0, 0]);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let i = map.index(x, y);
            let g = gray[i] * 255.0;
            let px = if map.is_valid(i) {
                let c = jet((map.value(i) - lo) / span);
                c.map(|v| (alpha * v as f64 + (1.0 - alpha) * g).round().clamp(0.0, 255.0) as u8)
            } else {
                let v = g.round().clamp(0.0, 255.0) as u8;
                [v, v, v]
            };
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Smallest and largest valid value, or `(0, 1)` for an empty map.
pub fn value_range(map: &FloatMap) -> (f64, f64) {
    let (lo, hi) = map
        .valid_values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}
