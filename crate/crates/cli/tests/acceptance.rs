//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use confdepth::confidence_head::{head_forward, train_head, HeadTrainConfig};
use confdepth::ensemble_confidence::{
    ensemble_confidence, ensemble_mean_variance, variance_to_confidence, ConfidenceMap, EnsembleDisparities,
    SigmaPolicy,
};
use confdepth::gradcheck::GradCheckReport;
use confdepth::losses::{confidence_weight, edge_smooth_conf, grad_match_conf, silog_conf, total_loss, LossConfig};
use confdepth::map_io::{FloatMap, StereoKeypoint};
use confdepth::metrics_eval::{compute_are, compute_delta1, depth_metrics, pixel_auc, spearman};
use confdepth::refine_experiment::{run_ablation_on, AblationConfig, ExperimentReport, RefineConfig};
use confdepth::stereo_geometry::{project_keypoint, triangulate_keypoint, CameraRig, Point3D};
use confdepth::synthetic_data::{generate_benchmark, BenchmarkSpec};
use rand::Rng;

type Outcome = Result<String, String>;
type Suite = (&'static str, f64, fn(u64) -> GradCheckReport);
type Criterion = (u32, &'static str, Option<u64>, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `exp(-x)` as the reciprocal of its all-positive Taylor series.
fn exp_neg_series(x: f64) -> f64 {
    let (mut sum, mut term, mut n) = (1.0f64, 1.0f64, 1.0f64);
    while term > 1e-22 * sum {
        term *= x / n;
        sum += term;
        n += 1.0;
    }
    1.0 / sum
}

fn c1_confidence_mapping() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for s in [0.05, 0.2, 0.5, 0.7, 1.0, 2.5] {
        let vars: Vec<f64> = (0..500)
            .map(|_| r.gen_range(0.0..12.0 * s * s))
            .chain([0.0, 2.0 * s * s])
            .collect();
        let c = variance_to_confidence(&FloatMap::new(vars.len(), 1, vars.clone()).unwrap(), s).unwrap();
        for (i, &v) in vars.iter().enumerate() {
            worst = worst.max((c.value(i) - exp_neg_series(v / (2.0 * s * s))).abs());
        }
    }
    let at = variance_to_confidence(&FloatMap::filled(1, 1, 2.0 * 0.7 * 0.7), 0.7).unwrap().value(0);
    check(
        worst <= 1e-12 && (at - 0.3678794).abs() < 5e-8,
        format!("max abs error {worst:.2e}; var=2s^2 -> {at:.7}"),
    )
}

fn c2_ensemble_oracle() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    let mut mask_ok = true;
    for _ in 0..100 {
        let k = r.gen_range(2..=7);
        let members: Vec<FloatMap> = (0..k).map(|_| rand_map(&mut r, 32, 32, 0.0, 60.0, 40)).collect();
        let stats = ensemble_mean_variance(&EnsembleDisparities::new(members.clone()).unwrap());
        for i in 0..32 * 32 {
            if members.iter().any(|m| !m.is_valid(i)) {
                mask_ok &= !stats.variance.is_valid(i);
                continue;
            }
            let mut mean = 0.0;
            for m in &members {
                mean += m.value(i);
            }
            mean /= k as f64;
            let mut var = 0.0;
            for m in &members {
                var += (m.value(i) - mean) * (m.value(i) - mean);
            }
            var /= k as f64;
            worst = worst
                .max((stats.mean.value(i) - mean).abs())
                .max((stats.variance.value(i) - var).abs());
        }
    }
    check(worst <= 1e-12 && mask_ok, format!("max abs error {worst:.2e}, invalid pixels propagated: {mask_ok}"))
}

fn c3_gradients() -> Outcome {
    let suites: [Suite; 7] = [
        ("silog", LOSS_TOL, silog_case),
        ("grad_match", LOSS_TOL, grad_match_case),
        ("edge_smooth", LOSS_TOL, edge_case),
        ("total", LOSS_TOL, total_case),
        ("bce", LOSS_TOL, bce_case),
        ("head_params", HEAD_TOL, head_param_case),
        ("head_features", LOSS_TOL, head_feature_case),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, tol, case) in suites {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for seed in 0..INSTANCES {
            let rep = case(seed);
            worst = worst.max(rep.max_rel_error);
            ok &= rep.checked > 0;
            checked += rep.checked;
            skipped += rep.skipped;
        }
        ok &= worst < tol;
        parts.push(format!("{name} {worst:.1e} ({checked} checked, {skipped} kinks)"));
    }
    check(ok, format!("{} instances each; {}", INSTANCES, parts.join(", ")))
}

fn c4_loss_identities() -> Outcome {
    let mut r = rng(104);
    let cfg = LossConfig::default();
    let mut worst = [0.0f64; 5];
    for _ in 0..20 {
        let d = rand_map(&mut r, 16, 12, 20.0, 200.0, 9);
        let conf = rand_conf(&mut r, 16, 12);
        let img = rand_image(&mut r, 16, 12);
        let c = r.gen_range(0.1..10.0);
        worst[0] = worst[0].max(silog_conf(&d, &d, &conf, &cfg).unwrap().0.abs());
        let e = silog_conf(&d.map(|v| v * std::f64::consts::E), &d, &conf, &cfg).unwrap().0;
        worst[1] = worst[1].max((e - 0.5).abs());
        worst[2] = worst[2].max(grad_match_conf(&d.map(|v| c * v), &d, &conf, &cfg).unwrap().0.abs());
        let a = edge_smooth_conf(&d, &img, &conf, &cfg).unwrap().0;
        let b = edge_smooth_conf(&d.map(|v| c * v), &img, &conf, &cfg).unwrap().0;
        worst[3] = worst[3].max((a - b).abs());
        let pred = rand_map(&mut r, 16, 12, 20.0, 200.0, 0);
        let t = total_loss(&pred, &d, &conf, &img, &cfg).unwrap();
        worst[4] = worst[4].max((t.total - (t.silog_conf + t.grad_conf + t.edge_conf)).abs());
    }
    check(
        worst[0] == 0.0 && worst[1] < 1e-9 && worst[2] < 1e-9 && worst[3] < 1e-9 && worst[4] < 1e-12,
        format!(
            "silog(d,d) {:.1e}, silog(e*d,d)-0.5 {:.1e}, grad(c*d,d) {:.1e}, edge scale {:.1e}, additivity {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn c5_weight_linearity() -> Outcome {
    let mut r = rng(105);
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    for _ in 0..10 {
        let l = rand_map(&mut r, 12, 9, 0.0, 5.0, 5);
        let base = confidence_weight(&l, &ConfidenceMap::uniform(12, 9, 1.0)).unwrap();
        for c in [0.0, 0.25, 0.5, 1.0] {
            let v = confidence_weight(&l, &ConfidenceMap::uniform(12, 9, c)).unwrap();
            if c == 0.0 {
                zero_ok &= v == 0.0;
            } else {
                worst = worst.max(((v - c * base) / (c * base)).abs());
            }
        }
    }
    check(worst < 1e-12 && zero_ok, format!("max relative error {worst:.1e}, c=0 gives 0: {zero_ok}"))
}

fn c6_metrics() -> Outcome {
    let mut r = rng(106);
    let gt = rand_map(&mut r, 20, 15, 20.0, 200.0, 0);
    let d12 = compute_delta1(&gt.map(|g| 1.2 * g), &gt).unwrap();
    let d13 = compute_delta1(&gt.map(|g| 1.3 * g), &gt).unwrap();
    let are = compute_are(&gt.map(|g| 1.1 * g), &gt).unwrap();
    let pred = rand_map(&mut r, 20, 15, 20.0, 200.0, 7);
    let base = depth_metrics(&pred, &gt, None).unwrap();
    let invariant = [0.1, 3.0, 100.0]
        .iter()
        .all(|&c| depth_metrics(&pred.map(|v| c * v), &gt, None).unwrap() == base);
    check(
        d12 == 1.0 && d13 == 0.0 && (are - 0.1).abs() < 1e-12 && invariant,
        format!("delta1(1.2gt)={d12}, delta1(1.3gt)={d13}, ARE(1.1gt)={are}, scale invariant: {invariant}"),
    )
}

fn c7_triangulation() -> Outcome {
    let mut r = rng(107);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let rig = CameraRig::new(
            r.gen_range(200.0..1500.0),
            r.gen_range(2.0..10.0),
            r.gen_range(100.0..600.0),
            r.gen_range(100.0..400.0),
        )
        .unwrap();
        let p = Point3D {
            x_mm: r.gen_range(-40.0..40.0),
            y_mm: r.gen_range(-30.0..30.0),
            z_mm: r.gen_range(20.0..300.0),
        };
        let q = triangulate_keypoint(&project_keypoint(&p, &rig, i).unwrap(), &rig).unwrap();
        let err = ((p.x_mm - q.x_mm).powi(2) + (p.y_mm - q.y_mm).powi(2) + (p.z_mm - q.z_mm).powi(2)).sqrt();
        worst = worst.max(err);
    }
    let kp = StereoKeypoint {
        id: 0,
        u_left: 100.0,
        v_left: 20.0,
        u_right: 50.0,
        v_right: 20.0,
    };
    let z = triangulate_keypoint(&kp, &CameraRig::new(1000.0, 5.0, 0.0, 0.0).unwrap()).unwrap().z_mm;
    check(worst < 1e-6 && z == 100.0, format!("max error {worst:.2e} mm over 1000 points; f=1000 B=5 d=50 -> Z={z}"))
}

fn c8_confidence_corruption() -> Outcome {
    let spec = BenchmarkSpec::default();
    let policy = SigmaPolicy::new(0.7, spec.width).unwrap();
    let bench = generate_benchmark(&spec).map_err(|e| e.to_string())?;
    let mut rhos = Vec::new();
    for g in &bench {
        let (_, conf) = ensemble_confidence(g.sample.ensemble.as_ref().unwrap(), &policy).unwrap();
        let (mut c, mut k) = (Vec::new(), Vec::new());
        for i in 0..conf.len() {
            if conf.is_valid(i) && g.sample.corruption.is_valid(i) {
                c.push(conf.value(i));
                k.push(g.sample.corruption.value(i));
            }
        }
        rhos.push(spearman(&c, &k).unwrap_or(f64::NAN));
    }
    let worst = rhos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    check(
        rhos.len() == 20 && rhos.iter().all(|&r| r < -0.5),
        format!(
            "{} samples, K={}, artifact/base std {}; rho max {worst:.3}, mean {mean:.3}",
            rhos.len(),
            spec.k,
            spec.noise.artifact_std_px / spec.noise.base_std_px
        ),
    )
}

fn benchmark_samples() -> Vec<confdepth::map_io::LoadedSample> {
    generate_benchmark(&BenchmarkSpec::default())
        .unwrap()
        .iter()
        .map(|g| g.to_loaded())
        .collect()
}

fn clean_are(rep: &ExperimentReport, ch: bool, cal: bool, sigma: f64) -> f64 {
    rep.cell(ch, cal, sigma).and_then(|c| c.metric("clean")).map_or(f64::NAN, |m| m.are)
}

fn c9_ablation() -> Outcome {
    let cell = |use_ch, use_cal| RefineConfig {
        use_ch,
        use_cal,
        ..RefineConfig::default()
    };
    let cfg = AblationConfig {
        grid: vec![cell(false, false), cell(false, true), cell(true, true)],
        ..AblationConfig::default()
    };
    let rep = run_ablation_on(&benchmark_samples(), &cfg).map_err(|e| e.to_string())?;
    let uniform = clean_are(&rep, false, false, 0.7);
    let cal = clean_are(&rep, false, true, 0.7);
    let full = clean_are(&rep, true, true, 0.7);
    let reduction = 1.0 - cal / uniform;
    let full_vs_cal = full / cal - 1.0;
    check(
        reduction >= 0.20 && full_vs_cal <= 0.02,
        format!(
            "clean ARE uniform {uniform:.4}, CAL {cal:.4} ({:.1}% lower), CH+CAL {full:.4} ({:+.1}% vs CAL)",
            100.0 * reduction,
            100.0 * full_vs_cal
        ),
    )
}

fn c10_sigma_sweep() -> Outcome {
    let sigmas = [0.2, 0.5, 0.7, 1.0];
    let cfg = AblationConfig {
        grid: vec![RefineConfig {
            use_cal: true,
            ..RefineConfig::default()
        }],
        sigma_grid: sigmas.to_vec(),
        ..AblationConfig::default()
    };
    let rep = run_ablation_on(&benchmark_samples(), &cfg).map_err(|e| e.to_string())?;
    let d1: Vec<f64> = sigmas
        .iter()
        .map(|&s| rep.cell(false, true, s).and_then(|c| c.metric("all")).map_or(f64::NAN, |m| m.delta1))
        .collect();
    let best = (0..d1.len()).max_by(|&a, &b| d1[a].total_cmp(&d1[b])).unwrap();
    let interior = best != 0 && best != d1.len() - 1 && d1[best] > d1[0] && d1[best] > d1[d1.len() - 1];
    let table: Vec<String> = sigmas.iter().zip(&d1).map(|(s, d)| format!("{s}:{d:.4}")).collect();
    check(interior, format!("delta1 by sigma {}; max at sigma={}", table.join(" "), sigmas[best]))
}

fn c11_head_training() -> Outcome {
    let data = separable_task(3, 4);
    let cfg = HeadTrainConfig {
        epochs: 500,
        ..HeadTrainConfig::default()
    };
    let a = train_head(&data, &cfg).map_err(|e| e.to_string())?;
    let b = train_head(&data, &cfg).map_err(|e| e.to_string())?;
    let bce = *a.losses.last().unwrap();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (f, t) in &data {
        scores.extend_from_slice(head_forward(f, &a.params).unwrap().data());
        labels.extend(t.data().iter().map(|&v| v > 0.5));
    }
    let auc = pixel_auc(&scores, &labels).unwrap_or(f64::NAN);
    let identical = a.params == b.params && a.losses == b.losses;
    check(
        bce < 0.1 && auc > 0.95 && identical,
        format!("500 epochs: BCE {bce:.4}, AUC {auc:.4}, replay bit-identical: {identical}"),
    )
}

fn c12_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let steps = support::run_pipeline(root);
    let mut failures = Vec::new();
    for (cmd, dir, _) in &steps {
        for threads in ["1", "3"] {
            let dest = root.join(format!("{dir}_replay_{threads}"));
            let diffs = support::replay_diff(root, cmd, dir, &dest, &[("CONFDEPTH_THREADS", threads)]);
            if !diffs.is_empty() {
                failures.push(format!("{cmd} ({threads} threads): {}", diffs.join(", ")));
            }
        }
    }
    let names: Vec<&str> = steps.iter().map(|s| s.0).collect();
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} runs ({}) replayed byte-identical with 1 and 3 threads", steps.len(), names.join(", "))
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "confidence mapping exactness", Some(1), c1_confidence_mapping),
        (2, "ensemble mean/variance oracle", Some(5), c2_ensemble_oracle),
        (3, "gradient suite", Some(60), c3_gradients),
        (4, "loss identities", None, c4_loss_identities),
        (5, "confidence weighting linearity", None, c5_weight_linearity),
        (6, "metric unit cases", None, c6_metrics),
        (7, "triangulation round trip", None, c7_triangulation),
        (8, "confidence vs corruption correlation", Some(30), c8_confidence_corruption),
        (9, "confidence-weighted refinement ablation", Some(120), c9_ablation),
        (10, "sigma sweep has an interior optimum", Some(120), c10_sigma_sweep),
        (11, "confidence head training", Some(60), c11_head_training),
        (12, "CLI replay reproducibility", None, c12_reproducibility),
    ];
    let mut stderr = std::io::stderr();
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let over = limit.is_some_and(|s| took > Duration::from_secs(s));
        let timing = match limit {
            Some(s) => format!("{:.2}s, limit {s}s", took.as_secs_f64()),
            None => format!("{:.2}s", took.as_secs_f64()),
        };
        let (status, detail) = match &result {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over time limit")),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        writeln!(stderr, "{status} [{id:>2}] {name}: {detail} ({timing})").unwrap();
    }
    writeln!(stderr, "acceptance: {} of 12 criteria passed", 12 - failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
