mod support;

use std::fs;

use confdepth::ensemble_confidence::{ensemble_mean_variance, variance_to_confidence, EnsembleDisparities};
use confdepth::map_io::{read_manifest, read_pfm};
use serde_json::{json, Value};
use support::*;

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_outputs_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let steps = run_pipeline(root);

    let manifest = read_manifest(root.join("data/manifest.json")).unwrap();
    let ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, ["scene_0000", "sample_0000", "sample_0001", "sample_0002"]);
    for id in &ids {
        let files = tree(&root.join("data").join(id));
        // image, depth, corruption, 5 members, keypoints
        assert_eq!(files.len(), 9, "{id}");
    }
    assert_eq!(tree(&root.join("conf")).len(), 2 * ids.len() + 2);
    assert_eq!(tree(&root.join("refine")).len(), ids.len() + 3);
    assert_eq!(tree(&root.join("report")).len(), 3 * ids.len() + 3);
    assert_eq!(tree(&root.join("head")).len(), ids.len() + 4);

    let eval = fs::read_to_string(root.join("eval/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), ids.len() + 2);
    let ablate = fs::read_to_string(root.join("ablate/report.csv")).unwrap();
    assert_eq!(ablate.lines().count(), 5);

    for (cmd, dir, _) in &steps {
        let dest = root.join(format!("{dir}_replay"));
        let diffs = replay_diff(root, cmd, dir, &dest, &[]);
        assert!(diffs.is_empty(), "{cmd}: {diffs:?}");
    }
}

#[test]
fn confidence_matches_core_composition() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_config(&root.join("g.json"), &gen_data_config());
    run_ok(&["gen-data", &format!("--config={}", path_str(&root.join("g.json"))), &format!("--out={}", path_str(&root.join("data")))]);
    let manifest_path = root.join("data/manifest.json");
    run_ok(&[
        "confidence",
        &format!("--dataset={}", path_str(&manifest_path)),
        &format!("--out={}", path_str(&root.join("conf"))),
        "--sigma.sigma_base=0.5",
        "--sigma.ref_width=64",
    ]);
    let manifest = read_manifest(&manifest_path).unwrap();
    for s in manifest.load_all().unwrap() {
        let stats = ensemble_mean_variance(&EnsembleDisparities::new(s.ensemble.clone()).unwrap());
        let sigma = 0.5 * s.depth_gt.width() as f64 / 64.0;
        let conf = variance_to_confidence(&stats.variance, sigma).unwrap();
        let got_var = read_pfm(root.join(format!("conf/{}_variance.pfm", s.id))).unwrap();
        let got_conf = read_pfm(root.join(format!("conf/{}_confidence.pfm", s.id))).unwrap();
        assert_eq!(got_var.mask(), stats.variance.mask());
        assert!(got_var.valid_values().eq(stats.variance.to_f32_precision().valid_values()));
        assert!(got_conf.valid_values().eq(conf.to_f32_precision().valid_values()));
    }
    let log = read_json(&root.join("conf/confidence.json"));
    assert_eq!(log["samples"][0]["sigma_eff"], json!(0.5 * 40.0 / 64.0));
}

#[test]
fn identical_members_give_full_confidence() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_config(&root.join("g.json"), &gen_data_config());
    run_ok(&["gen-data", &format!("--config={}", path_str(&root.join("g.json"))), &format!("--out={}", path_str(&root.join("data")))]);
    let dir = root.join("data/scene_0000");
    for j in 1..5 {
        fs::copy(dir.join("ens_00.pfm"), dir.join(format!("ens_{j:02}.pfm"))).unwrap();
    }
    run_ok(&[
        "confidence",
        &format!("--dataset={}", path_str(&root.join("data/manifest.json"))),
        &format!("--out={}", path_str(&root.join("conf"))),
    ]);
    let conf = read_pfm(root.join("conf/scene_0000_confidence.pfm")).unwrap();
    assert!(conf.n_valid() > 0);
    assert!(conf.valid_values().all(|c| c == 1.0));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_config(&root.join("g.json"), &gen_data_config());
    run_ok(&["gen-data", &format!("--config={}", path_str(&root.join("g.json"))), &format!("--out={}", path_str(&root.join("data")))]);
    run_ok(&[
        "eval",
        &format!("--dataset={}", path_str(&root.join("data/manifest.json"))),
        &format!("--predictions={}", path_str(&root.join("data"))),
        "--template={id}/depth_gt.pfm",
        &format!("--out={}", path_str(&root.join("eval"))),
    ]);
    let table = read_json(&root.join("eval/eval.json"));
    for row in table["samples"].as_array().unwrap() {
        assert_eq!(row["are"], json!(0.0));
        assert_eq!(row["delta1"], json!(1.0));
        assert_eq!(row["acc_2mm"], json!(1.0));
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = |name: &str| format!("--out={}", path_str(&root.join(name)));

    // unknown override
    let o = run(&["confidence", &out("a"), "--dataset=x", "--sigma.nope=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma.nope"));

    // missing dataset file
    let o = run(&["confidence", &out("b"), "--dataset=/nonexistent/manifest.json"]);
    assert_eq!(o.status.code(), Some(3));

    // no dataset given
    assert_eq!(run(&["eval", &out("c")]).status.code(), Some(2));

    // invalid numeric setting
    let o = run(&["confidence", &out("d"), "--dataset=x", "--sigma.sigma_base=-1"]);
    assert_eq!(o.status.code(), Some(2));

    // scene without a rig
    let mut cfg = gen_data_config();
    cfg["scenes"][0]["scene"].as_object_mut().unwrap().remove("rig");
    write_config(&root.join("norig.json"), &cfg);
    let o = run(&["gen-data", &format!("--config={}", path_str(&root.join("norig.json"))), &out("e")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scenes[0].scene"), "{}", String::from_utf8_lossy(&o.stderr));

    // malformed config file
    fs::write(root.join("bad.json"), "{ not json").unwrap();
    let o = run(&["ablate", &format!("--config={}", path_str(&root.join("bad.json"))), &out("f")]);
    assert_eq!(o.status.code(), Some(2));

    // bad thread count
    let o = run_env(&["eval", &out("g")], &[("CONFDEPTH_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_config(&root.join("g.json"), &gen_data_config());
    let data = root.join("data");
    fs::create_dir(&data).unwrap();
    fs::write(data.join("keep.txt"), "x").unwrap();
    let args = ["gen-data", &format!("--config={}", path_str(&root.join("g.json"))), &format!("--out={}", path_str(&data))];
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(!data.join("manifest.json").exists());
    let mut forced = args.to_vec();
    forced.push("--force");
    run_ok(&forced);
    assert!(data.join("manifest.json").exists() && data.join("keep.txt").exists());
}

#[test]
fn config_echo_records_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_config(&root.join("c.json"), &json!({"sigma": {"sigma_base": 0.3}}));
    let o = run(&[
        "confidence",
        &format!("--config={}", path_str(&root.join("c.json"))),
        "--sigma.ref_width=100",
        "--dataset=/nonexistent/manifest.json",
        &format!("--out={}", path_str(&root.join("out"))),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let echo = read_json(&root.join("out").join(ECHO));
    assert_eq!(echo["sigma"], json!({"sigma_base": 0.3, "ref_width": 100}));
    assert_eq!(echo["dataset"], json!("/nonexistent/manifest.json"));
}
