use std::path::Path;
use std::process::{Command, Output};

use gef_core::image_entropy::{build_pyramid, GrayImage};
use gef_core::io::{read_point_cloud, write_neighborhood_stats, write_pgm, write_point_cloud, Fer1Raster};
use gef_core::pipeline::{neighborhood_report, NeighborhoodConfig};
use gef_core::synth::{make_composite_image, make_stacked_scene, make_tangential_scene};
use serde_json::Value;
use tempfile::TempDir;

fn gef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gef")).args(args).output().expect("spawn gef")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn save_pgm(dir: &Path, name: &str, img: &GrayImage) -> String {
    let p = dir.join(name);
    std::fs::write(&p, write_pgm(img)).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_fer1(path: &Path) -> Fer1Raster {
    Fer1Raster::from_bytes(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn entropy_map_of_constant_image_is_zero() {
    let dir = TempDir::new().unwrap();
    let img = save_pgm(dir.path(), "flat.pgm", &GrayImage::filled(20, 16, 77));
    let out = dir.path().join("flat.fer1");
    let v = json(&gef(&["entropy-map", "--image", &img, "--levels", "3", "--out", out.to_str().unwrap()]));
    let levels = v["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 3);
    for l in levels {
        assert_eq!(l["mean"], 0.0);
        assert_eq!(l["max"], 0.0);
    }
    let r = read_fer1(&out);
    assert_eq!((r.width, r.height, r.n_channels), (20, 16, 3));
    assert!(r.data.iter().all(|&x| x == 0.0));
    assert!(dir.path().join("flat.level1.pgm").exists());
    assert!(dir.path().join("flat.level3.pgm").exists());
}

#[test]
fn entropy_map_of_composite_checker_half() {
    let dir = TempDir::new().unwrap();
    let img = save_pgm(dir.path(), "c.pgm", &make_composite_image(128, 128).unwrap());
    let out = dir.path().join("c.fer1");
    json(&gef(&["entropy-map", "--image", &img, "--out", out.to_str().unwrap()]));
    let fine = read_fer1(&out).channel(0);
    assert!(fine.region_mean(64, 128) >= 0.9, "{}", fine.region_mean(64, 128));
}

#[test]
fn missing_image_is_an_io_error_naming_the_path() {
    let out = gef(&["entropy-map", "--image", "/no/such/dir/img.pgm", "--out", "/tmp/never.fer1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/no/such/dir/img.pgm"));
}

#[test]
fn color_pgm_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("c.ppm");
    std::fs::write(&p, b"P6\n1 1\n255\n\x01\x02\x03").unwrap();
    let out = gef(&["weights", "--image", p.to_str().unwrap(), "--out", "/tmp/never.fer1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("P6"), "{}", stderr(&out));
}

#[test]
fn single_level_concentration_is_one() {
    let dir = TempDir::new().unwrap();
    let img = save_pgm(dir.path(), "c.pgm", &make_composite_image(64, 64).unwrap());
    let out = dir.path().join("w.fer1");
    let v = json(&gef(&["weights", "--image", &img, "--levels", "1", "--out", out.to_str().unwrap()]));
    assert_eq!(v["fraction_above"], 1.0);
    let r = read_fer1(&out);
    assert_eq!(r.n_channels, 2);
    assert!(r.data.iter().all(|&x| x == 1.0));
}

#[test]
fn tiny_temperature_spreads_weights_evenly() {
    let dir = TempDir::new().unwrap();
    let img = save_pgm(dir.path(), "c.pgm", &make_composite_image(64, 64).unwrap());
    let out = dir.path().join("w.fer1");
    json(&gef(&["weights", "--image", &img, "--beta", "1e-6", "--levels", "3", "--out", out.to_str().unwrap()]));
    let r = read_fer1(&out);
    for c in 0..3 {
        assert!(r.channel(c).data.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-6));
    }
}

#[test]
fn composite_weights_concentrate() {
    let dir = TempDir::new().unwrap();
    let composite = make_composite_image(128, 128).unwrap();
    let img = save_pgm(dir.path(), "c.pgm", &composite);
    let out = dir.path().join("w.fer1");
    let v = json(&gef(&["weights", "--image", &img, "--beta", "6", "--out", out.to_str().unwrap()]));
    let frac = v["fraction_above"].as_f64().unwrap();
    assert!(frac >= 0.6, "{frac}");
    let lib = gef_core::image_entropy::concentration_stats(&build_pyramid(&composite, 3, 6.0).unwrap(), 0.6);
    assert_eq!(frac, lib.fraction_above);
}

fn write_scene_csv(dir: &Path, name: &str, scene: &gef_core::primitive::Scene) -> String {
    let p = dir.join(name);
    std::fs::write(&p, write_point_cloud(scene)).unwrap();
    p.to_string_lossy().into_owned()
}

fn snri_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn snri_closed_forms_and_library_equivalence() {
    let dir = TempDir::new().unwrap();
    let stacked = make_stacked_scene(12, 0.2, 3).unwrap().scene;
    let tangential = make_tangential_scene(30, 4).unwrap().scene;
    let sp = write_scene_csv(dir.path(), "stacked.csv", &stacked);
    let tp = write_scene_csv(dir.path(), "tangential.csv", &tangential);

    let out = gef(&["snri", "--scene", &sp, "--k", "6"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("index,snri,entropy,eta\n"));
    assert!(snri_column(&text).iter().all(|&s| s == 1.0));

    let file = dir.path().join("t.csv");
    let out = gef(&["snri", "--scene", &tp, "--k", "6", "--out", file.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&file).unwrap();
    // defaults: epsilon 0.5 sigma_min, decay 1 / sigma_min^2, sigma_min 0.1
    let expected = (-100.0f64 * 0.05).exp();
    assert!(snri_column(&text).iter().all(|&s| (s - expected).abs() < 1e-12));

    let prims = read_point_cloud(&std::fs::read_to_string(&tp).unwrap()).unwrap();
    let lib = write_neighborhood_stats(&neighborhood_report(prims, 6, &NeighborhoodConfig::default()).unwrap());
    assert_eq!(text, lib);
}

#[test]
fn snri_config_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let sp = write_scene_csv(dir.path(), "s.csv", &make_stacked_scene(8, 0.2, 1).unwrap().scene);
    let cfg = dir.path().join("nb.json");
    std::fs::write(&cfg, r#"{"decay": 3.0, "epsilonn": 0.1}"#).unwrap();
    let out = gef(&["snri", "--scene", &sp, "--k", "4", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epsilonn"));
}

const TINY_RUN: &str = r#"{
  "scene": {"generator": "noisy_plane", "n": 60, "noise_sigma": 0.1},
  "views": {"resolution": 12, "tilts_deg": [0], "azimuths_deg": [0], "distance_factor": 20.0},
  "neighborhood": {"k": 6, "sigma_min": 1.0, "decay": 8.0},
  "pyramid": {"levels": 2},
  "schedule": {"total_iterations": TOTAL, "entropy_update_interval": 2},
  "seed": 5
}"#;

#[test]
fn optimize_with_zero_iterations_keeps_the_scene() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY_RUN.replace("TOTAL", "0")).unwrap();
    let run = dir.path().join("out");
    let v = json(&gef(&["optimize", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    assert_eq!(v["iterations"], 0);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert_eq!(
        std::fs::read(run.join("scene_initial.csv")).unwrap(),
        std::fs::read(run.join("scene_final.csv")).unwrap()
    );
    assert_eq!(v["before"], v["after"]);
    for f in ["config.json", "monitor.jsonl", "optimizer_state.json", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn optimize_outputs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY_RUN.replace("TOTAL", "12")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        json(&gef(&["optimize", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]));
    }
    for f in ["scene_final.csv", "metrics.jsonl", "monitor.jsonl", "optimizer_state.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip = |d: &Path| {
        let mut v: Value = serde_json::from_slice(&std::fs::read(d.join("summary.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_ne!(
        std::fs::read(a.join("scene_initial.csv")).unwrap(),
        std::fs::read(a.join("scene_final.csv")).unwrap()
    );
}

#[test]
fn optimize_rejects_unknown_config_key() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"schedule": {"total_iterations": 0, "warmup": 3}}"#).unwrap();
    let out = gef(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("schedule.warmup"), "{}", stderr(&out));
}

#[test]
fn optimize_rejects_bad_values_and_malformed_json() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"schedule": {"entropy_update_interval": 0}}"#).unwrap();
    let out = gef(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("entropy_update_interval"));
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(gef(&["optimize", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bench_model_reproduces_reference_figures() {
    let v = json(&gef(&[
        "bench", "--primitives", "100000", "--rays", "1000000", "--samples", "128", "--k", "50", "--model-only",
    ]));
    assert_eq!(v["model"]["ray_operations"], 6.4e9);
    assert_eq!(v["model"]["neighborhood_operations"], 5e6);
    assert_eq!(v["model"]["ratio"], 1280.0);
}

#[test]
fn bench_reports_model_and_measurement() {
    let v = json(&gef(&["bench", "--primitives", "400", "--rays", "64", "--samples", "64", "--k", "10"]));
    assert!(v["model"]["ratio"].is_number());
    assert_eq!(v["counts"]["rays_evaluated"].as_u64().unwrap() + v["counts"]["empty_rays"].as_u64().unwrap(), 64);
    for key in ["ray_seconds", "neighborhood_seconds", "knn_seconds", "measured_ratio"] {
        assert!(v["timing"][key].is_number(), "{key}");
    }
}

#[test]
fn gradcheck_single_term_passes() {
    let v = json(&gef(&["gradcheck", "--terms", "depth,sparsity", "--seeds", "2"]));
    assert_eq!(v["passed"], true);
    let names: Vec<&str> = v["terms"].as_array().unwrap().iter().map(|t| t["term"].as_str().unwrap()).collect();
    assert_eq!(names, ["sparsity", "depth"]);
}

#[test]
fn gradcheck_catches_corruption() {
    let out = gef(&["gradcheck", "--terms", "sparsity", "--seeds", "1", "--corrupt"]);
    assert_eq!(out.status.code(), Some(3));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn gradcheck_unknown_term_is_usage_error() {
    let out = gef(&["gradcheck", "--terms", "curvature"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("curvature"));
}

#[test]
fn usage_errors_and_thread_flag() {
    assert_eq!(gef(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gef(&["bench", "--primitives", "10"]).status.code(), Some(1));
    assert_eq!(gef(&["--help"]).status.code(), Some(0));
    assert_eq!(gef(&["--threads", "0", "gradcheck", "--seeds", "1"]).status.code(), Some(1));
    let v = json(&gef(&["--threads", "1", "gradcheck", "--terms", "normal", "--seeds", "1"]));
    assert_eq!(v["passed"], true);
}
