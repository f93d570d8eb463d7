//! Checks that drive the `clipaway` binary; each panics on violation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clipaway_core::embedding::{project_away, Embedding};
use clipaway_core::pipeline::{dilate_mask, BackendKind};
use clipaway_core::raster::{load_rgb, save_png};
use image::GrayImage;

use super::scene;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clipaway"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn clipaway")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Write a source image and mask; returns their paths.
pub fn write_inputs(dir: &Path, w: u32, h: u32) -> (PathBuf, PathBuf) {
    let (img, mask) = scene(w, h);
    let ip = dir.join("source.png");
    let mp = dir.join("mask.png");
    save_png(&img, &ip).unwrap();
    let gray: GrayImage = mask.to_gray();
    gray.save(&mp).unwrap();
    (ip, mp)
}

/// `remove` with defaults on every backend: source dimensions, unmasked
/// pixels untouched, orthogonal final embedding, kernel 5, and identical
/// bytes across repeated runs.
pub fn mock_remove_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = write_inputs(dir.path(), 96, 72);
    let source = load_rgb(&ip).unwrap();
    let mask = clipaway_core::raster::load_mask(&mp).unwrap();
    let dilated = dilate_mask(&mask, 5).unwrap();
    for kind in BackendKind::ALL {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{kind}-{rep}.png"));
            let o = run(&[
                "--mock",
                "--seed",
                "11",
                "remove",
                "--image",
                ip.to_str().unwrap(),
                "--mask",
                mp.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--backend",
                kind.short_name(),
            ]);
            assert!(o.status.success(), "remove failed: {}", stderr(&o));
            assert!(stderr(&o).contains("seed = 11"), "resolved config not echoed");
            let result = load_rgb(&out).unwrap();
            assert_eq!(result.dimensions(), source.dimensions());
            for (x, y, p) in result.enumerate_pixels() {
                if !dilated.get(x, y) {
                    assert_eq!(p, source.get_pixel(x, y), "unmasked pixel ({x},{y}) changed");
                }
            }
            let diag: serde_json::Value =
                serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
            assert_eq!(diag["dilation_kernel"], 5);
            assert_eq!(diag["backend"], serde_json::to_value(kind).unwrap());
            let cos = diag["cos_final_fg"].as_f64().unwrap();
            assert!(cos.abs() <= 1e-4, "cos(e_final, e_fg) = {cos}");
            assert_eq!(diag["provenance"]["seed"], "11");
            runs.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(runs[0], runs[1], "{kind}: output differs between identical runs");
    }
}

/// `eval --limit 0` writes a valid empty report and exits 0.
pub fn eval_limit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ds = clipaway_core::eval::synthetic::write_synthetic_coco(&dir.path().join("coco"), 2, 2, 0).unwrap();
    let out = dir.path().join("report");
    let o = run(&[
        "--mock",
        "--json",
        "eval",
        "--dataset",
        "coco",
        "--annotations",
        ds.annotation_file.to_str().unwrap(),
        "--images",
        ds.image_dir.to_str().unwrap(),
        "--limit",
        "0",
        "--backends",
        "sd,blended,unipaint",
        "--with-clipaway",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.len(), 6);
    for r in &report {
        assert_eq!(r["n_instances"], 0);
        assert!(r["fid"].is_null());
        assert_eq!(r["metadata"]["clip_distance"], "1 - cosine_similarity");
        assert!(r["provenance"]["config_sha256"].is_string());
    }
    let stdout: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout.len(), 6);
}

/// Recompute e_final from the dumped e_fg and e_bg.
pub fn embed_recombines() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = write_inputs(dir.path(), 80, 64);
    let out = dir.path().join("emb.json");
    let o = run(&[
        "--mock",
        "embed",
        "--image",
        ip.to_str().unwrap(),
        "--mask",
        mp.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["dilation_kernel"], 5);
    let e = |k: &str| -> Embedding { serde_json::from_value(v[k].clone()).unwrap() };
    let (fg, bg, fin) = (e("e_fg"), e("e_bg"), e("e_final"));
    let recombined = project_away(&bg, &fg).unwrap();
    let max_diff = recombined
        .values()
        .iter()
        .zip(fin.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff <= 1e-6, "recombined e_final differs by {max_diff}");
}
